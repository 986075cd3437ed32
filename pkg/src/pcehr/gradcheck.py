"""Finite-difference verification of analytic gradients.

Central differences with a 1e-5 step on float64 copies of the inputs; the
comparison is the max relative error over all checked coordinates with an
absolute floor so near-zero gradients do not blow up the ratio.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor

DEFAULT_STEP = 1e-5
DEFAULT_FLOOR = 1e-6


def _clone_inputs(tensors):
    return [Tensor(t.data.astype(np.float64), requires_grad=t.requires_grad, dtype=np.float64) for t in tensors]


def check_gradients(fn, tensors, step=DEFAULT_STEP, floor=DEFAULT_FLOOR):
    """Compare analytic and central-difference gradients of ``fn``.

    ``fn`` maps a list of tensors to a scalar Tensor loss.  Returns a report
    dict with the worst relative error, its location, and per-tensor detail.
    ``fn`` must be deterministic (re-invoked many times with perturbed data).
    """
    work = _clone_inputs(tensors)
    loss = fn(work)
    loss.backward()
    analytic = [None if t.grad is None else t.grad.copy() for t in work]

    worst = 0.0
    worst_loc = None
    details = []
    for ti, t in enumerate(work):
        if not t.requires_grad:
            details.append(None)
            continue
        ana = analytic[ti]
        if ana is None:
            ana = np.zeros_like(t.data)
        num = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = num.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = fn(work).item()
            flat[j] = orig - step
            down = fn(work).item()
            flat[j] = orig
            nflat[j] = (up - down) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
        rel = np.abs(ana - num) / denom
        j = int(np.argmax(rel))
        if rel.reshape(-1)[j] >= worst:
            worst = float(rel.reshape(-1)[j])
            worst_loc = (ti, np.unravel_index(j, t.data.shape))
        details.append(
            {
                "max_rel_error": float(rel.reshape(-1)[j]),
                "analytic": float(ana.reshape(-1)[j]),
                "numeric": float(nflat[j]),
            }
        )
    return {"max_rel_error": worst, "location": worst_loc, "per_tensor": details}


def assert_gradients_close(fn, tensors, tol, step=DEFAULT_STEP, floor=DEFAULT_FLOOR):
    report = check_gradients(fn, tensors, step=step, floor=floor)
    if report["max_rel_error"] > tol:
        raise AssertionError(
            f"gradient mismatch: max relative error {report['max_rel_error']:.3e} "
            f"exceeds {tol:.1e} at tensor/index {report['location']}"
        )
    return report


def run_oracle_suite(tol: float = 1e-4) -> list[tuple[str, float, float, bool]]:
    """Named finite-difference checks over representative operations plus a
    small end-to-end forecaster with its pair classifier.  Returns
    (name, max_rel_error, tolerance, passed) per check; deterministic."""
    from . import autodiff as ad
    from .models import Discriminator, ModelConfig, SegmentBatch, build_model, hr_l1_loss, total_loss

    rng = np.random.default_rng(123)
    results: list[tuple[str, float, float, bool]] = []

    def check(name, fn, arrays, floor=DEFAULT_FLOOR):
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        err = check_gradients(fn, tensors, floor=floor)["max_rel_error"]
        results.append((name, err, tol, err <= tol))

    check(
        "matmul-tanh-sum",
        lambda ts: ad.reduce_sum(ad.tanh(ad.matmul(ts[0], ts[1]))),
        [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))],
    )
    check(
        "conv1d-stride2-pad1",
        lambda ts: ad.reduce_sum(ad.relu(ad.conv1d(ts[0], ts[1], ts[2], stride=2, padding=1))),
        [rng.normal(size=(2, 3, 9)), rng.normal(size=(4, 3, 3)) * 0.5, rng.normal(size=(4,))],
    )
    check(
        "lstm-cell",
        lambda ts: ad.reduce_sum(ad.mul(*ad.lstm_cell(ts[0], ts[1], ts[2], ts[3], ts[4], ts[5]))),
        [
            rng.normal(size=(2, 5)),
            rng.normal(size=(2, 4)),
            rng.normal(size=(2, 4)),
            rng.normal(size=(16, 5)) * 0.3,
            rng.normal(size=(16, 4)) * 0.3,
            rng.normal(size=(16,)) * 0.1,
        ],
    )
    check(
        "sigmoid-bce",
        lambda ts: ad.binary_cross_entropy(ad.sigmoid(ts[0]), np.array([1.0, 0.0, 1.0])),
        [rng.normal(size=(3,))],
    )
    check(
        "slice-concat-l1",
        lambda ts: ad.l1_loss(ad.concat([ts[0][:, :2], ts[0][:, 3:]], axis=1), Tensor(np.ones((2, 4)))),
        [rng.normal(size=(2, 5)) + 2.0],
    )
    check(
        "reshape-mean-leakyrelu",
        lambda ts: ad.reduce_mean(ad.leaky_relu(ad.reshape(ts[0], (6,)))),
        [rng.normal(size=(2, 3))],
    )
    aux = np.random.default_rng(321)
    check(
        "elementwise-transpose-chain",
        lambda ts: ad.reduce_sum(ad.mul(ad.transpose(ad.sub(ts[0], ad.neg(ts[1])), (1, 0)), ts[2])),
        [aux.normal(size=(2, 3)), aux.normal(size=(2, 3)), aux.normal(size=(3, 2))],
    )

    def dropout_fn(ts):
        # the mask is drawn from a fixed seed, so perturbations see the same mask
        mask_rng = np.random.default_rng(5)
        return ad.reduce_sum(ad.dropout(ts[0], 0.3, True, mask_rng))

    check("dropout-fixed-mask", dropout_fn, [aux.normal(size=(4, 6))])

    config = ModelConfig(
        kind="pce-lstm", in_channels=2, ts_len=8, n_snippets=4, init_len=2,
        tse_filters=3, tse_out=5, pce_filters=3, pce_out=4, lstm_hidden=4, dropout=0.0,
    )
    model = build_model(config, seed=7, dtype=np.float64)
    disc = Discriminator(pce_out=config.pce_out, seed=7, dtype=np.float64)
    batch = SegmentBatch(rng.normal(size=(2, 4, 2, 8)), rng.uniform(60, 120, size=(2, 4)), 80.0, 15.0)
    partner = SegmentBatch(rng.normal(size=(2, 4, 2, 8)), rng.uniform(60, 120, size=(2, 4)), 80.0, 15.0)
    labels = np.array([1.0, 0.0])

    def loss_fn():
        out = model.forward(batch, train_mode=False)
        pce_partner = model.encode_pce(partner, train_mode=False)
        probs = disc.forward(out.pce, pce_partner, train_mode=False)
        return total_loss(hr_l1_loss(out, batch), ad.binary_cross_entropy(probs, labels))

    named = list(model.store.items()) + list(disc.store.items())
    # floor 1e-5: the loss is O(10), so central differences carry ~1e-10
    # absolute rounding noise, which would dominate the ratio for
    # coordinates whose true gradient is ~1e-7
    worst, _ = check_parameter_gradients(loss_fn, named, step=1e-5, floor=1e-5)
    results.append(("end-to-end-toy-forecaster", worst, tol, worst <= tol))
    return results


def check_parameter_gradients(loss_fn, named_params, step=DEFAULT_STEP, floor=DEFAULT_FLOOR):
    """Finite-difference check for in-place model parameters.

    ``loss_fn`` takes no arguments, reads the parameters as they currently
    are, and returns a scalar Tensor; it must be deterministic.  Every
    element of every named parameter is perturbed in place.  Returns
    (max_rel_error, worst_name).
    """
    named_params = list(named_params)
    loss = loss_fn()
    loss.backward()
    analytic = {}
    for name, p in named_params:
        analytic[name] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        p.grad = None

    worst = 0.0
    worst_name = None
    for name, p in named_params:
        flat = p.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = loss_fn().item()
            flat[j] = orig - step
            down = loss_fn().item()
            flat[j] = orig
            num = (up - down) / (2.0 * step)
            rel = abs(ana[j] - num) / max(abs(ana[j]), abs(num), floor)
            if rel > worst:
                worst = rel
                worst_name = f"{name}[{j}]"
    return worst, worst_name
