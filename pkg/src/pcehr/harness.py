"""Leave-one-subject-out experiment orchestration.

Builds deterministic fold/run specifications, trains single runs with
best-validation checkpoint selection, aggregates per-subject mean and
ensemble errors, drives the initialization ablation arms, and runs the
paired-seed synthetic comparison between embedding-initialized and
self-encoding forecasters.
"""

from __future__ import annotations

import csv
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .models import (
    Discriminator,
    ModelConfig,
    SegmentBatch,
    build_model,
    discriminator_accuracy,
    hr_l1_loss,
    total_loss,
)
from .nn import AdamState, adam_step, save_checkpoint
from .pipeline import (
    SubjectSegments,
    hr_population_stats,
    preprocess_subject,
    sample_discriminator_pairs,
)
from .synth import SynthConfig, generate_synthetic

RUNS_PER_FOLD = 7


@dataclass
class TrainConfig:
    """Optimization settings around a model configuration."""

    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int | None = None       # None: 200 for the recursive net, 100 otherwise
    batch_size: int = 64
    learning_rate: float = 5e-3
    weight_decay: float = 5e-5
    hr_weight: float = 0.9
    disc_weight: float = 0.1

    def resolved_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return 200 if self.model.kind == "ffnn" else 100

    def uses_discriminator(self) -> bool:
        # only models that produce an embedding can feed the pair classifier
        return self.disc_weight > 0.0 and self.model.kind in ("pce-lstm", "pce-lstm-ppg")


@dataclass
class FoldSpec:
    """One (test subject, run) cell of the leave-one-subject-out grid."""

    test_subject_id: str
    train_segment_ids: list[tuple[str, int]]
    val_segment_ids: list[tuple[str, int]]
    run_index: int                  # 1-based within the fold
    rng_seed: int
    fold_index: int


@dataclass
class RunResult:
    fold: FoldSpec
    model_kind: str
    predictions: np.ndarray         # beats/minute over the tiled test series
    truth: np.ndarray
    times: np.ndarray               # prediction snippet start times, seconds
    best_epoch: int
    val_losses: list[float]
    wall_clock_s: float
    disc_accuracy: float | None = None
    checkpoint_path: str | None = None
    failed: bool = False
    failure_reason: str = ""


@dataclass
class FoldReport:
    """Per-subject aggregation: mean of per-run errors and error of the
    averaged (ensemble) prediction."""

    subject_id: str
    model_kind: str
    n_runs: int
    n_failed: int
    mean_mae: float
    mean_rmse: float
    ensemble_mae: float
    ensemble_rmse: float
    per_run_mae: list[float]
    per_run_rmse: list[float]
    ensemble_pred: np.ndarray
    runs: list[RunResult]


@dataclass
class EvalReport:
    model_kind: str
    rows: list[FoldReport]

    def grand(self) -> dict:
        """Unweighted averages over subjects."""
        return {
            "mean_mae": float(np.mean([r.mean_mae for r in self.rows])),
            "mean_rmse": float(np.mean([r.mean_rmse for r in self.rows])),
            "ensemble_mae": float(np.mean([r.ensemble_mae for r in self.rows])),
            "ensemble_rmse": float(np.mean([r.ensemble_rmse for r in self.rows])),
        }


def infer_model_config(dataset: list[SubjectSegments], kind: str = "pce-lstm", **overrides) -> ModelConfig:
    """Model configuration whose data-shape fields match a preprocessed
    dataset; remaining fields keep their defaults unless overridden."""
    seg = dataset[0].segments[0]
    sensors = seg.sensor_array()
    n, channels, length = sensors.shape
    config = ModelConfig(kind=kind, in_channels=channels, ts_len=length, n_snippets=n, init_len=seg.init_len)
    if kind == "pce-lstm-ppg":
        config.fft_len = seg.fft_array().shape[-1]
    for key, value in overrides.items():
        if not hasattr(config, key):
            raise ValueError(f"unknown model config field {key!r}")
        setattr(config, key, value)
    return config


# ---------------------------------------------------------------------------
# folds


def make_folds(dataset: list[SubjectSegments], base_seed: int, runs_per_fold: int = RUNS_PER_FOLD) -> list[FoldSpec]:
    """Every usable subject serves as the test subject once; each run draws
    its own 80/20 train/validation split over the remaining subjects'
    segments.  Fully determined by base_seed."""
    subjects = sorted(dataset, key=lambda s: s.subject_id)
    usable = []
    for subject in subjects:
        if subject.segments:
            usable.append(subject)
        else:
            warnings.warn(f"subject {subject.subject_id} has no segments and is excluded from folds")
    if len(usable) < 3:
        raise ValueError(f"need at least 3 subjects with segments, got {len(usable)}")
    folds = []
    for fold_index, test in enumerate(usable):
        pool = [
            (subject.subject_id, seg.segment_index)
            for subject in usable
            if subject is not test
            for seg in subject.segments
        ]
        for run_index in range(1, runs_per_fold + 1):
            rng_seed = base_seed ^ fold_index ^ run_index
            rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 1]))
            order = rng.permutation(len(pool))
            n_val = max(1, int(round(0.2 * len(pool))))
            folds.append(
                FoldSpec(
                    test_subject_id=test.subject_id,
                    train_segment_ids=[pool[i] for i in order[n_val:]],
                    val_segment_ids=[pool[i] for i in order[:n_val]],
                    run_index=run_index,
                    rng_seed=rng_seed,
                    fold_index=fold_index,
                )
            )
    return folds


def make_batches(n: int, batch_size: int) -> list[np.ndarray]:
    """Consecutive index blocks covering range(n); the last may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return [np.arange(lo, min(lo + batch_size, n)) for lo in range(0, n, batch_size)]


def _segment_lookup(dataset: list[SubjectSegments]) -> dict:
    table = {}
    for subject in dataset:
        for seg in subject.segments:
            table[(subject.subject_id, seg.segment_index)] = seg
    return table


def _group_by_subject(segments) -> dict:
    grouped: dict[str, list] = {}
    for seg in segments:
        grouped.setdefault(seg.subject_id, []).append(seg)
    return grouped


# ---------------------------------------------------------------------------
# single run


def _dataset_mae(model, segments, hr_mean, hr_std, with_fft, batch_size) -> float:
    """Mean absolute prediction error in beats/minute over a segment list."""
    total = 0.0
    count = 0
    for idx in make_batches(len(segments), batch_size):
        batch = SegmentBatch.from_segments([segments[i] for i in idx], hr_mean, hr_std, with_fft)
        out = model.forward(batch, train_mode=False, rng=None)
        truth = batch.hr_bpm[:, -out.hr_pred.shape[1]:]
        err = np.abs(out.hr_pred.data - truth)
        finite = np.isfinite(err)
        total += float(err[finite].sum())
        count += int(finite.sum())
    return total / max(count, 1)


def _predict_series(model, segments, hr_mean, hr_std, with_fft):
    """Predictions over a subject's tiled series: every segment re-initialized
    from its own known-HR snippets.  Returns (pred, truth, times), flattened
    in chronological order."""
    batch = SegmentBatch.from_segments(segments, hr_mean, hr_std, with_fft)
    out = model.forward(batch, train_mode=False, rng=None)
    n_pred = out.hr_pred.shape[1]
    preds = out.hr_pred.data.reshape(-1).astype(np.float64)
    truth = batch.hr_bpm[:, -n_pred:].reshape(-1)
    times = np.array([s.start_time for seg in segments for s in seg.snippets[-n_pred:]])
    return preds, truth, times


def _pair_accuracy(model, disc, pairs, hr_mean, hr_std, with_fft) -> float:
    firsts = SegmentBatch.from_segments([a for a, _, _ in pairs], hr_mean, hr_std, with_fft)
    partners = SegmentBatch.from_segments([b for _, b, _ in pairs], hr_mean, hr_std, with_fft)
    labels = np.array([lab for _, _, lab in pairs])
    probs = disc.forward(
        model.encode_pce(firsts, train_mode=False, rng=None),
        model.encode_pce(partners, train_mode=False, rng=None),
        train_mode=False,
        rng=None,
    )
    return discriminator_accuracy(probs.data, labels)


def train_run(
    dataset: list[SubjectSegments],
    fold: FoldSpec,
    config: TrainConfig,
    checkpoint_path=None,
    log=None,
) -> RunResult:
    """Train one model on one fold/run cell and predict its test series.

    Divergence (non-finite loss or gradient) marks the run failed instead of
    raising; failed runs carry empty prediction arrays.
    """
    t0 = time.perf_counter()
    lookup = _segment_lookup(dataset)
    train_segs = [lookup[tuple(key)] for key in fold.train_segment_ids]
    val_segs = [lookup[tuple(key)] for key in fold.val_segment_ids]
    test_subject = next(s for s in dataset if s.subject_id == fold.test_subject_id)

    hr_mean, hr_std = hr_population_stats([train_segs])
    kind = config.model.kind
    with_fft = kind == "pce-lstm-ppg"
    model = build_model(config.model, seed=fold.rng_seed)
    opt = AdamState(model.store, config.learning_rate, weight_decay=config.weight_decay)
    use_disc = config.uses_discriminator()
    disc = disc_opt = None
    val_pairs = []
    if use_disc:
        disc = Discriminator(config.model.pce_out, seed=fold.rng_seed, dropout=config.model.dropout)
        disc_opt = AdamState(disc.store, config.learning_rate, weight_decay=config.weight_decay)
        val_rng = np.random.default_rng(np.random.SeedSequence([fold.rng_seed, 3]))
        val_pairs = sample_discriminator_pairs(_group_by_subject(val_segs), val_rng)

    rng = np.random.default_rng(np.random.SeedSequence([fold.rng_seed, 2]))
    epochs = config.resolved_epochs()
    val_losses: list[float] = []
    best_val = np.inf
    best_epoch = -1
    best_model = None
    best_disc = None

    def fail(reason: str) -> RunResult:
        warnings.warn(f"run {fold.test_subject_id}/{fold.run_index} failed: {reason}")
        empty = np.empty(0)
        return RunResult(
            fold, kind, empty, empty, empty, best_epoch, val_losses,
            time.perf_counter() - t0, failed=True, failure_reason=reason,
        )

    try:
        for epoch in range(1, epochs + 1):
            pair_map = {}
            if use_disc:
                pairs = sample_discriminator_pairs(_group_by_subject(train_segs), rng)
                pair_map = {id(a): (b, lab) for a, b, lab in pairs}
            shuffled = [train_segs[i] for i in rng.permutation(len(train_segs))]
            for idx in make_batches(len(shuffled), config.batch_size):
                batch_segs = [shuffled[i] for i in idx]
                batch = SegmentBatch.from_segments(batch_segs, hr_mean, hr_std, with_fft)
                out = model.forward(batch, train_mode=True, rng=rng)
                l_hr = hr_l1_loss(out, batch)
                l_disc = None
                if use_disc:
                    partners = [pair_map[id(s)] for s in batch_segs]
                    partner_batch = SegmentBatch.from_segments(
                        [b for b, _ in partners], hr_mean, hr_std, with_fft
                    )
                    labels = np.array([lab for _, lab in partners], dtype=out.pce.dtype)
                    pce_partner = model.encode_pce(partner_batch, train_mode=True, rng=rng)
                    probs = disc.forward(out.pce, pce_partner, train_mode=True, rng=rng)
                    l_disc = ad.binary_cross_entropy(probs, labels)
                loss = total_loss(l_hr, l_disc, (config.hr_weight, config.disc_weight))
                if not np.isfinite(loss.data):
                    raise ad.NonFiniteError(f"non-finite training loss at epoch {epoch}")
                ad.backward(loss)
                adam_step(model.store, opt)
                if use_disc:
                    adam_step(disc.store, disc_opt)
            val_loss = _dataset_mae(model, val_segs, hr_mean, hr_std, with_fft, config.batch_size)
            val_losses.append(val_loss)
            if not np.isfinite(val_loss):
                raise ad.NonFiniteError(f"non-finite validation loss at epoch {epoch}")
            if val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                best_model = model.store.snapshot()
                best_disc = disc.store.snapshot() if use_disc else None
            if log:
                log(f"[{fold.test_subject_id} run {fold.run_index}] epoch {epoch}/{epochs} val {val_loss:.3f}")
    except ad.NonFiniteError as exc:
        return fail(str(exc))

    model.store.load_values(best_model)
    if use_disc and best_disc is not None:
        disc.store.load_values(best_disc)

    preds, truth, times = _predict_series(model, test_subject.segments, hr_mean, hr_std, with_fft)
    disc_acc = _pair_accuracy(model, disc, val_pairs, hr_mean, hr_std, with_fft) if use_disc and val_pairs else None

    if checkpoint_path is not None:
        save_checkpoint(
            checkpoint_path,
            model.store,
            config.model.to_dict(),
            {
                "hr_mean": hr_mean,
                "hr_std": hr_std,
                "best_epoch": best_epoch,
                "best_val_loss": best_val,
                "test_subject": fold.test_subject_id,
                "run_index": fold.run_index,
            },
        )
    return RunResult(
        fold, kind, preds, truth, times, best_epoch, val_losses,
        time.perf_counter() - t0, disc_acc, str(checkpoint_path) if checkpoint_path else None,
    )


# ---------------------------------------------------------------------------
# aggregation


def _masked_errors(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    mask = np.isfinite(truth)
    diff = pred[mask] - truth[mask]
    return float(np.abs(diff).mean()), float(np.sqrt(np.mean(diff**2)))


def evaluate_fold(runs: list[RunResult]) -> FoldReport:
    """Mean-of-errors and error-of-mean-prediction for one test subject."""
    ok = [r for r in runs if not r.failed]
    if not ok:
        raise ValueError(f"no successful runs for subject {runs[0].fold.test_subject_id}")
    truth = ok[0].truth
    per_mae = []
    per_rmse = []
    for run in ok:
        mae, rmse = _masked_errors(run.predictions, truth)
        per_mae.append(mae)
        per_rmse.append(rmse)
    ensemble_pred = np.mean([r.predictions for r in ok], axis=0)
    ens_mae, ens_rmse = _masked_errors(ensemble_pred, truth)
    return FoldReport(
        subject_id=ok[0].fold.test_subject_id,
        model_kind=ok[0].model_kind,
        n_runs=len(ok),
        n_failed=len(runs) - len(ok),
        mean_mae=float(np.mean(per_mae)),
        mean_rmse=float(np.mean(per_rmse)),
        ensemble_mae=ens_mae,
        ensemble_rmse=ens_rmse,
        per_run_mae=per_mae,
        per_run_rmse=per_rmse,
        ensemble_pred=ensemble_pred,
        runs=runs,
    )


def _run_job(args):
    dataset, fold, config, checkpoint_path = args
    return train_run(dataset, fold, config, checkpoint_path)


def run_suite(
    dataset: list[SubjectSegments],
    base_seed: int,
    config: TrainConfig | None = None,
    runs_per_fold: int = RUNS_PER_FOLD,
    parallel: int = 1,
    checkpoint_dir=None,
    folds: list[FoldSpec] | None = None,
    log=None,
) -> EvalReport:
    """Full leave-one-subject-out sweep; aggregation order is fixed by
    subject id and run index, so worker scheduling cannot affect the report."""
    if config is None:
        config = TrainConfig(model=infer_model_config(dataset))
    if folds is None:
        folds = make_folds(dataset, base_seed, runs_per_fold)
    jobs = []
    for fold in folds:
        ckpt = None
        if checkpoint_dir is not None:
            directory = Path(checkpoint_dir)
            directory.mkdir(parents=True, exist_ok=True)
            ckpt = directory / f"{config.model.kind}_{fold.test_subject_id}_run{fold.run_index}.ckpt"
        jobs.append((dataset, fold, config, ckpt))
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = []
        for job in jobs:
            result = _run_job(job)
            if log:
                status = "failed" if result.failed else f"best epoch {result.best_epoch}"
                log(
                    f"subject {result.fold.test_subject_id} run {result.fold.run_index}: "
                    f"{status}, {result.wall_clock_s:.1f}s"
                )
            results.append(result)
    by_subject: dict[str, list[RunResult]] = {}
    for result in results:
        by_subject.setdefault(result.fold.test_subject_id, []).append(result)
    rows = []
    for subject_id in sorted(by_subject):
        runs = sorted(by_subject[subject_id], key=lambda r: r.fold.run_index)
        rows.append(evaluate_fold(runs))
    return EvalReport(config.model.kind, rows)


# ---------------------------------------------------------------------------
# report files


def _fmt(v: float) -> str:
    return format(float(v), ".6f")


def write_report_csv(reports: list[EvalReport], path) -> None:
    """Per-subject table plus an all-subject average row per model."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "model", "metric", "mean", "ensemble"])
        for report in reports:
            for row in report.rows:
                writer.writerow([row.subject_id, report.model_kind, "mae", _fmt(row.mean_mae), _fmt(row.ensemble_mae)])
                writer.writerow([row.subject_id, report.model_kind, "rmse", _fmt(row.mean_rmse), _fmt(row.ensemble_rmse)])
            grand = report.grand()
            writer.writerow(["all", report.model_kind, "mae", _fmt(grand["mean_mae"]), _fmt(grand["ensemble_mae"])])
            writer.writerow(["all", report.model_kind, "rmse", _fmt(grand["mean_rmse"]), _fmt(grand["ensemble_rmse"])])


def write_predictions_csv(reports: list[EvalReport], path) -> None:
    """Per-snippet dump of every successful run plus the ensemble curve."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", "truth_bpm", "pred_bpm", "run_id"])
        for report in reports:
            for row in report.rows:
                ok = [r for r in row.runs if not r.failed]
                for run in ok:
                    run_id = f"{row.subject_id}:{run.fold.run_index}"
                    for t, truth, pred in zip(run.times, run.truth, run.predictions):
                        writer.writerow([format(t, ".3f"), _fmt(truth), _fmt(pred), run_id])
                for t, truth, pred in zip(ok[0].times, ok[0].truth, row.ensemble_pred):
                    writer.writerow([format(t, ".3f"), _fmt(truth), _fmt(pred), f"{row.subject_id}:ensemble"])


# ---------------------------------------------------------------------------
# ablation arms


ABLATION_ARMS = (
    ("with-discr", "pce-lstm", 0.9, 0.1),
    ("without-discr", "pce-lstm", 1.0, 0.0),
    ("self-encode", "lstm-self-encode", 1.0, 0.0),
)


def ablation_suite(
    dataset: list[SubjectSegments],
    base_seed: int,
    runs_per_fold: int = RUNS_PER_FOLD,
    epochs: int | None = None,
    parallel: int = 1,
    config_overrides: dict | None = None,
    log=None,
) -> dict:
    """Three initialization arms over identical folds and seeds, plus the
    pair-classifier accuracy on held-out validation pairs."""
    arms: dict[str, EvalReport] = {}
    disc_accuracy = None
    for name, kind, hr_weight, disc_weight in ABLATION_ARMS:
        config = TrainConfig(
            model=infer_model_config(dataset, kind, **(config_overrides or {})),
            epochs=epochs,
            hr_weight=hr_weight,
            disc_weight=disc_weight,
        )
        report = run_suite(dataset, base_seed, config, runs_per_fold, parallel, log=log)
        arms[name] = report
        if name == "with-discr":
            accs = [
                run.disc_accuracy
                for row in report.rows
                for run in row.runs
                if not run.failed and run.disc_accuracy is not None
            ]
            disc_accuracy = float(np.mean(accs)) if accs else None
    return {"arms": arms, "discriminator_accuracy": disc_accuracy}


# ---------------------------------------------------------------------------
# paired-seed synthetic comparison


def paired_seed_comparison(
    n_seeds: int = 10,
    base_seed: int = 0,
    n_subjects: int = 8,
    duration_s: float = 1200.0,
    conditioning_range: tuple[float, float] = (0.5, 2.0),
    epochs: int = 40,
    batch_size: int = 16,
    runs_per_fold: int = 1,
    folds_per_seed: int | None = None,
    parallel: int = 1,
    log=None,
) -> dict:
    """For each seed: generate a synthetic population, train the
    embedding-initialized model and the self-encoding ablation on identical
    folds, and compare their grand test MAE.  Returns the win tally."""
    details = []
    wins = 0
    for k in range(n_seeds):
        seed = base_seed + k
        records = generate_synthetic(
            SynthConfig(
                n_subjects=n_subjects,
                duration_s=duration_s,
                conditioning_range=conditioning_range,
                seed=1000 + seed,
            )
        )
        dataset = [preprocess_subject(record) for record in records]
        folds = make_folds(dataset, seed, runs_per_fold)
        if folds_per_seed is not None:
            pick_rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
            subjects = sorted({f.test_subject_id for f in folds})
            chosen = set(pick_rng.choice(subjects, size=min(folds_per_seed, len(subjects)), replace=False))
            folds = [f for f in folds if f.test_subject_id in chosen]
        maes = {}
        for kind in ("pce-lstm", "lstm-self-encode"):
            config = TrainConfig(model=infer_model_config(dataset, kind), epochs=epochs, batch_size=batch_size)
            report = run_suite(
                dataset, seed, config, runs_per_fold, parallel=parallel, folds=folds, log=log
            )
            maes[kind] = report.grand()["mean_mae"]
        win = maes["pce-lstm"] < maes["lstm-self-encode"]
        wins += int(win)
        details.append({"seed": seed, "pce_mae": maes["pce-lstm"], "self_encode_mae": maes["lstm-self-encode"], "win": win})
        if log:
            log(
                f"seed {seed}: embedding-init {maes['pce-lstm']:.3f} vs self-encode "
                f"{maes['lstm-self-encode']:.3f} -> {'win' if win else 'loss'}"
            )
    return {"n_seeds": n_seeds, "wins": wins, "win_fraction": wins / n_seeds, "details": details}
