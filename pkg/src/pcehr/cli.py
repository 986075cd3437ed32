"""Command-line surface: dataset generation, preprocessing, training,
evaluation, the full leave-one-subject-out suite, the ablation arms, the
gradient oracle suite, and parameter counting."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import harness as hx
from .config import ConfigError, build_train_config, merge_settings, preprocess_params, read_config_file
from .gradcheck import run_oracle_suite
from .models import MODEL_KINDS, ModelConfig, build_model
from .nn import count_parameters, parameter_breakdown
from .pipeline import preprocess_subject
from .synth import SynthConfig, generate_synthetic

DATASET_HINT = (
    "no dataset found: generate one with 'pcehr synth-gen --out DIR', then pass "
    "--data DIR (or set the PCEHR_DATA_DIR environment variable)"
)


class CliError(Exception):
    """User-facing failure with a remedy; maps to a nonzero exit."""


def _data_dir(args) -> Path:
    root = Path(args.data) if args.data else ds.default_data_dir()
    if root is None or not (Path(root) / "manifest.json").exists():
        raise CliError(DATASET_HINT)
    return Path(root)


def _load_dataset(args):
    """Preprocessed segments, either from a cache directory or by running the
    pipeline on a canonical dataset."""
    if getattr(args, "cache", None):
        cache = Path(args.cache)
        if not cache.is_dir():
            raise CliError(f"cache directory {cache} does not exist; run 'pcehr preprocess' first")
        dataset = ds.load_segment_cache(cache)
        if not dataset:
            raise CliError(f"cache directory {cache} holds no subjects; run 'pcehr preprocess' first")
        return dataset
    records = ds.read_canonical(_data_dir(args))
    params = preprocess_params(_settings(args))
    return [preprocess_subject(record, **params) for record in records]


def _settings(args) -> dict:
    """File values overridden by explicit command-line flags."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    flag_values = {
        key: getattr(args, key)
        for key in (
            "epochs", "batch_size", "learning_rate", "weight_decay", "hr_weight",
            "disc_weight", "tau_s", "overlap", "rate_hz", "n_snippets", "init_len",
            "with_ppg_fft",
        )
        if getattr(args, key, None) is not None
    }
    return merge_settings(file_values, flag_values)


def _base_seed(args, settings) -> int:
    if args.seed is not None:
        return args.seed
    return settings.get("base_seed", 0)


def _runs_per_fold(args, settings) -> int:
    if getattr(args, "runs_per_fold", None) is not None:
        return args.runs_per_fold
    return settings.get("runs_per_fold", hx.RUNS_PER_FOLD)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_gen(args) -> int:
    config = SynthConfig(
        n_subjects=args.subjects,
        duration_s=args.duration,
        conditioning_range=(args.c_min, args.c_max),
        noise=args.noise,
        seed=args.seed or 0,
        emit_ppg=args.emit_ppg,
    )
    records = generate_synthetic(config)
    manifest = ds.write_canonical(args.out, records, "synth")
    print(f"wrote {len(records)} subjects under {Path(args.out).resolve()} (manifest {manifest.name})")
    return 0


def cmd_preprocess(args) -> int:
    records = ds.read_canonical(_data_dir(args))
    params = preprocess_params(_settings(args))
    out_dir = Path(args.out)
    total = 0
    for record in records:
        processed = preprocess_subject(record, **params)
        if not processed.segments:
            print(f"subject {record.subject_id}: no segments (series too short), skipped")
            continue
        ds.save_segment_cache(out_dir, processed)
        total += len(processed.segments)
        print(f"subject {record.subject_id}: {len(processed.segments)} segments")
    if total == 0:
        raise CliError("no segments produced; lower --n-snippets or provide longer recordings")
    print(f"cached {total} segments under {out_dir.resolve()}")
    return 0


def cmd_train(args) -> int:
    dataset = _load_dataset(args)
    settings = _settings(args)
    seed = _base_seed(args, settings)
    folds = hx.make_folds(dataset, seed, _runs_per_fold(args, settings))
    matching = [
        f for f in folds
        if f.run_index == args.run and (f.fold_index == args.fold or f.test_subject_id == str(args.fold))
    ]
    if not matching:
        subjects = sorted({f.test_subject_id for f in folds})
        raise CliError(
            f"no fold {args.fold!r} run {args.run}; subjects: {', '.join(subjects)}, "
            f"runs 1..{_runs_per_fold(args, settings)}"
        )
    fold = matching[0]
    config = build_train_config(settings, args.model, dataset)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{args.model}_{fold.test_subject_id}_run{fold.run_index}"
    result = hx.train_run(
        dataset, fold, config,
        checkpoint_path=out_dir / f"{stem}.ckpt",
        log=print if args.verbose else None,
    )
    if result.failed:
        print(f"run failed: {result.failure_reason}", file=sys.stderr)
        return 1
    _write_run_dump(out_dir / f"{stem}_preds.csv", result)
    print(
        f"test subject {fold.test_subject_id} run {fold.run_index}: best epoch {result.best_epoch}, "
        f"validation {min(result.val_losses):.3f} bpm, {result.wall_clock_s:.1f}s"
    )
    mae = float(np.mean(np.abs(result.predictions - result.truth)))
    print(f"test MAE {mae:.3f} bpm over {result.predictions.size} snippets")
    return 0


def _write_run_dump(path, result: hx.RunResult) -> None:
    run_id = f"{result.fold.test_subject_id}:{result.fold.run_index}"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", "truth_bpm", "pred_bpm", "run_id"])
        for t, truth, pred in zip(result.times, result.truth, result.predictions):
            writer.writerow([format(t, ".3f"), format(truth, ".6f"), format(pred, ".6f"), run_id])


def cmd_evaluate(args) -> int:
    """Aggregate per-run prediction dumps into the per-subject report."""
    runs_dir = Path(args.runs)
    dumps = sorted(runs_dir.glob("*_preds.csv"))
    if not dumps:
        raise CliError(f"no *_preds.csv files under {runs_dir}; run 'pcehr train' first")
    by_subject: dict[str, list] = {}
    model_kind = "unknown"
    for dump in dumps:
        with open(dump, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            continue
        subject, run_index = rows[0]["run_id"].rsplit(":", 1)
        model_kind = dump.name.split("_")[0]
        result = hx.RunResult(
            fold=hx.FoldSpec(subject, [], [], int(run_index), 0, 0),
            model_kind=model_kind,
            predictions=np.array([float(r["pred_bpm"]) for r in rows]),
            truth=np.array([float(r["truth_bpm"]) for r in rows]),
            times=np.array([float(r["time_s"]) for r in rows]),
            best_epoch=-1,
            val_losses=[],
            wall_clock_s=0.0,
        )
        by_subject.setdefault(subject, []).append(result)
    rows = [hx.evaluate_fold(sorted(runs, key=lambda r: r.fold.run_index)) for _, runs in sorted(by_subject.items())]
    report = hx.EvalReport(model_kind, rows)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    hx.write_report_csv([report], out_dir / "report.csv")
    hx.write_predictions_csv([report], out_dir / "predictions.csv")
    for row in rows:
        print(f"{row.subject_id}: mean MAE {row.mean_mae:.3f}, ensemble MAE {row.ensemble_mae:.3f} ({row.n_runs} runs)")
    grand = report.grand()
    print(f"all subjects: mean MAE {grand['mean_mae']:.3f}, ensemble MAE {grand['ensemble_mae']:.3f}")
    print(f"wrote {out_dir / 'report.csv'} and {out_dir / 'predictions.csv'}")
    return 0


def cmd_suite(args) -> int:
    dataset = _load_dataset(args)
    settings = _settings(args)
    seed = _base_seed(args, settings)
    config = build_train_config(settings, args.model, dataset)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = hx.run_suite(
        dataset, seed, config,
        runs_per_fold=_runs_per_fold(args, settings),
        parallel=args.parallel,
        checkpoint_dir=out_dir / "checkpoints" if args.save_checkpoints else None,
        log=print if args.verbose else None,
    )
    hx.write_report_csv([report], out_dir / "report.csv")
    hx.write_predictions_csv([report], out_dir / "predictions.csv")
    grand = report.grand()
    for row in report.rows:
        print(f"{row.subject_id}: mean MAE {row.mean_mae:.3f}, ensemble MAE {row.ensemble_mae:.3f}")
    print(f"all subjects: mean MAE {grand['mean_mae']:.3f}, ensemble MAE {grand['ensemble_mae']:.3f}")
    print(f"wrote {out_dir / 'report.csv'} and {out_dir / 'predictions.csv'}")
    return 0


def cmd_ablation(args) -> int:
    from dataclasses import fields

    dataset = _load_dataset(args)
    settings = _settings(args)
    seed = _base_seed(args, settings)
    model_fields = {f.name for f in fields(ModelConfig)} - {"kind"}
    out = hx.ablation_suite(
        dataset, seed,
        runs_per_fold=_runs_per_fold(args, settings),
        epochs=settings.get("epochs"),
        parallel=args.parallel,
        config_overrides={k: v for k, v in settings.items() if k in model_fields},
        log=print if args.verbose else None,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    hx.write_report_csv(list(out["arms"].values()), out_dir / "ablation_report.csv")
    with open(out_dir / "ablation_summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "mean_mae", "ensemble_mae", "mean_rmse", "ensemble_rmse"])
        for name, report in out["arms"].items():
            grand = report.grand()
            writer.writerow([
                name,
                format(grand["mean_mae"], ".6f"), format(grand["ensemble_mae"], ".6f"),
                format(grand["mean_rmse"], ".6f"), format(grand["ensemble_rmse"], ".6f"),
            ])
            print(f"{name}: mean MAE {grand['mean_mae']:.3f}, ensemble MAE {grand['ensemble_mae']:.3f}")
    if out["discriminator_accuracy"] is not None:
        print(f"held-out pair accuracy: {out['discriminator_accuracy']:.3f}")
    print(f"wrote {out_dir / 'ablation_report.csv'} and {out_dir / 'ablation_summary.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_oracle_suite(tol=args.tol)
    failed = 0
    for name, err, tol, ok in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: max relative error {err:.3e} (tolerance {tol:.1e})")
        failed += 0 if ok else 1
    if failed:
        print(f"{failed}/{len(results)} checks failed", file=sys.stderr)
        return 1
    print(f"all {len(results)} gradient checks passed")
    return 0


def cmd_count_params(args) -> int:
    config = ModelConfig(kind=args.model, in_channels=args.channels)
    if args.ts_len is not None:
        config.ts_len = args.ts_len
    if args.n_snippets is not None:
        config.n_snippets = args.n_snippets
    if args.init_snippets is not None:
        config.init_len = args.init_snippets
    model = build_model(config)
    for name, shape, n in parameter_breakdown(model.store):
        print(f"{name:32s} {str(tuple(shape)):>16s} {n:>10d}")
    print(f"{'total':32s} {'':>16s} {count_parameters(model.store):>10d}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--seed", type=int, default=None, help="base seed (overrides config file)")
    for flag, kind in (
        ("--epochs", int), ("--batch-size", int), ("--learning-rate", float),
        ("--weight-decay", float), ("--hr-weight", float), ("--disc-weight", float),
        ("--runs-per-fold", int),
    ):
        p.add_argument(flag, type=kind, default=None)


def _add_preprocess_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tau", dest="tau_s", type=float, default=None, help="snippet length in seconds")
    p.add_argument("--overlap", type=float, default=None, help="snippet overlap ratio in [0, 1)")
    p.add_argument("--rate", dest="rate_hz", type=float, default=None, help="target sensor rate in Hz")
    p.add_argument("--n-snippets", type=int, default=None, help="snippets per segment")
    p.add_argument("--init-snippets", dest="init_len", type=int, default=None, help="known-HR snippets per segment")
    p.add_argument("--ppg-fft", dest="with_ppg_fft", action="store_const", const=True, default=None,
                   help="attach per-snippet magnitude spectra (PPG task)")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="canonical dataset directory (default: $PCEHR_DATA_DIR)")
    p.add_argument("--cache", help="preprocessed segment cache directory (skips the pipeline)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcehr", description="heart-rate forecasting engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic population as a canonical dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--duration", type=float, default=1200.0, help="seconds per subject")
    p.add_argument("--c-min", type=float, default=0.5)
    p.add_argument("--c-max", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--emit-ppg", action="store_true")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("preprocess", help="canonical dataset -> per-subject segment cache")
    p.add_argument("--data", help="canonical dataset directory (default: $PCEHR_DATA_DIR)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="flat key = value configuration file")
    _add_preprocess_flags(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one fold/run cell and dump its test predictions")
    _add_data_flags(p)
    p.add_argument("--model", required=True, choices=MODEL_KINDS)
    p.add_argument("--fold", required=True, help="fold index or test subject id")
    p.add_argument("--run", type=int, default=1)
    p.add_argument("--out", default="runs")
    p.add_argument("--verbose", action="store_true")
    _add_config_flags(p)
    _add_preprocess_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="aggregate run dumps into report CSVs")
    p.add_argument("--runs", required=True, help="directory of *_preds.csv dumps")
    p.add_argument("--out", default="reports")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("suite", help="leave-one-subject-out sweep with per-subject report")
    _add_data_flags(p)
    p.add_argument("--model", default="pce-lstm", choices=MODEL_KINDS)
    p.add_argument("--out", default="reports")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--save-checkpoints", action="store_true")
    p.add_argument("--verbose", action="store_true")
    _add_config_flags(p)
    _add_preprocess_flags(p)
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("ablation", help="initialization ablation arms over identical folds")
    _add_data_flags(p)
    p.add_argument("--out", default="reports")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--verbose", action="store_true")
    _add_config_flags(p)
    _add_preprocess_flags(p)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("gradcheck", help="finite-difference oracle suite")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("count-params", help="print per-layer and total parameter counts")
    p.add_argument("--model", required=True, choices=MODEL_KINDS)
    p.add_argument("--channels", type=int, required=True, help="sensor channels per snippet")
    p.add_argument("--ts-len", type=int, default=None)
    p.add_argument("--n-snippets", type=int, default=None)
    p.add_argument("--init-snippets", type=int, default=None)
    p.set_defaults(func=cmd_count_params)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        fold = getattr(args, "fold", None)
        if fold is not None:
            try:
                args.fold = int(fold)
            except ValueError:
                pass  # treated as a subject id
        return args.func(args)
    except (CliError, ConfigError, ds.DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
