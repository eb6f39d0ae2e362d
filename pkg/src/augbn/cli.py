"""Command-line entry point: ``augbn <command> [options]``.

Settings resolve in three layers: built-in defaults, then an optional
``--config`` file of ``key = value`` lines, then explicit flags.

Exit codes: 0 success, 2 config error, 3 data or format error, 4 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from augbn import harness
from augbn.config import MODES, RunConfig, apply_overrides, load_config, resolved_lines
from augbn.data import (
    CORRUPTION_KINDS,
    corrupt_dataset,
    load_dataset,
    save_raw,
    synthetic_dataset,
)
from augbn.errors import AugBNError, ConfigError, DataFormatError
from augbn.model import ARCHS, set_bn_mode_mask
from augbn.trainer import accuracy, train_source_model
from augbn.weights import load_weights, save_weights

log = logging.getLogger("augbn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INVARIANT = 0, 2, 3, 4


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="root seed for this command")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_adapt(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda", dest="lam", type=float, help="source prior for AugBN")
    p.add_argument("--n-augments", type=int)
    p.add_argument("--priors", help="comma-separated prior grid for OPS")
    p.add_argument("--k-top", type=int)
    p.add_argument("--bn-mask", help="all, none, or a per-group pattern such as AASS")
    p.add_argument("--std-blend", action="store_const", const=True, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="augbn", description="Single-image test-time BN adaptation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a source model")
    _add_common(p)
    p.add_argument("--arch", choices=ARCHS)
    p.add_argument("--data", help="dataset path or 'synthetic'")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--class-count", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("predict", help="predict one image")
    _add_common(p)
    _add_adapt(p)
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True, help="raw fixture or CIFAR-10 .bin file")
    p.add_argument("--index", type=int, default=0, help="which image of the file")
    p.add_argument("--mode", choices=MODES)

    p = sub.add_parser("evaluate", help="accuracy under corruptions")
    _add_common(p)
    _add_adapt(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="dataset path or 'synthetic'")
    p.add_argument("--corruptions", help="comma-separated corruption kinds")
    p.add_argument("--severity", type=int)
    p.add_argument("--mode", help="one mode or a comma-separated list")
    p.add_argument("--clean", action="store_true", help="also evaluate the clean images")
    p.add_argument("--limit", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--report")

    p = sub.add_parser("corrupt", help="write a corrupted copy of a dataset")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--kind", required=True, choices=CORRUPTION_KINDS)
    p.add_argument("--severity", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench", help="single-image latency per mode")
    _add_common(p)
    _add_adapt(p)
    p.add_argument("--model", required=True)
    p.add_argument("--modes", default="source,augbn,augbn-ops")
    p.add_argument("--reps", type=int)
    p.add_argument("--image", help="raw fixture; defaults to a synthetic image")
    p.add_argument("--strict", action="store_true", help="exit 4 when a batching bound is exceeded")

    p = sub.add_parser("sweep", help="ablation sweep")
    _add_common(p)
    _add_adapt(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--axis", required=True, choices=harness.AXES)
    p.add_argument("--grid", help="comma-separated grid values")
    p.add_argument("--corruptions")
    p.add_argument("--severity", type=int)
    p.add_argument("--limit", type=int)
    p.add_argument("--report", required=True)

    p = sub.add_parser("entropy", help="accuracy per entropy bin")
    _add_common(p)
    _add_adapt(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--corruption", help="corruption kind, or omit for clean images")
    p.add_argument("--severity", type=int)
    p.add_argument("--mode")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--limit", type=int)
    p.add_argument("--report", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset as a raw fixture")
    _add_common(p)
    p.add_argument("--class-count", type=int)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--image-size", type=int)
    p.add_argument("--out", required=True)
    return parser


_FLAG_KEYS = {
    "arch": "arch",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "learning_rate": "learning_rate",
    "class_count": "class_count",
    "lam": "lam",
    "n_augments": "n_augments",
    "priors": "priors",
    "k_top": "k_top",
    "bn_mask": "bn_mask",
    "std_blend": "std_blend",
    "corruptions": "corruptions",
    "severity": "severity",
    "limit": "limit",
    "workers": "workers",
    "reps": "reps",
    "image_size": "image_size",
}


def resolve(args: argparse.Namespace) -> RunConfig:
    run = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    pairs = {key: getattr(args, attr) for attr, key in _FLAG_KEYS.items() if getattr(args, attr, None) is not None}
    if getattr(args, "mode", None) and "," not in args.mode:
        pairs["mode"] = args.mode
    if getattr(args, "seed", None) is not None:
        pairs["seed"] = args.seed
        pairs["augment_seed"] = args.seed
    return apply_overrides(run, pairs)


def _training_data(run: RunConfig, path: str | None):
    source = path or run.data
    if source == "synthetic":
        return synthetic_dataset(run.class_count, run.train_per_class, run.image_size, run.data_seed)
    return load_dataset(source)


def _test_data(run: RunConfig, path: str | None):
    source = path or run.test_data
    if source == "synthetic":
        data = synthetic_dataset(run.class_count, run.test_per_class, run.image_size, run.test_seed)
    else:
        data = load_dataset(source)
    return data[: run.limit] if run.limit else data


def _model(path: str, run: RunConfig):
    return set_bn_mode_mask(load_weights(path), run.bn_mask)


def cmd_train(args, run: RunConfig) -> int:
    data = _training_data(run, args.data)
    history: list = []
    model = train_source_model(
        run.arch, data, run.train_config(), class_count=run.class_count, history=history, augment=run.train_augment_fn()
    )
    save_weights(model, args.out)
    for rec in history:
        print(f"epoch {rec['epoch']} loss {rec['loss']:.4f} train_acc {rec['accuracy']:.4f}")
    images = [item.image for item in data]
    acc = accuracy(model, np.concatenate(images), [item.label for item in data])
    print(f"saved {args.out} (train accuracy {acc:.4f})")
    return EXIT_OK


def cmd_predict(args, run: RunConfig) -> int:
    model = _model(args.model, run)
    data = load_dataset(args.image)
    if not 0 <= args.index < len(data):
        raise ConfigError(f"--index {args.index} out of range for {len(data)} images")
    pred = harness.make_predictor(run.mode, run.augbn_config(), run.pseudo_count)(model, data[args.index].image)
    out = {
        "mode": run.mode,
        "class_id": pred.class_id,
        "entropy": pred.entropy,
        "probs": [float(p) for p in pred.probs],
        "chosen_prior": pred.chosen_prior,
    }
    if pred.per_prior_detail:
        out["per_prior"] = [[r.prior, r.class_id, r.entropy] for r in pred.per_prior_detail]
    print(json.dumps(out))
    return EXIT_OK


def _modes(args, run: RunConfig) -> list[str]:
    modes = args.mode.split(",") if getattr(args, "mode", None) else [run.mode]
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"unknown mode {m!r}; expected one of {MODES}")
    return modes


def cmd_evaluate(args, run: RunConfig) -> int:
    model = _model(args.model, run)
    data = _test_data(run, args.data)
    specs = harness.corruption_specs(run.corruptions, run.severity, run.corruption_seed, clean=args.clean)
    reports = []
    for mode in _modes(args, run):
        rep = harness.evaluate(
            model, data, specs, mode, run.augbn_config(), seed=run.augment_seed,
            pseudo_count=run.pseudo_count, workers=run.workers,
        )
        reports.append(rep)
        cells = " ".join(f"{k}@{s}={a:.4f}" for (k, s), a in rep.accuracy.items())
        good, bad = rep.entropy_stats
        print(f"{mode}: mCA {rep.mca:.4f} | {cells} | entropy correct {good:.3f} incorrect {bad:.3f}")
        if rep.prior_histogram:
            print("  priors: " + " ".join(f"{p}:{k}/{c}" for p, (c, k) in rep.prior_histogram.items()) + " (correct/chosen)")
    text = harness.report_csv(reports, resolved_lines(run))
    if args.report:
        Path(args.report).write_text(text)
        print(f"wrote {args.report}")
    return EXIT_OK


def cmd_corrupt(args, run: RunConfig) -> int:
    data = load_dataset(args.data)
    out = corrupt_dataset(data, args.kind, args.severity, run.seed)
    save_raw(out, args.out)
    print(f"wrote {len(out)} images to {args.out}")
    return EXIT_OK


def cmd_bench(args, run: RunConfig) -> int:
    model = _model(args.model, run)
    if args.image:
        image = load_dataset(args.image)[0].image
    else:
        image = synthetic_dataset(model.class_count, 1, run.image_size, run.test_seed)[0].image
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"unknown mode {m!r}")
    cfg = run.augbn_config()
    table = harness.bench_latency(model, image, modes, run.reps, cfg)
    sys.stdout.write(harness.latency_csv(table))
    problems = harness.latency_bound_violations(table, cfg)
    for msg in problems:
        print(f"bound exceeded: {msg}", file=sys.stderr)
    return EXIT_INVARIANT if problems and args.strict else EXIT_OK


def _grid_values(text: str | None) -> list[str] | None:
    return [v.strip() for v in text.split(",") if v.strip()] if text else None


def cmd_sweep(args, run: RunConfig) -> int:
    model = load_weights(args.model)
    data = _test_data(run, args.data)
    rows = harness.ablation_sweep(model, data, args.axis, _grid_values(args.grid), run)
    for row in rows:
        print(f"{row.axis}={row.value} ({row.series}, {row.report.mode}): mCA {row.report.mca:.4f}")
    Path(args.report).write_text(harness.sweep_csv(rows, run))
    print(f"wrote {args.report}")
    return EXIT_OK


def cmd_entropy(args, run: RunConfig) -> int:
    model = _model(args.model, run)
    data = _test_data(run, args.data)
    spec = harness.corruption_specs([args.corruption], run.severity, run.corruption_seed)[0] if args.corruption else None
    mode = _modes(args, run)[0]
    hist = harness.entropy_correlation(model, data, spec, mode, args.bins, run.augbn_config())
    text = harness.entropy_csv(hist)
    Path(args.report).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args, run: RunConfig) -> int:
    size = args.image_size or run.image_size
    data = synthetic_dataset(run.class_count, args.per_class, size, run.seed)
    save_raw(data, args.out)
    print(f"wrote {len(data)} images to {args.out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "corrupt": cmd_corrupt,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
    "entropy": cmd_entropy,
    "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        run = resolve(args)
        return COMMANDS[args.command](args, run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except AugBNError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
