"""Evaluation, latency benchmarking, experiment drivers and CSV reports.

Every prediction is made one image at a time with a fresh adaptation. The
model digest is taken before and after each evaluation run; a mismatch means
some predictor wrote to the model and raises InvariantViolation.

CSV reports start with ``# key = value`` lines holding the resolved config and
its fingerprint. They carry no timing columns, so the same config always
produces the same bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from augbn.adapt import (
    AugBnConfig,
    Prediction,
    aug_ensemble_predict,
    bn_baseline_predict,
    ops_predict,
    ptn_predict,
    sita_predict,
    source_predict,
)
from augbn.config import MODES, RunConfig, fingerprint, resolved_lines
from augbn.data import CorruptionSpec, LabeledImage, corrupt_dataset
from augbn.errors import ConfigError, InvariantViolation
from augbn.model import ModelGraph, set_bn_mode_mask, staircase_masks
from augbn.weights import model_digest

Predictor = Callable[[ModelGraph, np.ndarray], Prediction]

CLEAN = ("clean", 0)


def _plan_seed(root: int, index: int) -> int:
    return int(np.random.SeedSequence([root, index]).generate_state(1, np.uint64)[0])


def make_predictor(mode: str, cfg: AugBnConfig, pseudo_count: float = 16.0) -> Predictor:
    if mode == "source":
        return source_predict
    if mode == "ptn":
        return ptn_predict
    if mode == "bn16":
        return lambda m, x: bn_baseline_predict(m, x, pseudo_count, cfg)
    if mode == "augbn":
        return lambda m, x: sita_predict(m, x, cfg)
    if mode == "augbn-ops":
        return lambda m, x: ops_predict(m, x, cfg)
    if mode == "aug-ensemble":
        return lambda m, x: aug_ensemble_predict(m, x, cfg.plan)
    raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")


@dataclass(frozen=True)
class Record:
    cell: tuple[str, int]
    index: int
    label: int
    class_id: int
    entropy: float
    chosen_prior: float | None

    @property
    def correct(self) -> bool:
        return self.class_id == self.label


@dataclass
class EvalReport:
    mode: str
    counts: dict[tuple[str, int], tuple[int, int]]  # cell -> (correct, total)
    latency: dict[str, tuple[float, float]]  # mode -> (mean ms, p95 ms)
    fingerprint: str
    model_digest: str
    records: list[Record] = field(default_factory=list, repr=False)

    @property
    def accuracy(self) -> dict[tuple[str, int], float]:
        return {cell: c / t for cell, (c, t) in self.counts.items()}

    @property
    def mca(self) -> float:
        accs = list(self.accuracy.values())
        return sum(accs) / len(accs)

    @property
    def entropy_stats(self) -> tuple[float, float]:
        """(mean entropy of correct predictions, mean entropy of incorrect ones); NaN when empty."""
        good = [r.entropy for r in self.records if r.correct]
        bad = [r.entropy for r in self.records if not r.correct]
        return (float(np.mean(good)) if good else math.nan, float(np.mean(bad)) if bad else math.nan)

    @property
    def prior_histogram(self) -> dict[float, tuple[int, int]]:
        hist: dict[float, list[int]] = {}
        for r in self.records:
            if r.chosen_prior is None:
                continue
            entry = hist.setdefault(r.chosen_prior, [0, 0])
            entry[0] += 1
            entry[1] += int(r.correct)
        return {p: (c, k) for p, (c, k) in sorted(hist.items())}


def _latency(samples_ms: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(samples_ms, dtype=np.float64)
    return float(arr.mean()), float(np.percentile(arr, 95))


def evaluate(
    model: ModelGraph,
    dataset: Sequence[LabeledImage],
    corruptions: Sequence[CorruptionSpec | None],
    mode: str,
    cfg: AugBnConfig = AugBnConfig(),
    *,
    predictor: Predictor | None = None,
    seed: int = 0,
    pseudo_count: float = 16.0,
    workers: int = 1,
    config_text: str = "",
) -> EvalReport:
    """Corrupt each image, predict it alone, and tally accuracy per corruption.

    Args:
        corruptions: one entry per cell; ``None`` evaluates the clean images.
        predictor: overrides ``mode``; the test-only injection point for oracles.
        seed: root of the per-image augmentation seeds.
        workers: threads used to predict; results are gathered in index order.
        config_text: extra text folded into the report fingerprint.
    """
    if not dataset:
        raise ConfigError("evaluation dataset is empty")
    if not corruptions:
        raise ConfigError("corruption list is empty")
    if predictor is None:
        make_predictor(mode, cfg, pseudo_count)  # reject unknown modes before any work
    digest = model_digest(model)
    counts: dict[tuple[str, int], tuple[int, int]] = {}
    records: list[Record] = []
    timings: list[float] = []

    def run(job):
        index, item = job
        predict = predictor
        if predict is None:
            case_cfg = replace(cfg, plan=cfg.plan.with_seed(_plan_seed(seed, index)))
            predict = make_predictor(mode, case_cfg, pseudo_count)
        start = time.perf_counter()
        pred = predict(model, item.image)
        elapsed = (time.perf_counter() - start) * 1e3
        return index, item.label, pred, elapsed

    for spec in corruptions:
        cell = CLEAN if spec is None else (spec.kind, spec.severity)
        if cell in counts:
            raise ConfigError(f"corruption cell {cell} listed twice")
        images = list(dataset) if spec is None else corrupt_dataset(dataset, spec.kind, spec.severity, spec.seed)
        jobs = list(enumerate(images))
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(run, jobs))
        else:
            results = [run(job) for job in jobs]
        correct = 0
        for index, label, pred, elapsed in results:
            records.append(Record(cell, index, label, pred.class_id, pred.entropy, pred.chosen_prior))
            correct += int(pred.class_id == label)
            timings.append(elapsed)
        counts[cell] = (correct, len(results))
    if model_digest(model) != digest:
        raise InvariantViolation("model bytes changed during evaluation; the reset contract is broken")
    fp = fingerprint_for(mode, cfg, digest, config_text)
    return EvalReport(mode, counts, {mode: _latency(timings)}, fp, digest, records)


def fingerprint_for(mode: str, cfg: AugBnConfig, digest: str, config_text: str = "") -> str:
    text = f"{mode}\n{cfg!r}\n{digest}\n{config_text}"
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def corruption_specs(kinds: Sequence[str], severity: int, seed: int, clean: bool = False) -> list[CorruptionSpec | None]:
    specs: list[CorruptionSpec | None] = [CorruptionSpec(k, severity, seed) for k in kinds]
    return ([None] if clean else []) + specs


# CSV reports ---------------------------------------------------------------------------


def _header_lines(config_lines: Sequence[str], fp: str) -> str:
    return "".join(f"# {line}\n" for line in config_lines) + f"# fingerprint = {fp}\n"


def report_csv(reports: Sequence[EvalReport], config_lines: Sequence[str] = ()) -> str:
    """One row per (mode, corruption, severity) and an ``mCA`` row per mode."""
    if not reports:
        raise ConfigError("no reports to write")
    fp = reports[0].fingerprint if len(reports) == 1 else _combined(r.fingerprint for r in reports)
    buf = io.StringIO()
    buf.write(_header_lines(config_lines, fp))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "corruption", "severity", "correct", "total", "accuracy"])
    for rep in reports:
        for (kind, sev), (c, t) in rep.counts.items():
            w.writerow([rep.mode, kind, sev, c, t, repr(c / t)])
        w.writerow([rep.mode, "mCA", "", "", "", repr(rep.mca)])
    return buf.getvalue()


def _combined(parts) -> str:
    return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]


def read_report_csv(text: str) -> list[dict[str, str]]:
    rows = [line for line in text.splitlines() if line and not line.startswith("#")]
    return list(csv.DictReader(rows))


# Latency ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class Latency:
    mean_ms: float
    p95_ms: float
    reps: int


def bench_latency(
    model: ModelGraph,
    image,
    modes: Sequence[str],
    repetitions: int = 20,
    cfg: AugBnConfig = AugBnConfig(),
    warmup: int = 2,
) -> dict[str, Latency]:
    """Wall-clock time per single-image prediction; warmup calls are discarded."""
    if repetitions < 10:
        raise ConfigError("repetitions must be >= 10")
    table = {}
    for mode in modes:
        predict = make_predictor(mode, cfg)
        for _ in range(warmup):
            predict(model, image)
        samples = []
        for _ in range(repetitions):
            start = time.perf_counter()
            predict(model, image)
            samples.append((time.perf_counter() - start) * 1e3)
        mean, p95 = _latency(samples)
        table[mode] = Latency(mean, p95, repetitions)
    return table


def latency_bound_violations(table: dict[str, Latency], cfg: AugBnConfig = AugBnConfig()) -> list[str]:
    """Check the batching bounds: AugBN <= (n+1) * 1.5 x Source and OPS <= n_p x AugBN."""
    out = []
    src, aug, ops = (table.get(m) for m in ("source", "augbn", "augbn-ops"))
    n = cfg.plan.n_augments
    if src and aug and aug.mean_ms > (n + 1) * 1.5 * src.mean_ms:
        out.append(f"augbn {aug.mean_ms:.2f} ms exceeds {(n + 1) * 1.5:.1f} x source {src.mean_ms:.2f} ms")
    n_p = len(cfg.priors)
    if aug and ops and ops.mean_ms > n_p * aug.mean_ms:
        out.append(f"augbn-ops {ops.mean_ms:.2f} ms exceeds {n_p} x augbn {aug.mean_ms:.2f} ms")
    return out


def latency_csv(table: dict[str, Latency]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "mean_ms", "p95_ms", "reps"])
    for mode, lat in table.items():
        w.writerow([mode, f"{lat.mean_ms:.3f}", f"{lat.p95_ms:.3f}", lat.reps])
    return buf.getvalue()


# Entropy vs correctness ------------------------------------------------------------------


@dataclass(frozen=True)
class EntropyBin:
    low: float
    high: float
    count: int
    correct: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.count


def entropy_histogram(records: Sequence[Record], bins: int, class_count: int) -> list[EntropyBin]:
    """Accuracy per equal-width entropy bin over [0, ln C]; empty bins are left out."""
    if len(records) < 100:
        raise ConfigError(f"entropy correlation needs at least 100 samples, got {len(records)}")
    if bins < 1:
        raise ConfigError("bins must be positive")
    top = math.log(class_count)
    edges = np.linspace(0.0, top, bins + 1)
    ent = np.array([r.entropy for r in records])
    ok = np.array([r.correct for r in records])
    idx = np.clip(np.searchsorted(edges, ent, side="right") - 1, 0, bins - 1)
    out = []
    for b in range(bins):
        sel = idx == b
        if sel.any():
            out.append(EntropyBin(float(edges[b]), float(edges[b + 1]), int(sel.sum()), int(ok[sel].sum())))
    return out


def entropy_correlation(
    model: ModelGraph,
    dataset: Sequence[LabeledImage],
    corruption: CorruptionSpec | None,
    mode: str,
    bins: int = 10,
    cfg: AugBnConfig = AugBnConfig(),
    predictor: Predictor | None = None,
) -> list[EntropyBin]:
    rep = evaluate(model, dataset, [corruption], mode, cfg, predictor=predictor)
    return entropy_histogram(rep.records, bins, model.class_count)


def entropy_csv(hist: Sequence[EntropyBin]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["entropy_low", "entropy_high", "count", "correct", "accuracy"])
    for b in hist:
        w.writerow([repr(b.low), repr(b.high), b.count, b.correct, repr(b.accuracy)])
    return buf.getvalue()


# Ablation sweeps -------------------------------------------------------------------------

AXES = ("lambda", "n-augments", "loo-augment", "bn-mask")


@dataclass(frozen=True)
class SweepRow:
    axis: str
    value: str
    series: str
    report: EvalReport


def default_grid(axis: str, run: RunConfig, model: ModelGraph) -> list:
    if axis == "lambda":
        return [0.0, 0.3, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
    if axis == "n-augments":
        return [0, 1, 2, 4, 8]
    if axis == "loo-augment":
        return list(run.pool)
    if axis == "bn-mask":
        return [pattern for _, pattern in staircase_masks(len(model.bn_groups()))]
    raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {AXES}")


def ablation_sweep(
    model: ModelGraph,
    dataset: Sequence[LabeledImage],
    axis: str,
    grid: Sequence | None,
    run: RunConfig = RunConfig(),
    include_source: bool = True,
) -> list[SweepRow]:
    """One evaluate() per grid point, AugBN mode unless noted.

    Axes: ``lambda`` (prior value), ``n-augments`` (augment count),
    ``loo-augment`` (pool minus the named op), ``bn-mask`` (per-group pattern,
    e.g. ``SAAA``; series follow the staircase layout). A Source row is added
    as the reference when ``include_source`` is set.
    """
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {AXES}")
    grid = list(grid) if grid else default_grid(axis, run, model)
    specs = corruption_specs(run.corruptions, run.severity, run.corruption_seed)
    base = set_bn_mode_mask(model, run.bn_mask) if axis != "bn-mask" else model
    rows = []
    if include_source:
        rep = evaluate(base, dataset, specs, "source", run.augbn_config(), seed=run.augment_seed)
        rows.append(SweepRow(axis, "source", "reference", rep))
    series_of = dict((p, s) for s, p in staircase_masks(len(model.bn_groups()))) if axis == "bn-mask" else {}
    for value in grid:
        point, graph, series = run, base, axis
        if axis == "lambda":
            point = replace(run, lam=float(value))
        elif axis == "n-augments":
            point = replace(run, n_augments=int(value))
        elif axis == "loo-augment":
            if value not in run.pool:
                raise ConfigError(f"{value!r} is not in the augmentation pool {run.pool}")
            pool = tuple(k for k in run.pool if k != value)
            if not pool:
                raise ConfigError("leave-one-out needs a pool of at least two ops")
            point = replace(run, pool=pool, compose_size=min(run.compose_size, len(pool)))
        elif axis == "bn-mask":
            graph = set_bn_mode_mask(model, str(value))
            series = series_of.get(str(value), "custom")
        rep = evaluate(graph, dataset, specs, "augbn", point.augbn_config(), seed=run.augment_seed)
        rows.append(SweepRow(axis, str(value), series, rep))
    return rows


def sweep_csv(rows: Sequence[SweepRow], run: RunConfig) -> str:
    fp = fingerprint(run, "|".join(r.report.fingerprint for r in rows))
    buf = io.StringIO()
    buf.write(_header_lines(resolved_lines(run), fp))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "value", "series", "mode", "corruption", "severity", "correct", "total", "accuracy"])
    for row in rows:
        rep = row.report
        for (kind, sev), (c, t) in rep.counts.items():
            w.writerow([row.axis, row.value, row.series, rep.mode, kind, sev, c, t, repr(c / t)])
        w.writerow([row.axis, row.value, row.series, rep.mode, "mCA", "", "", "", repr(rep.mca)])
    return buf.getvalue()
