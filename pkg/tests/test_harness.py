import math

import numpy as np
import pytest

from augbn.adapt import AugBnConfig, Prediction
from augbn.config import RunConfig
from augbn.data import CorruptionSpec, LabeledImage, synthetic_dataset
from augbn.errors import ConfigError, InvariantViolation
from augbn.harness import (
    CLEAN,
    Latency,
    Record,
    ablation_sweep,
    bench_latency,
    corruption_specs,
    entropy_csv,
    entropy_histogram,
    evaluate,
    latency_bound_violations,
    latency_csv,
    make_predictor,
    read_report_csv,
    report_csv,
    sweep_csv,
)
from augbn.model import ModelGraph, build_reference_model, set_bn_mode_mask
from augbn.tensor import ChannelStats, softmax


@pytest.fixture(scope="module")
def model():
    base = build_reference_model("tiny-cnn", 4, seed=3)
    rng = np.random.default_rng(1)
    stats = {
        k: ChannelStats(rng.normal(0, 0.3, s.channels).astype(np.float32), rng.uniform(0.5, 1.5, s.channels).astype(np.float32))
        for k, s in base.bn_stats.items()
    }
    return set_bn_mode_mask(ModelGraph(base.arch, base.layers, base.params, stats, base.bn_mask, 4), "all")


@pytest.fixture(scope="module")
def data():
    return synthetic_dataset(4, 3, image_size=16, seed=5)


def oracle_for(dataset):
    """Test-only predictor that reads the label of the image it is shown."""
    lookup = {item.image.tobytes(): item.label for item in dataset}

    def predict(model, image):
        label = lookup.get(np.asarray(image).tobytes(), 0)
        logits = np.full(model.class_count, -20.0, np.float32)
        logits[label] = 20.0
        probs = softmax(logits)
        return Prediction(logits, probs, label, 0.0)

    return predict


def test_oracle_predictor_scores_one(model, data):
    rep = evaluate(model, data, [None], "source", predictor=oracle_for(data))
    assert rep.mca == 1.0 and rep.counts[CLEAN] == (len(data), len(data))


def test_single_corruption_mca_is_its_accuracy(model, data):
    rep = evaluate(model, data, [CorruptionSpec("contrast", 5)], "source")
    assert rep.mca == rep.accuracy[("contrast", 5)]


def test_mca_is_the_mean_of_cells_and_survives_csv(model, data):
    specs = corruption_specs(["gaussian_noise", "contrast", "gaussian_blur"], 5, seed=3, clean=True)
    assert specs[0] is None and len(specs) == 4
    rep = evaluate(model, data, specs, "augbn")
    accs = [c / t for c, t in rep.counts.values()]
    assert rep.mca == sum(accs) / len(accs)
    assert all(0 <= a <= 1 for a in accs)
    rows = read_report_csv(report_csv([rep], ["mode = augbn"]))
    cells = [float(r["accuracy"]) for r in rows if r["corruption"] != "mCA"]
    (mca_row,) = [r for r in rows if r["corruption"] == "mCA"]
    assert float(mca_row["accuracy"]) == sum(cells) / len(cells) == rep.mca


def test_reports_are_byte_reproducible(model, data):
    specs = corruption_specs(["gaussian_noise"], 3, seed=1)
    a = report_csv([evaluate(model, data, specs, "augbn-ops", seed=4)], ["seed = 4"])
    b = report_csv([evaluate(model, data, specs, "augbn-ops", seed=4)], ["seed = 4"])
    assert a == b
    assert a.startswith("# seed = 4\n# fingerprint = ")
    assert "\nmode,corruption,severity,correct,total,accuracy\n" in a


def test_parallel_evaluation_matches_serial(model, data):
    specs = corruption_specs(["gaussian_noise"], 5, seed=2, clean=True)
    serial = evaluate(model, data, specs, "augbn", seed=1)
    threaded = evaluate(model, data, specs, "augbn", seed=1, workers=3)
    assert serial.records == threaded.records
    assert report_csv([serial]) == report_csv([threaded])


def test_fingerprint_tracks_settings(model, data):
    a = evaluate(model, data[:2], [None], "augbn", AugBnConfig(lam=0.7))
    b = evaluate(model, data[:2], [None], "augbn", AugBnConfig(lam=0.8))
    c = evaluate(model, data[:2], [None], "augbn", AugBnConfig(lam=0.7))
    assert a.fingerprint != b.fingerprint and a.fingerprint == c.fingerprint


def test_reset_contract_is_checked(model, data):
    def vandal(m, image):
        # Sneak a mask change past the frozen dataclass, as a buggy predictor might.
        object.__setattr__(m, "bn_mask", {**m.bn_mask, "c1.bn": "source"})
        return Prediction(np.zeros(4, np.float32), np.full(4, 0.25), 0, math.log(4))

    victim = set_bn_mode_mask(model, "all")
    with pytest.raises(InvariantViolation):
        evaluate(victim, data[:1], [None], "source", predictor=vandal)


def test_evaluate_errors(model, data):
    with pytest.raises(ConfigError):
        evaluate(model, [], [None], "source")
    with pytest.raises(ConfigError):
        evaluate(model, data, [], "source")
    with pytest.raises(ConfigError):
        evaluate(model, data, [None, None], "source")
    with pytest.raises(ConfigError):
        make_predictor("tent", AugBnConfig())


def test_prior_histogram_and_entropy_stats(model, data):
    rep = evaluate(model, data, [None], "augbn-ops")
    hist = rep.prior_histogram
    assert sum(n for n, _ in hist.values()) == len(data)
    assert all(0 <= k <= n for n, k in hist.values())
    assert set(hist) <= set(AugBnConfig().priors)
    good, bad = rep.entropy_stats
    for value in (good, bad):
        assert math.isnan(value) or 0 <= value <= math.log(4)


def calibrated_records(n=2000, seed=0):
    """A predictor whose confidence equals its accuracy: P(correct | entropy) falls with entropy."""
    rng = np.random.default_rng(seed)
    ent = rng.uniform(0, math.log(4), n)
    p_correct = 1 - 0.75 * ent / math.log(4)
    ok = rng.random(n) < p_correct
    return [Record(CLEAN, i, 0, 0 if good else 1, float(e), None) for i, (e, good) in enumerate(zip(ent, ok))]


def test_entropy_histogram_is_monotone_for_calibrated_predictor():
    hist = entropy_histogram(calibrated_records(), 5, 4)
    accs = [b.accuracy for b in hist]
    assert len(hist) == 5
    assert all(b < a for a, b in zip(accs, accs[1:]))


def test_entropy_histogram_contracts():
    recs = calibrated_records(300, 1)
    (single,) = entropy_histogram(recs, 1, 4)
    assert single.count == 300 and single.accuracy == sum(r.correct for r in recs) / 300
    low = [Record(CLEAN, i, 0, 0, 0.01, None) for i in range(150)]
    hist = entropy_histogram(low, 10, 4)
    assert len(hist) == 1 and hist[0].low == 0.0  # empty bins are absent, not zero
    with pytest.raises(ConfigError):
        entropy_histogram(recs[:99], 4, 4)
    assert entropy_csv(hist).splitlines()[0] == "entropy_low,entropy_high,count,correct,accuracy"


def test_bench_latency_table(model):
    image = synthetic_dataset(1, 1, image_size=16)[0].image
    table = bench_latency(model, image, ["source", "augbn"], repetitions=10, warmup=1)
    assert set(table) == {"source", "augbn"}
    for lat in table.values():
        assert lat.reps == 10 and lat.mean_ms > 0 and lat.p95_ms > 0
    assert latency_csv(table).startswith("mode,mean_ms,p95_ms,reps\n")
    with pytest.raises(ConfigError):
        bench_latency(model, image, ["source"], repetitions=5)


def test_latency_bounds():
    ok = {"source": Latency(1.0, 1.0, 10), "augbn": Latency(4.4, 5, 10), "augbn-ops": Latency(30, 31, 10)}
    assert latency_bound_violations(ok) == []
    slow = {"source": Latency(1.0, 1.0, 10), "augbn": Latency(4.6, 5, 10), "augbn-ops": Latency(40, 41, 10)}
    assert len(latency_bound_violations(slow)) == 2


@pytest.fixture(scope="module")
def run():
    return RunConfig(arch="tiny-cnn", corruptions=("contrast",), severity=4)


def test_lambda_sweep_collapse(model, data, run):
    rows = ablation_sweep(model, data, "lambda", [0.0, 1.0], run)
    assert [r.value for r in rows] == ["source", "0.0", "1.0"]
    src, _, one = rows
    assert one.report.counts == src.report.counts
    assert [r.class_id for r in one.report.records] == [r.class_id for r in src.report.records]


def test_leave_one_out_rows(model, data, run):
    rows = ablation_sweep(model, data[:4], "loo-augment", None, run, include_source=False)
    assert len(rows) == 5 and sorted(r.value for r in rows) == sorted(run.pool)
    with pytest.raises(ConfigError):
        ablation_sweep(model, data, "loo-augment", ["warp"], run)


def test_bn_mask_sweep_has_two_staircases(data, run):
    resnet = build_reference_model("resnet-mini", 4, seed=0)
    rows = ablation_sweep(resnet, data[:2], "bn-mask", None, run, include_source=False)
    series = {r.series for r in rows}
    assert series - {"endpoint"} == {"source-prefix", "augbn-prefix"}
    assert {r.value for r in rows if r.series == "endpoint"} == {"SSSS", "AAAA"}
    text = sweep_csv(rows, run)
    assert text.startswith("# ") and text.count("# fingerprint = ") == 1
    assert "axis,value,series,mode,corruption,severity,correct,total,accuracy" in text


def test_sweep_rejects_unknown_axis(model, data, run):
    with pytest.raises(ConfigError):
        ablation_sweep(model, data, "depth", None, run)
