import numpy as np
import pytest

from augbn.errors import ConfigError, ShapeError
from augbn.model import (
    PTN,
    FixedPrior,
    LayerSpec,
    ModelGraph,
    MultiPrior,
    Source,
    build_reference_model,
    forward,
    layer_names,
    set_bn_mode_mask,
    staircase_masks,
)
from augbn.tensor import ChannelStats


@pytest.fixture(scope="module")
def resnet():
    return build_reference_model("resnet-mini", 10, seed=3)


@pytest.fixture(scope="module")
def tiny():
    return build_reference_model("tiny-cnn", 4, seed=1)


def images(n, seed=0, size=16):
    return np.random.default_rng(seed).random((n, 3, size, size)).astype(np.float32)


def with_random_stats(model, seed=0):
    """Give every BN layer non-trivial running stats, as a trained model would have."""
    rng = np.random.default_rng(seed)
    stats = {
        k: ChannelStats(rng.normal(0, 0.5, s.channels).astype(np.float32), rng.uniform(0.5, 2, s.channels).astype(np.float32))
        for k, s in model.bn_stats.items()
    }
    return ModelGraph(model.arch, model.layers, model.params, stats, model.bn_mask, model.class_count)


def test_build_is_deterministic(resnet):
    again = build_reference_model("resnet-mini", 10, seed=3)
    for k, v in resnet.params.items():
        assert v.tobytes() == again.params[k].tobytes()
    other = build_reference_model("resnet-mini", 10, seed=4)
    assert other.params["stem.weight"].tobytes() != resnet.params["stem.weight"].tobytes()


def test_build_defaults(resnet):
    for s in resnet.bn_stats.values():
        assert np.all(s.mean == 0) and np.all(s.variance == 1)
    assert set(resnet.bn_mask.values()) == {"source"}
    with pytest.raises(ConfigError):
        build_reference_model("vgg", 10)
    with pytest.raises(ConfigError):
        build_reference_model("tiny-cnn", 1)


def test_resnet_mini_structure(resnet):
    groups = resnet.bn_groups()
    assert len(groups) == 4
    widths = []
    for g in range(1, 5):
        conv = [l for l in resnet.layers if l.kind == "conv" and l.name.startswith(f"g{g}b")]
        assert len([l for l in resnet.layers if l.kind == "res_begin" and l.name.startswith(f"g{g}b")]) == 2
        widths.append(conv[-1].hp["out"])
    assert widths == [16, 32, 64, 128]
    assert "head.bn" in groups[-1]


def test_forward_shape_and_finite(resnet, tiny):
    x = images(1, size=32)
    for m in (resnet, tiny):
        logits = forward(m, x)
        assert logits.shape == (1, m.class_count) and np.all(np.isfinite(logits))


def test_source_mode_rows_are_independent(resnet):
    x = images(4, 1)
    batch = forward(resnet, x, Source())
    rows = np.concatenate([forward(resnet, x[i : i + 1], Source()) for i in range(4)])
    np.testing.assert_allclose(batch, rows, atol=1e-6)


def test_forward_is_deterministic(resnet):
    m = set_bn_mode_mask(with_random_stats(resnet), "all")
    x = images(3, 2)
    for mode in (Source(), PTN(), FixedPrior(0.6)):
        assert forward(m, x, mode).tobytes() == forward(m, x, mode).tobytes()


def test_fixed_prior_one_collapses_to_source(resnet):
    m = set_bn_mode_mask(with_random_stats(resnet, 1), "all")
    x = images(3, 3)
    np.testing.assert_allclose(forward(m, x, FixedPrior(1.0))[0], forward(m, x[:1], Source())[0], atol=1e-5)


def test_ptn_single_row_equals_fixed_prior_zero_without_augments(resnet):
    m = set_bn_mode_mask(with_random_stats(resnet, 2), "all")
    x = images(1, 4)
    np.testing.assert_allclose(forward(m, x, PTN()), forward(m, x, FixedPrior(0.0)), atol=1e-6)


def test_multiprior_matches_fixed_prior_per_replica(tiny):
    m = set_bn_mode_mask(with_random_stats(tiny, 3), "all")
    group = images(3, 5)
    priors = (0.0, 0.5, 1.0)
    out = forward(m, np.tile(group, (3, 1, 1, 1)), MultiPrior(priors))
    for p, lam in enumerate(priors):
        np.testing.assert_allclose(out[3 * p : 3 * p + 3], forward(m, group, FixedPrior(lam)), atol=1e-5)
    with pytest.raises(ShapeError):
        forward(m, images(4), MultiPrior(priors))


def test_all_source_mask_disables_adaptation(resnet):
    m = with_random_stats(resnet, 4)
    x = images(3, 6)
    np.testing.assert_allclose(forward(m, x, FixedPrior(0.5))[0], forward(m, x[:1])[0], atol=1e-5)


def test_mask_patterns(resnet):
    first = set_bn_mode_mask(resnet, "ASSS")
    groups = resnet.bn_groups()
    assert all(first.bn_mask[n] == "augbn" for n in groups[0])
    assert all(first.bn_mask[n] == "source" for g in groups[1:] for n in g)
    assert set_bn_mode_mask(resnet, "all").augbn_count() == len(resnet.bn_names())
    partial = set_bn_mode_mask(resnet, {"g1b0.bn1": "augbn"})
    assert partial.augbn_count() == 1
    assert resnet.augbn_count() == 0  # the original graph is untouched
    with pytest.raises(ConfigError):
        set_bn_mode_mask(resnet, {"nope": "augbn"})
    with pytest.raises(ConfigError):
        set_bn_mode_mask(resnet, "AS")


def test_toggling_a_layer_leaves_upstream_untouched(resnet):
    base = with_random_stats(resnet, 5)
    a = set_bn_mode_mask(base, "none")
    b = set_bn_mode_mask(base, {"g3b0.bn1": "augbn"})
    x = images(3, 7)
    cap_a, cap_b = {}, {}
    forward(a, x, FixedPrior(0.3), capture=cap_a)
    forward(b, x, FixedPrior(0.3), capture=cap_b)
    names = layer_names(resnet)
    cut = names.index("g3b0.bn1")
    for name in names[:cut]:
        assert cap_a[name].tobytes() == cap_b[name].tobytes(), name
    assert not np.array_equal(cap_a["g3b0.bn1"], cap_b["g3b0.bn1"])


def test_staircase_masks_layout():
    masks = staircase_masks(4)
    series = {s for s, _ in masks}
    assert series == {"endpoint", "source-prefix", "augbn-prefix"}
    assert [p for s, p in masks if s == "augbn-prefix"] == ["ASSS", "AASS", "AAAS"]
    assert [p for s, p in masks if s == "source-prefix"] == ["SAAA", "SSAA", "SSSA"]


def test_model_arrays_are_read_only(resnet):
    with pytest.raises(ValueError):
        resnet.params["stem.weight"][0, 0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        resnet.bn_stats["head.bn"].mean[0] = 1.0
    with pytest.raises(TypeError):
        resnet.params["stem.weight"] = None


def test_graph_validation_catches_channel_mismatch(tiny):
    layers = list(tiny.layers)
    bad = LayerSpec("bn", "c2.bn", {"channels": 31, "eps": 1e-5})
    layers[layers.index(tiny.layer("c2.bn"))] = bad
    with pytest.raises(ShapeError):
        ModelGraph(tiny.arch, tuple(layers), tiny.params, tiny.bn_stats, tiny.bn_mask, tiny.class_count)


def test_wrong_input_channels(tiny):
    with pytest.raises(ShapeError):
        forward(tiny, np.zeros((1, 1, 8, 8)))
