"""Network graphs, reference architectures and the mode-switched forward pass.

A graph is a flat, ordered list of layers. Residual blocks are delimited by a
``res_begin`` layer, which pushes the current activation, and a ``res_end``
layer, which pops it (through a 1x1 projection when shapes change) and adds it.

Every batch-norm layer carries a mask entry: ``"source"`` layers always use the
stored running statistics, ``"augbn"`` layers follow the inference mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

from augbn.errors import ConfigError, ShapeError
from augbn.normalization import (
    DEFAULT_EPSILON,
    AugWeights,
    BnParams,
    _normalize,
    augbn_multiprior_forward,
    bn_forward,
)
from augbn.tensor import DTYPE, ChannelStats, _avg_pool2d, _conv2d, _pool_windows, as_tensor, channel_moments

LAYER_KINDS = ("conv", "bn", "relu", "avgpool", "maxpool", "gap", "flatten", "linear", "res_begin", "res_end")
ARCHS = ("tiny-cnn", "resnet-mini")
RESNET_MINI_WIDTHS = (16, 32, 64, 128)
TINY_CNN_WIDTHS = (16, 32, 64)
SOURCE, AUGBN = "source", "augbn"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    hp: Mapping[str, int | float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "hp", MappingProxyType(dict(self.hp)))

    @property
    def has_projection(self) -> bool:
        return self.kind == "res_end" and (self.hp["in"] != self.hp["out"] or self.hp["stride"] != 1)

    def param_names(self) -> list[str]:
        if self.kind in ("conv", "linear") or self.has_projection:
            return [f"{self.name}.weight", f"{self.name}.bias"]
        if self.kind == "bn":
            return [f"{self.name}.gamma", f"{self.name}.beta"]
        return []

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        hp = self.hp
        if self.kind == "conv":
            return {f"{self.name}.weight": (hp["out"], hp["in"], hp["k"], hp["k"]), f"{self.name}.bias": (hp["out"],)}
        if self.kind == "linear":
            return {f"{self.name}.weight": (hp["out"], hp["in"]), f"{self.name}.bias": (hp["out"],)}
        if self.has_projection:
            return {f"{self.name}.weight": (hp["out"], hp["in"], 1, 1), f"{self.name}.bias": (hp["out"],)}
        if self.kind == "bn":
            return {f"{self.name}.gamma": (hp["channels"],), f"{self.name}.beta": (hp["channels"],)}
        return {}


# Inference modes ---------------------------------------------------------


@dataclass(frozen=True)
class Source:
    """Every batch-norm layer uses stored running statistics."""


@dataclass(frozen=True)
class PTN:
    """AugBN-masked layers normalize with the statistics of the current batch alone."""


@dataclass(frozen=True)
class FixedPrior:
    """AugBN with one prior; the batch is the original image followed by its augments."""

    lam: float
    std_blend: bool = False
    epsilon: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"prior must lie in [0, 1], got {self.lam}")


@dataclass(frozen=True)
class MultiPrior:
    """AugBN with one replica of the (n+1)-row group per prior, stacked contiguously."""

    priors: tuple[float, ...]
    std_blend: bool = False
    epsilon: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "priors", tuple(float(p) for p in self.priors))
        if not self.priors:
            raise ConfigError("MultiPrior needs at least one prior")
        if any(not 0.0 <= p <= 1.0 for p in self.priors):
            raise ConfigError(f"priors must lie in [0, 1], got {self.priors}")


BnMode = Source | PTN | FixedPrior | MultiPrior


# Graph -------------------------------------------------------------------


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=DTYPE, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ModelGraph:
    arch: str
    layers: tuple[LayerSpec, ...]
    params: Mapping[str, np.ndarray]
    bn_stats: Mapping[str, ChannelStats]
    bn_mask: Mapping[str, str]
    class_count: int
    input_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "params", MappingProxyType({k: _frozen(v) for k, v in self.params.items()}))
        stats = {k: ChannelStats(_frozen(s.mean), _frozen(s.variance)) for k, s in self.bn_stats.items()}
        object.__setattr__(self, "bn_stats", MappingProxyType(stats))
        object.__setattr__(self, "bn_mask", MappingProxyType(dict(self.bn_mask)))
        validate_graph(self)

    def bn_names(self) -> list[str]:
        return [layer.name for layer in self.layers if layer.kind == "bn"]

    def bn_groups(self) -> list[list[str]]:
        """BN layer names grouped by block group, in network order."""
        groups: dict[str, list[str]] = {}
        for name in self.bn_names():
            groups.setdefault(self._group_key(name), []).append(name)
        return list(groups.values())

    def _group_key(self, name: str) -> str:
        if self.arch == "resnet-mini":
            # The head BN closes the last group.
            return name.split("b")[0] if name.startswith("g") else f"g{len(RESNET_MINI_WIDTHS)}"
        return name.split(".")[0]

    def bn_params(self, name: str) -> BnParams:
        layer = self.layer(name)
        return BnParams(self.params[f"{name}.gamma"], self.params[f"{name}.beta"], float(layer.hp["eps"]))

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def augbn_count(self) -> int:
        return sum(1 for v in self.bn_mask.values() if v == AUGBN)


def validate_graph(model: ModelGraph) -> None:
    """Check channel flow, parameter shapes and BN bookkeeping."""
    names = [layer.name for layer in model.layers]
    if len(set(names)) != len(names):
        raise ShapeError("layer names must be unique")
    channels = model.input_channels
    flat = False
    stack: list[int] = []
    for layer in model.layers:
        hp = layer.hp
        for pname, shape in layer.param_shapes().items():
            if pname not in model.params:
                raise ShapeError(f"missing parameter {pname}")
            if tuple(model.params[pname].shape) != shape:
                raise ShapeError(f"{pname}: expected shape {shape}, got {model.params[pname].shape}")
        if layer.kind in ("conv", "bn", "linear", "res_end"):
            expected = hp["out"] if layer.kind == "res_end" else hp.get("in", hp.get("channels"))
            if expected != channels:
                raise ShapeError(f"{layer.name}: expects {expected} channels, receives {channels}")
        if layer.kind in ("conv", "bn", "avgpool", "maxpool", "gap", "res_begin", "res_end") and flat:
            raise ShapeError(f"{layer.name}: spatial layer after flatten")
        if layer.kind == "linear" and not flat:
            raise ShapeError(f"{layer.name}: linear layer needs a flattened input")
        if layer.kind == "bn":
            stats = model.bn_stats.get(layer.name)
            if stats is None or stats.channels != channels:
                raise ShapeError(f"{layer.name}: running stats missing or wrong size")
            if model.bn_mask.get(layer.name) not in (SOURCE, AUGBN):
                raise ShapeError(f"{layer.name}: mask entry must be 'source' or 'augbn'")
        if layer.kind in ("conv", "linear"):
            channels = hp["out"]
        elif layer.kind == "flatten":
            flat = True
        elif layer.kind == "res_begin":
            stack.append(channels)
        elif layer.kind == "res_end":
            if not stack:
                raise ShapeError(f"{layer.name}: res_end without res_begin")
            skip = stack.pop()
            if skip != hp["in"]:
                raise ShapeError(f"{layer.name}: skip carries {skip} channels, block input was {hp['in']}")
            channels = hp["out"]
    if stack:
        raise ShapeError("unterminated residual block")
    if not flat or channels != model.class_count:
        raise ShapeError(f"graph must end in a flattened {model.class_count}-way output, got {channels}")
    extra = set(model.bn_mask) - set(model.bn_names())
    if extra:
        raise ShapeError(f"mask names unknown BN layers: {sorted(extra)}")


# Reference architectures ---------------------------------------------------


def _conv(name, cin, cout, k=3, stride=1, pad=None):
    return LayerSpec("conv", name, {"in": cin, "out": cout, "k": k, "stride": stride, "pad": k // 2 if pad is None else pad})


def _bn(name, c):
    return LayerSpec("bn", name, {"channels": c, "eps": DEFAULT_EPSILON})


def _tiny_cnn_layers(in_ch: int, classes: int) -> list[LayerSpec]:
    layers, c = [], in_ch
    for i, (width, stride) in enumerate(zip(TINY_CNN_WIDTHS, (1, 2, 2)), start=1):
        layers += [_conv(f"c{i}.conv", c, width, stride=stride), _bn(f"c{i}.bn", width), LayerSpec("relu", f"c{i}.relu")]
        c = width
    layers += [LayerSpec("gap", "gap"), LayerSpec("flatten", "flatten"), LayerSpec("linear", "fc", {"in": c, "out": classes})]
    return layers


def _resnet_mini_layers(in_ch: int, classes: int, blocks_per_group: int = 2) -> list[LayerSpec]:
    c = RESNET_MINI_WIDTHS[0]
    layers = [_conv("stem", in_ch, c)]
    for g, width in enumerate(RESNET_MINI_WIDTHS, start=1):
        for b in range(blocks_per_group):
            stride = 2 if (g > 1 and b == 0) else 1
            p = f"g{g}b{b}"
            layers += [
                LayerSpec("res_begin", f"{p}.in"),
                _bn(f"{p}.bn1", c),
                LayerSpec("relu", f"{p}.relu1"),
                _conv(f"{p}.conv1", c, width, stride=stride),
                _bn(f"{p}.bn2", width),
                LayerSpec("relu", f"{p}.relu2"),
                _conv(f"{p}.conv2", width, width),
                LayerSpec("res_end", f"{p}.add", {"in": c, "out": width, "stride": stride}),
            ]
            c = width
    layers += [
        _bn("head.bn", c),
        LayerSpec("relu", "head.relu"),
        LayerSpec("gap", "head.gap"),
        LayerSpec("flatten", "head.flatten"),
        LayerSpec("linear", "head.fc", {"in": c, "out": classes}),
    ]
    return layers


def init_params(layers: Iterable[LayerSpec], rng: np.random.Generator) -> tuple[dict, dict]:
    params: dict[str, np.ndarray] = {}
    stats: dict[str, ChannelStats] = {}
    for layer in layers:
        shapes = layer.param_shapes()
        if layer.kind == "conv" or layer.has_projection:
            w_name, b_name = layer.param_names()
            wshape = shapes[w_name]
            fan_in = wshape[1] * wshape[2] * wshape[3]
            params[w_name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), wshape).astype(DTYPE)
            params[b_name] = np.zeros(shapes[b_name], DTYPE)
        elif layer.kind == "linear":
            w_name, b_name = layer.param_names()
            # Small head keeps initial logits near uniform.
            params[w_name] = rng.normal(0.0, 0.1 / np.sqrt(layer.hp["in"]), shapes[w_name]).astype(DTYPE)
            params[b_name] = np.zeros(shapes[b_name], DTYPE)
        elif layer.kind == "bn":
            c = layer.hp["channels"]
            params[f"{layer.name}.gamma"] = np.ones(c, DTYPE)
            params[f"{layer.name}.beta"] = np.zeros(c, DTYPE)
            stats[layer.name] = ChannelStats(np.zeros(c, DTYPE), np.ones(c, DTYPE))
    return params, stats


def build_reference_model(arch: str, class_count: int, seed: int = 0, input_channels: int = 3) -> ModelGraph:
    """Deterministic He-initialized reference network with all BN layers in source mode.

    ``tiny-cnn``: three conv-BN-ReLU stages (16, 32, 64 channels), global pooling, linear head.
    ``resnet-mini``: stem conv, four groups of two pre-activation residual blocks with
    widths (16, 32, 64, 128), final BN-ReLU, global pooling, linear head.
    """
    if class_count < 2:
        raise ConfigError("class_count must be >= 2")
    if arch == "tiny-cnn":
        layers = _tiny_cnn_layers(input_channels, class_count)
    elif arch == "resnet-mini":
        layers = _resnet_mini_layers(input_channels, class_count)
    else:
        raise ConfigError(f"unknown architecture {arch!r}; expected one of {ARCHS}")
    params, stats = init_params(layers, np.random.default_rng(seed))
    mask = {layer.name: SOURCE for layer in layers if layer.kind == "bn"}
    return ModelGraph(arch, tuple(layers), params, stats, mask, class_count, input_channels)


# Masks ----------------------------------------------------------------------


def _flag(v) -> str:
    if isinstance(v, str):
        key = v.strip().lower()
        if key in ("a", "augbn", "1", "true"):
            return AUGBN
        if key in ("s", "source", "0", "false"):
            return SOURCE
        raise ConfigError(f"cannot read mask flag {v!r}")
    return AUGBN if v else SOURCE


def set_bn_mode_mask(model: ModelGraph, mask) -> ModelGraph:
    """Return a copy of ``model`` with an updated BN mode mask.

    ``mask`` may be:
      * ``"all"`` / ``"none"`` to switch every BN layer to AugBN / source;
      * a per-group pattern such as ``"ASSS"`` or ``[True, False, False, False]``;
      * a mapping from BN layer name to ``"augbn"``/``"source"`` (partial update).
    """
    names = model.bn_names()
    current = dict(model.bn_mask)
    if isinstance(mask, Mapping):
        for name, value in mask.items():
            if name not in current:
                raise ConfigError(f"unknown BN layer {name!r}")
            current[name] = _flag(value)
    elif isinstance(mask, str) and mask.lower() in ("all", "augbn", "none", "source"):
        value = AUGBN if mask.lower() in ("all", "augbn") else SOURCE
        current = {n: value for n in names}
    else:
        flags = list(mask)
        groups = model.bn_groups()
        if len(flags) != len(groups):
            raise ConfigError(f"pattern has {len(flags)} entries but the model has {len(groups)} BN groups")
        for group, flag in zip(groups, flags):
            for name in group:
                current[name] = _flag(flag)
    return replace(model, bn_mask=current)


def staircase_masks(group_count: int) -> list[tuple[str, str]]:
    """Layer-wise ablation masks: (series, pattern) pairs.

    Series ``source-prefix`` switches the first k groups back to source BN;
    ``augbn-prefix`` uses AugBN only in the first k groups. Both end points
    (all source, all AugBN) are included once under series ``endpoint``.
    """
    out = [("endpoint", "S" * group_count)]
    for k in range(1, group_count):
        out.append(("source-prefix", "S" * k + "A" * (group_count - k)))
    for k in range(1, group_count):
        out.append(("augbn-prefix", "A" * k + "S" * (group_count - k)))
    out.append(("endpoint", "A" * group_count))
    return out


# Forward ----------------------------------------------------------------------


def _check_layout(batch: np.ndarray, mode) -> None:
    n = batch.shape[0]
    if isinstance(mode, MultiPrior) and n % len(mode.priors):
        raise ShapeError(f"{n} rows cannot be split into {len(mode.priors)} prior replicas")


def _bn_layer(model: ModelGraph, layer: LayerSpec, x: np.ndarray, mode) -> np.ndarray:
    name = layer.name
    p = model.params
    params = BnParams(p[f"{name}.gamma"], p[f"{name}.beta"], float(layer.hp["eps"]))
    stats = model.bn_stats[name]
    if isinstance(mode, Source) or model.bn_mask[name] == SOURCE:
        return bn_forward(x, stats, params)
    if isinstance(mode, PTN):
        own = channel_moments(x)
        return _normalize(x, own.mean, own.variance, params.gamma, params.beta, params.epsilon)
    if mode.epsilon is not None:
        params = BnParams(params.gamma, params.beta, mode.epsilon)
    if isinstance(mode, FixedPrior):
        return augbn_multiprior_forward(x, stats, params, [mode.lam], AugWeights.default(x.shape[0] - 1), mode.std_blend)
    if isinstance(mode, MultiPrior):
        return augbn_multiprior_forward(x, stats, params, mode.priors, None, mode.std_blend)
    raise ConfigError(f"unknown BN mode {mode!r}")


def forward(model: ModelGraph, batch, mode=Source(), capture: dict | None = None) -> np.ndarray:
    """Run the network on ``batch`` and return logits, one row per input row.

    Args:
        model: the network.
        batch: (N, C, H, W) inputs. FixedPrior expects the original image first, then
            its augments; MultiPrior expects ``len(priors)`` replicas of that group.
        mode: one of Source(), PTN(), FixedPrior(lam), MultiPrior(priors).
        capture: optional dict filled with each layer's output, keyed by layer name.
    """
    x = as_tensor(batch, 4)
    if x.shape[1] != model.input_channels:
        raise ShapeError(f"model expects {model.input_channels} input channels, got {x.shape[1]}")
    _check_layout(x, mode)
    p = model.params
    skips: list[np.ndarray] = []
    for layer in model.layers:
        kind, hp = layer.kind, layer.hp
        if kind == "conv":
            x = _conv2d(x, p[f"{layer.name}.weight"], p[f"{layer.name}.bias"], hp["stride"], hp["pad"])
        elif kind == "bn":
            x = _bn_layer(model, layer, x, mode)
        elif kind == "relu":
            x = np.maximum(x, DTYPE(0))
        elif kind == "avgpool":
            x = _avg_pool2d(x, hp["window"], hp["stride"]).astype(DTYPE)
        elif kind == "maxpool":
            x = np.ascontiguousarray(_pool_windows(x, hp["window"], hp["stride"]).max(axis=(4, 5)))
        elif kind == "gap":
            x = x.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(DTYPE)
        elif kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        elif kind == "linear":
            x = x @ p[f"{layer.name}.weight"].T + p[f"{layer.name}.bias"]
        elif kind == "res_begin":
            skips.append(x)
        elif kind == "res_end":
            skip = skips.pop()
            if layer.has_projection:
                skip = _conv2d(skip, p[f"{layer.name}.weight"], p[f"{layer.name}.bias"], hp["stride"], 0)
            x = x + skip
        if capture is not None:
            capture[layer.name] = x
    return x


def layer_names(model: ModelGraph, kinds: Sequence[str] | None = None) -> list[str]:
    return [layer.name for layer in model.layers if kinds is None or layer.kind in kinds]
