"""Discrete architecture/quantization space: token codec and shape propagation.

A child network is a stack of convolution+pooling layers, each described by
six architecture values and four fixed-point bit-width values.  The controller
emits one categorical token per value, layer by layer, so a network with L
layers corresponds to exactly ``10 * L`` tokens.
"""

from __future__ import annotations

import operator
from dataclasses import dataclass, field

ARCH_KEYS = ("n", "fh", "fw", "sh", "sw", "ps")
QUANT_KEYS = ("ai", "af", "wi", "wf")
PARAM_KEYS = ARCH_KEYS + QUANT_KEYS
STEPS_PER_LAYER = len(PARAM_KEYS)


class DecodeError(ValueError):
    """A token sequence cannot be mapped into the configured space."""


class EncodeError(ValueError):
    """A network holds a value outside the configured space lists."""


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class LayerArch:
    """Convolution + pooling hyperparameters of one layer."""

    n_filters: int
    fh: int  # filter height
    fw: int  # filter width
    sh: int  # stride height
    sw: int  # stride width
    ps: int  # pooling size and stride

    def __post_init__(self):
        for key, value in zip(ARCH_KEYS, self.as_tuple()):
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"architecture field {key!r} must be a positive integer, got {value!r}")

    def as_tuple(self) -> tuple[int, ...]:
        return (self.n_filters, self.fh, self.fw, self.sh, self.sw, self.ps)


@dataclass(frozen=True)
class LayerQuant:
    """Per-layer fixed-point bit widths: activation and weight, integer/fractional."""

    ai: int
    af: int
    wi: int
    wf: int

    def __post_init__(self):
        for key, value in zip(QUANT_KEYS, self.as_tuple()):
            if not isinstance(value, int) or value < 0:
                raise ValueError(f"quantization field {key!r} must be a non-negative integer, got {value!r}")

    def as_tuple(self) -> tuple[int, ...]:
        return (self.ai, self.af, self.wi, self.wf)


@dataclass(frozen=True)
class NetworkInput:
    """Input tensor shape plus the fixed-point format its activations arrive in."""

    channels: int = 3
    rows: int = 32
    cols: int = 32
    ai0: int = 0
    af0: int = 8

    def __post_init__(self):
        if self.channels < 1 or self.rows < 1 or self.cols < 1:
            raise ValueError("input shape must be positive")
        if self.ai0 < 0 or self.af0 < 0:
            raise ValueError("input activation bits must be non-negative")


@dataclass(frozen=True)
class Layer:
    arch: LayerArch
    quant: LayerQuant


@dataclass(frozen=True)
class LayerShape:
    """Input extents seen by one layer (m channels, r rows, c cols) and its output channels n."""

    m: int
    r: int
    c: int
    n: int


@dataclass(frozen=True)
class SpaceConfig:
    """Allowed value lists per parameter, network depth, and input description.

    Defaults give the 1152-architecture / 784-quantization per-layer space used
    throughout the test suite.
    """

    n_filters: tuple[int, ...] = (24, 36, 48, 64)
    fh: tuple[int, ...] = (1, 3, 5, 7)
    fw: tuple[int, ...] = (1, 3, 5, 7)
    sh: tuple[int, ...] = (1, 2, 3)
    sw: tuple[int, ...] = (1, 2, 3)
    ps: tuple[int, ...] = (1, 2)
    ai: tuple[int, ...] = (0, 1, 2, 3)
    af: tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6)
    wi: tuple[int, ...] = (0, 1, 2, 3)
    wf: tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6)
    num_layers: int = 6
    input: NetworkInput = field(default_factory=NetworkInput)

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        for key in PARAM_KEYS:
            values = self.values("n_filters" if key == "n" else key)
            if len(values) == 0:
                raise ValueError(f"value list for {key!r} must be non-empty")
            floor = 1 if key in ARCH_KEYS else 0
            if any((not isinstance(v, int)) or v < floor for v in values):
                raise ValueError(f"value list for {key!r} holds out-of-range entries: {values!r}")

    def values(self, key: str) -> tuple[int, ...]:
        if key == "n":
            key = "n_filters"
        return getattr(self, key)

    def vocab_sizes(self) -> tuple[int, ...]:
        """Vocabulary length per token position within one layer."""
        return tuple(len(self.values(k)) for k in PARAM_KEYS)


@dataclass(frozen=True)
class ChildNetwork:
    """A decoded candidate: per-layer (arch, quant) records plus derived shapes."""

    layers: tuple[Layer, ...]
    input: NetworkInput
    shapes: tuple[LayerShape, ...]

    def __post_init__(self):
        if len(self.layers) != len(self.shapes) or not self.layers:
            raise ValueError("layers and shapes must be non-empty and aligned")

    @property
    def num_layers(self) -> int:
        return len(self.layers)


def infer_shapes(arches, input_spec: NetworkInput, pad_mode: str = "same") -> tuple[LayerShape, ...]:
    """Propagate feature-map extents through the stack.

    With "same" zero padding the convolution output is ceil(extent/stride);
    pooling then floor-divides by ps.  Extents are clamped to >= 1 so even
    degenerate stacks stay well-defined.
    """
    if pad_mode != "same":
        raise ValueError(f"unsupported pad_mode {pad_mode!r}; only 'same' is defined")
    m, r, c = input_spec.channels, input_spec.rows, input_spec.cols
    shapes = []
    for arch in arches:
        shapes.append(LayerShape(m=m, r=r, c=c, n=arch.n_filters))
        r = max(1, _ceil_div(r, arch.sh) // arch.ps)
        c = max(1, _ceil_div(c, arch.sw) // arch.ps)
        m = arch.n_filters
    return tuple(shapes)


def decode_actions(tokens, config: SpaceConfig) -> ChildNetwork:
    """Map a ``10 * L`` token sequence onto a ChildNetwork.

    Token order per layer is n, fh, fw, sh, sw, ps, ai, af, wi, wf.  Raises
    DecodeError naming the offending step on any length or range violation.
    """
    expected = STEPS_PER_LAYER * config.num_layers
    if len(tokens) != expected:
        raise DecodeError(f"expected {expected} tokens for {config.num_layers} layers, got {len(tokens)}")
    layers = []
    for li in range(config.num_layers):
        picked = {}
        for pi, key in enumerate(PARAM_KEYS):
            step = li * STEPS_PER_LAYER + pi
            choices = config.values(key)
            try:
                index = operator.index(tokens[step])
            except TypeError:
                raise DecodeError(
                    f"step {step} (layer {li + 1}, parameter {key!r}): "
                    f"token {tokens[step]!r} is not an integer index"
                ) from None
            if not 0 <= index < len(choices):
                raise DecodeError(
                    f"step {step} (layer {li + 1}, parameter {key!r}): index {index!r} "
                    f"outside vocabulary of size {len(choices)}"
                )
            picked[key] = choices[index]
        arch = LayerArch(picked["n"], picked["fh"], picked["fw"], picked["sh"], picked["sw"], picked["ps"])
        quant = LayerQuant(picked["ai"], picked["af"], picked["wi"], picked["wf"])
        layers.append(Layer(arch, quant))
    shapes = infer_shapes([l.arch for l in layers], config.input)
    return ChildNetwork(layers=tuple(layers), input=config.input, shapes=shapes)


def encode_network(network: ChildNetwork, config: SpaceConfig) -> list[int]:
    """Inverse of decode_actions; raises EncodeError on values absent from the lists."""
    if network.num_layers != config.num_layers:
        raise EncodeError(f"network has {network.num_layers} layers, space expects {config.num_layers}")
    tokens: list[int] = []
    for li, layer in enumerate(network.layers):
        values = layer.arch.as_tuple() + layer.quant.as_tuple()
        for key, value in zip(PARAM_KEYS, values):
            choices = config.values(key)
            try:
                tokens.append(choices.index(value))
            except ValueError:
                raise EncodeError(
                    f"layer {li + 1} parameter {key!r}: value {value} not in allowed list {choices}"
                ) from None
    return tokens


def space_size(config: SpaceConfig) -> tuple[int, int]:
    """Per-layer cardinality of the architecture space and of the quantization space."""
    arch = 1
    for key in ARCH_KEYS:
        arch *= len(config.values(key))
    quant = 1
    for key in QUANT_KEYS:
        quant *= len(config.values(key))
    return arch, quant


def param_count(network: ChildNetwork) -> int:
    """Trainable scalars over the convolutional stack: weights plus biases."""
    total = 0
    for layer, shape in zip(network.layers, network.shapes):
        a = layer.arch
        total += a.n_filters * shape.m * a.fh * a.fw + a.n_filters
    return total


def network_to_json(network: ChildNetwork) -> dict:
    """Serialize to the schema shared by the CLI, service, and episode logs."""
    return {
        "layers": [
            {
                "n": l.arch.n_filters,
                "fh": l.arch.fh,
                "fw": l.arch.fw,
                "sh": l.arch.sh,
                "sw": l.arch.sw,
                "ps": l.arch.ps,
                "ai": l.quant.ai,
                "af": l.quant.af,
                "wi": l.quant.wi,
                "wf": l.quant.wf,
            }
            for l in network.layers
        ],
        "input": {
            "channels": network.input.channels,
            "rows": network.input.rows,
            "cols": network.input.cols,
            "ai0": network.input.ai0,
            "af0": network.input.af0,
        },
    }


def network_from_json(obj: dict) -> ChildNetwork:
    """Parse and validate the network schema; rejects unknown keys."""
    if not isinstance(obj, dict):
        raise ValueError("network JSON must be an object")
    unknown = set(obj) - {"layers", "input"}
    if unknown:
        raise ValueError(f"network JSON holds unknown keys: {sorted(unknown)}")
    raw_layers = obj.get("layers")
    if not isinstance(raw_layers, list) or not raw_layers:
        raise ValueError("network JSON needs a non-empty 'layers' array")
    raw_input = obj.get("input", {})
    if not isinstance(raw_input, dict):
        raise ValueError("network 'input' must be an object")
    unknown = set(raw_input) - {"channels", "rows", "cols", "ai0", "af0"}
    if unknown:
        raise ValueError(f"network 'input' holds unknown keys: {sorted(unknown)}")
    input_spec = NetworkInput(**raw_input)
    layers = []
    for i, entry in enumerate(raw_layers):
        if not isinstance(entry, dict):
            raise ValueError(f"layer {i + 1} must be an object")
        unknown = set(entry) - set(PARAM_KEYS)
        if unknown:
            raise ValueError(f"layer {i + 1} holds unknown keys: {sorted(unknown)}")
        missing = set(PARAM_KEYS) - set(entry)
        if missing:
            raise ValueError(f"layer {i + 1} is missing keys: {sorted(missing)}")
        arch = LayerArch(entry["n"], entry["fh"], entry["fw"], entry["sh"], entry["sw"], entry["ps"])
        quant = LayerQuant(entry["ai"], entry["af"], entry["wi"], entry["wf"])
        layers.append(Layer(arch, quant))
    shapes = infer_shapes([l.arch for l in layers], input_spec)
    return ChildNetwork(layers=tuple(layers), input=input_spec, shapes=shapes)
