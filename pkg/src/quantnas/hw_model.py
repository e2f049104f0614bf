"""FPGA cost model for tiled convolution engines.

Each layer is served by one quantized computing engine (QCE): an array of
``tn * tm`` fixed-point multipliers, an adder tree, a truncator that
re-quantizes the accumulated sum to the layer's outgoing activation format,
and accumulation registers.  LUT usage follows a four-coefficient linear
model loadable from a JSON cost library; latency is the exact tile-iteration
count.  Contiguous layers grouped into a partition run pipelined (LUTs add,
latency is the bottleneck stage); partitions time-share the fabric (LUTs max,
latencies add).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from fractions import Fraction

import numpy as np

from .quantizer import FixedPointFormat, on_grid, quantize_exact
from .space import ChildNetwork, LayerArch, LayerQuant


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def ceil_log2(k: int) -> int:
    if k < 1:
        raise ValueError("ceil_log2 needs k >= 1")
    return (k - 1).bit_length()


@dataclass(frozen=True)
class TileConfig:
    """Channel parallelism of one engine: tn output channels x tm input channels."""

    tn: int
    tm: int

    def __post_init__(self):
        if self.tn < 1 or self.tm < 1:
            raise ValueError("tile sizes must be >= 1")


@dataclass(frozen=True)
class QceCostLibrary:
    """LUTs per multiplier bit-product, adder output bit, truncator output bit, and per-engine overhead."""

    mult_coeff: float = 0.6
    adder_coeff: float = 1.0
    trunc_coeff: float = 2.0
    fixed_overhead: float = 300.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value >= 0):
                raise ValueError(f"cost coefficient {name!r} must be finite and >= 0, got {value!r}")

    @classmethod
    def from_json(cls, obj: dict) -> "QceCostLibrary":
        if not isinstance(obj, dict):
            raise ValueError("cost library JSON must be an object")
        unknown = set(obj) - {"mult_coeff", "adder_coeff", "trunc_coeff", "fixed_overhead"}
        if unknown:
            raise ValueError(f"cost library holds unknown keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def from_file(cls, path) -> "QceCostLibrary":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def to_json(self) -> dict:
        return asdict(self)


DEFAULT_COST_LIBRARY = QceCostLibrary()


@dataclass(frozen=True)
class LayerCost:
    lut: int
    lat: int


@dataclass(frozen=True)
class LayerGeometry:
    """Everything one engine's cost depends on: shape, filter, and the three formats."""

    m: int
    n: int
    r: int
    c: int
    fh: int
    fw: int
    ai_in: int  # incoming activation integer bits
    af_in: int  # incoming activation fractional bits
    ai: int
    af: int
    wi: int
    wf: int


def layer_geometries(network: ChildNetwork) -> tuple[LayerGeometry, ...]:
    """Flatten a network into per-layer cost inputs, chaining activation formats."""
    geoms = []
    ai_in, af_in = network.input.ai0, network.input.af0
    for layer, shape in zip(network.layers, network.shapes):
        a, q = layer.arch, layer.quant
        geoms.append(
            LayerGeometry(
                m=shape.m, n=shape.n, r=shape.r, c=shape.c, fh=a.fh, fw=a.fw,
                ai_in=ai_in, af_in=af_in, ai=q.ai, af=q.af, wi=q.wi, wf=q.wf,
            )
        )
        ai_in, af_in = q.ai, q.af
    return tuple(geoms)


def qce_lut(tn: int, tm: int, ai_in: int, af_in: int, ai_out: int, af_out: int,
            wi: int, wf: int, lib: QceCostLibrary = DEFAULT_COST_LIBRARY) -> int:
    """LUT count of one engine; monotone nondecreasing in tile sizes and all bit widths.

    The multiplier array holds tn*tm cells of (incoming activation bits) x
    (weight bits); the adder tree holds tn*tm - 1 adders at accumulator width
    (operand bits plus log2 of the tree fan-in); the truncator is sized by the
    outgoing activation width.  Rounds half up once, at the final aggregation.
    """
    acts = ai_in + af_in
    wbits = wi + wf
    cells = tn * tm
    acc_bits = acts + wbits + ceil_log2(cells)
    total = (
        lib.mult_coeff * cells * (acts * wbits)
        + lib.adder_coeff * (cells - 1) * acc_bits
        + lib.trunc_coeff * (ai_out + af_out)
        + lib.fixed_overhead
    )
    return math.floor(total + 0.5)


def lut_cost(arch: LayerArch, quant: LayerQuant, prev_act_format: tuple[int, int],
             tile: TileConfig, lib: QceCostLibrary = DEFAULT_COST_LIBRARY,
             input_channels: int | None = None) -> int:
    """Engine LUTs for one layer.  Validates the tile against the layer extents."""
    if not 1 <= tile.tn <= arch.n_filters:
        raise ValueError(f"tile tn={tile.tn} outside [1, {arch.n_filters}]")
    if input_channels is not None and not 1 <= tile.tm <= input_channels:
        raise ValueError(f"tile tm={tile.tm} outside [1, {input_channels}]")
    ai_in, af_in = prev_act_format
    return qce_lut(tile.tn, tile.tm, ai_in, af_in, quant.ai, quant.af, quant.wi, quant.wf, lib)


def latency_cycles(m: int, n: int, r: int, c: int, fh: int, fw: int, tile: TileConfig) -> int:
    """ceil(m/tm) * ceil(n/tn) * r * c * fh * fw, in exact integer arithmetic."""
    return ceil_div(m, tile.tm) * ceil_div(n, tile.tn) * r * c * fh * fw


def partition_cost(costs) -> LayerCost:
    """Pipelined group of layers: LUTs add, the slowest stage sets the latency."""
    costs = list(costs)
    if not costs:
        raise ValueError("partition_cost needs at least one layer")
    return LayerCost(lut=sum(c.lut for c in costs), lat=max(c.lat for c in costs))


def design_cost(partitions) -> LayerCost:
    """Partitions iterate on the same fabric: LUTs max, latencies add."""
    partitions = list(partitions)
    if not partitions:
        raise ValueError("design_cost needs at least one partition")
    return LayerCost(lut=max(p.lut for p in partitions), lat=sum(p.lat for p in partitions))


def throughput_fps(total_cycles: int, clock_hz: float) -> float:
    if total_cycles < 1:
        raise ValueError("total_cycles must be >= 1")
    return clock_hz / total_cycles


# --- tiling enumeration -----------------------------------------------------

_POW2 = 1 << np.arange(63, dtype=np.int64)


def tiling_table(geom: LayerGeometry, lib: QceCostLibrary = DEFAULT_COST_LIBRARY):
    """Cost of every (tn, tm) tiling, ordered lexicographically by (tn, tm).

    Returns (tns, tms, luts, lats) as int64 arrays of length geom.n * geom.m.
    """
    tn = np.repeat(np.arange(1, geom.n + 1, dtype=np.int64), geom.m)
    tm = np.tile(np.arange(1, geom.m + 1, dtype=np.int64), geom.n)
    cells = tn * tm
    acts = geom.ai_in + geom.af_in
    wbits = geom.wi + geom.wf
    acc_bits = acts + wbits + np.searchsorted(_POW2, cells, side="left")
    total = (
        lib.mult_coeff * cells * (acts * wbits)
        + lib.adder_coeff * (cells - 1) * acc_bits
        + lib.trunc_coeff * (geom.ai + geom.af)
        + lib.fixed_overhead
    )
    luts = np.floor(total + 0.5).astype(np.int64)
    spatial = geom.r * geom.c * geom.fh * geom.fw
    lats = (-(-geom.m // tm)) * (-(-geom.n // tn)) * spatial
    return tn, tm, luts, lats


@dataclass(frozen=True)
class TilingFrontier:
    """Non-dominated (lut, lat) tilings of one layer, luts ascending / lats descending."""

    luts: np.ndarray
    lats: np.ndarray
    tns: np.ndarray
    tms: np.ndarray

    def __len__(self) -> int:
        return len(self.luts)


def tiling_frontier(geom: LayerGeometry, lib: QceCostLibrary = DEFAULT_COST_LIBRARY) -> TilingFrontier:
    """2-D Pareto reduction of tiling_table.

    Ties on (lut, lat) keep the lexicographically smallest (tn, tm).
    """
    tn, tm, luts, lats = tiling_table(geom, lib)
    order = np.lexsort((tm, tn, lats, luts))
    luts, lats, tn, tm = luts[order], lats[order], tn[order], tm[order]
    runmin = np.minimum.accumulate(lats)
    keep = np.empty(len(lats), dtype=bool)
    keep[0] = True
    keep[1:] = lats[1:] < runmin[:-1]
    return TilingFrontier(luts=luts[keep], lats=lats[keep], tns=tn[keep], tms=tm[keep])


# --- bit-exact datapath simulation ------------------------------------------

def qce_simulate(activations, weights, in_format: tuple[int, int],
                 weight_format: tuple[int, int], out_format: tuple[int, int],
                 accumulators=None) -> tuple[tuple[Fraction, ...], tuple[float, ...]]:
    """One accumulation step of the engine datapath, with no rounding inside.

    ``activations`` holds tm values on the unsigned ``in_format`` grid;
    ``weights`` holds tn rows of tm values on the signed ``weight_format``
    grid.  Multipliers and the adder tree are exact (operand alignment only
    widens words); the truncator re-quantizes each updated accumulator to the
    unsigned ``out_format``.  Returns (updated accumulators, truncated outputs).
    """
    act_fmt = FixedPointFormat(signed=False, int_bits=in_format[0], frac_bits=in_format[1])
    w_fmt = FixedPointFormat(signed=True, int_bits=weight_format[0], frac_bits=weight_format[1])
    out_fmt = FixedPointFormat(signed=False, int_bits=out_format[0], frac_bits=out_format[1])

    acts = [float(a) for a in activations]
    rows = [[float(w) for w in row] for row in weights]
    tm = len(acts)
    if tm < 1 or not rows:
        raise ValueError("need at least one activation and one weight row")
    if any(len(row) != tm for row in rows):
        raise ValueError("weight rows must match the activation tile width")
    for a in acts:
        if not on_grid(a, act_fmt):
            raise ValueError(f"activation {a!r} is off the {in_format} grid")
    for row in rows:
        for w in row:
            if not on_grid(w, w_fmt):
                raise ValueError(f"weight {w!r} is off the {weight_format} grid")

    tn = len(rows)
    if accumulators is None:
        acc = [Fraction(0)] * tn
    else:
        acc = [Fraction(a) for a in accumulators]
        if len(acc) != tn:
            raise ValueError("accumulator count must match the weight row count")

    exact_acts = [Fraction(a) for a in acts]
    new_acc = []
    outputs = []
    for j, row in enumerate(rows):
        dot = sum((Fraction(w) * a for w, a in zip(row, exact_acts)), Fraction(0))
        total = acc[j] + dot
        new_acc.append(total)
        outputs.append(float(quantize_exact(total, out_fmt)))
    return tuple(new_acc), tuple(outputs)
