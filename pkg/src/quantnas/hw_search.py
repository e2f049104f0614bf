"""Feasibility search over layer partitionings and per-layer tilings.

A candidate implementation assigns every layer a tile (tn, tm) and groups
consecutive layers into partitions.  The search keeps, per depth, the Pareto
frontier over three objectives:

* ``open_luts``    - LUTs of the still-open last partition,
* ``total_cycles`` - overall design latency,
* ``closed_cycles``- summed latency of the sealed partitions (all but the last).

Extending a frontier solution by one layer happens in exactly two ways: the
layer joins the open partition (remaining LUT budget shrinks by what the open
partition already uses; the layer's latency must fit the time left after the
sealed partitions), or it opens a fresh partition (full LUT budget; its
latency must fit the time left after the whole current design).  Dominated
and duplicate states are discarded after every depth, which keeps the state
set small without losing any frontier point of the full exponential space.
A guarded brute-force enumerator over that full space serves as the oracle.
"""

from __future__ import annotations

import itertools
import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass

import numpy as np

from .hw_model import (
    DEFAULT_COST_LIBRARY,
    LayerCost,
    QceCostLibrary,
    TileConfig,
    design_cost,
    latency_cycles,
    layer_geometries,
    partition_cost,
    qce_lut,
    throughput_fps,
    tiling_frontier,
    tiling_table,
)
from .space import ChildNetwork


class SearchSpaceTooLarge(ValueError):
    """brute_force refused an instance above its candidate-count guard."""


@dataclass(frozen=True)
class Specification:
    """Design constraints: a LUT ceiling and a throughput floor at a given clock."""

    max_luts: int
    min_fps: float
    clock_hz: float = 100_000_000.0

    def __post_init__(self):
        if self.max_luts < 1:
            raise ValueError("max_luts must be >= 1")
        if not self.min_fps > 0:
            raise ValueError("min_fps must be > 0")
        if not self.clock_hz > 0:
            raise ValueError("clock_hz must be > 0")

    def cycle_budget(self) -> int:
        """Largest total cycle count that still meets the throughput floor."""
        return math.floor(self.clock_hz / self.min_fps)

    @classmethod
    def from_json(cls, obj: dict) -> "Specification":
        if not isinstance(obj, dict):
            raise ValueError("specification JSON must be an object")
        unknown = set(obj) - {"rL", "rT", "clock_hz"}
        if unknown:
            raise ValueError(f"specification holds unknown keys: {sorted(unknown)}")
        if "rL" not in obj or "rT" not in obj:
            raise ValueError("specification needs 'rL' and 'rT'")
        rl = obj["rL"]
        if not float(rl).is_integer():
            raise ValueError(f"'rL' must be an integer LUT count, got {rl!r}")
        return cls(max_luts=int(rl), min_fps=obj["rT"], clock_hz=obj.get("clock_hz", 100_000_000.0))

    def to_json(self) -> dict:
        return {"rL": self.max_luts, "rT": self.min_fps, "clock_hz": self.clock_hz}


@dataclass(frozen=True)
class PartialSolution:
    """A concrete implementation choice with its objective triple."""

    boundaries: tuple[int, ...]  # 1-based indices of layers that start a partition
    tiles: tuple[tuple[int, int], ...]  # (tn, tm) per covered layer
    open_luts: int
    total_cycles: int
    closed_cycles: int

    def __post_init__(self):
        if self.boundaries and self.boundaries[0] != 1:
            raise ValueError("first partition must start at layer 1")
        if any(b >= n for b, n in zip(self.boundaries, self.boundaries[1:])):
            raise ValueError("partition boundaries must be strictly increasing")
        if self.closed_cycles > self.total_cycles:
            raise ValueError("closed_cycles cannot exceed total_cycles")

    def triple(self) -> tuple[int, int, int]:
        return (self.open_luts, self.total_cycles, self.closed_cycles)

    @property
    def n_partitions(self) -> int:
        return len(self.boundaries)

    def partition_ranges(self) -> list[tuple[int, int]]:
        """Inclusive 1-based (start, end) ranges of each partition."""
        ends = list(self.boundaries[1:]) + [len(self.tiles) + 1]
        return [(s, e - 1) for s, e in zip(self.boundaries, ends)]


@dataclass(frozen=True)
class FrontierSet:
    """Mutually non-dominated solutions; empty means the spec is infeasible."""

    solutions: tuple[PartialSolution, ...]

    def __bool__(self) -> bool:
        return bool(self.solutions)

    def __len__(self) -> int:
        return len(self.solutions)

    def triples(self) -> frozenset[tuple[int, int, int]]:
        return frozenset(s.triple() for s in self.solutions)


EMPTY_FRONTIER = FrontierSet(solutions=())


def invert_throughput_budget(min_fps: float, used_cycles: int, clock_hz: float) -> float:
    """Throughput floor left for a sub-problem after ``used_cycles`` are spoken for.

    Evaluates (1/min_fps - used_cycles/clock_hz)^-1 in the algebraically
    equivalent form clock*fps / (clock - fps*used), which is exact on integer
    inputs.  A zero denominator yields +inf, a negative one a negative floor;
    callers treat both as an exhausted budget.
    """
    denom = clock_hz - min_fps * used_cycles
    if denom == 0:
        return math.inf
    return clock_hz * min_fps / denom


# --- generic Pareto filtering ------------------------------------------------

def pareto_filter(points) -> list[tuple]:
    """Maximal non-dominated subset of 2- or 3-dimensional cost vectors.

    Minimization on every coordinate; duplicates collapse to one
    representative; output is sorted ascending.
    """
    pts = sorted(set(tuple(p) for p in points))
    if not pts:
        return []
    dims = {len(p) for p in pts}
    if dims not in ({2}, {3}):
        raise ValueError("pareto_filter supports uniform 2- or 3-dimensional points")
    if dims == {2}:
        out = []
        best = math.inf
        for x, y in pts:
            if y < best:
                out.append((x, y))
                best = y
        return out
    return [pts[i] for i in _frontier3_indices(pts)]


def _frontier3_indices(triples) -> list[int]:
    """Indices of non-dominated entries of a lexicographically sorted, distinct triple list.

    Sweeps in order of the first coordinate, holding a staircase (y ascending,
    z strictly descending) of accepted points from strictly earlier groups.
    """
    out: list[int] = []
    stair_y: list = []
    stair_z: list = []
    n = len(triples)
    i = 0
    while i < n:
        j = i
        x = triples[i][0]
        while j < n and triples[j][0] == x:
            j += 1
        accepted = []
        best_z = None
        for k in range(i, j):
            y, z = triples[k][1], triples[k][2]
            if best_z is not None and best_z <= z:
                continue  # dominated inside the group (same x, smaller-or-equal y)
            pos = bisect_right(stair_y, y) - 1
            if pos >= 0 and stair_z[pos] <= z:
                continue  # dominated by a point with strictly smaller x
            accepted.append(k)
            best_z = z if best_z is None else min(best_z, z)
        for k in accepted:
            y, z = triples[k][1], triples[k][2]
            pos = bisect_left(stair_y, y)
            end = pos
            while end < len(stair_y) and stair_z[end] >= z:
                end += 1
            stair_y[pos:end] = [y]
            stair_z[pos:end] = [z]
        out.extend(accepted)
        i = j
    return out


# --- single-layer search ------------------------------------------------------

def single_layer_solutions(geom, lut_budget: int, fps_budget: float, clock_hz: float,
                           lib: QceCostLibrary = DEFAULT_COST_LIBRARY) -> list[tuple[TileConfig, LayerCost]]:
    """All non-dominated tilings of one layer within a LUT and throughput budget.

    A non-positive throughput budget means the enclosing budget inversion ran
    dry, so the sub-problem has no solutions at all.
    """
    if fps_budget <= 0 or math.isinf(fps_budget) or lut_budget < 0:
        return []
    cycle_budget = math.floor(clock_hz / fps_budget)
    fr = tiling_frontier(geom, lib)
    lo, hi = _budget_slice(fr.luts, fr.lats, lut_budget, cycle_budget)
    return [
        (TileConfig(int(fr.tns[i]), int(fr.tms[i])), LayerCost(int(fr.luts[i]), int(fr.lats[i])))
        for i in range(lo, hi)
    ]


def _budget_slice(luts: np.ndarray, lats: np.ndarray, lut_budget: int, cycle_budget: int) -> tuple[int, int]:
    # luts ascend strictly, lats descend strictly: both constraints cut a
    # contiguous window out of the frontier.
    hi = int(np.searchsorted(luts, lut_budget, side="right"))
    lo = int(np.searchsorted(-lats, -cycle_budget, side="left"))
    return (lo, hi) if lo < hi else (0, 0)


# --- dynamic-programming search ----------------------------------------------

class _State:
    __slots__ = ("boundaries", "tiles")

    def __init__(self, boundaries, tiles):
        self.boundaries = boundaries
        self.tiles = tiles


def dp_search(network: ChildNetwork, spec: Specification,
              lib: QceCostLibrary = DEFAULT_COST_LIBRARY) -> FrontierSet:
    """Frontier of all implementations of ``network`` meeting ``spec``.

    Equivalent to brute_force on every instance small enough to enumerate,
    but runs in time polynomial in the frontier sizes.
    """
    geoms = layer_geometries(network)
    max_luts = spec.max_luts
    t0 = spec.cycle_budget()
    if t0 < 1:
        return EMPTY_FRONTIER

    fronts = []
    for geom in geoms:
        fr = tiling_frontier(geom, lib)
        lo, hi = _budget_slice(fr.luts, fr.lats, max_luts, t0)
        if lo == hi:
            return EMPTY_FRONTIER  # this layer cannot fit the spec even alone
        fronts.append(
            (fr.luts.tolist(), fr.lats.tolist(), fr.tns.tolist(), fr.tms.tolist())
        )

    # State arrays for the current depth.  The initial "design" has no layers;
    # both extension rules coincide on it, so only the new-partition rule runs.
    f1 = [0]
    f2 = [0]
    f3 = [0]
    states = [_State((), ())]

    for li, (luts, lats, tns, tms) in enumerate(fronts):
        n_points = len(luts)
        cand_f1: list[int] = []
        cand_f2: list[int] = []
        cand_f3: list[int] = []
        cand_parent: list[int] = []
        cand_kind: list[int] = []  # 0 = joined open partition, 1 = opened new one
        cand_tidx: list[int] = []

        for k in range(len(states)):
            pf1, pf2, pf3 = f1[k], f2[k], f3[k]
            fresh = not states[k].tiles
            if not fresh:
                lo, hi = _slice_lists(luts, lats, max_luts - pf1, t0 - pf3, n_points)
                open_lat = pf2 - pf3
                for i in range(lo, hi):
                    cand_f1.append(pf1 + luts[i])
                    lat = lats[i]
                    cand_f2.append(pf3 + (open_lat if open_lat >= lat else lat))
                    cand_f3.append(pf3)
                    cand_parent.append(k)
                    cand_kind.append(0)
                    cand_tidx.append(i)
            lo, hi = _slice_lists(luts, lats, max_luts, t0 - pf2, n_points)
            for i in range(lo, hi):
                cand_f1.append(luts[i])
                cand_f2.append(pf2 + lats[i])
                cand_f3.append(pf2)
                cand_parent.append(k)
                cand_kind.append(1)
                cand_tidx.append(i)

        if not cand_f1:
            return EMPTY_FRONTIER

        keep = _reduce_candidates(cand_f1, cand_f2, cand_f3, cand_parent, cand_kind, cand_tidx, states)
        new_states = []
        new_f1, new_f2, new_f3 = [], [], []
        layer_no = li + 1
        for idx in keep:
            parent = states[cand_parent[idx]]
            tile = (tns[cand_tidx[idx]], tms[cand_tidx[idx]])
            if cand_kind[idx]:
                boundaries = parent.boundaries + (layer_no,)
            else:
                boundaries = parent.boundaries
            new_states.append(_State(boundaries, parent.tiles + (tile,)))
            new_f1.append(cand_f1[idx])
            new_f2.append(cand_f2[idx])
            new_f3.append(cand_f3[idx])
        states, f1, f2, f3 = new_states, new_f1, new_f2, new_f3

    solutions = tuple(
        PartialSolution(
            boundaries=s.boundaries,
            tiles=s.tiles,
            open_luts=a,
            total_cycles=b,
            closed_cycles=c,
        )
        for s, a, b, c in zip(states, f1, f2, f3)
    )
    return FrontierSet(solutions=solutions)


def _slice_lists(luts: list, lats: list, lut_budget: int, cycle_budget: int, n: int) -> tuple[int, int]:
    if lut_budget < luts[0] or cycle_budget < lats[-1]:
        return 0, 0
    hi = bisect_right(luts, lut_budget)
    # lats descend: find the first index already within budget.
    lo, j = 0, n
    while lo < j:
        mid = (lo + j) // 2
        if lats[mid] > cycle_budget:
            lo = mid + 1
        else:
            j = mid
    return (lo, hi) if lo < hi else (0, 0)


def _reduce_candidates(cf1, cf2, cf3, cparent, ckind, ctidx, states) -> list[int]:
    """Deduplicate equal triples then drop dominated ones; returns kept candidate indices.

    Equal triples keep the witness with fewer partitions, then the smaller
    tile tuple; ordering is fully deterministic regardless of how candidates
    were generated.
    """
    a1 = np.asarray(cf1, dtype=np.int64)
    a2 = np.asarray(cf2, dtype=np.int64)
    a3 = np.asarray(cf3, dtype=np.int64)
    order = np.lexsort((np.arange(len(a1)), a3, a2, a1))
    a1, a2, a3 = a1[order], a2[order], a3[order]
    new_group = np.empty(len(order), dtype=bool)
    new_group[0] = True
    new_group[1:] = (a1[1:] != a1[:-1]) | (a2[1:] != a2[:-1]) | (a3[1:] != a3[:-1])
    group_starts = np.flatnonzero(new_group).tolist()
    group_starts.append(len(order))

    reps: list[int] = []  # positions within `order`
    triples: list[tuple[int, int, int]] = []
    for gi in range(len(group_starts) - 1):
        s, e = group_starts[gi], group_starts[gi + 1]
        if e - s == 1:
            pos = s
        else:
            def witness_key(p):
                ci = int(order[p])
                parent = states[cparent[ci]]
                nparts = len(parent.boundaries) + (1 if ckind[ci] else 0)
                return (nparts, parent.tiles, ctidx[ci], ckind[ci])

            pos = min(range(s, e), key=witness_key)
        reps.append(pos)
        triples.append((int(a1[s]), int(a2[s]), int(a3[s])))

    kept = _frontier3_indices(triples)
    return [int(order[reps[i]]) for i in kept]


# --- brute-force oracle --------------------------------------------------------

def candidate_count(network: ChildNetwork) -> int:
    """Exact size of the full hardware space: partitionings times all tilings."""
    total = 1
    for shape in network.shapes:
        total *= shape.m * shape.n
    return 2 ** (network.num_layers - 1) * total


def _compositions(num_layers: int):
    """Partition schemes as boundary tuples, ordered by partition count then position."""
    for g in range(1, num_layers + 1):
        for cuts in itertools.combinations(range(2, num_layers + 1), g - 1):
            yield (1,) + cuts


def brute_force(network: ChildNetwork, spec: Specification,
                lib: QceCostLibrary = DEFAULT_COST_LIBRARY,
                guard: int = 10_000_000) -> FrontierSet:
    """Enumerate the entire hardware space and reduce it to the frontier.

    Refuses instances whose candidate count exceeds ``guard``.
    """
    count = candidate_count(network)
    if count > guard:
        raise SearchSpaceTooLarge(f"{count} candidates exceed the brute-force guard of {guard}")
    geoms = layer_geometries(network)
    num_layers = len(geoms)
    tables = [tiling_table(g, lib) for g in geoms]
    max_luts = spec.max_luts
    t0 = spec.cycle_budget()

    # triple -> (n_partitions, flat tiling index, boundaries); the flat index
    # ranks tiling tuples lexicographically, identically for every scheme.
    best: dict[tuple[int, int, int], tuple[int, int, tuple[int, ...]]] = {}
    if t0 >= 1:
        for boundaries in _compositions(num_layers):
            _scan_scheme(boundaries, tables, num_layers, max_luts, t0, best)

    if not best:
        return EMPTY_FRONTIER
    triples = sorted(best)
    kept = _frontier3_indices(triples)
    solutions = []
    for i in kept:
        triple = triples[i]
        nparts, flat, boundaries = best[triple]
        tiles = _unflatten_tiles(flat, geoms)
        solutions.append(
            PartialSolution(
                boundaries=boundaries,
                tiles=tiles,
                open_luts=triple[0],
                total_cycles=triple[1],
                closed_cycles=triple[2],
            )
        )
    return FrontierSet(solutions=tuple(solutions))


def _scan_scheme(boundaries, tables, num_layers, max_luts, t0, best,
                 chunk_cap: int = 1 << 22) -> None:
    ends = list(boundaries[1:]) + [num_layers + 1]
    segments = [list(range(s - 1, e - 1)) for s, e in zip(boundaries, ends)]
    seg_luts = []
    seg_lats = []
    for member_list in segments:
        lut = tables[member_list[0]][2]
        lat = tables[member_list[0]][3]
        for idx in member_list[1:]:
            lut = np.add.outer(lut, tables[idx][2]).ravel()
            lat = np.maximum.outer(lat, tables[idx][3]).ravel()
        seg_luts.append(lut)
        seg_lats.append(lat)

    total = 1
    for lut in seg_luts:
        total *= len(lut)
    first_len = len(seg_luts[0])
    rest = total // first_len
    step = max(1, min(first_len, chunk_cap // max(rest, 1)))
    nparts = len(segments)

    for start in range(0, first_len, step):
        stop = min(first_len, start + step)
        lut_max = seg_luts[0][start:stop]
        lat_sum = seg_lats[0][start:stop]
        for lut, lat in zip(seg_luts[1:], seg_lats[1:]):
            lut_max = np.maximum.outer(lut_max, lut).ravel()
            lat_sum = np.add.outer(lat_sum, lat).ravel()
        if nparts == 1:
            last_lut, last_lat = lut_max, lat_sum
        else:
            reps = (stop - start) * rest // len(seg_luts[-1])
            last_lut = np.tile(seg_luts[-1], reps)
            last_lat = np.tile(seg_lats[-1], reps)
        mask = (lut_max <= max_luts) & (lat_sum <= t0)
        if not mask.any():
            continue
        idx = np.flatnonzero(mask)
        f1 = last_lut[idx]
        f2 = lat_sum[idx]
        f3 = f2 - last_lat[idx]
        flat = idx + start * rest
        triples = np.stack([f1, f2, f3], axis=1)
        uniq, first = np.unique(triples, axis=0, return_index=True)
        for row, fi in zip(uniq.tolist(), first.tolist()):
            key = (int(row[0]), int(row[1]), int(row[2]))
            witness = (nparts, int(flat[fi]), boundaries)
            prev = best.get(key)
            if prev is None or witness < prev:
                best[key] = witness


def _unflatten_tiles(flat: int, geoms) -> tuple[tuple[int, int], ...]:
    sizes = [(g.n, g.m) for g in geoms]
    idxs = []
    for n, m in reversed(sizes):
        idxs.append(flat % (n * m))
        flat //= n * m
    idxs.reverse()
    tiles = []
    for (n, m), idx in zip(sizes, idxs):
        tiles.append((idx // m + 1, idx % m + 1))
    return tuple(tiles)


# --- recosting and serialization -----------------------------------------------

def recost_solution(network: ChildNetwork, solution: PartialSolution,
                    lib: QceCostLibrary = DEFAULT_COST_LIBRARY):
    """Recompute per-partition and design costs of a solution from scratch.

    Returns (design LayerCost, per-partition LayerCost list, recomputed triple).
    """
    geoms = layer_geometries(network)
    if len(solution.tiles) != len(geoms):
        raise ValueError("solution does not cover every layer")
    costs = []
    for geom, (tn, tm) in zip(geoms, solution.tiles):
        if not (1 <= tn <= geom.n and 1 <= tm <= geom.m):
            raise ValueError(f"tile ({tn}, {tm}) outside layer extents ({geom.n}, {geom.m})")
        lut = qce_lut(tn, tm, geom.ai_in, geom.af_in, geom.ai, geom.af, geom.wi, geom.wf, lib)
        lat = latency_cycles(geom.m, geom.n, geom.r, geom.c, geom.fh, geom.fw, TileConfig(tn, tm))
        costs.append(LayerCost(lut=lut, lat=lat))
    parts = [partition_cost(costs[s - 1:e]) for s, e in solution.partition_ranges()]
    design = design_cost(parts)
    triple = (parts[-1].lut, design.lat, design.lat - parts[-1].lat)
    return design, parts, triple


def solution_from_structure(network: ChildNetwork, boundaries, tiles,
                            lib: QceCostLibrary = DEFAULT_COST_LIBRARY) -> PartialSolution:
    """Rebuild a solution, objective triple included, from its structural choice alone."""
    skeleton = PartialSolution(boundaries=tuple(boundaries), tiles=tuple(tiles),
                               open_luts=0, total_cycles=0, closed_cycles=0)
    _, _, triple = recost_solution(network, skeleton, lib)
    return PartialSolution(boundaries=skeleton.boundaries, tiles=skeleton.tiles,
                           open_luts=triple[0], total_cycles=triple[1], closed_cycles=triple[2])


def verify_solution(network: ChildNetwork, solution: PartialSolution, spec: Specification,
                    lib: QceCostLibrary = DEFAULT_COST_LIBRARY) -> bool:
    """True when the recomputed design meets the spec and matches its stored triple."""
    design, _, triple = recost_solution(network, solution, lib)
    return (
        triple == solution.triple()
        and design.lut <= spec.max_luts
        and design.lat <= spec.cycle_budget()
    )


def solution_to_json(network: ChildNetwork, solution: PartialSolution, clock_hz: float,
                     lib: QceCostLibrary = DEFAULT_COST_LIBRARY) -> dict:
    design, _, _ = recost_solution(network, solution, lib)
    return {
        "partitions": [list(r) for r in solution.partition_ranges()],
        "tiles": [{"tn": tn, "tm": tm} for tn, tm in solution.tiles],
        "lut": design.lut,
        "latency_cycles": design.lat,
        "throughput_fps": throughput_fps(design.lat, clock_hz),
    }
