"""End-to-end acceptance suite.

Each test prints one PASS/FAIL line (visible with ``pytest -s``) and enforces
its stated tolerance; together they are the exit criteria of the build.
"""

import json
import math
import time
from contextlib import contextmanager
from fractions import Fraction

import numpy as np
import pytest

from quantnas import controller as ctrl
from quantnas import harness, space
from quantnas.evaluator import compute_reward, surrogate_accuracy
from quantnas.hw_model import latency_cycles, qce_simulate, TileConfig
from quantnas.hw_search import (
    Specification,
    brute_force,
    candidate_count,
    dp_search,
    solution_from_structure,
    verify_solution,
)
from quantnas.quantizer import FixedPointFormat, format_range, quantize
from quantnas.space import network_from_json
from conftest import make_network, random_small_instance

pytestmark = pytest.mark.acceptance


@contextmanager
def criterion(number: int, description: str):
    started = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"\nCRITERION {number:2d} FAIL  {description}")
        raise
    elapsed = time.monotonic() - started
    print(f"\nCRITERION {number:2d} PASS  {description}  [{elapsed:.1f}s]")


def test_criterion_01_oracle_equivalence():
    with criterion(1, "dynamic program matches brute force on 500 randomized instances"):
        rng = np.random.default_rng(2024)
        feasible = 0
        for _ in range(500):
            network, spec = random_small_instance(rng)
            dp = dp_search(network, spec)
            bf = brute_force(network, spec)
            assert bool(dp) == bool(bf)
            assert dp.triples() == bf.triples()
            feasible += bool(dp)
        assert 0 < feasible < 500  # both verdicts exercised


def test_criterion_02_hardware_space_cardinality():
    with criterion(2, "brute-force candidate counts match the closed-form space size"):
        # fixed hand-checked case: L=2, 3 input channels, filter counts (4, 8)
        net = make_network(
            [(4, 1, 1, 1, 1, 1, 1, 2, 1, 2), (8, 1, 1, 1, 1, 1, 1, 2, 1, 2)],
            space.NetworkInput(channels=3, rows=4, cols=4),
        )
        assert candidate_count(net) == 768

        rng = np.random.default_rng(7)
        for _ in range(60):
            network, _ = random_small_instance(rng)
            expected = 2 ** (network.num_layers - 1)
            for shape in network.shapes:
                expected *= shape.m * shape.n
            assert candidate_count(network) == expected
            # the enumerator visits exactly that many candidates
            visited = 0
            sizes = [s.m * s.n for s in network.shapes]
            from quantnas.hw_search import _compositions

            for boundaries in _compositions(network.num_layers):
                combo = 1
                for size in sizes:
                    combo *= size
                visited += combo
            assert visited == expected


def _rational_quantize(x: float, fmt: FixedPointFormat) -> Fraction:
    two = Fraction(2)
    dq = two ** -fmt.frac_bits
    b = two ** (fmt.int_bits - 1) if fmt.signed else two ** fmt.int_bits
    lo = -b if fmt.signed else Fraction(0)
    hi = max(lo, b - dq)
    y = Fraction(x) / dq
    n = (abs(y.numerator) * 2 + y.denominator) // (2 * y.denominator)
    if y < 0:
        n = -n
    return min(max(n * dq, lo), hi)


def test_criterion_03_quantizer_exactness():
    with criterion(3, "quantizer property suite over 100,000 random (value, format) pairs"):
        rng = np.random.default_rng(99)
        checked = 0
        degenerate_seen = 0
        while checked < 100_000:
            signed = bool(rng.integers(0, 2))
            int_bits = int(rng.integers(0, 7))
            frac_bits = int(rng.integers(0, 9))
            fmt = FixedPointFormat(signed, int_bits, frac_bits)
            degenerate_seen += int_bits == 0 and frac_bits == 0
            lo, hi, dq = format_range(fmt)
            scale = float(max(1.0, hi - lo))
            x = float(rng.uniform(lo - 2 * scale, hi + 2 * scale))
            y = float(rng.uniform(lo - 2 * scale, hi + 2 * scale))
            qx, qy = quantize(x, fmt), quantize(y, fmt)

            # idempotence
            assert quantize(qx, fmt) == qx
            # grid membership (clip bounds count as grid points)
            assert lo <= qx <= hi
            assert (Fraction(qx) * 2**frac_bits).denominator == 1 or qx in (lo, hi)
            # monotonicity
            if x <= y:
                assert qx <= qy
            else:
                assert qy <= qx
            # half-step error bound inside the representable range
            if lo <= x <= hi:
                assert abs(qx - x) <= dq / 2
            # clip boundaries
            if x >= hi:
                assert qx == hi
            if x <= lo:
                assert qx == lo
            # rational-arithmetic oracle, exact
            assert Fraction(qx) == _rational_quantize(x, fmt)
            checked += 1
        assert degenerate_seen > 100


def test_criterion_04_latency_formula():
    with criterion(4, "cycle-count formula matches hand-computed table exactly"):
        cases = [
            # (m, n, r, c, fh, fw, tn, tm, expected)
            (3, 24, 32, 32, 3, 3, 8, 3, 27_648),
            (3, 24, 32, 32, 3, 3, 24, 3, 9_216),
            (3, 24, 32, 32, 3, 3, 5, 2, 2 * 5 * 32 * 32 * 9),
            (16, 32, 7, 5, 3, 1, 32, 16, 105),
            (1, 1, 1, 1, 1, 1, 1, 1, 1),
            (64, 64, 16, 16, 5, 5, 64, 64, 6_400),
            (64, 64, 16, 16, 5, 5, 1, 1, 64 * 64 * 6_400),
            (7, 9, 4, 6, 1, 7, 2, 3, 3 * 5 * 4 * 6 * 7),
            (48, 36, 8, 8, 7, 7, 10, 9, 6 * 4 * 8 * 8 * 49),
            (5, 5, 3, 3, 2, 2, 4, 4, 2 * 2 * 3 * 3 * 4),
            (24, 64, 32, 16, 1, 3, 63, 23, 2 * 2 * 32 * 16 * 3),
        ]
        for m, n, r, c, fh, fw, tn, tm, expected in cases:
            assert latency_cycles(m, n, r, c, fh, fw, TileConfig(tn, tm)) == expected


def test_criterion_05_qce_bit_exactness():
    with criterion(5, "datapath simulation equals the exact rational MAC oracle on 10,000 tiles"):
        rng = np.random.default_rng(1701)
        trials = 0
        while trials < 10_000:
            in_fmt = (int(rng.integers(0, 4)), int(rng.integers(0, 5)))
            w_fmt = (int(rng.integers(0, 4)), int(rng.integers(0, 5)))
            out_fmt = (int(rng.integers(0, 4)), int(rng.integers(0, 5)))
            tm = int(rng.integers(1, 5))
            tn = int(rng.integers(1, 4))
            a_lo, a_hi, a_dq = format_range(FixedPointFormat(False, *in_fmt))
            w_lo, w_hi, w_dq = format_range(FixedPointFormat(True, *w_fmt))
            acts = [
                float(min(a_hi, a_lo + math.floor(rng.uniform(0, (a_hi - a_lo) / a_dq + 1)) * a_dq))
                for _ in range(tm)
            ]
            weights = [
                [
                    float(min(w_hi, w_lo + math.floor(rng.uniform(0, (w_hi - w_lo) / w_dq + 1)) * w_dq))
                    for _ in range(tm)
                ]
                for _ in range(tn)
            ]
            acc, outs = qce_simulate(acts, weights, in_fmt, w_fmt, out_fmt)
            for j in range(tn):
                exact_dot = sum(Fraction(w) * Fraction(a) for w, a in zip(weights[j], acts))
                assert acc[j] == exact_dot
                # oracle evaluated purely in rational arithmetic
                y = exact_dot / Fraction(1, 2 ** out_fmt[1])
                n = (abs(y.numerator) * 2 + y.denominator) // (2 * y.denominator)
                if y < 0:
                    n = -n
                dq = Fraction(1, 2 ** out_fmt[1])
                hi = max(Fraction(0), Fraction(2 ** out_fmt[0]) - dq)
                expected = min(max(n * dq, Fraction(0)), hi)
                assert Fraction(outs[j]) == expected
            trials += 1


def test_criterion_06_policy_gradient_correctness():
    with criterion(6, "backpropagation matches central finite differences to 1e-4"):
        config = ctrl.ControllerConfig(hidden_units=4, lstm_layers=2, embedding_dim=4)
        rng = np.random.default_rng(6)
        vocabs = list(space.SpaceConfig(num_layers=1).vocab_sizes())  # one full layer of steps
        params = ctrl.init_policy(vocabs, config, rng)
        trajectories = [ctrl.sample_trajectory(params, 10, rng) for _ in range(2)]
        rewards = [0.8, 0.3]
        baseline, gamma = 0.4, 0.95
        analytic = ctrl.policy_gradient(params, trajectories, rewards, baseline, gamma)
        eps = 1e-4
        for name, tensor in params.tensors.items():
            numeric = np.zeros_like(tensor)
            it = np.nditer(tensor, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                orig = tensor[idx]
                tensor[idx] = orig + eps
                up = ctrl.surrogate_objective(params, trajectories, rewards, baseline, gamma)
                tensor[idx] = orig - eps
                down = ctrl.surrogate_objective(params, trajectories, rewards, baseline, gamma)
                tensor[idx] = orig
                numeric[idx] = (up - down) / (2 * eps)
                it.iternext()
            denom = max(np.linalg.norm(numeric), np.linalg.norm(analytic[name]), 1e-12)
            rel = np.linalg.norm(numeric - analytic[name]) / denom
            assert rel <= 1e-4, f"{name}: relative error {rel:.2e}"


def test_criterion_07_bandit_convergence():
    with criterion(7, "REINFORCE bandit reaches 0.95 on the rewarded action within 500 updates"):
        config = ctrl.ControllerConfig(learning_rate=0.2, batch_m=5)
        rng = np.random.default_rng(0)
        params = ctrl.init_policy([2], config, rng)
        baseline = 0.0
        converged_at = None
        for update in range(1, 501):
            trajectories = [ctrl.sample_trajectory(params, 1, rng) for _ in range(config.batch_m)]
            rewards = [1.0 if t.tokens[0] == 0 else 0.0 for t in trajectories]
            gradient = ctrl.policy_gradient(params, trajectories, rewards, baseline, config.discount_gamma)
            params = ctrl.apply_update(params, gradient, config.learning_rate)
            baseline = ctrl.update_baseline(baseline, rewards, config.baseline_decay)
            if ctrl.step_distributions(params, [0])[0][0] > 0.95:
                converged_at = update
                break
        assert converged_at is not None and converged_at <= 500


def test_criterion_08_reward_semantics():
    with criterion(8, "reward is a hard gate: zero off the frontier, surrogate accuracy on it"):
        cfg = space.SpaceConfig()
        rng = np.random.default_rng(8)
        vocabs = cfg.vocab_sizes()
        for _ in range(3):
            tokens = [int(rng.integers(0, v)) for _ in range(cfg.num_layers) for v in vocabs]
            network = space.decode_actions(tokens, cfg)
            signal = compute_reward(network, Specification(max_luts=1, min_fps=1.0), surrogate_accuracy)
            assert signal.value == 0.0 and not signal.feasible

        network = space.decode_actions([0] * 60, cfg)
        generous = Specification(max_luts=10**9, min_fps=1e-3)
        signal = compute_reward(network, generous, surrogate_accuracy)
        assert signal.feasible and signal.value == surrogate_accuracy(network)

        small = make_network(
            [(4, 3, 3, 1, 1, 1, 1, 2, 1, 2), (4, 1, 1, 1, 1, 1, 1, 2, 1, 2)],
            space.NetworkInput(channels=3, rows=8, cols=8),
        )
        lo, hi = 1, 10**7
        fps = 1e4
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if dp_search(small, Specification(mid, fps)):
                hi = mid
            else:
                lo = mid
        on_frontier = compute_reward(small, Specification(hi, fps), surrogate_accuracy)
        past_frontier = compute_reward(small, Specification(lo, fps), surrogate_accuracy)
        assert on_frontier.value == surrogate_accuracy(small)
        assert past_frontier.value == 0.0 and not past_frontier.feasible


def _joint_config(out_dir, episodes, seed):
    return harness.load_run_config({
        "mode": "joint",
        "episodes": episodes,
        "seed": seed,
        "out_dir": str(out_dir),
        "space": {},  # full default per-layer space, 6 layers
        "spec": {"rL": 30_000, "rT": 1000, "clock_hz": 100_000_000.0},
        "controller": {},  # 2x35 LSTM, lr 0.2, batch 5
        "evaluator": {"kind": "surrogate"},
    })


def test_criterion_09_end_to_end_surrogate_search(tmp_path):
    with criterion(9, "1,000-episode joint search finds verified feasible designs and improves"):
        config = _joint_config(tmp_path / "run", episodes=1000, seed=7)
        summary = harness.run_search(config)
        assert summary.episodes_run == 1000

        records = [json.loads(l) for l in (tmp_path / "run" / "episodes.jsonl").read_text().splitlines()]
        assert len(records) == 1000

        # (a) at least one feasible design
        feasible = [r for r in records if r["feasible"]]
        assert feasible, "no feasible design found in 1,000 episodes"

        # (b) every logged feasible witness re-verifies when recosted from scratch
        for record in feasible:
            network = network_from_json(record["network"])
            hw = record["hw"]
            boundaries = tuple(start for start, _ in hw["partitions"])
            tiles = tuple((t["tn"], t["tm"]) for t in hw["tiles"])
            solution = solution_from_structure(network, boundaries, tiles, config.cost_lib)
            assert verify_solution(network, solution, config.spec, config.cost_lib)

        # (c) the best reward found strictly exceeds the first batch's mean
        first_batch = records[: config.controller.batch_m]
        first_mean = sum(r["reward"] for r in first_batch) / len(first_batch)
        best = max(r["reward"] for r in records)
        assert best > first_mean


def test_criterion_10_determinism_and_resume(tmp_path):
    with criterion(10, "interrupt/resume reproduces a 200-episode log byte for byte"):
        straight = tmp_path / "straight"
        split = tmp_path / "split"
        harness.run_search(_joint_config(straight, episodes=200, seed=11))
        harness.run_search(_joint_config(split, episodes=100, seed=11))
        harness.resume(split / "checkpoint.json", _joint_config(split, episodes=200, seed=11))
        log_a = (straight / "episodes.jsonl").read_bytes()
        log_b = (split / "episodes.jsonl").read_bytes()
        assert log_a == log_b and len(log_a) > 0
        assert (straight / "checkpoint.json").read_bytes() == (split / "checkpoint.json").read_bytes()
