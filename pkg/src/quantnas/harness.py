"""Run orchestration: config loading, the search loop, persistence, and reports.

A run owns an output directory (guarded by a lock file) and produces:

* ``episodes.jsonl``  - one canonical JSON line per episode, byte-reproducible
  from (config, seed) alone, including across interrupt/resume;
* ``timings.csv``     - wall-clock sidecar, deliberately outside the
  reproducible log;
* ``checkpoint.json`` - parameters, RNG state, and counters at the last batch
  boundary;
* ``best.json``       - the best network found and its hardware witness.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import controller as ctrl
from .evaluator import (
    DEFAULT_SURROGATE,
    ExternalEvaluatorConfig,
    RewardSignal,
    SurrogateConfig,
    compute_reward,
    external_evaluate,
    surrogate_accuracy,
)
from .hw_model import DEFAULT_COST_LIBRARY, QceCostLibrary
from .hw_search import (
    Specification,
    brute_force,
    dp_search,
    solution_to_json,
)
from .space import (
    ARCH_KEYS,
    PARAM_KEYS,
    STEPS_PER_LAYER,
    ChildNetwork,
    NetworkInput,
    SpaceConfig,
    decode_actions,
    network_from_json,
    network_to_json,
)

LUT_PRESETS = (30_000, 100_000, 300_000)
FPS_PRESETS = (500.0, 1000.0, 2000.0)

SEARCH_MODES = ("joint", "quant_only", "arch_only")
ALL_MODES = SEARCH_MODES + ("hw_only", "oracle")

# Token positions each mode samples; the rest are pinned from fixed_network.
MODE_POSITIONS = {
    "joint": tuple(range(STEPS_PER_LAYER)),
    "arch_only": tuple(range(len(ARCH_KEYS))),
    "quant_only": tuple(range(len(ARCH_KEYS), STEPS_PER_LAYER)),
}


class ConfigError(ValueError):
    """A run configuration is malformed or inconsistent."""


class LockError(OSError):
    """The output directory is already owned by another run."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _require_keys(obj: dict, allowed: set, context: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{context} must be a JSON object")
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{context} holds unknown keys: {sorted(unknown)}")


def _space_from_json(obj: dict) -> SpaceConfig:
    allowed = set(PARAM_KEYS) | {"num_layers", "input"}
    _require_keys(obj, allowed, "space")
    kwargs = {}
    for key in PARAM_KEYS:
        if key in obj:
            values = obj[key]
            if not isinstance(values, list):
                raise ConfigError(f"space list {key!r} must be an array")
            kwargs["n_filters" if key == "n" else key] = tuple(values)
    if "num_layers" in obj:
        kwargs["num_layers"] = obj["num_layers"]
    if "input" in obj:
        _require_keys(obj["input"], {"channels", "rows", "cols", "ai0", "af0"}, "space.input")
        kwargs["input"] = NetworkInput(**obj["input"])
    try:
        return SpaceConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def space_to_json(space: SpaceConfig) -> dict:
    out = {key: list(space.values(key)) for key in PARAM_KEYS}
    out["num_layers"] = space.num_layers
    out["input"] = {
        "channels": space.input.channels,
        "rows": space.input.rows,
        "cols": space.input.cols,
        "ai0": space.input.ai0,
        "af0": space.input.af0,
    }
    return out


def _controller_from_json(obj: dict) -> ctrl.ControllerConfig:
    allowed = {
        "hidden_units", "lstm_layers", "embedding_dim", "learning_rate",
        "batch_m", "discount_gamma", "baseline_decay", "seed",
    }
    _require_keys(obj, allowed, "controller")
    try:
        return ctrl.ControllerConfig(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class RunConfig:
    mode: str
    episodes: int
    seed: int
    space: SpaceConfig
    spec: Specification
    controller: ctrl.ControllerConfig
    evaluator_kind: str = "surrogate"
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    external: ExternalEvaluatorConfig | None = None
    cost_lib: QceCostLibrary = field(default_factory=QceCostLibrary)
    fixed_network: ChildNetwork | None = None
    out_dir: Path | None = None
    checkpoint_interval: int = 10  # batches between checkpoints

    def __post_init__(self):
        if self.mode not in ALL_MODES:
            raise ConfigError(f"mode must be one of {ALL_MODES}, got {self.mode!r}")
        if self.episodes < 0:
            raise ConfigError("episodes must be >= 0")
        if self.checkpoint_interval < 1:
            raise ConfigError("checkpoint_interval must be >= 1")
        if self.evaluator_kind not in ("surrogate", "external"):
            raise ConfigError(f"evaluator kind must be 'surrogate' or 'external', got {self.evaluator_kind!r}")
        if self.evaluator_kind == "external" and self.external is None:
            raise ConfigError("external evaluator selected but not configured")
        if self.mode in ("quant_only", "arch_only", "hw_only", "oracle") and self.fixed_network is None:
            raise ConfigError(f"mode {self.mode!r} requires fixed_network")
        if self.mode in SEARCH_MODES and self.out_dir is None:
            raise ConfigError("search modes require an output directory")


def load_run_config(obj: dict, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from parsed JSON, applying CLI overrides last."""
    allowed = {
        "mode", "episodes", "seed", "space", "spec", "controller", "evaluator",
        "cost_lib", "cost_lib_path", "fixed_network", "out_dir", "checkpoint_interval",
    }
    _require_keys(obj, allowed, "run config")
    merged = dict(obj)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value

    mode = merged.get("mode")
    if mode is None:
        raise ConfigError("run config needs 'mode'")
    space = _space_from_json(merged.get("space", {}))
    try:
        spec = Specification.from_json(merged.get("spec", {}))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    controller_cfg = _controller_from_json(merged.get("controller", {}))

    evaluator_obj = merged.get("evaluator", {"kind": "surrogate"})
    _require_keys(
        evaluator_obj,
        {"kind", "surrogate", "command", "args", "timeout_seconds", "max_workers"},
        "evaluator",
    )
    kind = evaluator_obj.get("kind", "surrogate")
    surrogate = DEFAULT_SURROGATE
    external = None
    if kind == "surrogate":
        if "surrogate" in evaluator_obj:
            _require_keys(
                evaluator_obj["surrogate"],
                {"acc_floor", "acc_ceiling_span", "param_ref"},
                "evaluator.surrogate",
            )
            try:
                surrogate = SurrogateConfig(**evaluator_obj["surrogate"])
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
    elif kind == "external":
        try:
            external = ExternalEvaluatorConfig(
                command=evaluator_obj.get("command", ""),
                args=tuple(evaluator_obj.get("args", [])),
                timeout_seconds=evaluator_obj.get("timeout_seconds", 600.0),
                max_workers=evaluator_obj.get("max_workers", 1),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    if "cost_lib" in merged and "cost_lib_path" in merged:
        raise ConfigError("give either cost_lib or cost_lib_path, not both")
    try:
        if "cost_lib_path" in merged:
            cost_lib = QceCostLibrary.from_file(merged["cost_lib_path"])
        else:
            cost_lib = QceCostLibrary.from_json(merged.get("cost_lib", {}))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    fixed_network = None
    if merged.get("fixed_network") is not None:
        try:
            fixed_network = network_from_json(merged["fixed_network"])
        except ValueError as exc:
            raise ConfigError(f"fixed_network: {exc}") from None

    out_dir = Path(merged["out_dir"]) if merged.get("out_dir") else None
    try:
        return RunConfig(
            mode=mode,
            episodes=int(merged.get("episodes", 0)),
            seed=int(merged.get("seed", 0)),
            space=space,
            spec=spec,
            controller=controller_cfg,
            evaluator_kind=kind,
            surrogate=surrogate,
            external=external,
            cost_lib=cost_lib,
            fixed_network=fixed_network,
            out_dir=out_dir,
            checkpoint_interval=int(merged.get("checkpoint_interval", 10)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def config_hash(config: RunConfig) -> str:
    """Fingerprint of everything that shapes the policy's vocabulary and tensors."""
    payload = {
        "mode": config.mode,
        "space": space_to_json(config.space),
        "controller": {
            "hidden_units": config.controller.hidden_units,
            "lstm_layers": config.controller.lstm_layers,
            "embedding_dim": config.controller.embedding_dim,
        },
    }
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()


# --- token plumbing -------------------------------------------------------------

def _step_vocabs(space: SpaceConfig, mode: str) -> tuple[int, ...]:
    return tuple(len(space.values(PARAM_KEYS[p])) for p in MODE_POSITIONS[mode])


def _pinned_tokens(space: SpaceConfig, fixed: ChildNetwork, pinned_positions) -> dict[int, int]:
    """Token indices of the pinned parameters of fixed_network, keyed by step."""
    if fixed.num_layers != space.num_layers:
        raise ConfigError(
            f"fixed_network has {fixed.num_layers} layers, space expects {space.num_layers}"
        )
    pinned = {}
    for li, layer in enumerate(fixed.layers):
        values = layer.arch.as_tuple() + layer.quant.as_tuple()
        for pos in pinned_positions:
            key = PARAM_KEYS[pos]
            choices = space.values(key)
            try:
                token = choices.index(values[pos])
            except ValueError:
                raise ConfigError(
                    f"fixed_network layer {li + 1} parameter {key!r}: value "
                    f"{values[pos]} not in space list {choices}"
                ) from None
            pinned[li * STEPS_PER_LAYER + pos] = token
    return pinned


def _merge_tokens(sampled, pinned: dict[int, int], positions, num_layers: int) -> list[int]:
    period = len(positions)
    full = [0] * (STEPS_PER_LAYER * num_layers)
    for step, token in pinned.items():
        full[step] = token
    for li in range(num_layers):
        for k, pos in enumerate(positions):
            full[li * STEPS_PER_LAYER + pos] = sampled[li * period + k]
    return full


def _assert_containment(mode: str, network: ChildNetwork, fixed: ChildNetwork | None) -> None:
    if fixed is None or mode == "joint":
        return
    for li, (got, want) in enumerate(zip(network.layers, fixed.layers)):
        if mode == "quant_only" and got.arch != want.arch:
            raise RuntimeError(f"quant_only altered architecture of layer {li + 1}")
        if mode == "arch_only" and got.quant != want.quant:
            raise RuntimeError(f"arch_only altered quantization of layer {li + 1}")


# --- run loop ---------------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeRecord:
    """One controller rollout as persisted to the episode log.

    ``wall_ms`` is measurement, not behavior: it goes to the timings sidecar
    and is deliberately left out of the canonical JSONL line so that logs stay
    byte-reproducible from (config, seed).
    """

    episode: int
    tokens: tuple[int, ...]
    network: dict
    feasible: bool
    reward: float
    baseline: float
    hw: dict | None
    evaluator_error: str | None
    wall_ms: float

    def to_log_line(self) -> str:
        return canonical_json({
            "episode": self.episode,
            "tokens": list(self.tokens),
            "network": self.network,
            "feasible": self.feasible,
            "reward": self.reward,
            "baseline": self.baseline,
            "hw": self.hw,
            "evaluator_error": self.evaluator_error,
        })


@dataclass
class RunSummary:
    episodes_run: int
    feasible_count: int
    best_reward: float
    best: dict | None  # {"episode", "reward", "network", "hw"}


def _witness_json(network: ChildNetwork, signal: RewardSignal, spec: Specification,
                  lib: QceCostLibrary) -> dict | None:
    if signal.hw_witness is None:
        return None
    sol = solution_to_json(network, signal.hw_witness, spec.clock_hz, lib)
    return {
        "lut": sol["lut"],
        "cycles": sol["latency_cycles"],
        "fps": sol["throughput_fps"],
        "partitions": sol["partitions"],
        "tiles": sol["tiles"],
    }


class _DirLock:
    def __init__(self, out_dir: Path):
        self.path = out_dir / ".lock"
        self.acquired = False

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(
                f"{self.path} exists; another run owns this directory "
                "(remove the lock file if that run is dead)"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        self.acquired = True
        return self

    def __exit__(self, *exc):
        if self.acquired:
            try:
                self.path.unlink()
            except OSError:
                pass
        return False


def _accuracy_fn(config: RunConfig, episode: int):
    if config.evaluator_kind == "external":
        return lambda network: external_evaluate(network, config.external, episode=episode)
    return lambda network: surrogate_accuracy(network, config.surrogate)


def _truncate_file(path: Path, keep: int, required: bool) -> None:
    if not path.exists():
        if required and keep:
            raise LockError(f"cannot resume: {path} is missing")
        return
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    if required and len(lines) < keep:
        raise LockError(f"cannot resume: {path} has {len(lines)} lines, checkpoint expects {keep}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines[:keep])


def run_search(config: RunConfig, resume_from: Path | None = None) -> RunSummary:
    """Execute a run to config.episodes; deterministic given (config, seed)."""
    if config.mode in ("hw_only", "oracle"):
        result = run_hw_only(config.fixed_network, config.spec, config.cost_lib,
                             oracle=config.mode == "oracle")
        if config.out_dir is not None:
            config.out_dir.mkdir(parents=True, exist_ok=True)
            (config.out_dir / "solutions.json").write_text(canonical_json(result) + "\n")
        best = result["solutions"][0] if result["solutions"] else None
        return RunSummary(
            episodes_run=0,
            feasible_count=int(result["feasible"]),
            best_reward=0.0,
            best={"hw": best} if best else None,
        )

    positions = MODE_POSITIONS[config.mode]
    vocabs = _step_vocabs(config.space, config.mode)
    steps = len(positions) * config.space.num_layers
    pinned = {}
    if config.mode != "joint":
        pinned_positions = [p for p in range(STEPS_PER_LAYER) if p not in positions]
        pinned = _pinned_tokens(config.space, config.fixed_network, pinned_positions)

    out_dir = config.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "episodes.jsonl"
    timing_path = out_dir / "timings.csv"
    checkpoint_path = out_dir / "checkpoint.json"
    expected_hash = config_hash(config)

    rng = np.random.default_rng(config.seed)
    params = ctrl.init_policy(vocabs, config.controller, rng)
    baseline = 0.0
    best: dict | None = None
    episode = 0
    feasible_count = 0

    if resume_from is not None:
        payload = ctrl.load_checkpoint(resume_from)
        extra = payload["extra"]
        if extra.get("config_hash") != expected_hash:
            raise ConfigError("checkpoint is incompatible with this configuration (space/controller hash mismatch)")
        params = payload["params"]
        rng.bit_generator.state = payload["rng_state"]
        baseline = extra["baseline"]
        best = extra.get("best")
        feasible_count = extra.get("feasible_count", 0)
        episode = payload["episode"]
        if episode >= config.episodes:
            return RunSummary(
                episodes_run=0,
                feasible_count=feasible_count,
                best_reward=best["reward"] if best else 0.0,
                best=best,
            )

    gamma = config.controller.discount_gamma
    m = config.controller.batch_m
    interval = config.checkpoint_interval

    with _DirLock(out_dir):
        if resume_from is not None:
            _truncate_file(log_path, episode, required=True)
            _truncate_file(timing_path, episode + 1, required=False)  # header line plus one per episode
            log_fh = open(log_path, "a", encoding="utf-8")
            timing_fh = open(timing_path, "a", encoding="utf-8")
        else:
            log_fh = open(log_path, "w", encoding="utf-8")
            timing_fh = open(timing_path, "w", encoding="utf-8")
            timing_fh.write("episode,wall_ms\n")
        batches_done = 0
        try:
            while episode < config.episodes:
                batch = min(m, config.episodes - episode)
                trajectories = [ctrl.sample_trajectory(params, steps, rng) for _ in range(batch)]
                networks = []
                for traj in trajectories:
                    full = _merge_tokens(traj.tokens, pinned, positions, config.space.num_layers)
                    network = decode_actions(full, config.space)
                    _assert_containment(config.mode, network, config.fixed_network)
                    networks.append(network)

                started = time.monotonic()
                indices = range(episode + 1, episode + batch + 1)
                if config.evaluator_kind == "external" and config.external.max_workers > 1:
                    with ThreadPoolExecutor(max_workers=config.external.max_workers) as pool:
                        signals = list(pool.map(
                            lambda pair: compute_reward(
                                pair[1], config.spec, _accuracy_fn(config, pair[0]),
                                config.cost_lib, source="external",
                            ),
                            zip(indices, networks),
                        ))
                else:
                    signals = [
                        compute_reward(net, config.spec, _accuracy_fn(config, idx),
                                       config.cost_lib, source=config.evaluator_kind)
                        for idx, net in zip(indices, networks)
                    ]
                elapsed_ms = (time.monotonic() - started) * 1000.0

                rewards = []
                for idx, traj, network, signal in zip(indices, trajectories, networks, signals):
                    rewards.append(signal.value)
                    if signal.feasible:
                        feasible_count += 1
                    record = EpisodeRecord(
                        episode=idx,
                        tokens=traj.tokens,
                        network=network_to_json(network),
                        feasible=signal.feasible,
                        reward=signal.value,
                        baseline=baseline,
                        hw=_witness_json(network, signal, config.spec, config.cost_lib),
                        evaluator_error=signal.evaluator_error,
                        wall_ms=elapsed_ms / batch,
                    )
                    log_fh.write(record.to_log_line() + "\n")
                    timing_fh.write(f"{record.episode},{record.wall_ms:.3f}\n")
                    if signal.feasible and signal.evaluator_error is None:
                        if best is None or signal.value > best["reward"]:
                            best = {"episode": idx, "reward": signal.value,
                                    "network": record.network, "hw": record.hw}
                log_fh.flush()
                timing_fh.flush()

                gradient = ctrl.policy_gradient(params, trajectories, rewards, baseline, gamma)
                params = ctrl.apply_update(params, gradient, config.controller.learning_rate)
                baseline = ctrl.update_baseline(baseline, rewards, config.controller.baseline_decay)
                episode += batch
                batches_done += 1

                if batches_done % interval == 0 or episode >= config.episodes:
                    ctrl.save_checkpoint(
                        checkpoint_path, params, rng.bit_generator.state, episode,
                        extra={
                            "baseline": baseline,
                            "best": best,
                            "config_hash": expected_hash,
                            "feasible_count": feasible_count,
                        },
                    )
        finally:
            log_fh.close()
            timing_fh.close()

        if best is not None:
            (out_dir / "best.json").write_text(canonical_json(best) + "\n")

    return RunSummary(
        episodes_run=episode,
        feasible_count=feasible_count,
        best_reward=best["reward"] if best else 0.0,
        best=best,
    )


def resume(checkpoint_path: Path, config: RunConfig) -> RunSummary:
    """Continue a checkpointed run; a finished run is a successful no-op."""
    return run_search(config, resume_from=Path(checkpoint_path))


def run_hw_only(network: ChildNetwork, spec: Specification,
                lib: QceCostLibrary = DEFAULT_COST_LIBRARY, oracle: bool = False) -> dict:
    """Standalone hardware search for one network; oracle=True uses brute force."""
    search = brute_force if oracle else dp_search
    frontier = search(network, spec, lib)
    solutions = [solution_to_json(network, sol, spec.clock_hz, lib) for sol in frontier.solutions]
    return {"feasible": bool(frontier), "spec": spec.to_json(), "solutions": solutions}


# --- report export -------------------------------------------------------------

REPORT_COLUMNS = ("episode", "reward", "best_so_far", "feasible_rate", "baseline")


def export_report(log_path) -> tuple[str, int]:
    """Render episodes.jsonl into per-episode CSV; returns (csv text, skipped lines)."""
    lines_out = [",".join(REPORT_COLUMNS)]
    skipped = 0
    best_so_far = 0.0
    feasible_seen = 0
    with open(log_path, "r", encoding="utf-8") as fh:
        for raw in fh:
            raw = raw.strip()
            if not raw:
                continue
            try:
                record = json.loads(raw)
                episode = int(record["episode"])
                reward = float(record["reward"])
                feasible = bool(record["feasible"])
                baseline = float(record["baseline"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                skipped += 1
                continue
            best_so_far = max(best_so_far, reward)
            feasible_seen += int(feasible)
            rate = feasible_seen / episode if episode > 0 else 0.0
            lines_out.append(f"{episode},{reward!r},{best_so_far!r},{rate!r},{baseline!r}")
    return "\n".join(lines_out) + "\n", skipped


def write_report(log_path, out_path) -> tuple[int, int]:
    """Write the CSV next to the log; returns (rows, skipped)."""
    text, skipped = export_report(log_path)
    Path(out_path).write_text(text)
    return text.count("\n") - 1, skipped
