"""Episode reward: zero when no hardware implementation exists, accuracy otherwise.

Accuracy comes from a pluggable evaluator.  The default surrogate is a
deterministic analytic stand-in for test accuracy that rewards parameter
count and bit width with saturation, so the controller faces the same
capacity-versus-cost tension a trained network would produce.  Real training
can be delegated to an external command speaking one JSON line each way.
"""

from __future__ import annotations

import json
import math
import subprocess
from dataclasses import dataclass

from .hw_search import FrontierSet, PartialSolution, Specification, dp_search
from .hw_model import DEFAULT_COST_LIBRARY, QceCostLibrary
from .space import ChildNetwork, network_to_json, param_count


@dataclass(frozen=True)
class SurrogateConfig:
    acc_floor: float = 0.10
    acc_ceiling_span: float = 0.80
    param_ref: int = 500_000

    def __post_init__(self):
        if self.acc_floor < 0 or self.acc_ceiling_span < 0:
            raise ValueError("surrogate constants must be non-negative")
        if self.acc_floor + self.acc_ceiling_span > 1:
            raise ValueError("acc_floor + acc_ceiling_span must not exceed 1")
        if self.param_ref < 1:
            raise ValueError("param_ref must be >= 1")


DEFAULT_SURROGATE = SurrogateConfig()


def surrogate_accuracy(network: ChildNetwork, config: SurrogateConfig = DEFAULT_SURROGATE) -> float:
    """Deterministic accuracy proxy in [acc_floor, acc_floor + span].

    acc = floor + span * cap * (prod_l u_l)^(1/L) with
    cap = min(1, ln(1+P)/ln(1+param_ref)) and
    u_l = (1 - 2^-(wi+wf)) * (1 - 2^-(ai+af)): zero-bit layers pin the result
    to the floor, wider layers and more parameters raise it with saturation.
    """
    p = param_count(network)
    cap = min(1.0, math.log1p(p) / math.log1p(config.param_ref))
    product = 1.0
    for layer in network.layers:
        q = layer.quant
        u = (1.0 - 2.0 ** -(q.wi + q.wf)) * (1.0 - 2.0 ** -(q.ai + q.af))
        product *= u
    geo = product ** (1.0 / network.num_layers)
    return config.acc_floor + config.acc_ceiling_span * cap * geo


class EvaluatorError(Exception):
    """External evaluator failure; ``code`` discriminates the cause."""

    code = "error"


class EvaluatorTimeout(EvaluatorError):
    code = "timeout"


class EvaluatorExit(EvaluatorError):
    code = "exit"


class EvaluatorProtocol(EvaluatorError):
    code = "protocol"


class EvaluatorRange(EvaluatorError):
    code = "range"


@dataclass(frozen=True)
class ExternalEvaluatorConfig:
    command: str
    args: tuple[str, ...] = ()
    timeout_seconds: float = 600.0
    max_workers: int = 1

    def __post_init__(self):
        if not self.command:
            raise ValueError("external evaluator needs a command")
        if not self.timeout_seconds > 0:
            raise ValueError("timeout_seconds must be > 0")
        if self.max_workers < 1:
            raise ValueError("max_workers must be >= 1")


def external_evaluate(network: ChildNetwork, config: ExternalEvaluatorConfig, episode: int = 0) -> float:
    """Run one accuracy evaluation out of process.

    Writes ``{"network": ..., "episode": n}`` as a single line on the child's
    stdin, expects ``{"accuracy": x}`` on stdout, one invocation per request.
    """
    request = json.dumps({"network": network_to_json(network), "episode": int(episode)})
    proc = subprocess.Popen(
        [config.command, *config.args],
        stdin=subprocess.PIPE,
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=True,
    )
    try:
        stdout, stderr = proc.communicate(input=request + "\n", timeout=config.timeout_seconds)
    except subprocess.TimeoutExpired:
        proc.kill()
        proc.communicate()
        raise EvaluatorTimeout(f"evaluator exceeded {config.timeout_seconds}s") from None
    if proc.returncode != 0:
        raise EvaluatorExit(f"evaluator exited with status {proc.returncode}: {stderr.strip()[:200]}")
    line = stdout.strip().splitlines()[0] if stdout.strip() else ""
    try:
        response = json.loads(line)
    except json.JSONDecodeError as exc:
        raise EvaluatorProtocol(f"bad response line {line[:200]!r}: {exc}") from None
    if not isinstance(response, dict) or "accuracy" not in response:
        raise EvaluatorProtocol(f"response missing 'accuracy': {line[:200]!r}")
    accuracy = response["accuracy"]
    if not isinstance(accuracy, (int, float)) or isinstance(accuracy, bool) or not math.isfinite(accuracy):
        raise EvaluatorRange(f"accuracy {accuracy!r} is not a finite number")
    if not 0.0 <= accuracy <= 1.0:
        raise EvaluatorRange(f"accuracy {accuracy!r} outside [0, 1]")
    return float(accuracy)


@dataclass(frozen=True)
class RewardSignal:
    value: float
    feasible: bool
    accuracy_source: str  # "surrogate" | "external"
    hw_witness: PartialSolution | None
    frontier: FrontierSet | None = None
    evaluator_error: str | None = None

    def __post_init__(self):
        if not self.feasible and self.value != 0.0:
            raise ValueError("infeasible episodes must carry zero reward")
        if self.feasible and self.hw_witness is None:
            raise ValueError("feasible episodes must carry a hardware witness")


def compute_reward(network: ChildNetwork, spec: Specification, accuracy_fn,
                   lib: QceCostLibrary = DEFAULT_COST_LIBRARY,
                   source: str = "surrogate") -> RewardSignal:
    """Hardware feasibility gate followed by the accuracy signal.

    An evaluator failure is not infeasibility: the reward is zero but the
    episode keeps its witness and carries the error code so logs can tell the
    two apart.
    """
    frontier = dp_search(network, spec, lib)
    if not frontier:
        return RewardSignal(0.0, False, source, None, frontier=frontier)
    witness = frontier.solutions[0]
    try:
        accuracy = float(accuracy_fn(network))
    except EvaluatorError as exc:
        return RewardSignal(0.0, True, source, witness, frontier=frontier, evaluator_error=exc.code)
    return RewardSignal(accuracy, True, source, witness, frontier=frontier)
