"""Stochastic policy over categorical design tokens, trained by REINFORCE.

The policy is a stacked LSTM rolled out for T steps.  Step t draws from a
softmax head over that step's vocabulary; the sampled token's embedding feeds
step t+1 (a learned start vector feeds step 1).  Vocabularies repeat with
period P (= number of parameter positions), so heads and embedding tables are
shared across layers of the sampled network but not across positions.

Gradients are computed by hand: for a batch of m trajectories with rewards
R_k and baseline b, the ascent direction is

    (1/m) sum_k sum_t gamma^(T-t) * grad log pi(a_t | a_1..a_{t-1}) * (R_k - b)

backpropagated through the unrolled cells, heads, and embeddings.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ControllerConfig:
    hidden_units: int = 35
    lstm_layers: int = 2
    embedding_dim: int = 24
    learning_rate: float = 0.2
    batch_m: int = 5
    discount_gamma: float = 1.0
    baseline_decay: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.hidden_units < 1 or self.lstm_layers < 1 or self.embedding_dim < 1:
            raise ValueError("controller dimensions must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_m < 1:
            raise ValueError("batch_m must be >= 1")
        if not 0 < self.discount_gamma <= 1:
            raise ValueError("discount_gamma must be in (0, 1]")
        if not 0 < self.baseline_decay < 1:
            raise ValueError("baseline_decay must be in (0, 1)")


@dataclass(frozen=True)
class Trajectory:
    """One rollout: sampled tokens and their log probabilities under the policy."""

    tokens: tuple[int, ...]
    log_probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.log_probs):
            raise ValueError("tokens and log_probs must align")
        for lp in self.log_probs:
            if not (math.isfinite(lp) and lp <= 0):
                raise ValueError(f"log probability {lp!r} out of range")


def _param_specs(step_vocabs, hidden: int, n_layers: int, emb_dim: int):
    specs = [("start", (emb_dim,))]
    for p, vocab in enumerate(step_vocabs):
        specs.append((f"emb{p}", (vocab, emb_dim)))
    for j in range(n_layers):
        in_dim = emb_dim if j == 0 else hidden
        specs.append((f"lstm{j}_w", (4 * hidden, in_dim + hidden)))
        specs.append((f"lstm{j}_b", (4 * hidden,)))
    for p, vocab in enumerate(step_vocabs):
        specs.append((f"head{p}_w", (vocab, hidden)))
        specs.append((f"head{p}_b", (vocab,)))
    return specs


class PolicyParameters:
    """All trainable tensors plus the structure they were built for."""

    __slots__ = ("step_vocabs", "hidden", "n_layers", "emb_dim", "tensors")

    def __init__(self, step_vocabs, hidden, n_layers, emb_dim, tensors):
        self.step_vocabs = tuple(int(v) for v in step_vocabs)
        self.hidden = int(hidden)
        self.n_layers = int(n_layers)
        self.emb_dim = int(emb_dim)
        self.tensors = tensors
        if any(v < 1 for v in self.step_vocabs) or not self.step_vocabs:
            raise ValueError("step vocabularies must be non-empty and positive")
        for name, shape in _param_specs(self.step_vocabs, self.hidden, self.n_layers, self.emb_dim):
            t = tensors.get(name)
            if t is None or t.shape != shape:
                raise ValueError(f"tensor {name!r} missing or mis-shaped (want {shape})")
            if not np.all(np.isfinite(t)):
                raise ValueError(f"tensor {name!r} holds non-finite values")

    def clone(self) -> "PolicyParameters":
        return PolicyParameters(
            self.step_vocabs, self.hidden, self.n_layers, self.emb_dim,
            {k: v.copy() for k, v in self.tensors.items()},
        )

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}


def init_policy(step_vocabs, config: ControllerConfig, rng: np.random.Generator) -> PolicyParameters:
    """Fresh parameters, every tensor uniform in [-0.08, 0.08]."""
    tensors = {}
    for name, shape in _param_specs(step_vocabs, config.hidden_units, config.lstm_layers, config.embedding_dim):
        tensors[name] = rng.uniform(-0.08, 0.08, size=shape)
    return PolicyParameters(step_vocabs, config.hidden_units, config.lstm_layers, config.embedding_dim, tensors)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _forward(params: PolicyParameters, n_steps: int, rng=None, tokens=None):
    """Roll the policy out for n_steps.

    With ``rng`` given, samples tokens; with ``tokens`` given, replays them
    (teacher forcing) to rebuild activations for the backward pass.  Returns
    (tokens, log_probs, caches); caches hold everything backward needs.
    """
    t_params = params.tensors
    hidden, n_layers = params.hidden, params.n_layers
    period = len(params.step_vocabs)
    h = [np.zeros(hidden) for _ in range(n_layers)]
    c = [np.zeros(hidden) for _ in range(n_layers)]
    x = t_params["start"]
    out_tokens: list[int] = []
    log_probs: list[float] = []
    caches = []
    for t in range(n_steps):
        p = t % period
        inp = x
        step_cache = []
        for j in range(n_layers):
            xc = np.concatenate([inp, h[j]])
            z = t_params[f"lstm{j}_w"] @ xc + t_params[f"lstm{j}_b"]
            i_g = _sigmoid(z[:hidden])
            f_g = _sigmoid(z[hidden:2 * hidden])
            g_g = np.tanh(z[2 * hidden:3 * hidden])
            o_g = _sigmoid(z[3 * hidden:])
            c_new = f_g * c[j] + i_g * g_g
            tanh_c = np.tanh(c_new)
            h_new = o_g * tanh_c
            step_cache.append((xc, c[j], i_g, f_g, g_g, o_g, tanh_c))
            h[j], c[j] = h_new, c_new
            inp = h_new
        logits = t_params[f"head{p}_w"] @ h[-1] + t_params[f"head{p}_b"]
        zs = logits - logits.max()
        lse = math.log(np.exp(zs).sum())
        probs = np.exp(zs - lse)
        if tokens is None:
            u = rng.random()
            tok = int(np.searchsorted(np.cumsum(probs), u, side="right"))
            tok = min(tok, len(probs) - 1)
        else:
            tok = int(tokens[t])
            if not 0 <= tok < len(probs):
                raise ValueError(f"token {tok} outside vocabulary at step {t}")
        out_tokens.append(tok)
        log_probs.append(float(zs[tok] - lse))
        caches.append((p, probs, h[-1].copy(), step_cache))
        x = t_params[f"emb{p}"][tok]
    return out_tokens, log_probs, caches


def sample_trajectory(params: PolicyParameters, n_steps: int, rng: np.random.Generator) -> Trajectory:
    tokens, log_probs, _ = _forward(params, n_steps, rng=rng)
    return Trajectory(tokens=tuple(tokens), log_probs=tuple(log_probs))


def step_distributions(params: PolicyParameters, tokens) -> list[np.ndarray]:
    """Softmax distribution the policy held at each step of a replayed rollout."""
    _, _, caches = _forward(params, len(tokens), tokens=tokens)
    return [cache[1] for cache in caches]


def trajectory_score(params: PolicyParameters, tokens) -> float:
    """Sum of per-step log probabilities of a fixed token sequence."""
    _, log_probs, _ = _forward(params, len(tokens), tokens=tokens)
    return float(sum(log_probs))


def surrogate_objective(params: PolicyParameters, trajectories, rewards, baseline: float,
                        gamma: float = 1.0) -> float:
    """The scalar whose gradient policy_gradient returns; used by gradient checks."""
    total = 0.0
    m = len(trajectories)
    for traj, reward in zip(trajectories, rewards):
        _, log_probs, _ = _forward(params, len(traj.tokens), tokens=traj.tokens)
        big_t = len(log_probs)
        for t, lp in enumerate(log_probs):
            total += gamma ** (big_t - 1 - t) * lp * (reward - baseline)
    return total / m


def policy_gradient(params: PolicyParameters, trajectories, rewards, baseline: float,
                    gamma: float = 1.0) -> dict[str, np.ndarray]:
    """Exact gradient of surrogate_objective via backpropagation through time."""
    if not trajectories:
        raise ValueError("need at least one trajectory")
    rewards = [float(r) for r in rewards]
    if len(rewards) != len(trajectories):
        raise ValueError("one reward per trajectory required")
    for r in rewards:
        if not math.isfinite(r):
            raise ValueError(f"non-finite reward {r!r}")

    grads = params.zeros_like()
    t_params = params.tensors
    hidden, n_layers = params.hidden, params.n_layers
    m = len(trajectories)

    for traj, reward in zip(trajectories, rewards):
        advantage = reward - baseline
        if advantage == 0.0:
            continue
        tokens = traj.tokens
        big_t = len(tokens)
        _, _, caches = _forward(params, big_t, tokens=tokens)

        dh_carry = [np.zeros(hidden) for _ in range(n_layers)]
        dc_carry = [np.zeros(hidden) for _ in range(n_layers)]
        for t in range(big_t - 1, -1, -1):
            p, probs, h_top, step_cache = caches[t]
            coeff = (gamma ** (big_t - 1 - t)) * advantage / m
            dlogits = -coeff * probs
            dlogits[tokens[t]] += coeff
            grads[f"head{p}_w"] += np.outer(dlogits, h_top)
            grads[f"head{p}_b"] += dlogits

            dh = [dh_carry[j].copy() for j in range(n_layers)]
            dh[-1] += t_params[f"head{p}_w"].T @ dlogits
            # The embedding consumed at step t+1 is a leaf parameter; credit it
            # directly when its gradient arrives from that step's layer 0.
            for j in range(n_layers - 1, -1, -1):
                xc, c_prev, i_g, f_g, g_g, o_g, tanh_c = step_cache[j]
                dh_j = dh[j]
                dc_j = dc_carry[j] + dh_j * o_g * (1.0 - tanh_c * tanh_c)
                do = dh_j * tanh_c
                di = dc_j * g_g
                dg = dc_j * i_g
                df = dc_j * c_prev
                dz = np.concatenate([
                    di * i_g * (1.0 - i_g),
                    df * f_g * (1.0 - f_g),
                    dg * (1.0 - g_g * g_g),
                    do * o_g * (1.0 - o_g),
                ])
                grads[f"lstm{j}_w"] += np.outer(dz, xc)
                grads[f"lstm{j}_b"] += dz
                dxc = t_params[f"lstm{j}_w"].T @ dz
                in_dim = xc.shape[0] - hidden
                dinp = dxc[:in_dim]
                dh_carry[j] = dxc[in_dim:]
                dc_carry[j] = dc_j * f_g
                if j > 0:
                    dh[j - 1] += dinp
                elif t > 0:
                    prev_p = (t - 1) % len(params.step_vocabs)
                    grads[f"emb{prev_p}"][tokens[t - 1]] += dinp
                else:
                    grads["start"] += dinp
    return grads


def apply_update(params: PolicyParameters, gradient: dict[str, np.ndarray],
                 learning_rate: float) -> PolicyParameters:
    """One stochastic gradient *ascent* step; returns fresh parameters."""
    tensors = {k: v + learning_rate * gradient[k] for k, v in params.tensors.items()}
    return PolicyParameters(params.step_vocabs, params.hidden, params.n_layers, params.emb_dim, tensors)


def update_baseline(baseline: float, rewards, decay: float) -> float:
    """Exponential moving average of batch-mean rewards."""
    if not 0 < decay < 1:
        raise ValueError("decay must be in (0, 1)")
    rewards = list(rewards)
    if not rewards:
        raise ValueError("need at least one reward")
    return decay * baseline + (1.0 - decay) * (sum(rewards) / len(rewards))


# --- checkpoint container -----------------------------------------------------

CHECKPOINT_VERSION = 1


def params_to_jsonable(params: PolicyParameters) -> dict:
    return {
        "step_vocabs": list(params.step_vocabs),
        "hidden": params.hidden,
        "n_layers": params.n_layers,
        "emb_dim": params.emb_dim,
        "tensors": {k: v.tolist() for k, v in params.tensors.items()},
    }


def params_from_jsonable(obj: dict) -> PolicyParameters:
    tensors = {k: np.asarray(v, dtype=np.float64) for k, v in obj["tensors"].items()}
    return PolicyParameters(obj["step_vocabs"], obj["hidden"], obj["n_layers"], obj["emb_dim"], tensors)


def save_checkpoint(path, params: PolicyParameters, rng_state: dict, episode: int,
                    extra: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": "quantnas-policy-checkpoint",
        "episode": int(episode),
        "rng_state": rng_state,
        "params": params_to_jsonable(params),
        "extra": extra or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("kind") != "quantnas-policy-checkpoint":
        raise ValueError("not a policy checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    payload["params"] = params_from_jsonable(payload["params"])
    return payload
