import json
import math

import numpy as np
import pytest

from quantnas import controller as ctrl


TINY = ctrl.ControllerConfig(hidden_units=4, lstm_layers=2, embedding_dim=3)


def tiny_params(vocabs=(3, 2), seed=7):
    rng = np.random.default_rng(seed)
    return ctrl.init_policy(list(vocabs), TINY, rng), rng


def test_config_validation():
    with pytest.raises(ValueError):
        ctrl.ControllerConfig(hidden_units=0)
    with pytest.raises(ValueError):
        ctrl.ControllerConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        ctrl.ControllerConfig(discount_gamma=0.0)
    with pytest.raises(ValueError):
        ctrl.ControllerConfig(baseline_decay=1.0)


def reference_forward(params, tokens):
    """Independent textbook rollout of the stacked cell; returns per-step top hidden states."""

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    t = params.tensors
    hid, layers, period = params.hidden, params.n_layers, len(params.step_vocabs)
    h = [np.zeros(hid) for _ in range(layers)]
    c = [np.zeros(hid) for _ in range(layers)]
    x = t["start"]
    tops = []
    for step, token in enumerate(tokens):
        inp = x
        for j in range(layers):
            z = t[f"lstm{j}_w"] @ np.concatenate([inp, h[j]]) + t[f"lstm{j}_b"]
            i, f, g, o = z[:hid], z[hid:2 * hid], z[2 * hid:3 * hid], z[3 * hid:]
            c[j] = sig(f) * c[j] + sig(i) * np.tanh(g)
            h[j] = sig(o) * np.tanh(c[j])
            inp = h[j]
        tops.append(h[-1].copy())
        x = t[f"emb{step % period}"][token]
    return tops


def test_forward_matches_reference_rollout():
    params, rng = tiny_params(vocabs=(3, 2), seed=13)
    tokens = [int(rng.integers(0, v)) for v in (3, 2, 3, 2, 3, 2)]
    tops = reference_forward(params, tokens)
    dists = ctrl.step_distributions(params, tokens)
    for t, (top, dist) in enumerate(zip(tops, dists)):
        p = t % 2
        logits = params.tensors[f"head{p}_w"] @ top + params.tensors[f"head{p}_b"]
        expected = np.exp(logits - logits.max())
        expected /= expected.sum()
        assert np.allclose(dist, expected, atol=1e-12), f"step {t}"


def test_softmax_distributions_normalized():
    params, _ = tiny_params()
    dists = ctrl.step_distributions(params, [0, 1, 2, 0])
    assert len(dists) == 4
    for d in dists:
        assert abs(d.sum() - 1.0) < 1e-9
        assert (d > 0).all()


def test_zero_parameters_give_uniform_sampling():
    params, rng = tiny_params(vocabs=(4,))
    for t in params.tensors.values():
        t[...] = 0.0
    counts = np.zeros(4)
    for _ in range(10_000):
        traj = ctrl.sample_trajectory(params, 1, rng)
        counts[traj.tokens[0]] += 1
        assert math.isclose(traj.log_probs[0], math.log(0.25), rel_tol=1e-12)
    freqs = counts / counts.sum()
    assert np.all(np.abs(freqs - 0.25) < 0.02)


def test_seeded_determinism():
    params, _ = tiny_params()
    t1 = ctrl.sample_trajectory(params, 6, np.random.default_rng(42))
    t2 = ctrl.sample_trajectory(params, 6, np.random.default_rng(42))
    assert t1 == t2


def test_trajectory_validation():
    with pytest.raises(ValueError):
        ctrl.Trajectory(tokens=(0,), log_probs=(0.1,))  # positive log prob
    with pytest.raises(ValueError):
        ctrl.Trajectory(tokens=(0, 1), log_probs=(-0.5,))


def test_zero_advantage_gives_zero_gradient():
    params, rng = tiny_params()
    trajs = [ctrl.sample_trajectory(params, 4, rng) for _ in range(3)]
    grads = ctrl.policy_gradient(params, trajs, [0.7, 0.7, 0.7], baseline=0.7)
    assert all(np.all(g == 0.0) for g in grads.values())


def test_single_step_gradient_matches_softmax_closed_form():
    params, rng = tiny_params(vocabs=(3,))
    traj = ctrl.sample_trajectory(params, 1, rng)
    reward, baseline = 1.0, 0.25
    probs = ctrl.step_distributions(params, traj.tokens)[0]
    grads = ctrl.policy_gradient(params, [traj], [reward], baseline)
    expected_dlogits = -(reward - baseline) * probs
    expected_dlogits[traj.tokens[0]] += reward - baseline
    assert np.allclose(grads["head0_b"], expected_dlogits, atol=1e-12)


def test_policy_gradient_rejects_non_finite_reward():
    params, rng = tiny_params()
    traj = ctrl.sample_trajectory(params, 2, rng)
    with pytest.raises(ValueError):
        ctrl.policy_gradient(params, [traj], [math.nan], baseline=0.0)


def finite_difference(params, trajs, rewards, baseline, gamma, eps=1e-4):
    out = {}
    for name, tensor in params.tensors.items():
        g = np.zeros_like(tensor)
        it = np.nditer(tensor, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = tensor[idx]
            tensor[idx] = orig + eps
            up = ctrl.surrogate_objective(params, trajs, rewards, baseline, gamma)
            tensor[idx] = orig - eps
            down = ctrl.surrogate_objective(params, trajs, rewards, baseline, gamma)
            tensor[idx] = orig
            g[idx] = (up - down) / (2 * eps)
            it.iternext()
        out[name] = g
    return out


def test_gradient_matches_finite_differences():
    params, rng = tiny_params(vocabs=(3, 2), seed=5)
    trajs = [ctrl.sample_trajectory(params, 4, rng) for _ in range(3)]
    rewards = [0.9, 0.2, 0.4]
    baseline, gamma = 0.3, 0.9
    analytic = ctrl.policy_gradient(params, trajs, rewards, baseline, gamma)
    numeric = finite_difference(params, trajs, rewards, baseline, gamma)
    for name in analytic:
        denom = max(np.linalg.norm(numeric[name]), np.linalg.norm(analytic[name]), 1e-12)
        rel = np.linalg.norm(numeric[name] - analytic[name]) / denom
        assert rel <= 1e-4, f"{name}: rel err {rel}"


def test_discount_scales_step_coefficients():
    # With T = 2 and one head per step, each head's bias gradient is exactly
    # that step's logit gradient: the last step keeps weight gamma^0 = 1, the
    # first shrinks by gamma^(T-1).
    params, rng = tiny_params(vocabs=(3, 2), seed=3)
    traj = ctrl.sample_trajectory(params, 2, rng)
    g_flat = ctrl.policy_gradient(params, [traj], [1.0], 0.0, gamma=1.0)
    g_disc = ctrl.policy_gradient(params, [traj], [1.0], 0.0, gamma=0.5)
    assert np.allclose(g_disc["head1_b"], g_flat["head1_b"], atol=1e-15)
    assert np.allclose(g_disc["head0_b"], 0.5 * g_flat["head0_b"], atol=1e-15)


def test_apply_update_trivia():
    params, rng = tiny_params()
    zero = params.zeros_like()
    updated = ctrl.apply_update(params, zero, 0.2)
    assert all(np.array_equal(updated.tensors[k], params.tensors[k]) for k in zero)
    traj = ctrl.sample_trajectory(params, 2, rng)
    grads = ctrl.policy_gradient(params, [traj], [1.0], 0.0)
    frozen = ctrl.apply_update(params, grads, 0.0)
    assert all(np.array_equal(frozen.tensors[k], params.tensors[k]) for k in grads)


def test_ascent_step_increases_rewarded_action_probability():
    params, rng = tiny_params(vocabs=(2,), seed=11)
    traj = ctrl.sample_trajectory(params, 1, rng)
    tok = traj.tokens[0]
    before = ctrl.step_distributions(params, [tok])[0][tok]
    grads = ctrl.policy_gradient(params, [traj], [1.0], baseline=0.0)
    after_params = ctrl.apply_update(params, grads, 0.2)
    after = ctrl.step_distributions(after_params, [tok])[0][tok]
    assert after > before


def test_update_baseline():
    assert ctrl.update_baseline(0.5, [0.5, 0.5], 0.95) == 0.5  # fixed point
    assert math.isclose(ctrl.update_baseline(0.0, [1.0], 0.95), 0.05)
    b = 0.0
    for _ in range(200):
        b = ctrl.update_baseline(b, [0.8, 0.8, 0.8], 0.9)
    assert abs(b - 0.8) < 1e-8  # geometric convergence to the stationary mean
    with pytest.raises(ValueError):
        ctrl.update_baseline(0.0, [], 0.9)
    with pytest.raises(ValueError):
        ctrl.update_baseline(0.0, [1.0], 1.5)


def test_bandit_converges():
    cfg = ctrl.ControllerConfig(learning_rate=0.2, batch_m=5)
    rng = np.random.default_rng(0)
    params = ctrl.init_policy([2], cfg, rng)
    baseline = 0.0
    for update in range(500):
        trajs = [ctrl.sample_trajectory(params, 1, rng) for _ in range(cfg.batch_m)]
        rewards = [1.0 if t.tokens[0] == 0 else 0.0 for t in trajs]
        grads = ctrl.policy_gradient(params, trajs, rewards, baseline, cfg.discount_gamma)
        params = ctrl.apply_update(params, grads, cfg.learning_rate)
        baseline = ctrl.update_baseline(baseline, rewards, cfg.baseline_decay)
        if ctrl.step_distributions(params, [0])[0][0] > 0.95:
            break
    assert ctrl.step_distributions(params, [0])[0][0] > 0.95
    assert update < 499


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    params, rng = tiny_params()
    state = rng.bit_generator.state
    path1 = tmp_path / "ck1.json"
    path2 = tmp_path / "ck2.json"
    ctrl.save_checkpoint(path1, params, state, episode=42, extra={"baseline": 0.25})
    payload = ctrl.load_checkpoint(path1)
    assert payload["episode"] == 42
    assert payload["extra"] == {"baseline": 0.25}
    loaded = payload["params"]
    assert loaded.step_vocabs == params.step_vocabs
    for k, v in params.tensors.items():
        assert np.array_equal(loaded.tensors[k], v)
    ctrl.save_checkpoint(path2, loaded, payload["rng_state"], payload["episode"], payload["extra"])
    assert path1.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_wrong_kind(tmp_path):
    path = tmp_path / "bogus.json"
    path.write_text(json.dumps({"kind": "something-else", "version": 1}))
    with pytest.raises(ValueError, match="not a policy checkpoint"):
        ctrl.load_checkpoint(path)


def test_params_validation():
    params, _ = tiny_params()
    bad = {k: v.copy() for k, v in params.tensors.items()}
    bad["start"] = np.zeros(99)
    with pytest.raises(ValueError, match="mis-shaped"):
        ctrl.PolicyParameters(params.step_vocabs, params.hidden, params.n_layers, params.emb_dim, bad)
    worse = {k: v.copy() for k, v in params.tensors.items()}
    worse["lstm0_b"][0] = math.inf
    with pytest.raises(ValueError, match="non-finite"):
        ctrl.PolicyParameters(params.step_vocabs, params.hidden, params.n_layers, params.emb_dim, worse)
