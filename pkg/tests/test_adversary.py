import numpy as np
import pytest

from advlane.adversary import (
    ACTOR_ACTS,
    ACTOR_SIZES,
    CRITIC_ACTS,
    CRITIC_SIZES,
    AdversaryPolicy,
    DdpgHyper,
    ReplayBuffer,
    actor_update,
    build_ego_controller,
    critic_target,
    critic_update,
    detect_plateau,
    load_member,
    member_complete,
    paper_hyper,
    save_member,
    soft_update,
    train_ensemble,
    train_single,
    write_ensemble_index,
)
from advlane.neural import AdamState, Mlp
from advlane.scenario import RewardConfig, ScenarioConfig, scale_obs

CFG = ScenarioConfig()
RCFG = RewardConfig()

TINY = dict(max_episodes=3, warmup=24, batch_size=8, buffer_size=512)


def constant_critic(value):
    """Critic Mlp that outputs `value` everywhere (zero weights, bias)."""
    w = [np.zeros((12, 4)), np.zeros((4, 1))]
    b = [np.zeros(4), np.array([value])]
    return Mlp(w, b, ["relu", "identity"])


def random_batch(rng, n=16):
    s = rng.normal(size=(n, 9)) * 10
    a = rng.uniform(-1, 1, size=(n, 3))
    r = rng.normal(size=n)
    s2 = rng.normal(size=(n, 9)) * 10
    done = (rng.random(n) < 0.2).astype(float)
    return s, a, r, s2, done


# ---------------------------------------------------------------------------
# hyper / buffer


def test_hyper_validation():
    with pytest.raises(ValueError):
        DdpgHyper(gamma=1.0)
    with pytest.raises(ValueError):
        DdpgHyper(tau=0.0)
    with pytest.raises(ValueError):
        DdpgHyper(batch_size=200, buffer_size=100)
    assert paper_hyper().ensemble_size == 100


def test_replay_buffer_fifo_eviction():
    buf = ReplayBuffer(4)
    for i in range(6):
        buf.add(np.full(9, i), np.zeros(3), float(i), np.zeros(9), False)
    assert len(buf) == 4
    stored = sorted(buf.r.tolist())
    assert stored == [2.0, 3.0, 4.0, 5.0]  # oldest evicted first


def test_replay_buffer_sample_without_replacement():
    buf = ReplayBuffer(64)
    for i in range(32):
        buf.add(np.full(9, i), np.zeros(3), float(i), np.zeros(9), False)
    rng = np.random.default_rng(0)
    for _ in range(20):
        s, a, r, s2, d = buf.sample(16, rng)
        assert len(set(r.tolist())) == 16
    with pytest.raises(ValueError):
        buf.sample(64, rng)


# ---------------------------------------------------------------------------
# critic target / update


def test_critic_target_terminal_is_reward():
    pol = AdversaryPolicy.init(0)
    batch = (np.zeros((2, 9)), np.zeros((2, 3)), np.array([-50.0, 3.0]),
             np.zeros((2, 9)), np.array([1.0, 1.0]))
    y = critic_target(batch, pol.target_actor, pol.target_critic, 0.99)
    assert np.allclose(y, [-50.0, 3.0])


def test_critic_target_bootstrap_value():
    pol = AdversaryPolicy.init(0)
    pol.target_critic = constant_critic(10.0)
    batch = (np.zeros((1, 9)), np.zeros((1, 3)), np.array([0.0]),
             np.zeros((1, 9)), np.array([0.0]))
    y = critic_target(batch, pol.target_actor, pol.target_critic, 0.99)
    assert y[0] == pytest.approx(9.9)


def test_critic_target_gamma_zero_myopic():
    pol = AdversaryPolicy.init(1)
    rng = np.random.default_rng(2)
    batch = random_batch(rng)
    y = critic_target(batch, pol.target_actor, pol.target_critic, 0.0)
    assert np.allclose(y, batch[2])


def test_critic_update_at_minimum_no_change():
    # targets equal current predictions -> zero gradient -> params unchanged
    pol = AdversaryPolicy.init(3)
    rng = np.random.default_rng(4)
    s, a, r, s2, done = random_batch(rng)
    ca = np.concatenate([scale_obs(s), a], axis=1)
    targets = pol.critic.forward(ca)[:, 0].copy()
    before = [p.copy() for p in pol.critic.parameters()]
    adam = AdamState(pol.critic.parameters(), lr=0.01)
    loss = critic_update(pol.critic, (s, a, r, s2, done), targets, adam)
    assert loss == pytest.approx(0.0, abs=1e-20)
    for b, p in zip(before, pol.critic.parameters()):
        assert np.array_equal(b, p)


def test_critic_update_loss_matches_scalar_oracle():
    pol = AdversaryPolicy.init(5)
    rng = np.random.default_rng(6)
    batch = random_batch(rng)
    targets = rng.normal(size=len(batch[0]))
    ca = np.concatenate([scale_obs(batch[0]), batch[1]], axis=1)
    preds = pol.critic.forward(ca)[:, 0]
    oracle = sum((float(p) - float(t)) ** 2 for p, t in zip(preds, targets)) \
        / len(preds)
    adam = AdamState(pol.critic.parameters(), lr=0.01)
    loss = critic_update(pol.critic, batch, targets, adam)
    assert abs(loss - oracle) < 1e-10


def test_critic_update_overfits_fixed_batch():
    pol = AdversaryPolicy.init(7)
    rng = np.random.default_rng(8)
    batch = random_batch(rng, n=16)
    targets = rng.normal(size=16) * 2
    adam = AdamState(pol.critic.parameters(), lr=0.01)
    first = critic_update(pol.critic, batch, targets, adam)
    loss = first
    for _ in range(1999):
        loss = critic_update(pol.critic, batch, targets, adam)
    assert loss < 1e-3
    assert loss < first


# ---------------------------------------------------------------------------
# actor update


class QuadraticCritic:
    """Scripted critic Q(s, a) = -sum((a - a_star)^2); closed-form optimum."""

    def __init__(self, a_star):
        self.a_star = np.asarray(a_star, dtype=float)

    def forward(self, ca):
        a = ca[:, 9:]
        return -np.sum((a - self.a_star) ** 2, axis=1, keepdims=True)

    def backward(self, ca, upstream):
        a = ca[:, 9:]
        da = -2.0 * (a - self.a_star) * upstream
        dca = np.concatenate([np.zeros((len(ca), 9)), da], axis=1)
        return [], dca


def test_actor_update_constant_critic_zero_gradient():
    pol = AdversaryPolicy.init(9)
    critic = constant_critic(5.0)
    rng = np.random.default_rng(10)
    batch = random_batch(rng)
    before = [p.copy() for p in pol.actor.parameters()]
    adam = AdamState(pol.actor.parameters(), lr=0.005)
    obj = actor_update(pol.actor, critic, batch, adam)
    assert obj == pytest.approx(5.0)
    for b, p in zip(before, pol.actor.parameters()):
        assert np.array_equal(b, p)


def test_actor_update_converges_to_quadratic_optimum():
    # acceptance-style: 500 updates move mu(s) within 0.05 of a_star
    a_star = np.array([0.5, -0.3, 0.2])
    critic = QuadraticCritic(a_star)
    pol = AdversaryPolicy.init(11)
    rng = np.random.default_rng(12)
    s = rng.normal(size=(16, 9)) * 10
    batch = (s, None, None, None, None)
    adam = AdamState(pol.actor.parameters(), lr=0.005)
    for _ in range(500):
        actor_update(pol.actor, critic, batch, adam)
    out = pol.actor.forward(scale_obs(s))
    assert np.max(np.abs(out - a_star)) < 0.05


def test_actor_update_gradient_matches_finite_differences():
    # chained gradient through both networks vs finite differences of the
    # batch-mean Q(s, mu_theta(s))
    pol = AdversaryPolicy.init(13)
    rng = np.random.default_rng(14)
    s = rng.normal(size=(4, 9)) * 10
    xs = scale_obs(s)

    def objective():
        a = pol.actor.forward(xs)
        return float(np.mean(
            pol.critic.forward(np.concatenate([xs, a], axis=1))))

    a = pol.actor.forward(xs)
    ca = np.concatenate([xs, a], axis=1)
    q = pol.critic.forward(ca)
    upstream = np.full_like(q, 1.0 / len(q))
    _, dca = pol.critic.backward(ca, upstream)
    grads, _ = pol.actor.backward(xs, dca[:, 9:])
    flat = []
    for dw, db in grads:
        flat.extend([dw, db])

    h = 1e-5
    for pi, p in enumerate(pol.actor.parameters()):
        pf = p.reshape(-1)
        gf = flat[pi].reshape(-1)
        idx = rng.choice(pf.size, size=min(25, pf.size), replace=False)
        for i in idx:
            old = pf[i]
            pf[i] = old + h
            hi = objective()
            pf[i] = old - h
            lo = objective()
            pf[i] = old
            num = (hi - lo) / (2 * h)
            denom = max(abs(num), abs(gf[i]), 1e-6)
            assert abs(num - gf[i]) / denom < 1e-4


# ---------------------------------------------------------------------------
# soft update


def test_soft_update_tau_one_copies():
    a = AdversaryPolicy.init(15)
    soft_update(a.target_actor, a.actor, 1.0)
    for pt, ps in zip(a.target_actor.parameters(), a.actor.parameters()):
        assert np.array_equal(pt, ps)


def test_soft_update_tau_zero_frozen():
    a = AdversaryPolicy.init(16)
    before = [p.copy() for p in a.target_actor.parameters()]
    src = a.actor.copy()
    for p in src.parameters():
        p += 1.0
    soft_update(a.target_actor, src, 0.0)
    for b, p in zip(before, a.target_actor.parameters()):
        assert np.array_equal(b, p)


def test_soft_update_arithmetic():
    target = Mlp([np.zeros((2, 2))], [np.zeros(2)], ["identity"])
    source = Mlp([np.ones((2, 2))], [np.ones(2)], ["identity"])
    soft_update(target, source, 0.01)
    assert np.allclose(target.weights[0], 0.01)


def test_soft_update_geometric_convergence():
    a = AdversaryPolicy.init(17)
    src = a.actor
    tgt = a.target_actor
    for p in tgt.parameters():
        p += 1.0  # offset the target
    tau = 0.05

    def dist():
        return max(np.max(np.abs(pt - ps)) for pt, ps in
                   zip(tgt.parameters(), src.parameters()))

    prev = dist()
    for _ in range(10):
        soft_update(tgt, src, tau)
        cur = dist()
        assert cur == pytest.approx(prev * (1 - tau), rel=1e-9)
        prev = cur


# ---------------------------------------------------------------------------
# plateau


def test_plateau_constant_returns():
    assert detect_plateau([5.0] * 20)


def test_plateau_linear_growth_not_detected():
    assert not detect_plateau([10.0 * i for i in range(20)])


def test_plateau_noisy_high_mean():
    rng = np.random.default_rng(18)
    returns = (100 + rng.normal(0, 2, size=20)).tolist()
    assert detect_plateau(returns)


def test_plateau_needs_window():
    with pytest.raises(ValueError):
        detect_plateau([1.0] * 5)


# ---------------------------------------------------------------------------
# training


def gap_spec():
    return {"controller": "gap_acceptance"}


def test_train_single_boundary_stop():
    hyper = DdpgHyper(stop_boundary=-1e9, **TINY)
    ego = build_ego_controller(CFG, gap_spec())
    pol = train_single(CFG, RCFG, ego, hyper, seed=0)
    assert pol.stop_reason == "boundary"
    assert pol.converged
    assert len(pol.curve) == 1


def test_train_single_deterministic():
    hyper = DdpgHyper(**TINY)
    a = train_single(CFG, RCFG, build_ego_controller(CFG, gap_spec()),
                     hyper, seed=3)
    b = train_single(CFG, RCFG, build_ego_controller(CFG, gap_spec()),
                     hyper, seed=3)
    assert a.curve == b.curve
    for pa, pb in zip(a.actor.parameters(), b.actor.parameters()):
        assert np.array_equal(pa, pb)


def test_train_single_final_return_reproducible():
    from advlane.scenario import LaneChangeEnv, run_episode

    hyper = DdpgHyper(**TINY)
    ego = build_ego_controller(CFG, gap_spec())
    pol = train_single(CFG, RCFG, ego, hyper, seed=5)
    env = LaneChangeEnv(CFG, RCFG)
    res = run_episode(env, build_ego_controller(CFG, gap_spec()), pol,
                      np.random.default_rng(pol.final_eval_seed),
                      gamma=hyper.gamma)
    assert res.adv_return == pol.final_return


def test_train_ensemble_n1_equals_single(tmp_path):
    hyper = DdpgHyper(ensemble_size=1, **TINY)
    single = train_single(CFG, RCFG, build_ego_controller(CFG, gap_spec()),
                          hyper, seed=42)
    results = train_ensemble(CFG, RCFG, gap_spec(), hyper, base_seed=42,
                             out_dir=str(tmp_path))
    assert len(results) == 1 and results[0].ok
    assert results[0].policy.curve == single.curve
    for pa, pb in zip(results[0].policy.actor.parameters(),
                      single.actor.parameters()):
        assert np.array_equal(pa, pb)


def test_train_ensemble_deterministic_rerun(tmp_path):
    hyper = DdpgHyper(ensemble_size=3, **TINY)
    r1 = train_ensemble(CFG, RCFG, gap_spec(), hyper, base_seed=7)
    r2 = train_ensemble(CFG, RCFG, gap_spec(), hyper, base_seed=7)
    for a, b in zip(r1, r2):
        assert a.seed == b.seed
        assert a.policy.curve == b.policy.curve
        assert a.policy.actor.save_bytes() == b.policy.actor.save_bytes()


def test_train_ensemble_failures_flagged():
    hyper = DdpgHyper(ensemble_size=2, **TINY)
    bad_spec = {"controller": "dqn", "weights": "/nonexistent/weights.json"}
    results = train_ensemble(CFG, RCFG, bad_spec, hyper, base_seed=0)
    assert len(results) == 2
    assert all(not r.ok for r in results)
    assert all(r.error for r in results)


def test_member_save_load_roundtrip(tmp_path):
    hyper = DdpgHyper(**TINY)
    pol = train_single(CFG, RCFG, build_ego_controller(CFG, gap_spec()),
                       hyper, seed=9)
    save_member(str(tmp_path), 0, pol, hyper)
    assert member_complete(str(tmp_path), 0)
    loaded = load_member(str(tmp_path), 0)
    assert loaded.seed == pol.seed
    assert loaded.stop_reason == pol.stop_reason
    assert loaded.curve == pytest.approx(pol.curve)
    for pa, pb in zip(loaded.actor.parameters(), pol.actor.parameters()):
        assert np.array_equal(pa, pb)


def test_train_ensemble_resume_skips_finished(tmp_path):
    hyper = DdpgHyper(ensemble_size=2, **TINY)
    first = train_ensemble(CFG, RCFG, gap_spec(), hyper, base_seed=11,
                           out_dir=str(tmp_path))
    events = []
    second = train_ensemble(CFG, RCFG, gap_spec(), hyper, base_seed=11,
                            out_dir=str(tmp_path), resume=True,
                            progress=lambda i, status: events.append(status))
    assert events == ["resumed", "resumed"]
    for a, b in zip(first, second):
        assert a.policy.actor.save_bytes() == b.policy.actor.save_bytes()


def test_ensemble_index_written(tmp_path):
    import json

    hyper = DdpgHyper(ensemble_size=2, **TINY)
    results = train_ensemble(CFG, RCFG, gap_spec(), hyper, base_seed=1,
                             out_dir=str(tmp_path))
    path = write_ensemble_index(str(tmp_path), results, hyper, 1)
    with open(path) as f:
        doc = json.load(f)
    assert doc["ensemble_size"] == 2
    assert [m["index"] for m in doc["members"]] == [0, 1]
    assert all(m["status"] == "ok" for m in doc["members"])


def test_no_exploration_noise_actions_deterministic():
    # the acting path adds no noise: same state -> same action, and actions
    # stay strictly inside (-1, 1) through the tanh head
    pol = AdversaryPolicy.init(21)
    rng = np.random.default_rng(22)
    obs = rng.normal(size=9) * 20
    a1 = pol.act_obs(obs)
    a2 = pol.act_obs(obs.copy())
    assert np.array_equal(a1, a2)
    assert np.all(np.abs(a1) < 1.0)
