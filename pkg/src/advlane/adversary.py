"""DDPG training of the joint three-vehicle adversarial policy.

The three surrounding vehicles are treated as one agent: a single actor
maps the 9-vector state to the joint [-1, 1]^3 longitudinal action, a
single critic scores state-action pairs, and both have slowly-tracking
target copies. An ensemble of independently initialized agents is trained
*without exploration noise* so each converges quickly to its own local
optimum; diversity comes from the random initializations.
"""

import csv
import json
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .neural import AdamState, Mlp, adam_step, flatten_grads
from .scenario import (
    IdmParams,
    LaneChangeEnv,
    RewardConfig,
    ScenarioConfig,
    run_episode,
    scale_obs,
)

ACTOR_SIZES = [9, 64, 64, 3]
ACTOR_ACTS = ("relu", "relu", "tanh")
CRITIC_SIZES = [12, 64, 64, 32, 1]
CRITIC_ACTS = ("relu", "relu", "relu", "identity")


@dataclass
class DdpgHyper:
    gamma: float = 0.99
    actor_lr: float = 0.005
    critic_lr: float = 0.01
    tau: float = 0.01
    batch_size: int = 128
    buffer_size: int = 10000
    ensemble_size: int = 8          # desk default; the paper-scale preset uses 100
    stop_boundary: float = 100.0
    max_episodes: int = 300
    warmup: int = 500
    plateau_window: int = 20
    plateau_rel: float = 0.05
    plateau_abs: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.batch_size > self.buffer_size:
            raise ValueError("batch size cannot exceed buffer size")

    def to_dict(self):
        return asdict(self)


def paper_hyper():
    """Paper-scale preset: 100-member ensemble, longer member caps."""
    return DdpgHyper(ensemble_size=100, max_episodes=2000)


class ReplayBuffer:
    """Bounded FIFO of (s, a, r_adv, s_next, terminal); batches sample
    uniformly without replacement."""

    def __init__(self, capacity):
        self.capacity = capacity
        self.s = np.zeros((capacity, 9))
        self.a = np.zeros((capacity, 3))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, 9))
        self.done = np.zeros(capacity)
        self.idx = 0
        self.full = False

    def __len__(self):
        return self.capacity if self.full else self.idx

    def add(self, s, a, r, s2, done):
        i = self.idx
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s2[i] = s2
        self.done[i] = float(done)
        self.idx = (i + 1) % self.capacity
        self.full = self.full or self.idx == 0

    def sample(self, batch, rng):
        n = len(self)
        if batch > n:
            raise ValueError("batch larger than buffer contents")
        idx = rng.choice(n, size=batch, replace=False)
        return (self.s[idx], self.a[idx], self.r[idx], self.s2[idx],
                self.done[idx])


@dataclass
class AdversaryPolicy:
    actor: Mlp
    critic: Mlp
    target_actor: Mlp = None
    target_critic: Mlp = None
    seed: int = 0
    curve: list = field(default_factory=list)   # per-episode discounted returns
    converged: bool = False
    stop_reason: str = "cap"                    # plateau | boundary | cap
    final_return: float = 0.0                   # post-training eval episode
    final_eval_seed: int = 0

    @classmethod
    def init(cls, seed):
        rng = np.random.default_rng(seed)
        actor = Mlp.init(ACTOR_SIZES, ACTOR_ACTS, rng)
        critic = Mlp.init(CRITIC_SIZES, CRITIC_ACTS, rng)
        return cls(actor=actor, critic=critic, target_actor=actor.copy(),
                   target_critic=critic.copy(), seed=seed)

    def act_obs(self, obs):
        return self.actor.forward(scale_obs(obs))

    def act(self, state):
        return self.act_obs(state.observation())


# ---------------------------------------------------------------------------
# DDPG updates


def critic_target(batch, target_actor, target_critic, gamma):
    """y_i = r_i for terminal transitions, else r_i + gamma Q'(s', mu'(s'))."""
    s, a, r, s2, done = batch
    xs2 = scale_obs(s2)
    a2 = target_actor.forward(xs2)
    q2 = target_critic.forward(np.concatenate([xs2, a2], axis=1))[:, 0]
    return r + gamma * (1.0 - done) * q2


def critic_update(critic, batch, targets, optimizer):
    """One Adam step on the MSE toward frozen targets; returns pre-step loss."""
    s, a, _, _, _ = batch
    ca = np.concatenate([scale_obs(s), a], axis=1)
    pred = critic.forward(ca)
    err = pred[:, 0] - targets
    loss = float(np.mean(err * err))
    assert math.isfinite(loss), "non-finite critic loss"
    upstream = (2.0 / len(err)) * err[:, None]
    grads, _ = critic.backward(ca, upstream)
    adam_step(critic.parameters(), flatten_grads(grads), optimizer)
    return loss


def actor_update(actor, critic, batch, optimizer):
    """Ascend E[Q(s, mu(s))] through the frozen critic's input gradient;
    returns the pre-step batch-mean Q."""
    s = batch[0]
    xs = scale_obs(s)
    a = actor.forward(xs)
    ca = np.concatenate([xs, a], axis=1)
    q = critic.forward(ca)
    objective = float(np.mean(q))
    assert math.isfinite(objective), "non-finite actor objective"
    upstream = np.full_like(q, 1.0 / len(q))
    _, dca = critic.backward(ca, upstream)
    dq_da = dca[:, xs.shape[1]:]
    grads, _ = actor.backward(xs, dq_da)
    neg = [-g for g in flatten_grads(grads)]
    adam_step(actor.parameters(), neg, optimizer)
    return objective


def soft_update(target, source, tau):
    """theta' = tau * theta + (1 - tau) * theta', elementwise, in place."""
    for pt, ps in zip(target.parameters(), source.parameters()):
        pt *= 1.0 - tau
        pt += tau * ps
    return target


def detect_plateau(returns, window=20, rel=0.05, abs_floor=1.0):
    """True iff the last `window` returns have settled: their standard
    deviation is below max(abs_floor, rel * |mean|)."""
    if len(returns) < window:
        raise ValueError("need at least window-length returns")
    tail = np.asarray(returns[-window:], dtype=float)
    return bool(np.std(tail) < max(abs_floor, rel * abs(float(np.mean(tail)))))


# ---------------------------------------------------------------------------
# training


FINAL_EVAL_SEED_OFFSET = 1_000_000


def train_single(cfg, rcfg, ego_controller, hyper, seed, progress=None):
    """Train one adversary against a frozen ego controller.

    Deterministic actor throughout (no exploration noise); after the warmup
    transitions, every environment step performs one critic update, one
    actor update and soft target updates. Training stops on a return
    plateau, on an episode return reaching the stop boundary, or at the
    episode cap. A final no-update evaluation episode is recorded so the
    saved policy's return is reproducible from its manifest.
    """
    rng = np.random.default_rng(seed)
    policy = AdversaryPolicy.init(seed)
    buf = ReplayBuffer(hyper.buffer_size)
    adam_a = AdamState(policy.actor.parameters(), lr=hyper.actor_lr)
    adam_c = AdamState(policy.critic.parameters(), lr=hyper.critic_lr)
    env = LaneChangeEnv(cfg, rcfg)

    min_fill = max(hyper.warmup, hyper.batch_size)
    returns = []
    stop_reason = "cap"
    for ep in range(1, hyper.max_episodes + 1):
        state = env.reset(rng)
        ego_controller.reset(state)
        ep_ret = 0.0
        disc = 1.0
        while not state.done:
            obs = state.observation()
            a = policy.actor.forward(scale_obs(obs))
            cmd = ego_controller.act(state)
            tr = env.step(cmd, a)
            nxt_obs = tr.s_next.observation()
            buf.add(obs, a, tr.r_adv, nxt_obs, tr.terminal)
            ep_ret += disc * tr.r_adv
            disc *= hyper.gamma
            if len(buf) >= min_fill:
                batch = buf.sample(hyper.batch_size, rng)
                y = critic_target(batch, policy.target_actor,
                                  policy.target_critic, hyper.gamma)
                critic_update(policy.critic, batch, y, adam_c)
                actor_update(policy.actor, policy.critic, batch, adam_a)
                soft_update(policy.target_critic, policy.critic, hyper.tau)
                soft_update(policy.target_actor, policy.actor, hyper.tau)
            state = tr.s_next
        returns.append(ep_ret)
        if progress is not None:
            progress(ep, ep_ret, state.outcome)
        if ep_ret >= hyper.stop_boundary:
            stop_reason = "boundary"
            break
        if len(returns) >= hyper.plateau_window and detect_plateau(
                returns, hyper.plateau_window, hyper.plateau_rel,
                hyper.plateau_abs):
            stop_reason = "plateau"
            break

    policy.curve = returns
    policy.stop_reason = stop_reason
    policy.converged = stop_reason != "cap"
    policy.final_eval_seed = seed + FINAL_EVAL_SEED_OFFSET
    ego_eval = ego_controller
    res = run_episode(env, ego_eval, policy,
                      np.random.default_rng(policy.final_eval_seed),
                      gamma=hyper.gamma)
    policy.final_return = res.adv_return
    return policy


# ---------------------------------------------------------------------------
# ensemble


@dataclass
class MemberResult:
    index: int
    seed: int
    policy: AdversaryPolicy = None
    error: str = None

    @property
    def ok(self):
        return self.error is None and self.policy is not None


def member_dir(out_dir, index):
    return os.path.join(out_dir, f"member_{index:03d}")


def save_member(out_dir, index, policy, hyper):
    d = member_dir(out_dir, index)
    os.makedirs(d, exist_ok=True)
    policy.actor.save(os.path.join(d, "actor.json"))
    policy.critic.save(os.path.join(d, "critic.json"))
    with open(os.path.join(d, "curve.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["episode", "return", "stop_reason"])
        for ep, ret in enumerate(policy.curve, start=1):
            w.writerow([ep, repr(ret), policy.stop_reason])
    manifest = {
        "seed": policy.seed,
        "hyper": hyper.to_dict(),
        "build": __version__,
        "stop_reason": policy.stop_reason,
        "converged": policy.converged,
        "episodes": len(policy.curve),
        "final_return": policy.final_return,
        "final_eval_seed": policy.final_eval_seed,
    }
    tmp = os.path.join(d, "manifest.json.tmp")
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    os.replace(tmp, os.path.join(d, "manifest.json"))
    return d


def member_complete(out_dir, index):
    d = member_dir(out_dir, index)
    return all(
        os.path.exists(os.path.join(d, name))
        for name in ("actor.json", "critic.json", "curve.csv", "manifest.json")
    )


def load_member(out_dir, index):
    d = member_dir(out_dir, index)
    with open(os.path.join(d, "manifest.json")) as f:
        manifest = json.load(f)
    policy = AdversaryPolicy(
        actor=Mlp.load(os.path.join(d, "actor.json")),
        critic=Mlp.load(os.path.join(d, "critic.json")),
        seed=manifest["seed"],
        converged=manifest["converged"],
        stop_reason=manifest["stop_reason"],
        final_return=manifest["final_return"],
        final_eval_seed=manifest["final_eval_seed"],
    )
    with open(os.path.join(d, "curve.csv")) as f:
        rows = list(csv.DictReader(f))
    policy.curve = [float(r["return"]) for r in rows]
    return policy


def _train_member_task(args):
    cfg_doc, rcfg_doc, ego_spec, hyper_doc, index, seed = args
    cfg = ScenarioConfig.from_dict(cfg_doc)
    rcfg = RewardConfig.from_dict(rcfg_doc)
    hyper = DdpgHyper(**hyper_doc)
    ego = build_ego_controller(cfg, ego_spec)
    policy = train_single(cfg, rcfg, ego, hyper, seed)
    return index, policy


def build_ego_controller(cfg, spec):
    """Construct an ego controller from a plain-dict spec (process-safe)."""
    from .ego import DqnEgo, DqnPolicy, GapAcceptanceEgo, GapThresholds

    kind = spec.get("controller", "gap_acceptance")
    idm = IdmParams(**spec.get("idm", {}))
    if kind == "gap_acceptance":
        th = GapThresholds(s0=idm.s0, T=idm.T, margin=spec.get("margin", 1.0))
        return GapAcceptanceEgo(cfg, idm=idm, thresholds=th,
                                maneuver_duration=spec.get("maneuver_duration", 3.0),
                                align=spec.get("align", True))
    if kind == "dqn":
        policy = DqnPolicy.load(spec["weights"])
        return DqnEgo(cfg, policy, idm=idm,
                      maneuver_duration=spec.get("maneuver_duration", 3.0),
                      align=spec.get("align", True))
    raise ValueError(f"unknown ego controller {kind!r}")


def train_ensemble(cfg, rcfg, ego_spec, hyper, base_seed, out_dir=None,
                   jobs=1, resume=False, progress=None):
    """Train hyper.ensemble_size independent adversaries with seeds
    base_seed + i. Results are ordered by member index; per-member failures
    become flagged entries instead of aborting the ensemble. With out_dir,
    each member is saved as soon as it finishes."""
    n = hyper.ensemble_size
    if n < 1:
        raise ValueError("ensemble needs at least one member")
    results = [None] * n
    todo = []
    for i in range(n):
        if resume and out_dir and member_complete(out_dir, i):
            policy = load_member(out_dir, i)
            results[i] = MemberResult(i, policy.seed, policy)
            if progress is not None:
                progress(i, "resumed")
        else:
            todo.append(i)

    def finish(i, policy, err=None):
        results[i] = MemberResult(i, base_seed + i, policy, err)
        if policy is not None and out_dir:
            save_member(out_dir, i, policy, hyper)
        if progress is not None:
            progress(i, "failed" if err else results[i].policy.stop_reason)

    if jobs <= 1:
        for i in todo:
            try:
                ego = build_ego_controller(cfg, ego_spec)
                policy = train_single(cfg, rcfg, ego, hyper, base_seed + i)
                finish(i, policy)
            except Exception:
                finish(i, None, traceback.format_exc())
    else:
        tasks = [
            (cfg.to_dict(), rcfg.to_dict(), ego_spec, hyper.to_dict(), i,
             base_seed + i)
            for i in todo
        ]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_train_member_task, t): t[4] for t in tasks}
            for fut, i in futures.items():
                try:
                    idx, policy = fut.result()
                    finish(idx, policy)
                except Exception:
                    finish(i, None, traceback.format_exc())
    return results


def write_ensemble_index(out_dir, results, hyper, base_seed):
    """Summary of all members; deterministic bytes for a fixed run."""
    doc = {
        "base_seed": base_seed,
        "build": __version__,
        "ensemble_size": hyper.ensemble_size,
        "members": [
            {
                "index": r.index,
                "seed": r.seed,
                "status": "ok" if r.ok else "failed",
                "stop_reason": r.policy.stop_reason if r.ok else None,
                "episodes": len(r.policy.curve) if r.ok else 0,
                "final_return": r.policy.final_return if r.ok else None,
                "dir": f"member_{r.index:03d}" if r.ok else None,
                "error": None if r.ok else (r.error or "unknown"),
            }
            for r in results
        ],
    }
    path = os.path.join(out_dir, "index.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
    os.replace(tmp, path)
    return path
