"""Deterministic two-lane lane-change world.

Geometry: the ego starts centered in the right lane (y = 0) and changes
into the left lane (center y = lane_width). The leader vehicle drives in
the ego's lane ahead of it; the follow and target vehicles drive in the
left lane, follow behind target. Only the ego moves laterally.

All state transitions are pure functions of (state, actions, config), so
episodes are bit-reproducible given a seed and can run in parallel.
"""

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

ROLE_ORDER = ("ego", "leader", "follow", "target")
ADVERSARY_ROLES = ("leader", "follow", "target")

# fixed feature scaling applied to the 9-vector observation before it is fed
# to any network (offsets span ~100 m, speeds ~20 m/s, yaw ~0.5 rad, y ~4 m)
OBS_SCALE = np.array([50.0, 50.0, 50.0, 20.0, 20.0, 20.0, 20.0, 0.5, 4.0])


def scale_obs(obs):
    return np.asarray(obs, dtype=float) / OBS_SCALE

# action-to-acceleration map: asymmetric to reflect real braking authority
A_THROTTLE = 3.0   # m/s^2 at action +1
A_BRAKE = 8.0      # m/s^2 at action -1
B_HARD = 8.0       # physical brake limit used to clamp IDM output

OUTCOMES = ("running", "success", "crash", "timeout")
VIOLATIONS = ("none", "adv_rear_end", "adv_speeding")


class ScenarioError(Exception):
    pass


class InfeasibleStart(ScenarioError):
    """100 resamples all produced overlapping or doomed initial conditions."""


class NonPositiveGap(ScenarioError):
    """IDM queried with gap <= 0; the caller must treat this as a collision."""


class SteppedTerminal(ScenarioError):
    """step() called on a state that is already done."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class IdmParams:
    v0: float = 10.0      # desired velocity, m/s
    T: float = 1.5        # safe time headway, s
    a_max: float = 1.0    # maximum acceleration, m/s^2
    b_comf: float = 1.67  # comfortable deceleration, m/s^2
    delta: float = 4.0    # acceleration exponent
    s0: float = 2.0       # minimum distance, m

    def __post_init__(self):
        if min(self.v0, self.T, self.a_max, self.b_comf, self.s0) <= 0:
            raise ValueError("IDM parameters must be positive")
        if self.delta < 1:
            raise ValueError("acceleration exponent must be >= 1")


@dataclass
class RangeDist:
    """Parametric stand-in for the empirical initial-range distribution.

    Default: lognormal with median 30 m and sigma_log 0.5, truncated to
    [lo, hi] by resampling. kind="constant" collapses to `median` exactly,
    kind="uniform" draws from [lo, hi].
    """

    kind: str = "lognormal"
    median: float = 30.0
    sigma_log: float = 0.5
    lo: float = 2.0
    hi: float = 150.0

    def __post_init__(self):
        if self.kind not in ("lognormal", "constant", "uniform"):
            raise ValueError(f"unknown range distribution {self.kind!r}")
        if self.lo <= 0 or self.hi < self.lo:
            raise ValueError("range bounds must satisfy 0 < lo <= hi")

    def sample(self, rng):
        if self.kind == "constant":
            return self.median
        if self.kind == "uniform":
            return float(rng.uniform(self.lo, self.hi))
        mu = math.log(self.median)
        if self.sigma_log == 0.0:
            return float(min(max(self.median, self.lo), self.hi))
        for _ in range(1000):
            x = float(rng.lognormal(mu, self.sigma_log))
            if self.lo <= x <= self.hi:
                return x
        # truncation tails are tiny with the default parameters
        return float(min(max(self.median, self.lo), self.hi))


@dataclass
class ScenarioConfig:
    lane_width: float = 3.2
    veh_width: float = 1.85
    veh_length: float = 4.83
    x_lim: float = 300.0
    t_lim: float = 30.0
    dt: float = 0.1
    mu_x: float = 0.0       # follow-vehicle offset mean, m
    sigma_x: float = 5.0
    mu_v: float = 10.0      # initial speed mean, m/s
    sigma_v: float = 4.0
    range_dist: RangeDist = field(default_factory=RangeDist)
    v_limit: float = 16.7   # legal speed limit, m/s
    seed: int = 0

    def __post_init__(self):
        if min(self.lane_width, self.veh_width, self.veh_length,
               self.x_lim, self.t_lim) <= 0:
            raise ValueError("geometric fields must be positive")
        if not (0.0 < self.dt <= 0.5):
            raise ValueError("dt must lie in (0, 0.5]")
        if self.sigma_x < 0 or self.sigma_v < 0:
            raise ValueError("sigmas must be non-negative")
        if isinstance(self.range_dist, dict):
            self.range_dist = RangeDist(**self.range_dist)

    @property
    def target_lane_y(self):
        return self.lane_width

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if "range_dist" in doc and isinstance(doc["range_dist"], dict):
            doc["range_dist"] = RangeDist(**doc["range_dist"])
        return cls(**doc)


@dataclass
class RewardConfig:
    r_success: float = 100.0
    r_crash: float = -50.0
    speed_coef: float = 0.1      # per m/s of ego speed on running steps
    r_rule_penalty: float = -50.0
    beta: float = 1.0            # rationality weight on the rule penalty

    def __post_init__(self):
        if self.r_success <= 0 or self.r_crash >= 0 or self.r_rule_penalty >= 0:
            raise ValueError("reward signs violate the scenario contract")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


def load_configs_json(path_or_text):
    """Read {"scenario": {...}, "reward": {...}} from a JSON document."""
    if isinstance(path_or_text, (str,)) and path_or_text.lstrip().startswith("{"):
        doc = json.loads(path_or_text)
    else:
        with open(path_or_text) as f:
            doc = json.load(f)
    cfg = ScenarioConfig.from_dict(doc.get("scenario", {}))
    rcfg = RewardConfig.from_dict(doc.get("reward", {}))
    return cfg, rcfg


# ---------------------------------------------------------------------------
# state


@dataclass
class VehicleState:
    x: float
    y: float
    v: float
    yaw: float
    role: str


@dataclass
class ScenarioState:
    ego: VehicleState
    leader: VehicleState
    follow: VehicleState
    target: VehicleState
    t: float = 0.0
    done: bool = False
    outcome: str = "running"

    def vehicles(self):
        return (self.ego, self.leader, self.follow, self.target)

    def observation(self):
        """The 9-vector MDP state: adversary-minus-ego offsets, speeds, ego pose."""
        e = self.ego
        return np.array([
            self.leader.x - e.x,
            self.follow.x - e.x,
            self.target.x - e.x,
            self.leader.v,
            self.follow.v,
            self.target.v,
            e.v,
            e.yaw,
            e.y,
        ])

    def copy(self):
        def cv(v):
            return VehicleState(v.x, v.y, v.v, v.yaw, v.role)

        return ScenarioState(
            ego=cv(self.ego), leader=cv(self.leader),
            follow=cv(self.follow), target=cv(self.target),
            t=self.t, done=self.done, outcome=self.outcome,
        )


@dataclass
class EgoCommand:
    """Per-step command from the ego controller: longitudinal acceleration
    plus the commanded lateral pose (y, yaw) for the end of the step."""

    accel: float
    y: float
    yaw: float


@dataclass
class Transition:
    s: ScenarioState
    a_ego: EgoCommand
    a_adv: np.ndarray
    s_next: ScenarioState
    r_ego: float = 0.0
    r_adv: float = 0.0
    terminal: bool = False
    violation: str = "none"
    colliding_pair: tuple = None


# ---------------------------------------------------------------------------
# geometry


def footprint(veh, cfg):
    """4x2 array of footprint corners (rectangle centered at (x, y), rotated by yaw)."""
    hl = cfg.veh_length / 2.0
    hw = cfg.veh_width / 2.0
    c, s = math.cos(veh.yaw), math.sin(veh.yaw)
    corners = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
    rot = np.array([[c, -s], [s, c]])
    return corners @ rot.T + np.array([veh.x, veh.y])


def _rects_intersect(ca, cb):
    # separating-axis test for two convex quads given by their corner arrays
    for corners in (ca, cb):
        for i in range(2):
            edge = corners[(i + 1) % 4] - corners[i]
            axis = np.array([-edge[1], edge[0]])
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() <= pb.min() or pb.max() <= pa.min():
                return False
    return True


def check_collision(vehicles, cfg):
    """First colliding pair of vehicles in fixed role order, or None.

    Exact oriented-rectangle intersection; touching footprints (zero
    penetration) do not count as a collision.
    """
    diag = math.hypot(cfg.veh_length, cfg.veh_width)  # bounding-circle reject
    corners = [None] * len(vehicles)
    n = len(vehicles)
    for i in range(n):
        for j in range(i + 1, n):
            a, b = vehicles[i], vehicles[j]
            if abs(a.x - b.x) > diag or abs(a.y - b.y) > diag:
                continue
            if corners[i] is None:
                corners[i] = footprint(a, cfg)
            if corners[j] is None:
                corners[j] = footprint(b, cfg)
            if _rects_intersect(corners[i], corners[j]):
                return (a.role, b.role)
    return None


def lane_change_complete(ego, cfg):
    """Whole-body criterion: every footprint corner inside the target (left) lane."""
    lo = cfg.lane_width / 2.0
    hi = 3.0 * cfg.lane_width / 2.0
    ys = footprint(ego, cfg)[:, 1]
    return bool(np.all(ys >= lo) and np.all(ys <= hi))


def ego_fully_in_one_lane(ego, cfg):
    """True when the ego's whole footprint lies inside a single lane."""
    ys = footprint(ego, cfg)[:, 1]
    half = cfg.lane_width / 2.0
    in_right = np.all(ys >= -half) and np.all(ys <= half)
    in_left = np.all(ys >= half) and np.all(ys <= 3.0 * half)
    return bool(in_right or in_left)


# ---------------------------------------------------------------------------
# car following


def idm_acceleration(p, v, dv, s):
    """IDM acceleration for speed v, approach rate dv (= v - v_lead), gap s.

    Clamped to [-B_HARD, a_max]. The gap must be positive; a non-positive
    gap means the caller should have detected a collision instead.
    """
    if s <= 0:
        raise NonPositiveGap(f"IDM queried with gap {s}")
    if v < 0:
        raise ValueError("IDM speed must be non-negative")
    s_star = p.s0 + v * p.T + v * dv / (2.0 * math.sqrt(p.a_max * p.b_comf))
    a = p.a_max * (1.0 - (v / p.v0) ** p.delta - (s_star / s) ** 2)
    return float(min(max(a, -B_HARD), p.a_max))


FREE_ROAD_GAP = 1e9


class IdmAdversary:
    """Naturalistic surrounding-vehicle behavior: per-lane IDM car following.

    leader and target have a free road ahead; follow trails the target.
    Accelerations are mapped back into the [-1, 1] action space.
    """

    def __init__(self, idm=None, cfg=None):
        self.idm = idm or IdmParams()
        self.cfg = cfg or ScenarioConfig()

    def act(self, state):
        p = self.idm
        a_leader = idm_acceleration(p, state.leader.v, 0.0, FREE_ROAD_GAP)
        a_target = idm_acceleration(p, state.target.v, 0.0, FREE_ROAD_GAP)
        gap = state.target.x - state.follow.x - self.cfg.veh_length
        if gap <= 0:
            a_follow = -B_HARD
        else:
            a_follow = idm_acceleration(p, state.follow.v,
                                        state.follow.v - state.target.v, gap)
        return np.array([accel_to_action(a) for a in (a_leader, a_follow, a_target)])


def accel_to_action(a):
    """Inverse of the asymmetric action->acceleration map, clipped to [-1, 1]."""
    u = a / A_THROTTLE if a >= 0 else a / A_BRAKE
    return float(min(max(u, -1.0), 1.0))


def action_to_accel(u):
    u = min(max(float(u), -1.0), 1.0)
    return u * A_THROTTLE if u >= 0 else u * A_BRAKE


# ---------------------------------------------------------------------------
# initial conditions


def _braking_feasible(gap, closing, s0):
    """Can the rear vehicle avoid the front one with a full-brake response?"""
    if closing <= 0:
        return gap > 0
    return gap - s0 > closing * closing / (2.0 * B_HARD)


def sample_initial_conditions(cfg, rng):
    """Draw a feasible initial ScenarioState.

    x_leader and the target-follow gap come from the configured range
    distribution, x_follow ~ N(mu_x, sigma_x^2), x_target = x_follow + gap,
    speeds ~ N(mu_v, sigma_v^2) clamped to [0, 2 mu_v]. Draws producing
    overlapping footprints or a same-lane pair that cannot avoid collision
    even under full braking are rejected (up to 100 attempts).
    """
    for _ in range(100):
        x_leader = cfg.range_dist.sample(rng)
        gap_tf = cfg.range_dist.sample(rng)
        x_follow = float(rng.normal(cfg.mu_x, cfg.sigma_x))
        x_target = x_follow + gap_tf
        speeds = np.clip(rng.normal(cfg.mu_v, cfg.sigma_v, size=4),
                         0.0, 2.0 * cfg.mu_v)
        v_ego, v_leader, v_follow, v_target = (float(s) for s in speeds)
        state = ScenarioState(
            ego=VehicleState(0.0, 0.0, v_ego, 0.0, "ego"),
            leader=VehicleState(x_leader, 0.0, v_leader, 0.0, "leader"),
            follow=VehicleState(x_follow, cfg.target_lane_y, v_follow, 0.0, "follow"),
            target=VehicleState(x_target, cfg.target_lane_y, v_target, 0.0, "target"),
        )
        if check_collision(state.vehicles(), cfg) is not None:
            continue
        ok = _braking_feasible(x_leader - cfg.veh_length, v_ego - v_leader, 1.0) \
            and _braking_feasible(gap_tf - cfg.veh_length, v_follow - v_target, 1.0)
        if ok:
            return state
    raise InfeasibleStart("100 resamples all produced infeasible starts")


# ---------------------------------------------------------------------------
# rewards and rules


def ego_reward(tr, rcfg):
    out = tr.s_next.outcome
    if out == "success":
        return rcfg.r_success
    if out == "crash":
        return rcfg.r_crash
    return rcfg.speed_coef * tr.s_next.ego.v


def detect_rule_violation(tr, cfg):
    """Attribute fault for this transition.

    adv_rear_end: an adversary's front strikes the ego while the ego's
    footprint is entirely within one lane (the adversary is the striker
    from behind). adv_speeding: any adversary above the legal limit.
    An ego that collides while straddling lanes is at fault: no violation.
    """
    nxt = tr.s_next
    if nxt.outcome == "crash" and tr.colliding_pair is not None:
        pair = set(tr.colliding_pair)
        if "ego" in pair:
            adv_role = (pair - {"ego"}).pop()
            adv = getattr(nxt, adv_role)
            if ego_fully_in_one_lane(nxt.ego, cfg) and adv.x < nxt.ego.x:
                return "adv_rear_end"
    for role in ADVERSARY_ROLES:
        if getattr(nxt, role).v > cfg.v_limit:
            return "adv_speeding"
    return "none"


def adversary_reward(tr, rcfg):
    rule = rcfg.r_rule_penalty if tr.violation != "none" else 0.0
    return -tr.r_ego + rcfg.beta * rule


# ---------------------------------------------------------------------------
# stepping


def step(s, a_ego, a_adv, cfg, rcfg):
    """Advance one explicit-Euler step and build the full Transition.

    Termination checks run in priority order: collision, then whole-body
    lane-change success, then the distance limit, then the time limit.
    """
    if s.done:
        raise SteppedTerminal("step() called on a terminal state")
    a_adv = np.clip(np.asarray(a_adv, dtype=float), -1.0, 1.0)
    if a_adv.shape != (3,):
        raise ValueError("adversary action must be a 3-vector")

    nxt = s.copy()
    for role, u in zip(ADVERSARY_ROLES, a_adv):
        veh = getattr(nxt, role)
        acc = action_to_accel(u)
        veh.x += veh.v * cfg.dt
        veh.v = max(0.0, veh.v + acc * cfg.dt)
    ego = nxt.ego
    ego.x += ego.v * cfg.dt
    ego.v = max(0.0, ego.v + float(a_ego.accel) * cfg.dt)
    ego.y = float(a_ego.y)
    ego.yaw = float(a_ego.yaw)
    nxt.t = s.t + cfg.dt

    pair = check_collision(nxt.vehicles(), cfg)
    if pair is not None:
        nxt.outcome = "crash"
    elif lane_change_complete(nxt.ego, cfg):
        nxt.outcome = "success"
    elif nxt.ego.x >= cfg.x_lim:
        nxt.outcome = "timeout"
    elif nxt.t >= cfg.t_lim - 1e-9:
        nxt.outcome = "timeout"
    else:
        nxt.outcome = "running"
    nxt.done = nxt.outcome != "running"

    tr = Transition(s=s, a_ego=a_ego, a_adv=a_adv, s_next=nxt,
                    terminal=nxt.done, colliding_pair=pair)
    tr.r_ego = ego_reward(tr, rcfg)
    tr.violation = detect_rule_violation(tr, cfg)
    tr.r_adv = adversary_reward(tr, rcfg)
    return tr


class LaneChangeEnv:
    """Stateful convenience wrapper over the pure transition functions."""

    def __init__(self, cfg=None, rcfg=None):
        self.cfg = cfg or ScenarioConfig()
        self.rcfg = rcfg or RewardConfig()
        self.state = None

    def reset(self, rng):
        self.state = sample_initial_conditions(self.cfg, rng)
        return self.state

    def step(self, a_ego, a_adv):
        tr = step(self.state, a_ego, a_adv, self.cfg, self.rcfg)
        self.state = tr.s_next
        return tr


@dataclass
class EpisodeResult:
    outcome: str
    steps: int
    ego_return: float      # discounted
    adv_return: float      # discounted
    observations: list = None


def run_episode(env, ego_controller, adversary, rng, gamma=0.99,
                collect_observations=False, trace_writer=None):
    """One full episode: the ego controller and the adversary policy both
    observe the state each step. The adversary is anything with act(state)."""
    state = env.reset(rng)
    ego_controller.reset(state)
    ego_ret = 0.0
    adv_ret = 0.0
    disc = 1.0
    steps = 0
    observations = [] if collect_observations else None
    while not state.done:
        if collect_observations:
            observations.append(state.observation())
        a_adv = adversary.act(state)
        a_ego = ego_controller.act(state)
        tr = env.step(a_ego, a_adv)
        ego_ret += disc * tr.r_ego
        adv_ret += disc * tr.r_adv
        disc *= gamma
        steps += 1
        if trace_writer is not None:
            trace_writer.write_step(tr)
        state = tr.s_next
    return EpisodeResult(state.outcome, steps, ego_ret, adv_ret, observations)


# ---------------------------------------------------------------------------
# episode traces


class TraceWriter:
    """JSONL episode trace: one record per step."""

    def __init__(self, fh):
        self.fh = fh

    def write_step(self, tr):
        nxt = tr.s_next
        rec = {
            "t": round(nxt.t, 9),
            "vehicles": {
                v.role: {"x": v.x, "y": v.y, "v": v.v, "yaw": v.yaw}
                for v in nxt.vehicles()
            },
            "a_ego": {"accel": tr.a_ego.accel, "y": tr.a_ego.y, "yaw": tr.a_ego.yaw},
            "a_adv": [float(a) for a in tr.a_adv],
            "r_ego": tr.r_ego,
            "r_adv": tr.r_adv,
            "violation": tr.violation,
            "outcome": nxt.outcome,
        }
        self.fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
