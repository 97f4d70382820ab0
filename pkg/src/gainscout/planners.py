"""Path planners for measurement collection.

Three planners are provided:

* ``plan_entropy_vi`` -- joint multi-UAV finite-horizon value iteration
  maximizing the per-step conditional entropy of the measured shadowing
  gains (the active-Kriging planner).
* ``plan_greedy_variance`` -- per-UAV value iteration chasing the frozen
  posterior-variance field under a monotone move-away-from-start constraint
  (benchmark).
* ``plan_random_waypoint`` -- repeat the previous action with probability p,
  otherwise move uniformly at random (benchmark).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from ._util import atomic_write_text, substream
from .grid import ACTIONS, SwarmState, UrbanWorld, cell_is_flyable, legal_moves, transition
from .kriging import KrigingModel, kernel

SCHEMA_VERSION = 1

HOLD = -1  # action used when a UAV is fully boxed in
LOG_2PI_E = math.log(2.0 * math.pi * math.e)

MAX_ENTROPY_UAVS = 3
DEFAULT_STATE_BUDGET = 8_000_000  # dense DP table entries
REFERENCE_WORK_LIMIT = 2_000_000  # state*action*step ops for the pure-python path


def gaussian_entropy(cov) -> float:
    """Differential entropy (nats) of a Gaussian with covariance ``cov``."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    n = cov.shape[0]
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("covariance is not positive definite")
    return 0.5 * n * LOG_2PI_E + float(np.sum(np.log(np.diag(chol))))


def _dedup_rows(points):
    points = np.atleast_2d(np.asarray(points, dtype=float))
    kept = []
    for row in points:
        if not any(np.array_equal(row, k) for k in kept):
            kept.append(row)
    return np.array(kept)


def step_reward_entropy(model: KrigingModel, cur_points, next_points) -> float:
    """Conditional Gaussian entropy of the shadowing at the next cells given
    the shadowing at the current cells.

    Cells are deduplicated within each set; a next cell that coincides with a
    current cell keeps only the jitter-floor entropy.  Computed through the
    determinant identity |Schur complement| = |joint| / |conditioning block|.
    """
    cur = _dedup_rows(cur_points)
    nxt = _dedup_rows(next_points)
    m = len(nxt)
    pts = np.vstack([cur, nxt])
    s_all = kernel(pts, pts, model.phi, model.delta)
    s_all[np.diag_indices_from(s_all)] += model.jitter
    s_cur = s_all[: len(cur), : len(cur)]
    sign_a, ld_all = np.linalg.slogdet(s_all)
    sign_c, ld_cur = np.linalg.slogdet(s_cur)
    if sign_a <= 0 or sign_c <= 0:
        raise np.linalg.LinAlgError("non-positive-definite covariance in step reward")
    return 0.5 * m * LOG_2PI_E + 0.5 * (ld_all - ld_cur)


@dataclass(frozen=True)
class PlanRequest:
    """Inputs of the entropy planner."""

    world: UrbanWorld
    model: KrigingModel
    start: SwarmState
    horizon: int
    state_budget: int = DEFAULT_STATE_BUDGET
    method: str = "auto"  # auto | reference | dense

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        n = self.start.n_uavs
        if not 1 <= n <= MAX_ENTROPY_UAVS:
            raise ValueError(f"entropy planner supports 1..{MAX_ENTROPY_UAVS} UAVs")


@dataclass(frozen=True)
class MissionPlan:
    """A planned trajectory: joint actions, visited states and step rewards."""

    planner: str
    actions: tuple
    positions: tuple
    step_rewards: tuple
    objective_value: float
    meta: dict = field(default_factory=dict, compare=False)

    def validate(self, world: UrbanWorld):
        if len(self.positions) != len(self.actions) + 1:
            raise ValueError("positions must have one more entry than actions")
        for t, act in enumerate(self.actions):
            cur, nxt = self.positions[t], self.positions[t + 1]
            for k, a in enumerate(act):
                ci, cj = cur.positions[k]
                if a == HOLD:
                    expect = (ci, cj)
                else:
                    expect = (ci + ACTIONS[a][0], cj + ACTIONS[a][1])
                if nxt.positions[k] != expect:
                    raise ValueError(f"position chain broken at step {t}, uav {k}")
                if not cell_is_flyable(world, nxt.positions[k]):
                    raise ValueError(f"illegal cell at step {t}, uav {k}")


def joint_actions(n_uavs):
    """All joint actions in ascending joint-index (lexicographic) order."""
    return list(itertools.product(range(len(ACTIONS)), repeat=n_uavs))


# ---------------------------------------------------------------------------
# Entropy planner
# ---------------------------------------------------------------------------


class _RewardCache:
    """step_reward_entropy memoized on the translation-invariant config.

    The kernel is isotropic, so the reward only depends on the cells'
    relative placement; keys are cell offsets from the first UAV.
    """

    def __init__(self, model, spacing):
        self.model = model
        self.d = spacing
        self.cache = {}

    def __call__(self, cells, action):
        i0, j0 = cells[0]
        rel = tuple((i - i0, j - j0) for i, j in cells)
        key = (rel, action)
        if key not in self.cache:
            cur = np.array([(i * self.d, j * self.d, 0.0) for i, j in rel])
            nxt = cur + np.array(
                [(ACTIONS[a][0] * self.d, ACTIONS[a][1] * self.d, 0.0) for a in action]
            )
            self.cache[key] = step_reward_entropy(self.model, cur, nxt)
        return self.cache[key]


def _plan_vi_reference(req: PlanRequest) -> MissionPlan:
    """Exact finite-horizon DP over explicit joint states (small instances)."""
    world, start, T = req.world, req.start, req.horizon
    n = start.n_uavs
    flyable = [
        (i, j)
        for i in range(world.nx)
        for j in range(world.ny)
        if cell_is_flyable(world, (i, j))
    ]
    states = list(itertools.product(flyable, repeat=n))
    acts = joint_actions(n)
    reward = _RewardCache(req.model, world.spec.spacing_m)

    moves = {}
    for cell in flyable:
        moves[cell] = {
            a: (cell[0] + dx, cell[1] + dy)
            for a, (dx, dy) in enumerate(ACTIONS)
            if cell_is_flyable(world, (cell[0] + dx, cell[1] + dy))
        }

    value = {s: 0.0 for s in states}
    policy = []
    for _ in range(T):
        stage_policy = {}
        nxt_value = {}
        for s in states:
            best_v, best_a = -math.inf, None
            for ai, act in enumerate(acts):
                try:
                    ns = tuple(moves[c][a] for c, a in zip(s, act))
                except KeyError:
                    continue
                v = reward(s, act) + value[ns]
                if v > best_v:
                    best_v, best_a = v, ai
            nxt_value[s] = best_v
            stage_policy[s] = best_a
        value = nxt_value
        policy.append(stage_policy)
    policy.reverse()

    state = start.positions
    if value.get(state, -math.inf) == -math.inf:
        raise RuntimeError("blocked swarm: no legal trajectory from the start state")
    positions = [start]
    actions, rewards = [], []
    for t in range(T):
        ai = policy[t][state]
        act = acts[ai]
        rewards.append(reward(state, act))
        actions.append(act)
        positions.append(transition(positions[-1], act))
        state = positions[-1].positions
    return MissionPlan(
        planner="entropy_vi",
        actions=tuple(actions),
        positions=tuple(positions),
        step_rewards=tuple(rewards),
        objective_value=float(sum(rewards)),
        meta={"method": "reference", "n_states": len(states)},
    )


_REWARD_TABLE_CACHE = {}


def _batched_conditional_entropy(rel_cells, disp, phi, delta, jitter, spacing):
    """Vectorized step rewards for a batch of relative configurations.

    ``rel_cells``: (B, N, 2) integer cell offsets of the UAVs relative to
    UAV 0.  ``disp``: (N, 2) per-UAV displacement of one joint action.
    Groups the batch by its coincidence pattern so each group reduces to
    fixed-size batched log-determinants.
    """
    b, n, _ = rel_cells.shape
    nxt = rel_cells + disp[None, :, :]

    def keep_flags(cells):
        # keep-first deduplication flags per batch element
        flags = [np.ones(b, dtype=bool)]
        for i in range(1, n):
            f = np.ones(b, dtype=bool)
            for j in range(i):
                dup = np.all(cells[:, i, :] == cells[:, j, :], axis=1) & flags[j]
                f &= ~dup
            flags.append(f)
        return np.stack(flags, axis=1)  # (B, N)

    kc = keep_flags(rel_cells)
    kn = keep_flags(nxt)
    out = np.empty(b)

    pattern = np.zeros(b, dtype=np.int64)
    for i in range(n):
        pattern = pattern * 2 + kc[:, i]
        pattern = pattern * 2 + kn[:, i]

    for pat in np.unique(pattern):
        sel = pattern == pat
        idx = np.flatnonzero(sel)
        kc_p, kn_p = kc[idx[0]], kn[idx[0]]
        cur_pts = rel_cells[sel][:, kc_p, :].astype(float) * spacing
        nxt_pts = nxt[sel][:, kn_p, :].astype(float) * spacing
        pts = np.concatenate([cur_pts, nxt_pts], axis=1)  # (g, mc+mn, 2)
        mc, mn = int(kc_p.sum()), int(kn_p.sum())
        diff = pts[:, :, None, :] - pts[:, None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        cov = phi * np.exp(-dist / delta)
        m = mc + mn
        cov[:, np.arange(m), np.arange(m)] += jitter
        _, ld_all = np.linalg.slogdet(cov)
        _, ld_cur = np.linalg.slogdet(cov[:, :mc, :mc])
        out[sel] = 0.5 * mn * LOG_2PI_E + 0.5 * (ld_all - ld_cur)
    return out


def _reward_table(model, world, n_uavs):
    """Dense reward table over relative UAV displacements.

    Shape (R,) * (n_uavs - 1) + (A,) with R = (2*nx - 1) * (2*ny - 1); the
    reward of a joint state is recovered by indexing with the cell offsets
    of UAVs 1..N-1 from UAV 0.
    """
    h, w, d = world.nx, world.ny, world.spec.spacing_m
    key = (model.phi, model.delta, model.jitter, d, h, w, n_uavs)
    if key in _REWARD_TABLE_CACHE:
        return _REWARD_TABLE_CACHE[key]

    acts = joint_actions(n_uavs)
    rh, rw = 2 * h - 1, 2 * w - 1
    r = rh * rw
    n_rel = n_uavs - 1
    dxs, dys = np.meshgrid(np.arange(rh) - (h - 1), np.arange(rw) - (w - 1), indexing="ij")
    rel_1 = np.stack([dxs.ravel(), dys.ravel()], axis=1)  # (R, 2)

    if n_rel == 0:
        combos = np.zeros((1, 1, 2), dtype=np.int64)
    elif n_rel == 1:
        combos = np.concatenate(
            [np.zeros((r, 1, 2), dtype=np.int64), rel_1[:, None, :]], axis=1
        )
    else:
        a = np.repeat(rel_1, r, axis=0)
        bb = np.tile(rel_1, (r, 1))
        combos = np.concatenate(
            [np.zeros((r * r, 1, 2), dtype=np.int64), a[:, None, :], bb[:, None, :]],
            axis=1,
        )

    table = np.empty((len(combos), len(acts)))
    for ai, act in enumerate(acts):
        disp = np.array([ACTIONS[a] for a in act], dtype=np.int64)
        table[:, ai] = _batched_conditional_entropy(
            combos, disp, model.phi, model.delta, model.jitter, d
        )
    table = table.reshape((r,) * n_rel + (len(acts),))
    _REWARD_TABLE_CACHE[key] = table
    return table


def _plan_vi_dense(req: PlanRequest) -> MissionPlan:
    """Finite-horizon DP vectorized over the dense joint-cell grid."""
    world, start, T = req.world, req.start, req.horizon
    n = start.n_uavs
    h, w = world.nx, world.ny
    g = h * w
    if g**n > req.state_budget:
        raise RuntimeError(
            f"joint state space {g}^{n} exceeds the budget {req.state_budget}; "
            "shrink the grid or the number of UAVs"
        )
    acts = joint_actions(n)
    table = _reward_table(req.model, world, n)
    shape = (h, w) * n

    # Per-cell flyability of the move target, per primitive action.
    fly = world.flyable_mask()
    move_ok = np.zeros((h, w, len(ACTIONS)), dtype=bool)
    for a, (dx, dy) in enumerate(ACTIONS):
        ok = np.zeros((h, w), dtype=bool)
        src = (slice(max(0, -dx), h - max(0, dx)), slice(max(0, -dy), w - max(0, dy)))
        dst = (slice(max(0, dx), h - max(0, -dx)), slice(max(0, dy), w - max(0, -dy)))
        ok[src] = fly[dst]
        move_ok[:, :, a] = ok

    # Reward gather index: relative offsets of UAVs 1..N-1 from UAV 0.
    rh, rw = 2 * h - 1, 2 * w - 1
    r = rh * rw
    if n >= 2:
        ii = np.arange(h)
        jj = np.arange(w)
        relx = ii[None, :] - ii[:, None] + (h - 1)  # (h, h)
        rely = jj[None, :] - jj[:, None] + (w - 1)  # (w, w)
        rel_cell = (
            relx[:, None, :, None] * rw + rely[None, :, None, :]
        )  # (h, w, h, w) -> rel index of cell b from cell a

    def reward_for_action(ai):
        # rewards over the joint grid for one joint action
        if n == 1:
            return np.broadcast_to(table[ai], shape)
        if n == 2:
            return table[..., ai].ravel()[rel_cell].reshape(shape)
        flat = table.reshape(r * r, len(acts))[:, ai]
        idx = (
            rel_cell[:, :, :, :, None, None] * r + rel_cell[:, :, None, None, :, :]
        )
        return flat[idx]

    rewards = [reward_for_action(ai) for ai in range(len(acts))]
    masks = []
    for act in acts:
        mask = np.ones(shape, dtype=bool)
        for k, a in enumerate(act):
            mk = move_ok[:, :, a]
            expand = [None] * (2 * n)
            expand[2 * k] = slice(None)
            expand[2 * k + 1] = slice(None)
            mask = mask & mk[tuple(expand)]
        masks.append(mask)

    def shifted(values, act):
        out = np.full(shape, -np.inf)
        src, dst = [], []
        for a in act:
            dx, dy = ACTIONS[a]
            for delta, size in ((dx, h), (dy, w)):
                dst.append(slice(max(0, -delta), size - max(0, delta)))
                src.append(slice(max(0, delta), size - max(0, -delta)))
        out[tuple(dst)] = values[tuple(src)]
        return out

    value = np.zeros(shape)
    policies = np.empty((T,) + shape, dtype=np.uint8)
    for t in range(T - 1, -1, -1):
        best = np.full(shape, -np.inf)
        pol = np.zeros(shape, dtype=np.uint8)
        for ai, act in enumerate(acts):
            cand = rewards[ai] + shifted(value, act)
            cand = np.where(masks[ai], cand, -np.inf)
            upd = cand > best
            best[upd] = cand[upd]
            pol[upd] = ai
        value = best
        policies[t] = pol

    state = start.positions
    idx = tuple(c for cell in state for c in cell)
    if not np.isfinite(value[idx]):
        raise RuntimeError("blocked swarm: no legal trajectory from the start state")

    reward_fn = _RewardCache(req.model, world.spec.spacing_m)
    positions = [start]
    actions, step_rewards = [], []
    for t in range(T):
        idx = tuple(c for cell in positions[-1].positions for c in cell)
        act = acts[int(policies[t][idx])]
        step_rewards.append(reward_fn(positions[-1].positions, act))
        actions.append(act)
        positions.append(transition(positions[-1], act))
    return MissionPlan(
        planner="entropy_vi",
        actions=tuple(actions),
        positions=tuple(positions),
        step_rewards=tuple(step_rewards),
        objective_value=float(sum(step_rewards)),
        meta={"method": "dense", "n_states": g**n},
    )


def plan_entropy_vi(req: PlanRequest) -> MissionPlan:
    """Optimal joint trajectory by finite-horizon value iteration.

    Maximizes the sum over steps of the conditional entropy of the next
    cells' shadowing given the current cells'.  Illegal actions are excluded
    outright (the negative-infinity reward); ties break to the smallest
    joint-action index.  The returned objective equals the DP optimum.
    """
    world, start = req.world, req.start
    for cell in start.positions:
        if not cell_is_flyable(world, cell):
            raise ValueError(f"start cell {cell} is not flyable")
    n = start.n_uavs
    n_flyable = int(world.flyable_mask().sum())
    work = (n_flyable**n) * (4**n) * req.horizon
    method = req.method
    if method == "auto":
        method = "reference" if work <= REFERENCE_WORK_LIMIT else "dense"
    if method == "reference":
        plan = _plan_vi_reference(req)
    elif method == "dense":
        plan = _plan_vi_dense(req)
    else:
        raise ValueError(f"unknown method {req.method!r}")
    plan.validate(world)
    return plan


# ---------------------------------------------------------------------------
# Greedy max-variance benchmark
# ---------------------------------------------------------------------------


def plan_greedy_variance(
    world: UrbanWorld,
    variance_grid: np.ndarray,
    start: SwarmState,
    horizon: int,
    seed: int = 0,
) -> MissionPlan:
    """Per-UAV value iteration over a frozen posterior-variance field.

    Each UAV independently maximizes the summed variance of the cells it
    enters, under the constraint that its L1 grid distance from its own
    starting cell strictly increases every step (which rules out revisits
    within the plan).  A cornered UAV falls back to random legal actions for
    the rest of the window; fallbacks are logged in the plan metadata.
    """
    if variance_grid.shape != (world.nx, world.ny):
        raise ValueError("variance grid shape mismatch")
    rng = np.random.default_rng(substream(seed, "greedy-fallback"))
    n = start.n_uavs
    per_uav_actions = []
    fallback_log = []

    for k, origin in enumerate(start.positions):
        if not cell_is_flyable(world, origin):
            raise ValueError(f"start cell {origin} is not flyable")
        # Backward DP over the expanding L1 diamond around the origin.
        layers = [{origin: None} for _ in range(horizon + 1)]
        reachable = [set() for _ in range(horizon + 1)]
        reachable[0] = {origin}
        for t in range(horizon):
            for cell in reachable[t]:
                for a, (dx, dy) in enumerate(ACTIONS):
                    nxt = (cell[0] + dx, cell[1] + dy)
                    if not cell_is_flyable(world, nxt):
                        continue
                    if abs(nxt[0] - origin[0]) + abs(nxt[1] - origin[1]) != t + 1:
                        continue
                    reachable[t + 1].add(nxt)
        value = {cell: 0.0 for cell in reachable[horizon]}
        policy = []
        for t in range(horizon - 1, -1, -1):
            stage = {}
            nxt_value = {}
            for cell in reachable[t]:
                best_v, best_a = 0.0, None  # dead end keeps 0 future value
                for a, (dx, dy) in enumerate(ACTIONS):
                    nxt = (cell[0] + dx, cell[1] + dy)
                    if nxt not in value:
                        continue
                    v = float(variance_grid[nxt]) + value[nxt]
                    if best_a is None or v > best_v:
                        best_v, best_a = v, a
                nxt_value[cell] = best_v if best_a is not None else 0.0
                stage[cell] = best_a
            value = nxt_value
            policy.append(stage)
        policy.reverse()

        cell = origin
        seq = []
        cornered = False
        for t in range(horizon):
            a = None if cornered else policy[t].get(cell)
            if a is None:
                cornered = True
                legal = legal_moves(world, cell)
                if legal:
                    a = int(rng.choice(legal))
                    fallback_log.append({"uav": k, "step": t, "action": a})
                else:
                    seq.append(HOLD)
                    fallback_log.append({"uav": k, "step": t, "action": HOLD})
                    continue
            seq.append(a)
            cell = (cell[0] + ACTIONS[a][0], cell[1] + ACTIONS[a][1])
        per_uav_actions.append(seq)

    positions = [start]
    actions, step_rewards = [], []
    for t in range(horizon):
        act = tuple(per_uav_actions[k][t] for k in range(n))
        new = []
        gain = 0.0
        for k, a in enumerate(act):
            ci, cj = positions[-1].positions[k]
            if a == HOLD:
                new.append((ci, cj))
            else:
                nxt = (ci + ACTIONS[a][0], cj + ACTIONS[a][1])
                new.append(nxt)
                gain += float(variance_grid[nxt])
        actions.append(act)
        step_rewards.append(gain)
        positions.append(SwarmState(positions=tuple(new), step=positions[-1].step + 1))
    plan = MissionPlan(
        planner="greedy_variance",
        actions=tuple(actions),
        positions=tuple(positions),
        step_rewards=tuple(step_rewards),
        objective_value=float(sum(step_rewards)),
        meta={"fallbacks": fallback_log, "seed": seed},
    )
    plan.validate(world)
    return plan


# ---------------------------------------------------------------------------
# Random-waypoint benchmark
# ---------------------------------------------------------------------------


def plan_random_waypoint(
    world: UrbanWorld, start: SwarmState, steps: int, p: float = 0.8, seed: int = 0
) -> MissionPlan:
    """Random-waypoint motion: repeat the previous action with probability p,
    otherwise draw uniformly among legal actions; an illegal repeat triggers
    a fresh uniform draw.  A fully boxed-in UAV holds position (logged)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    rng = np.random.default_rng(substream(seed, "random-waypoint"))
    n = start.n_uavs
    prev = [None] * n
    holds = []
    repeat_possible = 0
    repeat_chosen = 0

    positions = [start]
    actions = []
    for t in range(steps):
        act = []
        for k in range(n):
            cell = positions[-1].positions[k]
            legal = legal_moves(world, cell)
            if not legal:
                act.append(HOLD)
                prev[k] = None
                holds.append({"uav": k, "step": t})
                continue
            a = None
            if prev[k] is not None:
                if prev[k] in legal:
                    repeat_possible += 1
                if rng.random() < p:
                    if prev[k] in legal:
                        a = prev[k]
                        repeat_chosen += 1
            if a is None:
                a = int(rng.choice(legal))
            act.append(a)
            prev[k] = a
        new = tuple(
            (ci + ACTIONS[a][0], cj + ACTIONS[a][1]) if a != HOLD else (ci, cj)
            for (ci, cj), a in zip(positions[-1].positions, act)
        )
        actions.append(tuple(act))
        positions.append(SwarmState(positions=new, step=positions[-1].step + 1))

    plan = MissionPlan(
        planner="random_waypoint",
        actions=tuple(actions),
        positions=tuple(positions),
        step_rewards=tuple(0.0 for _ in actions),
        objective_value=0.0,
        meta={
            "p": p,
            "seed": seed,
            "holds": holds,
            "repeat_possible": repeat_possible,
            "repeat_chosen": repeat_chosen,
        },
    )
    plan.validate(world)
    return plan


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def plan_to_dict(plan: MissionPlan) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "planner": plan.planner,
        "actions": [list(a) for a in plan.actions],
        "positions": [
            {"step": s.step, "positions": [list(c) for c in s.positions]}
            for s in plan.positions
        ],
        "step_rewards": list(plan.step_rewards),
        "objective_value": plan.objective_value,
        "meta": plan.meta,
    }


def plan_from_dict(d: dict) -> MissionPlan:
    return MissionPlan(
        planner=d["planner"],
        actions=tuple(tuple(a) for a in d["actions"]),
        positions=tuple(
            SwarmState(positions=tuple(tuple(c) for c in s["positions"]), step=s["step"])
            for s in d["positions"]
        ),
        step_rewards=tuple(d["step_rewards"]),
        objective_value=d["objective_value"],
        meta=d.get("meta", {}),
    )


def save_plan(plan: MissionPlan, path):
    atomic_write_text(path, json.dumps(plan_to_dict(plan), sort_keys=True))


def load_plan(path) -> MissionPlan:
    with open(path) as f:
        return plan_from_dict(json.load(f))
