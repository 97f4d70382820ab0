"""Mission loop: fly a swarm over a synthetic gain field, collect
measurements and produce the final Kriging posterior on the prediction
plane.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ._util import atomic_write_text, config_hash, substream
from .channel import GainField, MeasurementLog, _decode, _encode, measure
from .grid import ACTIONS, SwarmState, UrbanWorld
from .kriging import KrigingModel, model_from_dict, model_to_dict, posterior, posterior_variance_field
from .planners import (
    HOLD,
    DEFAULT_STATE_BUDGET,
    MissionPlan,
    PlanRequest,
    plan_entropy_vi,
    plan_greedy_variance,
    plan_random_waypoint,
)

SCHEMA_VERSION = 1

PLANNERS = ("entropy_vi", "greedy_variance", "random_waypoint")


@dataclass(frozen=True)
class MissionConfig:
    planner: str
    n_uavs: int
    horizon: int
    seed: int
    start_mode: str = "rectangle"  # rectangle | aoi
    start_side_m: float = 40.0
    warmup_steps: int = 20  # greedy: random steps before the first replan
    replan_every: int = 40  # greedy: replanning period
    random_repeat_p: float = 0.8
    checkpoint_every: int = 0  # 0 = final posterior only
    state_budget: int = DEFAULT_STATE_BUDGET
    vi_method: str = "auto"

    def __post_init__(self):
        if self.planner not in PLANNERS:
            raise ValueError(f"unknown planner {self.planner!r}")
        if self.n_uavs < 1:
            raise ValueError("n_uavs must be >= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.start_mode not in ("rectangle", "aoi"):
            raise ValueError(f"unknown start mode {self.start_mode!r}")

    def to_dict(self):
        return {
            "planner": self.planner,
            "n_uavs": self.n_uavs,
            "horizon": self.horizon,
            "seed": self.seed,
            "start_mode": self.start_mode,
            "start_side_m": self.start_side_m,
            "warmup_steps": self.warmup_steps,
            "replan_every": self.replan_every,
            "random_repeat_p": self.random_repeat_p,
            "checkpoint_every": self.checkpoint_every,
        }


@dataclass(frozen=True)
class MissionResult:
    config: MissionConfig
    model: KrigingModel
    positions: tuple  # SwarmState per step, length horizon + 1
    log: MeasurementLog
    mean: np.ndarray  # posterior mean on the prediction plane, nx*ny
    variance: np.ndarray
    checkpoints: tuple = ()
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def visited_cells(self):
        return self.log.cells


def sample_start(
    world: UrbanWorld,
    seed: int,
    n_uavs: int,
    mode: str = "rectangle",
    side_m: float = 40.0,
    max_tries: int = 1000,
) -> SwarmState:
    """Draw distinct flyable start cells for the swarm.

    ``rectangle`` places an axis-aligned square of the given side uniformly
    in the area of interest and samples the cells inside it, resampling the
    square until it holds enough flyable cells; ``aoi`` samples over the
    whole area.
    """
    rng = np.random.default_rng(substream(seed, "start"))
    fly = world.flyable_mask()
    d = world.spec.spacing_m

    if mode == "aoi":
        idx = np.flatnonzero(fly.ravel())
        if len(idx) < n_uavs:
            raise RuntimeError("not enough flyable cells for the swarm")
        pick = rng.choice(idx, size=n_uavs, replace=False)
        cells = [(int(c) // world.ny, int(c) % world.ny) for c in pick]
        return SwarmState(positions=tuple(cells), step=0)

    k = max(1, int(round(side_m / d)))
    k = min(k, world.nx, world.ny)
    for _ in range(max_tries):
        i0 = int(rng.integers(0, world.nx - k + 1))
        j0 = int(rng.integers(0, world.ny - k + 1))
        sub = fly[i0 : i0 + k, j0 : j0 + k]
        idx = np.flatnonzero(sub.ravel())
        if len(idx) < n_uavs:
            continue
        pick = rng.choice(idx, size=n_uavs, replace=False)
        cells = [(i0 + int(c) // k, j0 + int(c) % k) for c in pick]
        return SwarmState(positions=tuple(cells), step=0)
    raise RuntimeError("could not place the start rectangle after %d tries" % max_tries)


def _apply(state: SwarmState, action) -> SwarmState:
    new = tuple(
        (ci + ACTIONS[a][0], cj + ACTIONS[a][1]) if a != HOLD else (ci, cj)
        for (ci, cj), a in zip(state.positions, action)
    )
    return SwarmState(positions=new, step=state.step + 1)


def _total_variance(model, tx, log, world):
    var, _ = posterior_variance_field(
        model, tx, log.coords(world), world, world.spec.uav_altitude_m
    )
    return float(np.sum(var))


def _variance_grid(model, tx, log, world):
    var, idx = posterior_variance_field(
        model, tx, log.coords(world), world, world.spec.uav_altitude_m
    )
    grid = np.zeros(world.nx * world.ny)
    grid[idx] = var
    return grid.reshape(world.nx, world.ny)


def run_mission(
    world: UrbanWorld, field_: GainField, model: KrigingModel, config: MissionConfig
) -> MissionResult:
    """Fly the configured planner for ``horizon`` steps, measuring after
    every move, and return the posterior on the prediction plane."""
    start = sample_start(
        world, config.seed, config.n_uavs, config.start_mode, config.start_side_m
    )
    log = measure(field_, MeasurementLog(), start.positions, 0, world)
    positions = [start]
    meta = {"plans": []}

    def execute(plan: MissionPlan):
        nonlocal log
        for act in plan.actions:
            nxt = _apply(positions[-1], act)
            positions.append(nxt)
            log = measure(field_, log, nxt.positions, nxt.step, world)
        meta["plans"].append(
            {
                "planner": plan.planner,
                "from_step": plan.positions[0].step,
                "objective_value": plan.objective_value,
                "meta": plan.meta,
            }
        )

    if config.planner == "entropy_vi":
        req = PlanRequest(
            world=world,
            model=model,
            start=start,
            horizon=config.horizon,
            state_budget=config.state_budget,
            method=config.vi_method,
        )
        execute(plan_entropy_vi(req))
    elif config.planner == "random_waypoint":
        execute(
            plan_random_waypoint(
                world,
                start,
                config.horizon,
                p=config.random_repeat_p,
                seed=config.seed,
            )
        )
    else:  # greedy_variance
        warmup = min(config.warmup_steps, config.horizon)
        if warmup > 0:
            execute(
                plan_random_waypoint(
                    world,
                    start,
                    warmup,
                    p=config.random_repeat_p,
                    seed=substream(config.seed, "warmup"),
                )
            )
        prev_total = None
        window_id = 0
        while positions[-1].step < config.horizon:
            steps = min(config.replan_every, config.horizon - positions[-1].step)
            total = _total_variance(model, field_.tx, log, world)
            if prev_total is not None and not total <= prev_total + 1e-9:
                raise AssertionError(
                    "posterior variance increased between replans: "
                    f"{prev_total} -> {total}"
                )
            prev_total = total
            grid = _variance_grid(model, field_.tx, log, world)
            execute(
                plan_greedy_variance(
                    world,
                    grid,
                    positions[-1],
                    steps,
                    seed=substream(config.seed, "greedy", window_id),
                )
            )
            window_id += 1

    # final (and optional periodic) posterior on the prediction plane
    obs = log.coords(world)
    y = log.y()
    queries = world.plane_coords(world.spec.pred_altitude_m)
    post = posterior(model, field_.tx, obs, y, queries)

    checkpoints = []
    if config.checkpoint_every > 0:
        for step in range(0, config.horizon + 1, config.checkpoint_every):
            n_vis = sum(1 for _, _, s in log.visited if s <= step)
            checkpoints.append({"step": step, "n_visited": n_vis})

    return MissionResult(
        config=config,
        model=model,
        positions=tuple(positions),
        log=log,
        mean=post.mean,
        variance=post.variance,
        checkpoints=tuple(checkpoints),
        meta=meta,
    )


def result_to_dict(res: MissionResult) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "config": res.config.to_dict(),
        "config_hash": config_hash(res.config.to_dict()),
        "model": model_to_dict(res.model),
        "positions": [
            {"step": s.step, "positions": [list(c) for c in s.positions]}
            for s in res.positions
        ],
        "visited": [list(v) for v in res.log.visited],
        "values": list(res.log.values),
        "mean": _encode(res.mean),
        "variance": _encode(res.variance),
        "checkpoints": list(res.checkpoints),
        "meta": res.meta,
    }


def result_from_dict(d: dict) -> MissionResult:
    cfg = MissionConfig(
        planner=d["config"]["planner"],
        n_uavs=d["config"]["n_uavs"],
        horizon=d["config"]["horizon"],
        seed=d["config"]["seed"],
        start_mode=d["config"]["start_mode"],
        start_side_m=d["config"]["start_side_m"],
        warmup_steps=d["config"]["warmup_steps"],
        replan_every=d["config"]["replan_every"],
        random_repeat_p=d["config"]["random_repeat_p"],
        checkpoint_every=d["config"]["checkpoint_every"],
    )
    return MissionResult(
        config=cfg,
        model=model_from_dict(d["model"]),
        positions=tuple(
            SwarmState(positions=tuple(tuple(c) for c in s["positions"]), step=s["step"])
            for s in d["positions"]
        ),
        log=MeasurementLog(
            visited=tuple(tuple(v) for v in d["visited"]),
            values=tuple(d["values"]),
        ),
        mean=_decode(d["mean"]),
        variance=_decode(d["variance"]),
        checkpoints=tuple(d.get("checkpoints", ())),
        meta=d.get("meta", {}),
    )


def save_result(res: MissionResult, path):
    atomic_write_text(path, json.dumps(result_to_dict(res), sort_keys=True))


def load_result(path) -> MissionResult:
    with open(path) as f:
        return result_from_dict(json.load(f))
