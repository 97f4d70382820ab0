import math

import numpy as np
import pytest

from gainscout.grid import ACTIONS, SwarmState, UrbanWorld, cell_is_flyable
from gainscout.kriging import KrigingModel, kernel
from gainscout.planners import (
    HOLD,
    LOG_2PI_E,
    MissionPlan,
    PlanRequest,
    _plan_vi_dense,
    _plan_vi_reference,
    gaussian_entropy,
    joint_actions,
    load_plan,
    plan_entropy_vi,
    plan_greedy_variance,
    plan_random_waypoint,
    save_plan,
    step_reward_entropy,
)

from conftest import make_open_world, make_random_world

MODEL = KrigingModel(alpha=-30.0, beta=20.0, phi=25.0, delta=50.0)


def cells_to_points(cells, spacing):
    return np.array([(i * spacing, j * spacing, 0.0) for i, j in cells])


def enumerate_optimal(world, model, start, horizon):
    """Oracle: exhaustive depth-first search over all joint action
    sequences in lexicographic order, keeping strictly better objectives."""
    n = start.n_uavs
    d = world.spec.spacing_m
    acts = joint_actions(n)
    cache = {}

    def reward(cells, act):
        key = (cells, act)
        if key not in cache:
            cur = cells_to_points(cells, d)
            nxt = cells_to_points(
                [(i + ACTIONS[a][0], j + ACTIONS[a][1]) for (i, j), a in zip(cells, act)],
                d,
            )
            cache[key] = step_reward_entropy(model, cur, nxt)
        return cache[key]

    best = [-math.inf, None]

    def rec(cells, t, total, seq):
        if t == horizon:
            if total > best[0]:
                best[0], best[1] = total, list(seq)
            return
        for act in acts:
            nxt = tuple(
                (i + ACTIONS[a][0], j + ACTIONS[a][1]) for (i, j), a in zip(cells, act)
            )
            if not all(cell_is_flyable(world, c) for c in nxt):
                continue
            seq.append(act)
            rec(nxt, t + 1, total + reward(cells, act), seq)
            seq.pop()

    rec(start.positions, 0, 0.0, [])
    return best[0], best[1]


class TestGaussianEntropy:
    def test_scalar(self):
        v = 4.0
        np.testing.assert_allclose(
            gaussian_entropy([[v]]), 0.5 * math.log(2 * math.pi * math.e * v)
        )

    def test_diagonal_sums_scalars(self):
        vs = [1.0, 2.0, 5.0]
        np.testing.assert_allclose(
            gaussian_entropy(np.diag(vs)),
            sum(gaussian_entropy([[v]]) for v in vs),
        )

    def test_indefinite_rejected(self):
        with pytest.raises(np.linalg.LinAlgError):
            gaussian_entropy([[1.0, 2.0], [2.0, 1.0]])


class TestStepReward:
    def test_far_apart_equals_prior_entropy(self):
        cur = np.array([[0.0, 0.0, 0.0]])
        nxt = np.array([[1e7, 0.0, 0.0], [1e7, 50.0, 0.0]])
        got = step_reward_entropy(MODEL, cur, nxt)
        prior = kernel(nxt, nxt, MODEL.phi, MODEL.delta)
        prior[np.diag_indices_from(prior)] += MODEL.jitter
        np.testing.assert_allclose(got, gaussian_entropy(prior), rtol=1e-9)

    def test_matches_brute_force_schur_conditioning(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            cur = rng.uniform(0, 200, (int(rng.integers(1, 4)), 3))
            nxt = rng.uniform(0, 200, (int(rng.integers(1, 4)), 3))
            got = step_reward_entropy(MODEL, cur, nxt)
            # Oracle: conditional covariance by explicit inversion.
            s_cc = kernel(cur, cur, MODEL.phi, MODEL.delta)
            s_cc[np.diag_indices_from(s_cc)] += MODEL.jitter
            s_nn = kernel(nxt, nxt, MODEL.phi, MODEL.delta)
            s_nn[np.diag_indices_from(s_nn)] += MODEL.jitter
            s_cn = kernel(cur, nxt, MODEL.phi, MODEL.delta)
            cond = s_nn - s_cn.T @ np.linalg.inv(s_cc) @ s_cn
            np.testing.assert_allclose(got, gaussian_entropy(cond), rtol=1e-7)

    def test_revisit_collapses_to_jitter_entropy(self):
        cur = np.array([[0.0, 0.0, 0.0]])
        got = step_reward_entropy(MODEL, cur, cur)
        lo = 0.5 * math.log(2 * math.pi * math.e * 0.5 * MODEL.jitter)
        hi = 0.5 * math.log(2 * math.pi * math.e * 2.5 * MODEL.jitter)
        assert lo < got < hi

    def test_duplicate_inputs_are_deduplicated(self):
        cur = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [30.0, 0.0, 0.0]])
        nxt = np.array([[10.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
        got = step_reward_entropy(MODEL, cur, nxt)
        want = step_reward_entropy(MODEL, cur[[0, 2]], nxt[[0]])
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_translation_invariant(self):
        cur = np.array([[0.0, 0.0, 0.0], [30.0, 10.0, 0.0]])
        nxt = cur + [10.0, 0.0, 0.0]
        a = step_reward_entropy(MODEL, cur, nxt)
        b = step_reward_entropy(MODEL, cur + [250.0, 130.0, 0.0], nxt + [250.0, 130.0, 0.0])
        assert a == b


class TestEntropyPlanner:
    def random_case(self, rng, n_uavs, n=5, horizon=3, block_prob=0.15):
        while True:
            world = make_random_world(rng, n=n, spacing=10.0, block_prob=block_prob)
            fly = [
                (i, j) for i in range(n) for j in range(n)
                if cell_is_flyable(world, (i, j))
            ]
            starts = [c for c in fly if any(
                cell_is_flyable(world, (c[0] + dx, c[1] + dy)) for dx, dy in ACTIONS
            )]
            if len(starts) >= n_uavs:
                pick = rng.choice(len(starts), size=n_uavs, replace=False)
                start = SwarmState(positions=tuple(starts[k] for k in pick))
                # make sure a full-length trajectory exists
                obj, _ = enumerate_optimal(world, MODEL, start, horizon)
                if np.isfinite(obj):
                    return world, start

    @pytest.mark.parametrize("n_uavs", [1, 2])
    def test_reference_matches_enumeration(self, n_uavs):
        rng = np.random.default_rng(100 + n_uavs)
        for _ in range(8):
            world, start = self.random_case(rng, n_uavs)
            req = PlanRequest(world=world, model=MODEL, start=start, horizon=3,
                              method="reference")
            plan = plan_entropy_vi(req)
            obj, seq = enumerate_optimal(world, MODEL, start, 3)
            assert plan.objective_value == pytest.approx(obj, rel=1e-9, abs=1e-9)
            assert list(plan.actions) == seq

    @pytest.mark.parametrize("n_uavs", [1, 2])
    def test_dense_matches_enumeration(self, n_uavs):
        rng = np.random.default_rng(200 + n_uavs)
        for _ in range(5):
            world, start = self.random_case(rng, n_uavs)
            req = PlanRequest(world=world, model=MODEL, start=start, horizon=3,
                              method="dense")
            plan = plan_entropy_vi(req)
            obj, seq = enumerate_optimal(world, MODEL, start, 3)
            assert plan.objective_value == pytest.approx(obj, rel=1e-9, abs=1e-9)
            # The vectorized table evaluates rewards in a different float
            # order, so exact ties may resolve to another optimal sequence;
            # require the returned sequence to be optimal itself.
            assert sum(plan.step_rewards) == pytest.approx(obj, rel=1e-9, abs=1e-9)

    def test_dense_matches_reference_three_uavs(self):
        rng = np.random.default_rng(31)
        world, start = self.random_case(rng, 3, n=4, horizon=2, block_prob=0.1)
        ref = plan_entropy_vi(PlanRequest(world=world, model=MODEL, start=start,
                                          horizon=2, method="reference"))
        dense = plan_entropy_vi(PlanRequest(world=world, model=MODEL, start=start,
                                            horizon=2, method="dense"))
        assert dense.objective_value == pytest.approx(ref.objective_value, rel=1e-9)
        assert dense.actions == ref.actions

    def test_uav_count_capped(self):
        world = make_open_world(4)
        start = SwarmState(positions=((0, 0), (1, 1), (2, 2), (3, 3)))
        with pytest.raises(ValueError):
            PlanRequest(world=world, model=MODEL, start=start, horizon=2)

    def test_state_budget_enforced(self):
        world = make_open_world(6)
        start = SwarmState(positions=((0, 0), (1, 1), (2, 2)))
        req = PlanRequest(world=world, model=MODEL, start=start, horizon=2,
                          state_budget=1000, method="dense")
        with pytest.raises(RuntimeError):
            plan_entropy_vi(req)

    def test_start_on_building_rejected(self):
        world = make_open_world(4)
        h = world.heights.copy()
        h[1, 1] = 30.0
        world = UrbanWorld(spec=world.spec, heights=h)
        req = PlanRequest(world=world, model=MODEL,
                          start=SwarmState(positions=((1, 1),)), horizon=2)
        with pytest.raises(ValueError):
            plan_entropy_vi(req)

    def test_blocked_swarm_rejected(self):
        # free cell fully surrounded by buildings
        world = make_open_world(4)
        h = world.heights.copy()
        for c in [(0, 1), (1, 0), (1, 2), (2, 1)]:
            h[c] = 30.0
        world = UrbanWorld(spec=world.spec, heights=h)
        req = PlanRequest(world=world, model=MODEL,
                          start=SwarmState(positions=((1, 1),)), horizon=2)
        with pytest.raises(RuntimeError):
            plan_entropy_vi(req)

    def test_objective_equals_reward_sum_and_plan_validates(self):
        world = make_open_world(5)
        start = SwarmState(positions=((2, 2), (0, 0)))
        plan = plan_entropy_vi(PlanRequest(world=world, model=MODEL, start=start,
                                           horizon=4))
        assert plan.objective_value == pytest.approx(sum(plan.step_rewards))
        assert len(plan.actions) == 4 and len(plan.positions) == 5
        plan.validate(world)


class TestGreedyPlanner:
    def test_distance_from_origin_grows_every_step(self):
        rng = np.random.default_rng(3)
        world = make_open_world(9)
        var = rng.uniform(0, 25, (9, 9))
        start = SwarmState(positions=((4, 4), (2, 6)))
        plan = plan_greedy_variance(world, var, start, horizon=4)
        assert not plan.meta["fallbacks"]
        for t, st in enumerate(plan.positions):
            for k, (i, j) in enumerate(st.positions):
                oi, oj = start.positions[k]
                assert abs(i - oi) + abs(j - oj) == t

    def test_chases_the_variance_peak(self):
        world = make_open_world(7)
        var = np.zeros((7, 7))
        var[6, 3] = 100.0  # single peak straight in +x
        start = SwarmState(positions=((3, 3),))
        plan = plan_greedy_variance(world, var, start, horizon=3)
        assert plan.positions[-1].positions[0] == (6, 3)
        assert plan.objective_value == pytest.approx(100.0)

    def test_objective_sums_entered_cell_variances(self):
        rng = np.random.default_rng(4)
        world = make_open_world(8)
        var = rng.uniform(0, 10, (8, 8))
        start = SwarmState(positions=((4, 4),))
        plan = plan_greedy_variance(world, var, start, horizon=5)
        total = sum(var[c] for st in plan.positions[1:] for c in st.positions)
        assert plan.objective_value == pytest.approx(total)

    def test_cornered_uav_falls_back_and_logs(self):
        world = make_open_world(5)
        h = world.heights.copy()
        for c in [(2, 0), (1, 1), (0, 2)]:
            h[c] = 30.0
        world = UrbanWorld(spec=world.spec, heights=h)
        start = SwarmState(positions=((0, 0),))
        plan = plan_greedy_variance(world, np.ones((5, 5)), start, horizon=4, seed=9)
        assert plan.meta["fallbacks"]
        plan.validate(world)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        world = make_open_world(8)
        var = rng.uniform(0, 10, (8, 8))
        start = SwarmState(positions=((4, 4), (1, 1)))
        a = plan_greedy_variance(world, var, start, horizon=6, seed=1)
        b = plan_greedy_variance(world, var, start, horizon=6, seed=1)
        assert a == b


class TestRandomWaypoint:
    def test_deterministic_in_seed(self):
        world = make_open_world(8)
        start = SwarmState(positions=((4, 4),))
        a = plan_random_waypoint(world, start, 50, seed=3)
        b = plan_random_waypoint(world, start, 50, seed=3)
        assert a == b
        assert a != plan_random_waypoint(world, start, 50, seed=4)

    def test_repeat_frequency_in_open_interior(self):
        # In the interior all four moves are legal, so
        # P(action == previous) = p + (1 - p) / 4.
        world = make_open_world(201, spacing=10.0)
        start = SwarmState(positions=((100, 100),))
        plan = plan_random_waypoint(world, start, 4000, p=0.8, seed=0)
        acts = [a[0] for a in plan.actions]
        rep = np.mean([acts[t] == acts[t - 1] for t in range(1, len(acts))])
        assert abs(rep - 0.85) < 0.02

    def test_illegal_repeat_redraws_legally(self):
        world = make_open_world(4)
        start = SwarmState(positions=((0, 0),))
        plan = plan_random_waypoint(world, start, 200, p=1.0, seed=2)
        plan.validate(world)  # walls force redraws; every move must be legal

    def test_boxed_in_uav_holds(self):
        world = make_open_world(4)
        h = world.heights.copy()
        for c in [(0, 1), (1, 0), (1, 2), (2, 1)]:
            h[c] = 30.0
        world = UrbanWorld(spec=world.spec, heights=h)
        start = SwarmState(positions=((1, 1),))
        plan = plan_random_waypoint(world, start, 5, seed=0)
        assert all(a == (HOLD,) for a in plan.actions)
        assert len(plan.meta["holds"]) == 5
        assert plan.positions[-1].positions == ((1, 1),)


class TestPlanIO:
    def test_roundtrip(self, tmp_path):
        world = make_open_world(5)
        start = SwarmState(positions=((2, 2),))
        plan = plan_entropy_vi(PlanRequest(world=world, model=MODEL, start=start,
                                           horizon=3))
        save_plan(plan, tmp_path / "p.json")
        assert load_plan(tmp_path / "p.json") == plan
