import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlnav.ace import ClearanceChecker, Pose, RoverGeometry, evaluate_path
from mlnav.heuristic import AceMap, compute_oracle_ace_map
from mlnav.planner import (
    CostParams,
    CountingChecker,
    PathEvaluator,
    c_goal,
    exhaustive_plan,
    plan_baseline,
    plan_mlnav,
)
from mlnav.terrain import Heightmap, TerrainConfig, generate_terrain
from mlnav.tree import ArcLayer, TreeSpec, TurnLayer, build_tree, preset

FLAT = Heightmap(np.zeros((200, 200)), 0.1)
START = Pose(2.0, 10.0, 0.0)
GOAL = (18.0, 10.0)
SMALL = TreeSpec((TurnLayer(6), ArcLayer(5, 3.0), ArcLayer(5, 3.0)))


def ring(inner=2.0, outer=2.6, height=1.0, center=(10.0, 10.0)) -> Heightmap:
    xs = np.arange(200) * 0.1
    xx, yy = np.meshgrid(xs, xs)
    d = np.hypot(xx - center[0], yy - center[1])
    return Heightmap(np.where((d > inner) & (d < outer), height, 0.0), 0.1)


@pytest.fixture(scope="module")
def rough():
    return generate_terrain(TerrainConfig(base_slope=8, cfa=0.12, noise_amplitude=0.15, rng_seed=5))


def test_straight_leaf_goal_cost_on_flat_ground():
    spec = TreeSpec((ArcLayer(1, 3.0, 0.0), ArcLayer(1, 3.0, 0.0)))
    leaf = build_tree(spec, START).leaves[0]
    # 6 m driven + 10 m to go at 0.04 m/s, no turning, no roughness
    assert c_goal(leaf, GOAL, FLAT) == pytest.approx(400.0, abs=1e-9)


def test_turn_time_is_charged():
    spec = TreeSpec((TurnLayer(5, math.pi / 2), ArcLayer(1, 3.0, 0.0)))
    leaves = build_tree(spec, Pose(10, 10, 0)).leaves
    costs = [c_goal(leaf, (10.0, 10.0), FLAT) for leaf in leaves]
    # 3 m out and 3 m back; plus |turn| / 0.1 rad/s
    for leaf, cost in zip(leaves, costs):
        turn = abs(leaf.lineage()[0].primitive.angle)
        assert cost == pytest.approx(6.0 / 0.04 + turn / 0.1, abs=1e-9)


def test_nearer_leaf_is_cheaper():
    lib = build_tree(preset("default"), START)
    ev = PathEvaluator(FLAT, GOAL, CostParams())
    ends = np.array([math.hypot(l.end_pose.x - GOAL[0], l.end_pose.y - GOAL[1]) for l in lib.leaves])
    costs = np.array([ev.c_goal(l) for l in lib.leaves])
    a, b = int(ends.argmin()), int(ends.argmax())
    assert costs[a] < costs[b]


def test_roughness_ignores_height_offset_and_grows_with_bumps(rough):
    leaf = build_tree(preset("default"), START).leaves[907]
    base = PathEvaluator(rough, GOAL, CostParams()).c_goal(leaf)
    lifted = Heightmap(rough.heights + 3.0, 0.1)
    assert PathEvaluator(lifted, GOAL, CostParams()).c_goal(leaf) == pytest.approx(base, abs=1e-6)
    smooth = PathEvaluator(FLAT, GOAL, CostParams()).c_goal(leaf)
    assert base > smooth


def test_cost_params_validation_and_dict_roundtrip():
    with pytest.raises(ValueError):
        CostParams(alpha=-1)
    with pytest.raises(ValueError, match="bogus"):
        CostParams.from_dict({"bogus": 1})
    p = CostParams(min_ace_threshold=math.inf)
    assert p.to_dict()["min_ace_threshold"] == "inf"
    assert CostParams.from_dict(p.to_dict()) == p
    assert CostParams().hard_cap == 1100
    assert CostParams(min_ace_threshold=0).hard_cap == math.inf
    assert CostParams(max_ace_checks=50).hard_cap == 50


def test_flat_baseline_spends_the_budget_floor():
    lib = build_tree(preset("default"), START)
    r = plan_baseline(lib, FLAT, GOAL)
    assert r.chosen_leaf is not None
    assert r.first_feasible_rank == 1
    assert 275 <= r.ace_checks < 275 + 25
    assert not r.overthink or r.ace_checks > 275


def test_threshold_zero_stops_at_first_feasible():
    lib = build_tree(preset("default"), START)
    r = plan_baseline(lib, FLAT, GOAL, params=CostParams(min_ace_threshold=0))
    assert r.paths_evaluated == 1
    assert r.ace_checks == 25
    assert r.rejected_leaves == []


def test_fully_blocked_ring_returns_none():
    hm = ring()
    lib = build_tree(preset("default"), Pose(10.0, 10.0, 0.0))
    r = plan_baseline(lib, hm, GOAL)
    assert r.chosen_leaf is None
    assert r.chosen_cost == math.inf
    assert r.paths_evaluated == lib.N
    assert all(reason == "infeasible" for _, reason in r.rejected_leaves)
    assert len(r.rejected_leaves) == lib.N


def test_mlnav_with_zero_map_ranks_like_baseline():
    lib_a = build_tree(preset("default"), START)
    lib_b = build_tree(preset("default"), START)
    zero = AceMap(np.zeros((8, 200, 200)), 0.1)
    a = plan_baseline(lib_a, FLAT, GOAL)
    b = plan_mlnav(lib_b, zero, FLAT, GOAL)
    assert [l.leaf_index for l in a.evaluated] == [l.leaf_index for l in b.evaluated]
    assert a.chosen_leaf.leaf_index == b.chosen_leaf.leaf_index
    assert a.chosen_cost == b.chosen_cost


def test_exhaustive_is_never_worse(rough):
    lib = build_tree(preset("default"), START)
    greedy = plan_baseline(lib, rough, GOAL)
    best = exhaustive_plan(build_tree(preset("default"), START), rough, GOAL)
    assert best.paths_evaluated == lib.N
    assert greedy.chosen_leaf is not None
    assert best.chosen_cost <= greedy.chosen_cost


def test_infinite_threshold_equals_exhaustive(rough):
    params = CostParams(min_ace_threshold=math.inf)
    greedy = plan_baseline(build_tree(SMALL, START), rough, GOAL, params=params)
    best = exhaustive_plan(build_tree(SMALL, START), rough, GOAL)
    assert greedy.paths_evaluated == SMALL.leaf_count
    assert greedy.chosen_leaf.leaf_index == best.chosen_leaf.leaf_index
    assert greedy.chosen_cost == best.chosen_cost


def test_checker_calls_match_reported_checks(rough):
    checker = CountingChecker(rough)
    r = plan_baseline(build_tree(preset("default"), START), rough, GOAL, checker=checker)
    assert checker.calls == r.ace_checks
    assert r.ace_checks <= CostParams().hard_cap + 25


def test_hard_cap_bounds_checks():
    # a ring at the horizon makes every path fail late, so greedy burns through checks
    hm = ring(inner=4.5, outer=5.5, center=(10.0, 10.0))
    params = CostParams(max_ace_checks=300)
    r = plan_baseline(build_tree(preset("default"), Pose(10.0, 10.0, 0.0)), hm, GOAL, params=params)
    assert r.ace_checks >= 300
    assert r.ace_checks < 300 + 25
    assert r.paths_evaluated < 1694


def test_chosen_path_reverifies(rough):
    lib = build_tree(preset("default"), START)
    r = plan_baseline(lib, rough, GOAL)
    ev = PathEvaluator(rough, GOAL, CostParams())
    poses = [Pose(*row) for row in ev.path_poses(r.chosen_leaf)]
    again = evaluate_path(rough, poses)
    assert again.feasible
    assert again.aggregate_cost == pytest.approx(r.chosen_path.aggregate_cost)


def test_prefix_checks_are_shared():
    lib = build_tree(preset("default"), Pose(10.0, 10.0, 0.0))
    checker = CountingChecker(FLAT)
    ev = PathEvaluator(FLAT, GOAL, CostParams(), checker=checker)
    sibling_a, sibling_b = lib.leaves[0], lib.leaves[1]
    assert sibling_a.parent is sibling_b.parent
    ev.check(sibling_a)
    ev.check(sibling_b)
    # 1 turn + 12 + 12 for the first, then only the last 12 for its sibling
    assert checker.calls == 25 + 12
    ev.check(sibling_a)
    assert checker.calls == 37


def test_goal_truncation_stops_sampling_in_the_disc():
    spec = TreeSpec((ArcLayer(1, 3.0, 0.0), ArcLayer(1, 3.0, 0.0)))
    leaf = build_tree(spec, Pose(5.0, 10.0, 0.0)).leaves[0]
    ev = PathEvaluator(FLAT, (7.0, 10.0), CostParams(), goal_tolerance=0.5)
    poses = ev.path_poses(leaf)
    assert len(poses) == 6  # 1.5 m = first sample within 0.5 m of the goal
    assert ev.c_goal(leaf) == pytest.approx((1.5 + 0.5) / 0.04)


def test_alpha_scaling_changes_nothing_when_beta_is_zero(rough):
    a = plan_baseline(build_tree(SMALL, START), rough, GOAL, params=CostParams(beta=0.0))
    b = plan_baseline(build_tree(SMALL, START), rough, GOAL, params=CostParams(alpha=7.0, beta=0.0))
    assert a.chosen_leaf.leaf_index == b.chosen_leaf.leaf_index
    assert b.chosen_cost == pytest.approx(7.0 * a.chosen_cost)


def test_perfect_proxy_reaches_feasible_path_first(rough):
    # the oracle map ranks known-infeasible leaves after feasible ones when it sees every pose
    oracle = compute_oracle_ace_map(rough)
    r = plan_mlnav(build_tree(preset("default"), START), oracle, rough, GOAL, params=CostParams(min_ace_threshold=0))
    assert r.chosen_leaf is not None
    assert r.first_feasible_rank == 1


@settings(max_examples=15, deadline=None)
@given(
    alpha=st.floats(0.0, 5.0),
    beta=st.floats(0.0, 50.0),
    threshold=st.sampled_from([0, 50, 275, 600]),
)
def test_choice_is_the_argmin_over_checked_paths(rough, alpha, beta, threshold):
    params = CostParams(alpha=alpha, beta=beta, min_ace_threshold=threshold)
    r = plan_baseline(build_tree(SMALL, START), rough, GOAL, params=params)
    ev = PathEvaluator(rough, GOAL, params)
    feasible = [l for l in r.evaluated if ev.check(l).feasible]
    assert (r.chosen_leaf is None) == (not feasible)
    if feasible:
        totals = [params.alpha * ev.c_goal(l) + params.beta * ev.check(l).aggregate_cost for l in feasible]
        assert r.chosen_cost == pytest.approx(min(totals), rel=1e-12, abs=1e-12)
    assert r.paths_evaluated == len(r.evaluated) == len(r.rejected_leaves) + (r.chosen_leaf is not None)


def test_geometry_is_passed_through():
    lib = build_tree(preset("default"), START)
    # a higher clearance requirement on a small bump field rejects more paths
    h = np.zeros((200, 200))
    h[::7, ::7] = 0.35
    hm = Heightmap(h, 0.1)
    lo = plan_baseline(lib, hm, GOAL, geom=RoverGeometry(min_clearance=0.2))
    hi = plan_baseline(build_tree(preset("default"), START), hm, GOAL, geom=RoverGeometry(min_clearance=0.3))
    assert lo.chosen_leaf is not None
    assert hi.chosen_leaf is None or hi.ace_checks >= lo.ace_checks
