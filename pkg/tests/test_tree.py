import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlnav.ace import Pose
from mlnav.tree import (
    PRESETS,
    Arc,
    ArcLayer,
    Turn,
    TreeSpec,
    TreeSpecError,
    TurnLayer,
    arc_point,
    build_tree,
    path_samples,
    preset,
    rollout,
    sample_path,
)


@pytest.mark.parametrize(
    "name, n, horizon",
    [("default", 1694, 6.0), ("bt", 4050, 6.0), ("dt", 18634, 9.0), ("vlt", 12705, 6.0)],
)
def test_preset_cardinalities(name, n, horizon):
    spec = preset(name)
    assert spec.leaf_count == n
    lib = build_tree(spec, Pose(0, 0, 0))
    assert lib.N == len(lib.leaves) == n
    assert lib.horizon == pytest.approx(horizon)
    depth = len(spec.layers)
    assert all(leaf.depth == depth for leaf in lib.leaves)


def test_nodes_are_shared_prefixes():
    spec = preset("default")
    lib = build_tree(spec, Pose(0, 0, 0))
    expected = 1 + 14 + 14 * 11 + 14 * 11 * 11
    assert lib.node_count == expected == sum(1 for _ in lib.nodes())
    assert lib.node_count - 1 < lib.N * len(spec.layers)
    assert [leaf.leaf_index for leaf in lib.leaves] == list(range(lib.N))


def test_fourteen_turns_cover_the_circle():
    angles = TurnLayer(14).values()
    assert len(angles) == len(set(angles)) == 14
    assert 0.0 in angles
    assert np.allclose(np.diff(angles), 2 * math.pi / 14)
    assert min(angles) >= -math.pi and max(angles) < math.pi


def test_arc_layer_has_exact_straight_option():
    vals = ArcLayer(11, 3.0).values()
    assert vals[5] == 0.0
    assert vals[0] == pytest.approx(-0.4) and vals[-1] == pytest.approx(0.4)
    assert np.allclose(np.diff(vals), 0.08)


def test_partial_turn_layer_spacing():
    assert TurnLayer(5, math.pi / 2).values() == pytest.approx([-math.pi / 2, -math.pi / 4, 0, math.pi / 4, math.pi / 2])


@pytest.mark.parametrize(
    "layers",
    [(), (ArcLayer(4, 3.0),), (ArcLayer(3, 0.0),), (TurnLayer(4, 1.0),), (TurnLayer(0),)],
)
def test_invalid_specs_rejected(layers):
    with pytest.raises(TreeSpecError):
        TreeSpec(layers)


def test_spec_dict_roundtrip_and_presets_by_name():
    for name, spec in PRESETS.items():
        assert TreeSpec.from_dict(spec.to_dict()) == spec
        assert TreeSpec.from_dict(name) == spec
    with pytest.raises(TreeSpecError, match="unknown tree preset"):
        preset("wide")
    with pytest.raises(TreeSpecError, match="type"):
        TreeSpec.from_dict([{"type": "spiral", "count": 3}])


def test_six_meter_leaf_sampling_count():
    lib = build_tree(preset("default"), Pose(5, 5, 0.3))
    for leaf in lib.leaves[::97]:
        poses = path_samples(leaf, 0.25)
        assert len(poses) == 25  # 1 turn pose + 24 arc samples


def test_straight_arc_samples():
    spec = TreeSpec((ArcLayer(1, 3.0, 0.0),))
    leaf = build_tree(spec, Pose(0, 0, 0)).leaves[0]
    poses = np.array([p.as_tuple() for p in sample_path(leaf, 0.25)])
    assert np.allclose(poses[:, 0], np.arange(1, 13) * 0.25, atol=1e-15)
    assert np.all(poses[:, 1] == 0.0)
    assert np.all(poses[:, 2] == 0.0)


def test_arc_of_curvature_one_third():
    x, y, th = arc_point(0.0, 0.0, 0.0, 1 / 3, 3.0)
    # circle of radius 3 centred at (0, 3)
    assert math.hypot(x - 0.0, y - 3.0) == pytest.approx(3.0, abs=1e-12)
    assert th == pytest.approx(1.0, abs=1e-15)
    assert (x, y) == pytest.approx((3 * math.sin(1.0), 3 * (1 - math.cos(1.0))), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(
    x=st.floats(-50, 50),
    y=st.floats(-50, 50),
    th=st.floats(0, 2 * math.pi, exclude_max=True),
    kappa=st.floats(-0.5, 0.5).filter(lambda k: abs(k) > 1e-6),
    s=st.floats(0.01, 6.0),
)
def test_arc_matches_analytic_circle(x, y, th, kappa, s):
    ex, ey, eth = arc_point(x, y, th, kappa, s)
    ax = x + (math.sin(th + kappa * s) - math.sin(th)) / kappa
    ay = y - (math.cos(th + kappa * s) - math.cos(th)) / kappa
    # the sinc form is exact; the analytic form loses digits as kappa shrinks
    tol = 1e-12 + 1e-15 * s / abs(kappa)
    assert abs(ex - ax) < tol and abs(ey - ay) < tol
    assert math.isclose(math.cos(eth), math.cos(th + kappa * s), abs_tol=1e-12)
    assert math.isclose(math.sin(eth), math.sin(th + kappa * s), abs_tol=1e-12)


def test_turn_rollout_keeps_position():
    assert rollout((1.0, 2.0, 0.5), Turn(1.0)) == (1.0, 2.0, 1.5)
    assert rollout((1.0, 2.0, 0.0), Arc(2.0, 0.0)) == (3.0, 2.0, 0.0)


@settings(max_examples=20, deadline=None)
@given(th=st.floats(0, 2 * math.pi, exclude_max=True))
def test_mirrored_tree_mirrors_leaves(th):
    spec = TreeSpec((TurnLayer(5, 1.0), ArcLayer(5, 2.0), ArcLayer(3, 1.5)))
    lib = build_tree(spec, Pose(0, 0, th))
    c, s = math.cos(th), math.sin(th)

    def local(p):
        return (c * p.x + s * p.y, -s * p.x + c * p.y)

    # values are symmetric, so leaf j mirrors leaf (N-1-j) within each parent's block
    leaves = lib.leaves
    for i, leaf in enumerate(leaves):
        turn_i, rest = divmod(i, 15)
        arc1, arc2 = divmod(rest, 3)
        mirror = leaves[(4 - turn_i) * 15 + (4 - arc1) * 3 + (2 - arc2)]
        a, b = local(leaf.end_pose), local(mirror.end_pose)
        assert a[0] == pytest.approx(b[0], abs=1e-12)
        assert a[1] == pytest.approx(-b[1], abs=1e-12)


def test_sample_spacing_is_interval_along_arc():
    lib = build_tree(preset("vlt"), Pose(0, 0, 0))
    for leaf in lib.leaves[::511]:
        nodes = leaf.lineage()
        lengths = np.concatenate([n.sample_lengths(0.25) for n in nodes[1:]])
        assert np.allclose(np.diff(lengths), 0.25)
        assert lengths[-1] == pytest.approx(leaf.cumulative_length)
        assert path_samples(leaf)[-1].tolist() == list(leaf.end_pose.as_tuple())


def test_vectorized_sampling_matches_per_node():
    a = build_tree(preset("default"), Pose(3, 4, 1.0))
    b = build_tree(preset("default"), Pose(3, 4, 1.0))
    a.precompute_samples(0.25)
    for la, lb in zip(a.layers, b.layers):
        for x, y in zip(la, lb):
            assert np.array_equal(x.samples(0.25), y.samples(0.25))


def test_bad_interval():
    leaf = build_tree(preset("default"), Pose(0, 0, 0)).leaves[0]
    with pytest.raises(ValueError):
        path_samples(leaf, 0.0)
