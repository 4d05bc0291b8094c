"""Budgeted greedy path selection over a trajectory library.

Both planners rank leaves by a cheap score, then run the clearance checker
down the ranked list. The search stops once a feasible path exists and the
check budget floor has been spent (or the hard cap is hit). Shared tree
prefixes are checked once per planning cycle.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import ndimage

from .ace import AceResult, ClearanceChecker, PathAceResult, RoverGeometry
from .heuristic import AceMap, lookup_many
from .terrain import Heightmap
from .tree import PathNode, TrajectoryLibrary, Turn


@dataclass(frozen=True)
class CostParams:
    alpha: float = 1.0
    beta: float = 10.0
    drive_speed: float = 0.04  # m/s
    turn_speed: float = 0.1  # rad/s
    roughness_weight: float = 100.0  # seconds per meter of local height std
    min_ace_threshold: float = 275
    max_ace_checks: float | None = None  # None: 4x threshold, unbounded when threshold is 0
    proxy_weight: float = 1e6
    overthink_threshold: int = 275
    roughness_window: float = 0.5  # meters
    check_interval: float = 0.25  # meters

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if not (self.drive_speed > 0 and self.turn_speed > 0):
            raise ValueError("drive_speed and turn_speed must be > 0")
        if self.min_ace_threshold < 0:
            raise ValueError("min_ace_threshold must be >= 0")
        if self.proxy_weight < 0 or self.roughness_weight < 0:
            raise ValueError("weights must be >= 0")
        if not self.check_interval > 0:
            raise ValueError("check_interval must be > 0")

    @property
    def hard_cap(self) -> float:
        if self.max_ace_checks is not None:
            return self.max_ace_checks
        if self.min_ace_threshold == 0 or math.isinf(self.min_ace_threshold):
            return math.inf
        return 4 * self.min_ace_threshold

    @classmethod
    def from_dict(cls, d: dict) -> "CostParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown cost field(s): {', '.join(sorted(unknown))}")
        d = dict(d)
        for key in ("min_ace_threshold", "max_ace_checks"):
            if d.get(key) in ("inf", "Infinity"):
                d[key] = math.inf
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("min_ace_threshold", "max_ace_checks"):
            if isinstance(d[key], float) and math.isinf(d[key]):
                d[key] = "inf"
        return d


@dataclass
class PlanResult:
    chosen_leaf: PathNode | None
    chosen_cost: float
    ace_checks: int
    paths_evaluated: int
    rejected_leaves: list[tuple[PathNode, str]] = field(default_factory=list)
    overthink: bool = False
    chosen_path: PathAceResult | None = None
    first_feasible_rank: int | None = None  # 1-based position in the ranked list
    evaluated: list[PathNode] = field(default_factory=list)


def roughness_grid(hm: Heightmap, window: float = 0.5) -> np.ndarray:
    """Local height standard deviation over a square window."""
    size = max(1, int(round(window / hm.resolution)))
    size += 1 - size % 2

    def build():
        mean = ndimage.uniform_filter(hm.heights, size=size, mode="nearest")
        sq = ndimage.uniform_filter(hm.heights**2, size=size, mode="nearest")
        return np.sqrt(np.clip(sq - mean * mean, 0.0, None))

    return hm.derived(("roughness", size), build)


class _NodeInfo:
    """Per-node values for one planning cycle."""

    __slots__ = ("count", "reached_goal", "rough_sum", "end_xy", "end_length", "proxy")


    def __init__(self, count, reached_goal, rough_sum, end_xy, end_length):
        self.count = count
        self.reached_goal = reached_goal
        self.rough_sum = rough_sum
        self.end_xy = end_xy
        self.end_length = end_length
        self.proxy = None


class PathEvaluator:
    """Cheap costs and cached clearance checks for the leaves of one library.

    With ``goal_tolerance`` set, a path is cut at its first sample inside the
    goal disc: the remainder is neither costed nor checked.
    """

    def __init__(
        self,
        hm: Heightmap,
        goal,
        params: CostParams,
        geom: RoverGeometry | None = None,
        checker: ClearanceChecker | None = None,
        goal_tolerance: float | None = None,
    ):
        self.hm = hm
        self.goal = (float(goal[0]), float(goal[1]))
        self.params = params
        self._checker = checker
        self._geom = geom
        self.goal_tolerance = goal_tolerance
        self.rough = roughness_grid(hm, params.roughness_window)
        self._info: dict[int, _NodeInfo] = {}
        self._checked: dict[int, tuple[list[AceResult], bool]] = {}
        self.ace_checks = 0

    @property
    def checker(self) -> ClearanceChecker:
        if self._checker is None:
            self._checker = ClearanceChecker(self.hm, self._geom)
        return self._checker

    def info(self, node: PathNode) -> _NodeInfo:
        got = self._info.get(id(node))
        if got is None:
            self._fill([node])
            got = self._info[id(node)]
        return got

    def prepare(self, lib: TrajectoryLibrary) -> None:
        """Compute node info for a whole library, one array pass per tree layer."""
        interval = self.params.check_interval
        lib.precompute_samples(interval)
        for nodes in lib.layers:
            groups: dict[tuple, list[PathNode]] = {}
            for n in nodes:
                if id(n) not in self._info:
                    groups.setdefault(n.samples(interval).shape, []).append(n)
            for group in groups.values():
                self._fill(group)

    def _fill(self, nodes: list[PathNode]) -> None:
        interval = self.params.check_interval
        hm = self.hm
        poses = np.stack([n.samples(interval) for n in nodes])  # (m, k, 3)
        lengths = np.stack([n.sample_lengths(interval) for n in nodes])
        m, k = poses.shape[:2]
        if k == 0:
            for n in nodes:
                self._info[id(n)] = _NodeInfo(0, False, 0.0, (n.end_pose.x, n.end_pose.y), n.cumulative_length)
            return
        counts = np.full(m, k)
        reached = np.zeros(m, dtype=bool)
        if self.goal_tolerance is not None:
            inside = np.hypot(poses[..., 0] - self.goal[0], poses[..., 1] - self.goal[1]) <= self.goal_tolerance
            reached = inside.any(axis=1)
            counts = np.where(reached, inside.argmax(axis=1) + 1, k)
        c = np.clip(np.rint((poses[..., 0] - hm.origin[0]) / hm.resolution).astype(np.intp), 0, hm.width_cells - 1)
        r = np.clip(np.rint((poses[..., 1] - hm.origin[1]) / hm.resolution).astype(np.intp), 0, hm.height_cells - 1)
        # sequential prefix sums so a node's value never depends on its batch
        rough = np.cumsum(self.rough[r, c], axis=1)
        last = counts - 1
        idx = np.arange(m)
        rough_sum = rough[idx, last].tolist()
        end_x = poses[idx, last, 0].tolist()
        end_y = poses[idx, last, 1].tolist()
        end_len = lengths[idx, last].tolist()
        for i, n in enumerate(nodes):
            self._info[id(n)] = _NodeInfo(int(counts[i]), bool(reached[i]), rough_sum[i], (end_x[i], end_y[i]), end_len[i])

    def segments(self, leaf: PathNode) -> list[PathNode]:
        """Nodes that make up the (possibly goal-truncated) path to ``leaf``."""
        out = []
        for node in leaf.lineage():
            out.append(node)
            if self.info(node).reached_goal:
                break
        return out

    def path_poses(self, leaf: PathNode) -> np.ndarray:
        interval = self.params.check_interval
        parts = [node.samples(interval)[: self.info(node).count] for node in self.segments(leaf)]
        return np.concatenate(parts) if parts else np.empty((0, 3))

    def c_goal(self, leaf: PathNode) -> float:
        p = self.params
        segs = self.segments(leaf)
        n = 0
        rough = 0.0
        turn = 0.0
        for node in segs:
            inf = self.info(node)
            n += inf.count
            rough += inf.rough_sum
            if isinstance(node.primitive, Turn):
                turn += abs(node.primitive.angle)
        last = self.info(segs[-1]) if segs else None
        end_xy = last.end_xy if last else (leaf.end_pose.x, leaf.end_pose.y)
        length = last.end_length if last else leaf.cumulative_length
        to_go = math.hypot(end_xy[0] - self.goal[0], end_xy[1] - self.goal[1])
        mean_rough = rough / n if n else 0.0
        return (length + to_go) / p.drive_speed + turn / p.turn_speed + p.roughness_weight * mean_rough

    def proxy_cost(self, leaf: PathNode, ace_map: AceMap) -> float:
        """Sum of map lookups over the path's sampled poses (one map per evaluator)."""
        total = 0.0
        interval = self.params.check_interval
        for node in self.segments(leaf):
            inf = self.info(node)
            if inf.proxy is None:
                poses = node.samples(interval)[: inf.count]
                inf.proxy = float(lookup_many(ace_map, poses).sum()) if inf.count else 0.0
            total += inf.proxy
        return total

    def check(self, leaf: PathNode) -> PathAceResult:
        """Clearance-check the path to ``leaf``, reusing results of shared prefixes."""
        out = PathAceResult()
        interval = self.params.check_interval
        checker = self.checker
        for node in self.segments(leaf):
            key = id(node)
            cached = self._checked.get(key)
            if cached is None:
                results = []
                ok = True
                for row in node.samples(interval)[: self.info(node).count]:
                    r = checker.evaluate(row)
                    results.append(r)
                    self.ace_checks += 1
                    if not r.feasible:
                        ok = False
                        break
                cached = (results, ok)
                self._checked[key] = cached
            results, ok = cached
            out.per_pose.extend(results)
            if not ok:
                out.feasible = False
                break
        out.checks_run = len(out.per_pose)
        out.aggregate_cost = sum(r.cost for r in out.per_pose) if out.feasible else math.inf
        if out.checks_run == 0:
            raise ValueError("leaf has no sampled poses")
        return out


def c_goal(leaf: PathNode, goal, hm: Heightmap, params: CostParams | None = None, goal_tolerance=None) -> float:
    """Time-to-goal cost: traversal time, turn time, cost-to-go and a roughness penalty."""
    params = params or CostParams()
    return PathEvaluator(hm, goal, params, goal_tolerance=goal_tolerance).c_goal(leaf)


def _greedy(ev: PathEvaluator, ranked: list[PathNode], params: CostParams, goal_costs: dict, stop_early=True) -> PlanResult:
    threshold = params.min_ace_threshold
    cap = params.hard_cap
    evaluated: list[tuple[PathNode, PathAceResult]] = []
    first_rank = None
    any_feasible = False
    for rank, leaf in enumerate(ranked, start=1):
        res = ev.check(leaf)
        evaluated.append((leaf, res))
        if res.feasible and not any_feasible:
            any_feasible = True
            first_rank = rank
        if stop_early and ((any_feasible and ev.ace_checks >= threshold) or ev.ace_checks >= cap):
            break

    best = None
    best_key = None
    for leaf, res in evaluated:
        if not res.feasible:
            continue
        total = params.alpha * goal_costs[id(leaf)] + params.beta * res.aggregate_cost
        key = (total, leaf.leaf_index)
        if best_key is None or key < best_key:
            best, best_key = (leaf, res), key

    rejected = []
    for leaf, res in evaluated:
        if best is not None and leaf is best[0]:
            continue
        rejected.append((leaf, "infeasible" if not res.feasible else "higher_cost"))
    return PlanResult(
        chosen_leaf=best[0] if best else None,
        chosen_cost=best_key[0] if best else math.inf,
        ace_checks=ev.ace_checks,
        paths_evaluated=len(evaluated),
        rejected_leaves=rejected,
        overthink=ev.ace_checks > params.overthink_threshold,
        chosen_path=best[1] if best else None,
        first_feasible_rank=first_rank,
        evaluated=[leaf for leaf, _ in evaluated],
    )


def plan_baseline(
    lib: TrajectoryLibrary,
    hm: Heightmap,
    goal,
    geom: RoverGeometry | None = None,
    params: CostParams | None = None,
    *,
    checker: ClearanceChecker | None = None,
    goal_tolerance: float | None = None,
) -> PlanResult:
    """Rank leaves by time-to-goal alone, then check greedily down the list."""
    params = params or CostParams()
    ev = PathEvaluator(hm, goal, params, geom, checker, goal_tolerance)
    ev.prepare(lib)
    costs = {id(leaf): ev.c_goal(leaf) for leaf in lib.leaves}
    ranked = sorted(lib.leaves, key=lambda leaf: (costs[id(leaf)], leaf.leaf_index))
    return _greedy(ev, ranked, params, costs)


def plan_mlnav(
    lib: TrajectoryLibrary,
    ace_map: AceMap,
    hm: Heightmap,
    goal,
    geom: RoverGeometry | None = None,
    params: CostParams | None = None,
    *,
    checker: ClearanceChecker | None = None,
    goal_tolerance: float | None = None,
) -> PlanResult:
    """Rank leaves by time-to-goal plus the proxy collision cost from ``ace_map``."""
    params = params or CostParams()
    ev = PathEvaluator(hm, goal, params, geom, checker, goal_tolerance)
    ev.prepare(lib)
    costs = {id(leaf): ev.c_goal(leaf) for leaf in lib.leaves}
    score = {
        id(leaf): params.alpha * costs[id(leaf)] + params.proxy_weight * ev.proxy_cost(leaf, ace_map)
        for leaf in lib.leaves
    }
    ranked = sorted(lib.leaves, key=lambda leaf: (score[id(leaf)], leaf.leaf_index))
    return _greedy(ev, ranked, params, costs)


def exhaustive_plan(
    lib: TrajectoryLibrary,
    hm: Heightmap,
    goal,
    geom: RoverGeometry | None = None,
    params: CostParams | None = None,
    *,
    checker: ClearanceChecker | None = None,
    goal_tolerance: float | None = None,
) -> PlanResult:
    """Check every leaf and return the global optimum among feasible ones."""
    params = params or CostParams()
    ev = PathEvaluator(hm, goal, params, geom, checker, goal_tolerance)
    ev.prepare(lib)
    costs = {id(leaf): ev.c_goal(leaf) for leaf in lib.leaves}
    return _greedy(ev, list(lib.leaves), params, costs, stop_early=False)


class CountingChecker(ClearanceChecker):
    """Checker that tallies every single-pose evaluation it performs."""

    def __init__(self, hm: Heightmap, geom: RoverGeometry | None = None):
        super().__init__(hm, geom)
        self.calls = 0

    def evaluate(self, pose):
        self.calls += 1
        return super().evaluate(pose)
