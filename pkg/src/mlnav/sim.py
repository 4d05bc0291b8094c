"""Receding-horizon drive simulation, Monte Carlo campaigns and performance metrics."""

from __future__ import annotations

import csv
import functools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .ace import ClearanceChecker, Pose, RoverGeometry, evaluate_path
from .heuristic import binarize, compute_oracle_ace_map, infer_ace_map, window_region
from .planner import CostParams, PathEvaluator, plan_baseline, plan_mlnav
from .terrain import Heightmap, TerrainConfig, build_terrain, sample_terrain_config
from .tree import TurnLayer, build_tree, preset

log = logging.getLogger(__name__)

PLANNER_KINDS = ("baseline", "mlnav_oracle", "mlnav_learned")
OUTCOMES = ("success", "timeout", "no_path_found", "safety_violation", "error")
MAX_RECOVERIES = 3


class SimError(RuntimeError):
    pass


class InvalidStartError(SimError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    planner_kind: str = "baseline"
    tree_preset: str = "default"
    cost_params: CostParams = field(default_factory=CostParams)
    geom: RoverGeometry = field(default_factory=RoverGeometry)
    goal_tolerance: float = 0.5
    max_cycles: int = 200
    execute_layers: int = 2  # tree layers executed per cycle: the turn and the first arc
    window: float = 12.0  # side of the square map window given to the learned model
    model_path: str | None = None
    # learned maps are cut at this probability before lookup; None keeps raw probabilities
    proxy_cutoff: float | None = 0.5

    def __post_init__(self):
        if self.planner_kind not in PLANNER_KINDS:
            raise ConfigError(f"planner_kind must be one of {PLANNER_KINDS}, got {self.planner_kind!r}")
        if not self.goal_tolerance > 0:
            raise ConfigError("goal_tolerance must be > 0")
        if self.max_cycles < 1:
            raise ConfigError("max_cycles must be >= 1")
        if self.execute_layers < 1:
            raise ConfigError("execute_layers must be >= 1")
        if self.proxy_cutoff is not None and not 0.0 <= self.proxy_cutoff < 1.0:
            raise ConfigError("proxy_cutoff must be in [0, 1) or null")
        if self.planner_kind == "mlnav_learned" and not self.model_path:
            raise ConfigError("mlnav_learned needs model_path")
        preset(self.tree_preset)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown sim field(s): {', '.join(sorted(unknown))}")
        d = dict(d)
        try:
            if isinstance(d.get("cost_params"), dict):
                d["cost_params"] = CostParams.from_dict(d["cost_params"])
            if isinstance(d.get("geom"), dict):
                d["geom"] = RoverGeometry.from_dict(d["geom"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(**d)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["cost_params"] = self.cost_params.to_dict()
        d["geom"] = {f.name: getattr(self.geom, f.name) for f in fields(self.geom)}
        d["geom"]["belly_grid"] = list(self.geom.belly_grid)
        return d


@dataclass
class CycleRecord:
    cycle: int
    x: float
    y: float
    heading: float
    ace_checks: int
    paths_evaluated: int
    overthink: bool
    recovery: bool = False


@dataclass
class TrialResult:
    outcome: str
    driven_length: float
    straight_line: float
    per_cycle: list[CycleRecord] = field(default_factory=list)
    audit_failures: int = 0
    trace: list[dict] = field(default_factory=list)

    @property
    def cycles(self) -> int:
        return len(self.per_cycle)


def path_inefficiency(driven: float, straight: float) -> float:
    """Percent extra distance over the straight line, floored at zero."""
    if not straight > 0:
        raise ValueError("straight-line distance must be > 0")
    return max(0.0, 100.0 * (driven - straight) / straight)


@functools.lru_cache(maxsize=4)
def _load_model(path: str):
    from .convnet import Model

    return Model.load(path)


def _recovery_turn(checker: ClearanceChecker, pose: Pose, n_turns: int):
    """Least-cost feasible turn-in-place to a heading between the tree's turn lattice.

    Turning by a multiple of the lattice step would rebuild the same tree, so
    candidates sit half a step off. Returns (angle, checks) with angle None
    when every candidate is infeasible.
    """
    step = 2 * math.pi / n_turns
    best = None
    checks = 0
    for k in range(n_turns):
        angle = (k + 0.5) * step
        if angle > math.pi:
            angle -= 2 * math.pi
        r = checker.evaluate((pose.x, pose.y, pose.heading + angle))
        checks += 1
        if r.feasible:
            key = (r.cost, abs(angle), angle)
            if best is None or key < best:
                best = key
    return (best[2] if best else None), checks


def run_trial(
    hm: Heightmap,
    start: Pose,
    goal,
    config: SimConfig = SimConfig(),
    seed: int = 0,
    *,
    model=None,
    record_paths: bool = False,
) -> TrialResult:
    """Drive from ``start`` toward ``goal`` with replanning every cycle.

    Each cycle builds the tree at the current pose, plans, executes the first
    ``execute_layers`` layers of the chosen path exactly, and audits the
    executed poses with a fresh checker. ``seed`` is carried for record keeping;
    the loop itself has no randomness.
    """
    del seed
    geom = config.geom
    params = config.cost_params
    goal = (float(goal[0]), float(goal[1]))
    checker = ClearanceChecker(hm, geom)
    if not checker.evaluate(start).feasible:
        raise InvalidStartError(f"start pose {start.as_tuple()} is not feasible")
    straight = math.hypot(goal[0] - start.x, goal[1] - start.y)
    if not straight > 0:
        raise SimError("start and goal coincide")
    spec = preset(config.tree_preset)
    n_turns = spec.layers[0].count if isinstance(spec.layers[0], TurnLayer) else 8

    ace_map = None
    if config.planner_kind == "mlnav_oracle":
        ace_map = compute_oracle_ace_map(hm, geom)
    elif config.planner_kind == "mlnav_learned" and model is None:
        model = _load_model(config.model_path)

    result = TrialResult("timeout", 0.0, straight)
    pose = start
    recoveries = 0
    for cycle in range(config.max_cycles):
        lib = build_tree(spec, pose)
        if config.planner_kind == "baseline":
            plan = plan_baseline(lib, hm, goal, geom, params, checker=checker, goal_tolerance=config.goal_tolerance)
        else:
            if config.planner_kind == "mlnav_learned":
                region = window_region(hm, pose.x, pose.y, config.window)
                ace_map = infer_ace_map(model, hm, geom, region)
                if config.proxy_cutoff is not None:
                    ace_map = binarize(ace_map, config.proxy_cutoff)
            plan = plan_mlnav(lib, ace_map, hm, goal, geom, params, checker=checker, goal_tolerance=config.goal_tolerance)
        record = CycleRecord(cycle, pose.x, pose.y, pose.heading, plan.ace_checks, plan.paths_evaluated, plan.overthink)
        result.per_cycle.append(record)

        if plan.chosen_leaf is None:
            record.recovery = True
            angle, extra = _recovery_turn(checker, pose, n_turns)
            record.ace_checks += extra
            record.overthink = record.ace_checks > params.overthink_threshold
            recoveries += 1
            if angle is None or recoveries > MAX_RECOVERIES:
                result.outcome = "no_path_found"
                break
            pose = Pose(pose.x, pose.y, pose.heading + angle)
            executed = np.array([pose.as_tuple()])
            length = 0.0
        else:
            recoveries = 0
            ev = PathEvaluator(hm, goal, params, geom, goal_tolerance=config.goal_tolerance)
            segs = ev.segments(plan.chosen_leaf)[: config.execute_layers]
            parts = [node.samples(params.check_interval)[: ev.info(node).count] for node in segs]
            executed = np.concatenate(parts)
            length = ev.info(segs[-1]).end_length
            pose = Pose(*executed[-1])

        audit = evaluate_path(hm, executed, geom, params.check_interval)
        if record_paths:
            result.trace.append(
                {
                    "cycle": cycle,
                    "executed": executed[:, :2].tolist(),
                    "rejected": [
                        ev_path[:, :2].tolist()
                        for ev_path in _rejected_paths(hm, goal, params, geom, config, plan)
                    ],
                }
            )
        result.driven_length += length
        if not audit.feasible:
            result.audit_failures += 1
            result.outcome = "safety_violation"
            break
        if math.hypot(pose.x - goal[0], pose.y - goal[1]) <= config.goal_tolerance:
            result.outcome = "success"
            break
    return result


def _rejected_paths(hm, goal, params, geom, config, plan):
    ev = PathEvaluator(hm, goal, params, geom, goal_tolerance=config.goal_tolerance)
    return [ev.path_poses(leaf) for leaf, _ in plan.rejected_leaves]


# --- metrics ---


@dataclass
class ClassMetrics:
    trials: int
    success_rate: float
    path_inefficiency: float | None  # None when no trial succeeded
    mean_collision_checks: float | None  # None when no cycles ran
    overthink_rate: float | None


def class_metrics(rows: list[dict], cycles: list[dict], overthink_threshold: float) -> ClassMetrics:
    """Metrics over trial rows (outcome, driven_length, straight_line) and their cycle rows."""
    n = len(rows)
    successes = [r for r in rows if r["outcome"] == "success"]
    ineff = [path_inefficiency(float(r["driven_length"]), float(r["straight_line"])) for r in successes]
    checks = [int(c["ace_checks"]) for c in cycles]
    return ClassMetrics(
        trials=n,
        success_rate=100.0 * len(successes) / n,
        path_inefficiency=sum(ineff) / len(ineff) if ineff else None,
        mean_collision_checks=sum(checks) / len(checks) if checks else None,
        overthink_rate=100.0 * sum(c > overthink_threshold for c in checks) / len(checks) if checks else None,
    )


@dataclass
class MetricsReport:
    classes: dict[str, ClassMetrics]
    by_planner: dict[str, dict[str, ClassMetrics]]
    trial_count: int
    outcomes: dict[str, int]
    audit_failures: int
    config: dict

    def to_json(self) -> str:
        def conv(m: ClassMetrics) -> dict:
            return {f.name: getattr(m, f.name) for f in fields(m)}

        d = {
            "trial_count": self.trial_count,
            "outcomes": self.outcomes,
            "audit_failures": self.audit_failures,
            "classes": {k: conv(v) for k, v in sorted(self.classes.items())},
            "by_planner": {
                p: {k: conv(v) for k, v in sorted(g.items())} for p, g in sorted(self.by_planner.items())
            },
            "config": self.config,
        }
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def aggregate_rows(trial_rows: list[dict], cycle_rows: list[dict], overthink_threshold: float = 275, config=None) -> MetricsReport:
    """Build a report from trial and cycle rows; empty classes are left out."""
    if not trial_rows:
        raise ValueError("no trials to aggregate")
    by_trial: dict[str, list[dict]] = {}
    for c in cycle_rows:
        by_trial.setdefault(str(c["trial_id"]), []).append(c)

    def bucket(rows):
        out = {}
        for klass in ("benign", "complex"):
            sel = [r for r in rows if r["terrain_class"] == klass]
            if sel:
                cyc = [c for r in sel for c in by_trial.get(str(r["trial_id"]), [])]
                out[klass] = class_metrics(sel, cyc, overthink_threshold)
        return out

    planners = sorted({r["planner_kind"] for r in trial_rows})
    outcomes = {o: sum(r["outcome"] == o for r in trial_rows) for o in OUTCOMES}
    return MetricsReport(
        classes=bucket(trial_rows),
        by_planner={p: bucket([r for r in trial_rows if r["planner_kind"] == p]) for p in planners},
        trial_count=len(trial_rows),
        outcomes=outcomes,
        audit_failures=sum(int(r["audit_failures"]) for r in trial_rows),
        config=dict(config or {}, overthink_threshold=overthink_threshold),
    )


def aggregate_metrics(trials: list[TrialResult], class_labels: list[str], overthink_threshold: float = 275) -> MetricsReport:
    """Report over in-memory trial results with one terrain class label per trial."""
    if len(trials) != len(class_labels):
        raise ValueError("one class label per trial is required")
    rows, cycles = [], []
    for i, (t, klass) in enumerate(zip(trials, class_labels)):
        rows.append(
            {
                "trial_id": str(i),
                "planner_kind": "",
                "terrain_class": klass,
                "outcome": t.outcome,
                "driven_length": t.driven_length,
                "straight_line": t.straight_line,
                "audit_failures": t.audit_failures,
            }
        )
        cycles.extend({"trial_id": str(i), "ace_checks": c.ace_checks} for c in t.per_cycle)
    return aggregate_rows(rows, cycles, overthink_threshold)


# --- campaigns ---


@dataclass(frozen=True)
class TrialSpec:
    trial_id: str
    terrain: TerrainConfig
    start: tuple[float, float, float]
    goal: tuple[float, float]
    sim: SimConfig
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "trial_id": self.trial_id,
            "terrain": self.terrain.to_dict(),
            "start": list(self.start),
            "goal": list(self.goal),
            "sim": self.sim.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrialSpec":
        try:
            return cls(
                trial_id=str(d["trial_id"]),
                terrain=TerrainConfig.from_dict(d["terrain"]),
                start=tuple(float(v) for v in d["start"]),
                goal=tuple(float(v) for v in d["goal"]),
                sim=SimConfig.from_dict(d.get("sim", {})),
                seed=int(d.get("seed", 0)),
            )
        except KeyError as exc:
            raise ConfigError(f"trial entry is missing field {exc}") from None


def _endpoint_ok(hm: Heightmap, x: float, y: float, heading: float | None, geom: RoverGeometry) -> bool:
    checker = ClearanceChecker(hm, geom)
    headings = [heading] if heading is not None else [k * math.pi / 4 for k in range(8)]
    return any(checker.evaluate((x, y, h)).feasible for h in headings)


def generate_campaign(
    n_benign: int,
    n_complex: int,
    planner_kinds=("baseline",),
    *,
    seed: int = 0,
    sim_overrides: dict | None = None,
    start=(2.0, 10.0),
    goal=(18.0, 10.0),
    extent: float = 20.0,
    assign: str = "matched",
) -> list[TrialSpec]:
    """Campaign over freshly sampled terrains.

    With ``assign="matched"`` each terrain is driven once per planner kind;
    with ``assign="cycle"`` terrain ``i`` is driven by kind ``i mod len(kinds)``.
    Terrains whose start pose or goal is infeasible are redrawn.
    """
    if assign not in ("matched", "cycle"):
        raise ConfigError(f"assign must be 'matched' or 'cycle', got {assign!r}")
    rng = np.random.default_rng(seed)
    geom = SimConfig.from_dict(dict(sim_overrides or {}, planner_kind="baseline", model_path=None)).geom
    heading = math.atan2(goal[1] - start[1], goal[0] - start[0])
    keep = ((start[0], start[1], 2.0), (goal[0], goal[1], 1.5))
    specs = []
    index = 0
    for klass, count in (("benign", n_benign), ("complex", n_complex)):
        for _ in range(count):
            while True:
                cfg = sample_terrain_config(rng, klass, keep_clear=keep, extent=extent)
                hm = build_terrain(cfg).heightmap
                if _endpoint_ok(hm, start[0], start[1], heading, geom) and _endpoint_ok(hm, goal[0], goal[1], None, geom):
                    break
            kinds = planner_kinds if assign == "matched" else (planner_kinds[index % len(planner_kinds)],)
            for kind in kinds:
                sim = SimConfig.from_dict(dict(sim_overrides or {}, planner_kind=kind))
                specs.append(TrialSpec(f"{index:04d}-{kind}", cfg, (start[0], start[1], heading), tuple(goal), sim, index))
            index += 1
    return specs


def load_campaign(path) -> list[TrialSpec]:
    """Campaign JSON: {"trials": [...]} with explicit entries, or {"generate": {...}}."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if "trials" in data:
        return [TrialSpec.from_dict(d) for d in data["trials"]]
    if "generate" in data:
        g = dict(data["generate"])
        try:
            return generate_campaign(
                int(g.pop("n_benign", 0)),
                int(g.pop("n_complex", 0)),
                tuple(g.pop("planner_kinds", ("baseline",))),
                seed=int(g.pop("seed", 0)),
                sim_overrides=g.pop("sim", None),
                **g,
            )
        except TypeError as exc:
            raise ConfigError(f"campaign generator: {exc}") from None
    raise ConfigError("campaign file needs a 'trials' list or a 'generate' block")


TRIAL_FIELDS = [
    "trial_id",
    "planner_kind",
    "terrain_class",
    "seed",
    "outcome",
    "driven_length",
    "straight_line",
    "cycles",
    "audit_failures",
    "error",
]
CYCLE_FIELDS = ["trial_id", "cycle", "x", "y", "heading", "ace_checks", "paths_evaluated", "overthink", "recovery"]


def execute_spec(spec: TrialSpec) -> tuple[dict, list[dict]]:
    """Run one campaign trial; failures become an ``error`` row instead of raising."""
    row = {
        "trial_id": spec.trial_id,
        "planner_kind": spec.sim.planner_kind,
        "terrain_class": spec.terrain.terrain_class,
        "seed": spec.seed,
        "outcome": "error",
        "driven_length": 0.0,
        "straight_line": math.hypot(spec.goal[0] - spec.start[0], spec.goal[1] - spec.start[1]),
        "cycles": 0,
        "audit_failures": 0,
        "error": "",
    }
    cycles: list[dict] = []
    try:
        hm = build_terrain(spec.terrain).heightmap
        res = run_trial(hm, Pose(*spec.start), spec.goal, spec.sim, spec.seed)
    except Exception as exc:  # recorded per row, the campaign goes on
        row["error"] = f"{type(exc).__name__}: {exc}"
        return row, cycles
    row.update(
        outcome=res.outcome,
        driven_length=res.driven_length,
        straight_line=res.straight_line,
        cycles=res.cycles,
        audit_failures=res.audit_failures,
    )
    for c in res.per_cycle:
        cycles.append(
            {
                "trial_id": spec.trial_id,
                "cycle": c.cycle,
                "x": c.x,
                "y": c.y,
                "heading": c.heading,
                "ace_checks": c.ace_checks,
                "paths_evaluated": c.paths_evaluated,
                "overthink": int(c.overthink),
                "recovery": int(c.recovery),
            }
        )
    return row, cycles


def run_monte_carlo(specs: list[TrialSpec], parallelism: int = 1, out_dir=None) -> tuple[MetricsReport, list[dict], list[dict]]:
    """Run every trial, aggregate in trial-id order and optionally write the outputs."""
    if not specs:
        raise ValueError("campaign is empty")
    ids = [s.trial_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError("trial ids must be unique")
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(execute_spec, specs, chunksize=1))
    else:
        results = [execute_spec(s) for s in specs]
    results.sort(key=lambda rc: rc[0]["trial_id"])
    rows = [r for r, _ in results]
    cycles = [c for _, cs in results for c in cs]
    thresholds = {s.sim.cost_params.overthink_threshold for s in specs}
    if len(thresholds) != 1:
        raise ConfigError("all trials in a campaign must share one overthink threshold")
    report = aggregate_rows(rows, cycles, thresholds.pop(), {"trials": len(specs)})
    if out_dir is not None:
        write_outputs(out_dir, report, rows, cycles)
    return report, rows, cycles


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def write_outputs(out_dir, report: MetricsReport, rows: list[dict], cycles: list[dict]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, fieldnames, data in (("trials.csv", TRIAL_FIELDS, rows), ("cycles.csv", CYCLE_FIELDS, cycles)):
        with open(out / name, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fieldnames)
            w.writeheader()
            for d in data:
                w.writerow({k: _fmt(d[k]) for k in fieldnames})
    (out / "report.json").write_text(report.to_json())


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def report_from_csv(trials_csv, cycles_csv=None, overthink_threshold: float = 275) -> MetricsReport:
    """Recompute the report from persisted rows (cycles.csv beside trials.csv by default)."""
    trials_csv = Path(trials_csv)
    cycles_csv = Path(cycles_csv) if cycles_csv else trials_csv.with_name("cycles.csv")
    rows = read_csv_rows(trials_csv)
    for r in rows:
        r["driven_length"] = float(r["driven_length"])
        r["straight_line"] = float(r["straight_line"])
    cycles = read_csv_rows(cycles_csv) if cycles_csv.exists() else []
    return aggregate_rows(rows, cycles, overthink_threshold, {"trials": len(rows)})
