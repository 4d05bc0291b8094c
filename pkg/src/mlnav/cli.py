"""``mlnav`` command line: terrain, dataset, train, drive, campaign, report, render.

Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 safety audit failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import convnet, heuristic, render, sim
from .ace import Pose, RoverGeometry
from .planner import CostParams
from .terrain import TerrainConfig, TerrainError, build_terrain, load_heightmap, sample_terrain_config, save_heightmap, save_rocks
from .tree import TreeSpecError

log = logging.getLogger("mlnav")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_SAFETY = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}", EXIT_CONFIG) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})", EXIT_CONFIG) from None


def terrain_config_from(data: dict) -> TerrainConfig:
    """Accept either a bare terrain dict or a run config with a ``terrain`` section."""
    return TerrainConfig.from_dict(data.get("terrain", data) if isinstance(data, dict) else data)


def sim_config_from(data: dict) -> sim.SimConfig:
    """Build a SimConfig from a run config with rover/tree/cost/sim sections."""
    d = dict(data.get("sim", {}))
    if "rover" in data:
        d["geom"] = RoverGeometry.from_dict(data["rover"])
    if "cost" in data:
        d["cost_params"] = CostParams.from_dict(data["cost"])
    if "tree" in data:
        if not isinstance(data["tree"], str):
            raise sim.ConfigError("tree must name a preset (default, bt, dt, vlt)")
        d["tree_preset"] = data["tree"]
    d.pop("start", None)
    d.pop("goal", None)
    return sim.SimConfig.from_dict(d)


def write_manifest(out_dir, record: dict) -> Path:
    """One manifest per output directory; an earlier one is kept under ``previous``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    record = dict(record, tool_version=_version())
    if path.exists():
        try:
            old = json.loads(path.read_text())
        except json.JSONDecodeError:
            old = {}
        previous = old.pop("previous", [])
        record["previous"] = previous + [old]
    path.write_text(json.dumps(record, indent=2, default=str) + "\n")
    return path


# --- commands ---


def cmd_terrain(args) -> dict:
    cfg = terrain_config_from(read_json(args.config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs, seeds = [], []
    for i in range(args.count):
        seed = (args.seed if args.seed is not None else cfg.rng_seed) + i
        c = TerrainConfig.from_dict(dict(cfg.to_dict(), rng_seed=seed))
        sample = build_terrain(c)
        stem = out / f"terrain_{i:03d}"
        outputs += [str(p) for p in save_heightmap(sample.heightmap, stem)]
        save_rocks(sample.rocks, stem.with_name(stem.name + "_rocks.json"))
        outputs.append(str(stem.with_name(stem.name + "_rocks.json")))
        seeds.append(seed)
    return {"config_paths": [args.config], "seeds": seeds, "outputs": outputs}


def cmd_dataset(args) -> dict:
    data = read_json(args.config) if args.config else {}
    spec = data.get("dataset", {})
    tiles = int(spec.get("tiles_per_terrain", 8))
    benign_fraction = float(spec.get("benign_fraction", 0.5))
    terrains = -(-args.pairs // tiles)
    rng = np.random.default_rng(args.seed)
    configs = [
        sample_terrain_config(rng, "benign" if rng.random() < benign_fraction else "complex")
        for _ in range(terrains)
    ]
    geom = RoverGeometry.from_dict(data["rover"]) if "rover" in data else None
    pairs = heuristic.build_dataset(configs, tiles, geom, seed=args.seed)[: args.pairs]
    heuristic.save_dataset(pairs, args.out)
    return {"config_paths": [args.config] if args.config else [], "seeds": [args.seed], "outputs": [str(args.out)], "pairs": len(pairs)}


def cmd_train(args) -> dict:
    hp_data = read_json(args.config) if args.config else {}
    hp_data = dict(hp_data.get("train", hp_data))
    widths = tuple(hp_data.pop("widths", (8, 16, 32)))
    val_fraction = float(hp_data.pop("val_fraction", 0.2))
    if args.seed is not None:
        hp_data["seed"] = args.seed
    try:
        hp = convnet.HyperParams(**hp_data)
    except TypeError as exc:
        raise CliError(f"hyperparameters: {exc}", EXIT_CONFIG) from None
    pairs = heuristic.load_dataset(args.dataset)
    train_pairs, val_pairs = heuristic.split_pairs(pairs, val_fraction)
    tx, ty = heuristic.stack_pairs(train_pairs)
    vx, vy = heuristic.stack_pairs(val_pairs) if val_pairs else (None, None)
    spec = convnet.unet_spec(widths)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    weights, history = convnet.train(spec, tx, ty, hp, vx, vy, log_path=out / "training_log.csv")
    weights.metadata["train_seconds"] = round(time.time() - t0, 1)
    files = convnet.save_weights(spec, weights, out / "model")
    last = history[-1]
    return {
        "config_paths": [args.config] if args.config else [],
        "seeds": [hp.seed],
        "outputs": [str(p) for p in files] + [str(out / "training_log.csv")],
        "final": {k: last[k] for k in ("train_loss", "val_loss", "val_accuracy")},
    }


def _load_map(args, data):
    if args.map:
        return load_heightmap(args.map)
    return build_terrain(terrain_config_from(data)).heightmap


def cmd_drive(args) -> dict:
    data = read_json(args.config) if args.config else {}
    if not args.map and "terrain" not in data:
        raise CliError("drive needs --map or a config with a terrain section", EXIT_CONFIG)
    hm = _load_map(args, data)
    cfg = sim_config_from(data)
    s = data.get("sim", {})
    start = args.start or s.get("start") or [2.0, 10.0, 0.0]
    goal = args.goal or s.get("goal") or [18.0, 10.0]
    if len(start) == 2:
        start = [*start, math.atan2(goal[1] - start[1], goal[0] - start[0])]
    res = sim.run_trial(hm, Pose(*start), goal, cfg, args.seed or 0, record_paths=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace = {
        "start": list(start),
        "goal": list(goal),
        "goal_tolerance": cfg.goal_tolerance,
        "outcome": res.outcome,
        "driven_length": res.driven_length,
        "straight_line": res.straight_line,
        "cycles": [
            dict(t, ace_checks=c.ace_checks, paths_evaluated=c.paths_evaluated, overthink=c.overthink)
            for t, c in zip(res.trace, res.per_cycle)
        ],
    }
    (out / "trace.json").write_text(json.dumps(trace) + "\n")
    svg = render.render_svg(hm, trace, out / "drive.svg")
    record = {
        "config_paths": [p for p in (args.config, args.map) if p],
        "seeds": [args.seed or 0],
        "outputs": [str(out / "trace.json"), str(svg)],
        "outcome": res.outcome,
        "sim": cfg.to_dict(),
    }
    if res.outcome == "safety_violation":
        record["exit_code"] = EXIT_SAFETY
    print(f"outcome {res.outcome}, driven {res.driven_length:.2f} m in {res.cycles} cycles")
    return record


def cmd_campaign(args) -> dict:
    specs = sim.load_campaign(args.campaign)
    report, rows, _ = sim.run_monte_carlo(specs, args.parallelism, args.out)
    out = Path(args.out)
    record = {
        "config_paths": [args.campaign],
        "seeds": sorted({s.seed for s in specs}),
        "outputs": [str(out / n) for n in ("trials.csv", "cycles.csv", "report.json")],
        "parallelism": args.parallelism,
        "outcomes": report.outcomes,
    }
    errors = [r for r in rows if r["error"]]
    for r in errors[:5]:
        log.warning("trial %s failed: %s", r["trial_id"], r["error"])
    if report.outcomes["safety_violation"] or report.audit_failures:
        record["exit_code"] = EXIT_SAFETY
    sys.stdout.write(report.to_json())
    return record


def cmd_report(args) -> dict:
    trials = Path(args.trials)
    if not trials.exists():
        raise CliError(f"trials file not found: {trials}", EXIT_CONFIG)
    bundled = trials.with_name("report.json")
    threshold = args.overthink_threshold
    if threshold is None and bundled.exists():
        threshold = json.loads(bundled.read_text())["config"]["overthink_threshold"]
    report = sim.report_from_csv(trials, args.cycles, 275 if threshold is None else threshold)
    text = report.to_json()
    sys.stdout.write(text)
    record = {"config_paths": [str(trials)], "seeds": [], "outputs": []}
    if bundled.exists():
        old = json.loads(bundled.read_text())
        new = json.loads(text)
        if {k: v for k, v in old.items() if k != "config"} != {k: v for k, v in new.items() if k != "config"}:
            raise CliError(f"recomputed metrics differ from {bundled}", EXIT_RUNTIME)
        record["matches_bundled_report"] = True
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "report.json").write_text(text)
        record["outputs"] = [str(Path(args.out) / "report.json")]
    return record


def cmd_render(args) -> dict:
    hm = load_heightmap(args.map)
    trace = read_json(args.trace)
    out = render.render_svg(hm, trace, args.out)
    return {"config_paths": [args.map, args.trace], "seeds": [], "outputs": [str(out)]}


# --- wiring ---


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlnav", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("terrain", help="generate heightmaps")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--count", type=int, default=1)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_terrain)

    d = sub.add_parser("dataset", help="build an oracle-labelled training set")
    d.add_argument("--config")
    d.add_argument("--out", required=True)
    d.add_argument("--pairs", type=int, default=2400)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_dataset)

    tr = sub.add_parser("train", help="train the collision-map network")
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--config", help="JSON hyperparameters (lr, batch, epochs, momentum, augment)")
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int)
    tr.set_defaults(func=cmd_train)

    dr = sub.add_parser("drive", help="simulate one drive and render it")
    dr.add_argument("--map", help="heightmap path (.json/.f32 pair)")
    dr.add_argument("--config", help="run config with terrain/rover/tree/cost/sim sections")
    dr.add_argument("--out", required=True)
    dr.add_argument("--start", type=float, nargs="+", metavar="V")
    dr.add_argument("--goal", type=float, nargs=2, metavar="V")
    dr.add_argument("--seed", type=int, default=0)
    dr.set_defaults(func=cmd_drive)

    c = sub.add_parser("campaign", help="run a Monte Carlo campaign")
    c.add_argument("--campaign", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--parallelism", type=int, default=1)
    c.set_defaults(func=cmd_campaign)

    r = sub.add_parser("report", help="recompute metrics from trials.csv")
    r.add_argument("--trials", required=True)
    r.add_argument("--cycles")
    r.add_argument("--overthink-threshold", type=float)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    rn = sub.add_parser("render", help="render a drive trace to SVG")
    rn.add_argument("--map", required=True)
    rn.add_argument("--trace", required=True)
    rn.add_argument("--out", required=True)
    rn.set_defaults(func=cmd_render)
    return p


CONFIG_ERRORS = (sim.ConfigError, TerrainError, TreeSpecError, convnet.WeightsError, heuristic.DatasetError)


def _manifest_dir(args) -> Path | None:
    out = getattr(args, "out", None)
    if out is None:
        return None
    out = Path(out)
    return out.parent if out.suffix in (".svg",) else out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    t0 = time.time()
    try:
        record = args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, TypeError, KeyError, FileNotFoundError) as exc:
        # raised while parsing inputs before any work starts
        print(f"config error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    code = record.pop("exit_code", EXIT_OK)
    manifest_dir = _manifest_dir(args)
    if manifest_dir is not None:
        argv_used = {k: v for k, v in vars(args).items() if k != "func"}
        write_manifest(
            manifest_dir,
            dict(record, command=args.command, args=argv_used, duration_s=round(time.time() - t0, 3)),
        )
    if code == EXIT_SAFETY:
        print("safety audit failed: an executed segment was infeasible", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
