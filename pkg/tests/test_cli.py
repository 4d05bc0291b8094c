import json
import subprocess
import sys
import xml.etree.ElementTree as ET

import pytest

from mlnav.cli import main
from mlnav.terrain import load_heightmap


def write(path, data):
    path.write_text(json.dumps(data))
    return str(path)


def manifest(d):
    return json.loads((d / "manifest.json").read_text())


def test_terrain_writes_count_pairs_and_manifest(tmp_path):
    cfg = write(tmp_path / "t.json", {"terrain": {"extent": 8, "cfa": 0.05, "rng_seed": 4}})
    assert main(["terrain", "--config", cfg, "--out", str(tmp_path / "out"), "--count", "5"]) == 0
    out = tmp_path / "out"
    assert len(list(out.glob("terrain_*.json"))) - len(list(out.glob("*_rocks.json"))) == 5
    assert len(list(out.glob("terrain_*.f32"))) == 5
    m = manifest(out)
    assert m["command"] == "terrain" and m["seeds"] == [4, 5, 6, 7, 8]
    assert "tool_version" in m and m["duration_s"] >= 0
    assert load_heightmap(out / "terrain_002").heights.shape == (80, 80)


def test_terrain_seed_reuse_gives_identical_files(tmp_path):
    cfg = write(tmp_path / "t.json", {"extent": 8, "cfa": 0.1, "noise_amplitude": 0.2})
    for name in ("a", "b"):
        assert main(["terrain", "--config", cfg, "--out", str(tmp_path / name), "--seed", "17"]) == 0
    for suffix in (".json", ".f32", "_rocks.json"):
        a = (tmp_path / "a" / f"terrain_000{suffix}").read_bytes()
        assert a == (tmp_path / "b" / f"terrain_000{suffix}").read_bytes()


def test_invalid_config_exits_2_and_names_field(tmp_path, capsys):
    cfg = write(tmp_path / "t.json", {"terrain": {"cfa": 0.9}})
    assert main(["terrain", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "cfa" in capsys.readouterr().err
    assert main(["terrain", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "bad.json").write_text("{")
    assert main(["terrain", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == 2
    drive_cfg = write(tmp_path / "d.json", {"terrain": {"extent": 20}, "cost": {"alpha": -2}})
    assert main(["drive", "--config", drive_cfg, "--out", str(tmp_path / "d")]) == 2
    assert "alpha" in capsys.readouterr().err


TRIAL_HEADER = "trial_id,planner_kind,terrain_class,seed,outcome,driven_length,straight_line,cycles,audit_failures,error"


def test_report_on_hand_written_csv(tmp_path, capsys):
    (tmp_path / "trials.csv").write_text(
        TRIAL_HEADER
        + "\n"
        + "a,baseline,benign,0,success,16.0,16.0,3,0,\n"
        + "b,baseline,benign,1,success,17.6,16.0,4,0,\n"
        + "c,baseline,benign,2,timeout,20.0,16.0,9,0,\n"
    )
    (tmp_path / "cycles.csv").write_text(
        "trial_id,cycle,x,y,heading,ace_checks,paths_evaluated,overthink,recovery\n"
        "a,0,2,10,0,24,1,0,0\n"
        "a,1,5,10,0,300,9,1,0\n"
        "b,0,2,10,0,24,1,0,0\n"
    )
    assert main(["report", "--trials", str(tmp_path / "trials.csv")]) == 0
    report = json.loads(capsys.readouterr().out)
    benign = report["classes"]["benign"]
    assert round(benign["success_rate"], 1) == 66.7
    assert benign["path_inefficiency"] == pytest.approx(5.0)
    assert benign["mean_collision_checks"] == pytest.approx(116.0)
    assert benign["overthink_rate"] == pytest.approx(100 / 3)
    assert "complex" not in report["classes"]


def test_report_detects_tampered_bundle(tmp_path, capsys):
    (tmp_path / "trials.csv").write_text(TRIAL_HEADER + "\na,baseline,complex,0,success,16.0,16.0,3,0,\n")
    assert main(["report", "--trials", str(tmp_path / "trials.csv"), "--out", str(tmp_path / "r")]) == 0
    bundled = json.loads((tmp_path / "r" / "report.json").read_text())
    (tmp_path / "report.json").write_text(json.dumps(bundled))
    assert main(["report", "--trials", str(tmp_path / "trials.csv")]) == 0
    bundled["classes"]["complex"]["success_rate"] = 50.0
    (tmp_path / "report.json").write_text(json.dumps(bundled))
    assert main(["report", "--trials", str(tmp_path / "trials.csv")]) == 3
    assert "differ" in capsys.readouterr().err


def test_drive_on_flat_terrain_renders_svg(tmp_path):
    cfg = write(tmp_path / "d.json", {"terrain": {"extent": 20, "rng_seed": 0}, "sim": {"max_cycles": 10}})
    out = tmp_path / "drive"
    assert main(["drive", "--config", cfg, "--out", str(out)]) == 0
    svg = out / "drive.svg"
    assert svg.stat().st_size > 0
    root = ET.parse(svg).getroot()
    assert root.tag.endswith("svg")
    trace = json.loads((out / "trace.json").read_text())
    assert trace["outcome"] == "success"
    ys = [p[1] for c in trace["cycles"] for p in c["executed"]]
    assert max(ys) - min(ys) < 0.5  # visually straight
    assert manifest(out)["outcome"] == "success"

    # re-render the saved trace over a saved map
    assert main(["terrain", "--config", cfg, "--out", str(tmp_path / "map")]) == 0
    rendered = tmp_path / "again" / "r.svg"
    args = ["render", "--map", str(tmp_path / "map" / "terrain_000"), "--trace", str(out / "trace.json")]
    assert main(args + ["--out", str(rendered)]) == 0
    ET.parse(rendered)
    assert (tmp_path / "again" / "manifest.json").exists()


def test_drive_from_infeasible_start_is_a_runtime_error(tmp_path):
    cfg = write(tmp_path / "d.json", {"terrain": {"extent": 20}})
    assert main(["drive", "--config", cfg, "--out", str(tmp_path / "o"), "--start", "0.2", "10", "0"]) == 3


def test_campaign_parallelism_gives_identical_report(tmp_path, capsys):
    camp = write(
        tmp_path / "c.json",
        {"generate": {"n_benign": 1, "n_complex": 1, "seed": 5, "sim": {"max_cycles": 3}}},
    )
    assert main(["campaign", "--campaign", camp, "--out", str(tmp_path / "p1")]) == 0
    assert main(["campaign", "--campaign", camp, "--out", str(tmp_path / "p4"), "--parallelism", "4"]) == 0
    a = (tmp_path / "p1" / "report.json").read_bytes()
    assert a == (tmp_path / "p4" / "report.json").read_bytes()
    assert manifest(tmp_path / "p4")["parallelism"] == 4
    capsys.readouterr()
    # the bundled report must agree with a recomputation from its CSVs
    assert main(["report", "--trials", str(tmp_path / "p1" / "trials.csv")]) == 0


def test_manifest_keeps_previous_runs(tmp_path):
    cfg = write(tmp_path / "t.json", {"extent": 8})
    for _ in range(2):
        assert main(["terrain", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    m = manifest(tmp_path / "o")
    assert len(m["previous"]) == 1 and m["previous"][0]["command"] == "terrain"


def test_dataset_and_train_smoke(tmp_path):
    assert main(["dataset", "--out", str(tmp_path / "ds"), "--pairs", "6", "--seed", "2"]) == 0
    assert len(list((tmp_path / "ds").glob("pair_*"))) == 6
    hp = write(tmp_path / "hp.json", {"train": {"epochs": 1, "batch": 4, "widths": [2, 4], "val_fraction": 0.5}})
    assert main(["train", "--dataset", str(tmp_path / "ds"), "--config", hp, "--out", str(tmp_path / "m")]) == 0
    assert (tmp_path / "m" / "model.json").exists() and (tmp_path / "m" / "model.f32").exists()
    assert (tmp_path / "m" / "training_log.csv").read_text().startswith("epoch,")
    bad = write(tmp_path / "bad.json", {"learning_rate": 1})
    assert main(["train", "--dataset", str(tmp_path / "ds"), "--config", bad, "--out", str(tmp_path / "m2")]) == 2


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "mlnav.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for name in ("terrain", "dataset", "train", "drive", "campaign", "report", "render"):
        assert name in res.stdout
