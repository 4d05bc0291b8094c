"""Shared fixtures for the acceptance suite: a cached trained model and criterion reporting."""

import hashlib
import json
import logging
import os
import time
from pathlib import Path

import numpy as np
import pytest

CACHE_DIR = Path(os.environ.get("MLNAV_CACHE", Path(__file__).resolve().parents[1] / ".mlnav_cache"))

# training recipe for the learned heuristic; the cache key covers every field
RECIPE = {
    "terrains": 300,
    "tiles_per_terrain": 8,
    "terrain_seed": 0,
    "tile_seed": 1,
    "widths": [8, 16, 32],
    "lr": 0.05,
    "batch": 16,
    "epochs": 12,
    "train_seed": 0,
    "val_fraction": 0.2,
}

_results: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record the outcome of an acceptance criterion for the end-of-run summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        _results[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        passed, detail = _results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def _recipe_configs(recipe):
    from mlnav.terrain import sample_terrain_config

    rng = np.random.default_rng(recipe["terrain_seed"])
    return [sample_terrain_config(rng, "benign" if i % 2 == 0 else "complex") for i in range(recipe["terrains"])]


@pytest.fixture(scope="session")
def trained_model():
    """Train (or reuse) the collision-map network; returns (model path, training history)."""
    from mlnav import convnet, heuristic

    key = hashlib.sha256(json.dumps(RECIPE, sort_keys=True).encode()).hexdigest()[:12]
    out = CACHE_DIR / f"model_{key}"
    model_path = out / "model.json"
    history_path = out / "history.json"
    if model_path.exists() and history_path.exists():
        return model_path, json.loads(history_path.read_text())

    logging.getLogger("mlnav").info("training the acceptance model into %s", out)
    t0 = time.time()
    pairs = heuristic.build_dataset(
        _recipe_configs(RECIPE), RECIPE["tiles_per_terrain"], seed=RECIPE["tile_seed"]
    )
    train_pairs, val_pairs = heuristic.split_pairs(pairs, RECIPE["val_fraction"])
    tx, ty = heuristic.stack_pairs(train_pairs)
    vx, vy = heuristic.stack_pairs(val_pairs)
    del pairs, train_pairs, val_pairs
    dataset_s = time.time() - t0
    spec = convnet.unet_spec(tuple(RECIPE["widths"]))
    hp = convnet.HyperParams(
        lr=RECIPE["lr"], batch=RECIPE["batch"], epochs=RECIPE["epochs"], seed=RECIPE["train_seed"]
    )
    out.mkdir(parents=True, exist_ok=True)
    t1 = time.time()
    weights, history = convnet.train(spec, tx, ty, hp, vx, vy, log_path=out / "training_log.csv")
    train_s = time.time() - t1
    convnet.save_weights(spec, weights, out / "model")
    history_path.write_text(
        json.dumps({"recipe": RECIPE, "epochs": history, "dataset_seconds": dataset_s, "train_seconds": train_s}, indent=1)
    )
    return model_path, json.loads(history_path.read_text())
