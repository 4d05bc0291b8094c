"""Proxy collision heuristics: 8-heading collision maps, lookup, datasets, inference.

Channel ``k`` of an :class:`AceMap` holds the collision probability for a
rover heading of ``k * 45`` degrees at each cell center.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ace import TWO_PI, ClearanceChecker, Pose, RoverGeometry
from .terrain import Heightmap, TerrainConfig, build_terrain

N_HEADINGS = 8
HEADING_STEP = TWO_PI / N_HEADINGS
TILE = 64
TILE_OVERLAP = 8
HEIGHT_SCALE = 1.0  # meters per unit of normalized network input


@dataclass(frozen=True, eq=False)
class AceMap:
    values: np.ndarray  # (8, rows, cols)
    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] != N_HEADINGS:
            raise ValueError(f"ace map must have shape (8, rows, cols), got {v.shape}")
        if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
            raise ValueError("ace map values must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1:]

    @staticmethod
    def heading_of_channel(k: int) -> float:
        return k * HEADING_STEP


def heading_channel(heading):
    """Nearest 45-degree channel; exact ties go to the lower channel index."""
    h = np.mod(np.asarray(heading, dtype=np.float64), TWO_PI) / HEADING_STEP
    lo = np.floor(h)
    frac = h - lo
    lo = lo.astype(np.intp) % N_HEADINGS
    hi = (lo + 1) % N_HEADINGS
    tie = np.abs(frac - 0.5) < 1e-9
    ch = np.where(frac < 0.5, lo, hi)
    return np.where(tie, np.minimum(lo, hi), ch)


def lookup_many(ace_map: AceMap, poses: np.ndarray) -> np.ndarray:
    """Vectorized :func:`lookup` over an (n, 3) pose array."""
    poses = np.asarray(poses, dtype=np.float64).reshape(-1, 3)
    rows, cols = ace_map.shape
    c = np.rint((poses[:, 0] - ace_map.origin[0]) / ace_map.resolution).astype(np.intp)
    r = np.rint((poses[:, 1] - ace_map.origin[1]) / ace_map.resolution).astype(np.intp)
    inside = (c >= 0) & (c < cols) & (r >= 0) & (r < rows)
    ch = heading_channel(poses[:, 2])
    out = np.ones(len(poses))
    out[inside] = ace_map.values[ch[inside], r[inside], c[inside]]
    return out


def lookup(ace_map: AceMap, pose: Pose) -> float:
    """Collision probability at the nearest cell and heading channel; 1.0 off the map."""
    return float(lookup_many(ace_map, np.array([pose.as_tuple()]))[0])


def _cell_grid(rows: int, cols: int, origin, resolution):
    cc, rr = np.meshgrid(np.arange(cols), np.arange(rows))
    return origin[0] + cc * resolution, origin[1] + rr * resolution


def compute_oracle_ace_map(hm: Heightmap, geom: RoverGeometry | None = None) -> AceMap:
    """Exact binary map: 1 where the checker rejects the rover at that cell and heading."""
    checker = ClearanceChecker(hm, geom)
    xs, ys = _cell_grid(hm.height_cells, hm.width_cells, hm.origin, hm.resolution)
    xs, ys = xs.ravel(), ys.ravel()
    out = np.empty((N_HEADINGS, hm.height_cells, hm.width_cells))
    for k in range(N_HEADINGS):
        feasible = checker.evaluate_batch(xs, ys, np.full(xs.shape, AceMap.heading_of_channel(k))).feasible
        out[k] = np.where(feasible, 0.0, 1.0).reshape(hm.height_cells, hm.width_cells)
    return AceMap(out, hm.resolution, hm.origin)


def footprint_outside_mask(hm: Heightmap, geom: RoverGeometry | None = None, region=None) -> np.ndarray:
    """(8, rows, cols) mask of cells whose rover footprint leaves ``hm``.

    ``region`` = (row0, row1, col0, col1) restricts the cells considered.
    """
    row0, row1, col0, col1 = region or (0, hm.height_cells, 0, hm.width_cells)
    checker = ClearanceChecker(hm, geom)
    origin = hm.cell_center(row0, col0)
    xs, ys = _cell_grid(row1 - row0, col1 - col0, origin, hm.resolution)
    xs, ys = xs.ravel(), ys.ravel()
    out = np.empty((N_HEADINGS, row1 - row0, col1 - col0), dtype=bool)
    for k in range(N_HEADINGS):
        oob = checker.evaluate_batch(xs, ys, np.full(xs.shape, AceMap.heading_of_channel(k))).out_of_bounds
        out[k] = oob.reshape(row1 - row0, col1 - col0)
    return out


def valid_margin_cells(hm: Heightmap, geom: RoverGeometry | None = None) -> int:
    """Border width (cells) inside which some heading's footprint leaves the map."""
    geom = geom or RoverGeometry()
    return int(math.ceil(geom.reach / hm.resolution)) + 1


def normalize_tile(tile: np.ndarray) -> np.ndarray:
    return (tile - tile.mean()) / HEIGHT_SCALE


def export_pgm(ace_map: AceMap, out_dir, prefix: str = "ace") -> list[Path]:
    """Write one 8-bit PGM per heading channel (row 0 at the bottom of the image)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    rows, cols = ace_map.shape
    for k in range(N_HEADINGS):
        img = np.rint(ace_map.values[k][::-1] * 255).astype(np.uint8)
        p = out_dir / f"{prefix}_h{k * 45:03d}.pgm"
        p.write_bytes(f"P5\n{cols} {rows}\n255\n".encode() + img.tobytes())
        paths.append(p)
    return paths


# --- training data ---


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TrainingPair:
    input: np.ndarray  # (TILE, TILE) float32, normalized heights
    label: np.ndarray  # (8, TILE, TILE) uint8, 1 = infeasible
    meta: dict

    def __post_init__(self):
        if self.input.shape != self.label.shape[1:]:
            raise DatasetError("input and label tiles differ in size")


def cut_tiles(hm: Heightmap, ace_map: AceMap, count: int, rng: np.random.Generator, geom=None, tile: int = TILE):
    """Random aligned tiles whose cells all have in-map footprints."""
    margin = valid_margin_cells(hm, geom)
    lo = margin
    hi_r = hm.height_cells - margin - tile
    hi_c = hm.width_cells - margin - tile
    if hi_r < lo or hi_c < lo:
        raise DatasetError(
            f"a {tile}x{tile} tile does not fit inside the valid interior of a "
            f"{hm.height_cells}x{hm.width_cells} map"
        )
    out = []
    for _ in range(count):
        r = int(rng.integers(lo, hi_r + 1))
        c = int(rng.integers(lo, hi_c + 1))
        x = normalize_tile(hm.heights[r : r + tile, c : c + tile]).astype(np.float32)
        y = ace_map.values[:, r : r + tile, c : c + tile].astype(np.uint8)
        out.append((r, c, x, y))
    return out


def build_dataset(
    terrain_configs: list[TerrainConfig],
    samples_per_terrain: int,
    geom: RoverGeometry | None = None,
    seed: int = 0,
    tile: int = TILE,
) -> list[TrainingPair]:
    """Oracle-labelled tiles from freshly generated terrains; deterministic per seed."""
    if not terrain_configs:
        raise DatasetError("no terrain configs given")
    rng = np.random.default_rng(seed)
    pairs = []
    for i, cfg in enumerate(terrain_configs):
        hm = build_terrain(cfg).heightmap
        oracle = compute_oracle_ace_map(hm, geom)
        for r, c, x, y in cut_tiles(hm, oracle, samples_per_terrain, rng, geom, tile):
            meta = {"terrain": cfg.to_dict(), "terrain_index": i, "tile_row": r, "tile_col": c}
            pairs.append(TrainingPair(x, y, meta))
    return pairs


def stack_pairs(pairs: list[TrainingPair]) -> tuple[np.ndarray, np.ndarray]:
    """Network arrays: inputs (n, 1, T, T) and labels (n, 8, T, T), both float32."""
    x = np.stack([p.input for p in pairs])[:, None].astype(np.float32)
    y = np.stack([p.label for p in pairs]).astype(np.float32)
    return x, y


def split_pairs(pairs: list[TrainingPair], val_fraction: float = 0.2):
    """Train/validation split by source terrain so no terrain appears in both."""
    terrains = sorted({p.meta.get("terrain_index", i) for i, p in enumerate(pairs)})
    n_val = int(round(len(terrains) * val_fraction))
    val_ids = set(terrains[len(terrains) - n_val :])
    train = [p for i, p in enumerate(pairs) if p.meta.get("terrain_index", i) not in val_ids]
    val = [p for i, p in enumerate(pairs) if p.meta.get("terrain_index", i) in val_ids]
    return train, val


def save_dataset(pairs: list[TrainingPair], out_dir) -> Path:
    """One directory per pair: input.f32, label.u8 and meta.json."""
    out_dir = Path(out_dir)
    for i, p in enumerate(pairs):
        d = out_dir / f"pair_{i:05d}"
        d.mkdir(parents=True, exist_ok=True)
        (d / "input.f32").write_bytes(np.asarray(p.input, dtype="<f4").tobytes())
        (d / "label.u8").write_bytes(np.asarray(p.label, dtype=np.uint8).tobytes())
        meta = dict(p.meta, shape=list(p.label.shape))
        (d / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")
    return out_dir


def load_dataset(in_dir) -> list[TrainingPair]:
    in_dir = Path(in_dir)
    dirs = sorted(d for d in in_dir.glob("pair_*") if d.is_dir())
    if not dirs:
        raise DatasetError(f"no pair directories under {in_dir}")
    pairs = []
    for d in dirs:
        meta = json.loads((d / "meta.json").read_text())
        shape = tuple(meta.pop("shape"))
        x = np.frombuffer((d / "input.f32").read_bytes(), dtype="<f4")
        y = np.frombuffer((d / "label.u8").read_bytes(), dtype=np.uint8)
        if x.size != shape[1] * shape[2] or y.size != int(np.prod(shape)):
            raise DatasetError(f"{d.name}: payload size does not match shape {shape}")
        pairs.append(TrainingPair(x.reshape(shape[1:]).astype(np.float32), y.reshape(shape).copy(), meta))
    return pairs


# --- learned inference ---


def _needs_mask(hm: Heightmap, region, geom) -> bool:
    m = valid_margin_cells(hm, geom)
    row0, row1, col0, col1 = region
    return row0 < m or col0 < m or row1 > hm.height_cells - m or col1 > hm.width_cells - m


def window_region(hm: Heightmap, x: float, y: float, size: float) -> tuple[int, int, int, int]:
    """Cell range (row0, row1, col0, col1) of a square window centered on (x, y), clipped to the map."""
    half = int(round(size / (2 * hm.resolution)))
    r, c = hm.to_cell(x, y)
    return (
        max(r - half, 0),
        min(r + half + 1, hm.height_cells),
        max(c - half, 0),
        min(c + half + 1, hm.width_cells),
    )


def infer_ace_map(model, hm: Heightmap, geom: RoverGeometry | None = None, region=None, *, mask_outside: bool = True) -> AceMap:
    """Predict an AceMap over ``region`` of ``hm`` (whole map by default).

    The region is covered by 64x64 tiles with an 8-cell overlap on every side;
    only each tile's central block is kept. Tiles draw context from the whole
    map and replicate edge heights past its border. Cells whose footprint
    leaves the map are set to 1 when ``mask_outside`` is on.
    """
    row0, row1, col0, col1 = region or (0, hm.height_cells, 0, hm.width_cells)
    if not (0 <= row0 < row1 <= hm.height_cells and 0 <= col0 < col1 <= hm.width_cells):
        raise ValueError(f"region {region} is outside the map")
    core = TILE - 2 * TILE_OVERLAP
    rows, cols = row1 - row0, col1 - col0
    nbr, nbc = -(-rows // core), -(-cols // core)
    pad = TILE
    padded = np.pad(hm.heights, pad, mode="edge")
    starts = [(row0 + i * core, col0 + j * core) for i in range(nbr) for j in range(nbc)]
    tiles = np.empty((len(starts), 1, TILE, TILE), dtype=np.float32)
    for k, (r, c) in enumerate(starts):
        r0, c0 = r - TILE_OVERLAP + pad, c - TILE_OVERLAP + pad
        tiles[k, 0] = normalize_tile(padded[r0 : r0 + TILE, c0 : c0 + TILE])
    pred = model.predict(tiles)
    out = np.empty((N_HEADINGS, nbr * core, nbc * core))
    for k, (r, c) in enumerate(starts):
        i, j = (r - row0), (c - col0)
        out[:, i : i + core, j : j + core] = pred[k, :, TILE_OVERLAP : TILE_OVERLAP + core, TILE_OVERLAP : TILE_OVERLAP + core]
    out = out[:, :rows, :cols]
    if mask_outside and _needs_mask(hm, (row0, row1, col0, col1), geom):
        out[footprint_outside_mask(hm, geom, (row0, row1, col0, col1))] = 1.0
    return AceMap(np.clip(out, 0.0, 1.0), hm.resolution, hm.cell_center(row0, col0))


def binarize(ace_map: AceMap, threshold: float = 0.5) -> AceMap:
    """Map of 1 where the predicted probability exceeds ``threshold``, else 0."""
    return AceMap((ace_map.values > threshold).astype(ace_map.values.dtype), ace_map.resolution, ace_map.origin)


def pixel_agreement(predicted: AceMap, oracle: AceMap, threshold: float = 0.5) -> float:
    """Fraction of (cell, channel) pairs where thresholded prediction matches the oracle."""
    if predicted.values.shape != oracle.values.shape:
        raise ValueError("maps differ in shape")
    return float(np.mean((predicted.values > threshold) == (oracle.values > 0.5)))
