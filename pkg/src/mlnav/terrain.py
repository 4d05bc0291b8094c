"""Synthetic 2.5D terrain and heightmap file I/O.

Heights are stored row-major with row 0 at the minimum y. ``origin`` is the
world position of the center of cell (0, 0).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage


class TerrainError(ValueError):
    """Terrain configuration or generation failure."""


class HeightmapError(ValueError):
    """Base class for heightmap file and query errors."""


class HeaderError(HeightmapError):
    pass


class SizeMismatchError(HeightmapError):
    pass


class NonFiniteError(HeightmapError):
    pass


class OutOfBoundsError(HeightmapError):
    pass


@dataclass(frozen=True, eq=False)
class Heightmap:
    heights: np.ndarray
    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)
    # derived grids (dilations, roughness) keyed by parameters; never part of equality
    _derived: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        h = np.array(self.heights, dtype=np.float64)
        if h.ndim != 2 or h.shape[0] < 1 or h.shape[1] < 1:
            raise HeightmapError(f"heights must be a non-empty 2D grid, got shape {h.shape}")
        if not np.all(np.isfinite(h)):
            raise NonFiniteError("heightmap contains NaN or Inf")
        if not self.resolution > 0:
            raise HeightmapError(f"resolution must be > 0, got {self.resolution}")
        h.setflags(write=False)
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "resolution", float(self.resolution))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def width_cells(self) -> int:
        return self.heights.shape[1]

    @property
    def height_cells(self) -> int:
        return self.heights.shape[0]

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(x_min, x_max, y_min, y_max) spanned by cell centers."""
        ox, oy = self.origin
        return (
            ox,
            ox + (self.width_cells - 1) * self.resolution,
            oy,
            oy + (self.height_cells - 1) * self.resolution,
        )

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return (self.origin[0] + col * self.resolution, self.origin[1] + row * self.resolution)

    def to_cell(self, x: float, y: float) -> tuple[int, int]:
        """Nearest (row, col) for a world point; may lie outside the grid."""
        return (
            int(round((y - self.origin[1]) / self.resolution)),
            int(round((x - self.origin[0]) / self.resolution)),
        )

    def derived(self, key, factory):
        """Memoize a grid computed from this (immutable) map."""
        try:
            return self._derived[key]
        except KeyError:
            value = factory()
            if isinstance(value, np.ndarray):
                value.setflags(write=False)
            self._derived[key] = value
            return value

    def crop(self, row0: int, row1: int, col0: int, col1: int) -> "Heightmap":
        """Sub-map over rows [row0, row1) and cols [col0, col1), clipped to the grid."""
        row0, col0 = max(row0, 0), max(col0, 0)
        row1, col1 = min(row1, self.height_cells), min(col1, self.width_cells)
        x0, y0 = self.cell_center(row0, col0)
        return Heightmap(self.heights[row0:row1, col0:col1], self.resolution, (x0, y0))

    def __eq__(self, other):
        if not isinstance(other, Heightmap):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and self.origin == other.origin
            and np.array_equal(self.heights, other.heights)
        )

    __hash__ = object.__hash__


@dataclass(frozen=True)
class TerrainConfig:
    extent: float = 20.0
    resolution: float = 0.1
    base_slope: float = 0.0
    slope_azimuth: float = 0.0
    cfa: float = 0.0
    noise_amplitude: float = 0.0
    rng_seed: int = 0
    # (x, y, radius) discs kept free of rocks, e.g. around start and goal
    keep_clear: tuple[tuple[float, float, float], ...] = ()

    def __post_init__(self):
        if not self.extent > 0:
            raise TerrainError(f"extent must be > 0, got {self.extent}")
        if not self.resolution > 0:
            raise TerrainError(f"resolution must be > 0, got {self.resolution}")
        if not 0.0 <= self.base_slope <= 30.0:
            raise TerrainError(f"base_slope must be in [0, 30] degrees, got {self.base_slope}")
        if not 0.0 <= self.slope_azimuth < 360.0:
            raise TerrainError(f"slope_azimuth must be in [0, 360), got {self.slope_azimuth}")
        if not 0.0 <= self.cfa <= 0.20:
            raise TerrainError(f"cfa must be in [0, 0.20], got {self.cfa}")
        if not self.noise_amplitude >= 0:
            raise TerrainError(f"noise_amplitude must be >= 0, got {self.noise_amplitude}")
        object.__setattr__(self, "keep_clear", tuple(tuple(map(float, z)) for z in self.keep_clear))

    @classmethod
    def from_dict(cls, d: dict) -> "TerrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise TerrainError(f"unknown terrain field(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["keep_clear"] = [list(z) for z in self.keep_clear]
        return d

    @property
    def terrain_class(self) -> str:
        return terrain_class(self.base_slope, self.cfa)


def terrain_class(slope_deg: float, cfa: float) -> str:
    """Benign terrain: slope under 15 degrees and CFA of 7% or less."""
    return "benign" if slope_deg < 15.0 and cfa <= 0.07 else "complex"


@dataclass(frozen=True)
class Rock:
    center: tuple[float, float]
    diameter: float
    height: float

    def __post_init__(self):
        if not (self.diameter > 0 and self.height > 0):
            raise TerrainError("rock diameter and height must be positive")
        if self.height > self.diameter:
            raise TerrainError("rock height must not exceed its diameter")

    @property
    def area(self) -> float:
        return math.pi * (self.diameter / 2) ** 2


@dataclass(frozen=True)
class TerrainSample:
    heightmap: Heightmap
    rocks: tuple[Rock, ...]

    @property
    def rock_area_fraction(self) -> float:
        hm = self.heightmap
        area = hm.width_cells * hm.height_cells * hm.resolution**2
        return sum(r.area for r in self.rocks) / area


MIN_GRID_CELLS = 16
ROCK_MEAN_DIAMETER = 0.4
ROCK_DIAMETER_RANGE = (0.1, 2.0)
ROCK_ASPECT_RANGE = (0.3, 0.6)  # height / diameter
NOISE_CELL_SIZE = 2.0
MAX_ROCK_ATTEMPTS = 200_000


def build_terrain(config: TerrainConfig) -> TerrainSample:
    """Generate a heightmap and the rock list that shaped it."""
    n = int(round(config.extent / config.resolution))
    if n < MIN_GRID_CELLS:
        raise TerrainError(
            f"extent/resolution gives a {n}x{n} grid; at least "
            f"{MIN_GRID_CELLS}x{MIN_GRID_CELLS} cells required"
        )
    res = config.resolution
    rng = np.random.default_rng(config.rng_seed)
    coords = np.arange(n) * res
    xx, yy = np.meshgrid(coords, coords)

    az = math.radians(config.slope_azimuth)
    grade = math.tan(math.radians(config.base_slope))
    heights = grade * (xx * math.cos(az) + yy * math.sin(az))

    # coarse grid is always drawn so rock placement sees the same stream
    coarse_n = int(math.ceil(n * res / NOISE_CELL_SIZE)) + 2
    coarse = rng.uniform(-1.0, 1.0, size=(coarse_n, coarse_n))
    if config.noise_amplitude > 0:
        idx = coords / NOISE_CELL_SIZE
        ci, cj = np.meshgrid(idx, idx, indexing="ij")
        heights = heights + config.noise_amplitude * ndimage.map_coordinates(
            coarse, [ci, cj], order=1, mode="nearest"
        )

    rocks = _place_rocks(config, n, rng)
    for rock in rocks:
        _stamp_rock(heights, rock, res)

    # float32 grid so the binary file format round-trips exactly
    heights = heights.astype(np.float32).astype(np.float64)
    return TerrainSample(Heightmap(heights, res, (0.0, 0.0)), tuple(rocks))


def generate_terrain(config: TerrainConfig) -> Heightmap:
    return build_terrain(config).heightmap


def _draw_diameter(rng: np.random.Generator) -> float:
    lo, hi = ROCK_DIAMETER_RANGE
    while True:
        d = rng.exponential(ROCK_MEAN_DIAMETER)
        if lo <= d <= hi:
            return float(d)


def _place_rocks(config: TerrainConfig, n: int, rng: np.random.Generator) -> list[Rock]:
    if config.cfa <= 0:
        return []
    side = n * config.resolution
    target = config.cfa * side * side
    ceiling = 1.1 * target
    xs, ys, rs = [], [], []
    rocks: list[Rock] = []
    area = 0.0
    clear = np.array(config.keep_clear, dtype=float).reshape(-1, 3)
    lo_edge = -0.5 * config.resolution
    for _ in range(MAX_ROCK_ATTEMPTS):
        if area >= target:
            break
        d = _draw_diameter(rng)
        cx, cy = rng.uniform(lo_edge, side + lo_edge, size=2)
        aspect = rng.uniform(*ROCK_ASPECT_RANGE)
        r = d / 2
        a = math.pi * r * r
        if area + a > ceiling:
            continue
        if xs:
            dist = np.hypot(np.asarray(xs) - cx, np.asarray(ys) - cy)
            if np.any(dist < np.asarray(rs) + r):
                continue
        if len(clear) and np.any(np.hypot(clear[:, 0] - cx, clear[:, 1] - cy) < clear[:, 2] + r):
            continue
        xs.append(cx)
        ys.append(cy)
        rs.append(r)
        rocks.append(Rock((float(cx), float(cy)), d, float(aspect * d)))
        area += a
    if area < 0.9 * target:
        raise TerrainError(
            f"could not reach cfa {config.cfa:.3f} (got {area / (side * side):.3f}) "
            f"after {MAX_ROCK_ATTEMPTS} placement attempts"
        )
    return rocks


def _stamp_rock(heights: np.ndarray, rock: Rock, res: float) -> None:
    """Add a spheroid-cap bump for one rock in place."""
    n_rows, n_cols = heights.shape
    cx, cy = rock.center
    r = rock.diameter / 2
    c0 = max(int(math.floor((cx - r) / res)), 0)
    c1 = min(int(math.ceil((cx + r) / res)), n_cols - 1)
    r0 = max(int(math.floor((cy - r) / res)), 0)
    r1 = min(int(math.ceil((cy + r) / res)), n_rows - 1)
    if c0 > c1 or r0 > r1:
        return
    gx = np.arange(c0, c1 + 1) * res - cx
    gy = np.arange(r0, r1 + 1) * res - cy
    q = 1.0 - (gx[None, :] ** 2 + gy[:, None] ** 2) / (r * r)
    heights[r0 : r1 + 1, c0 : c1 + 1] += rock.height * np.sqrt(np.clip(q, 0.0, None))


def height_at(hm: Heightmap, x: float, y: float) -> float:
    """Bilinear height at a world point inside the cell-center extent."""
    fc = (x - hm.origin[0]) / hm.resolution
    fr = (y - hm.origin[1]) / hm.resolution
    n_rows, n_cols = hm.heights.shape
    eps = 1e-9
    if not (-eps <= fc <= n_cols - 1 + eps and -eps <= fr <= n_rows - 1 + eps):
        raise OutOfBoundsError(f"({x}, {y}) lies outside the heightmap")
    # snap near-integer coordinates so cell centers return stored values exactly
    if abs(fc - round(fc)) < eps:
        fc = float(round(fc))
    if abs(fr - round(fr)) < eps:
        fr = float(round(fr))
    c0 = min(int(math.floor(fc)), max(n_cols - 2, 0))
    r0 = min(int(math.floor(fr)), max(n_rows - 2, 0))
    tc, tr = fc - c0, fr - r0
    h = hm.heights
    c1, r1 = min(c0 + 1, n_cols - 1), min(r0 + 1, n_rows - 1)
    if tc == 0.0 and tr == 0.0:
        return float(h[r0, c0])
    top = (1 - tc) * h[r0, c0] + tc * h[r0, c1]
    bottom = (1 - tc) * h[r1, c0] + tc * h[r1, c1]
    return float((1 - tr) * top + tr * bottom)


# --- file format: <name>.json header + <name>.f32 little-endian payload ---

_HEADER_FIELDS = ("width_cells", "height_cells", "resolution_m", "origin_m")


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".f32") else p


def save_heightmap(hm: Heightmap, path) -> tuple[Path, Path]:
    """Write ``<path>.json`` and ``<path>.f32``. Heights are stored as float32."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "width_cells": hm.width_cells,
        "height_cells": hm.height_cells,
        "resolution_m": hm.resolution,
        "origin_m": [hm.origin[0], hm.origin[1]],
    }
    json_path = stem.with_suffix(".json")
    bin_path = stem.with_suffix(".f32")
    json_path.write_text(json.dumps(header, indent=2) + "\n")
    bin_path.write_bytes(hm.heights.astype("<f4").tobytes())
    return json_path, bin_path


def load_heightmap(path) -> Heightmap:
    stem = _stem(path)
    try:
        header = json.loads(stem.with_suffix(".json").read_text())
    except json.JSONDecodeError as exc:
        raise HeaderError(f"malformed heightmap header: {exc}") from exc
    if not isinstance(header, dict):
        raise HeaderError("heightmap header must be a JSON object")
    missing = [k for k in _HEADER_FIELDS if k not in header]
    if missing:
        raise HeaderError(f"heightmap header missing field(s): {', '.join(missing)}")
    try:
        w = int(header["width_cells"])
        h = int(header["height_cells"])
        res = float(header["resolution_m"])
        ox, oy = (float(v) for v in header["origin_m"])
    except (TypeError, ValueError) as exc:
        raise HeaderError(f"bad heightmap header value: {exc}") from exc
    if w <= 0 or h <= 0 or not res > 0:
        raise HeaderError("width_cells, height_cells and resolution_m must be positive")
    payload = np.frombuffer(stem.with_suffix(".f32").read_bytes(), dtype="<f4")
    if payload.size != w * h:
        raise SizeMismatchError(
            f"header declares {w}x{h}={w * h} cells but payload holds {payload.size}"
        )
    grid = payload.reshape(h, w).astype(np.float64)
    if not np.all(np.isfinite(grid)):
        raise NonFiniteError("heightmap payload contains NaN or Inf")
    return Heightmap(grid, res, (ox, oy))


def save_rocks(rocks, path) -> None:
    data = [{"center": list(r.center), "diameter": r.diameter, "height": r.height} for r in rocks]
    Path(path).write_text(json.dumps(data, indent=1) + "\n")


def load_rocks(path) -> list[Rock]:
    return [Rock(tuple(d["center"]), d["diameter"], d["height"]) for d in json.loads(Path(path).read_text())]


SAMPLER_MAX_SLOPE = 20.0  # degrees; steeper ground is beyond the rover's tilt limit
SAMPLER_MAX_CFA = 0.20


def sample_terrain_config(
    rng: np.random.Generator,
    klass: str,
    *,
    keep_clear=(),
    extent: float = 20.0,
    resolution: float = 0.1,
    noise_amplitude: float = 0.1,
) -> TerrainConfig:
    """Draw a random config of the given class ("benign" or "complex").

    (slope, CFA) is uniform over [0, 20) degrees x [0, 0.20], redrawn until
    it falls in the requested class.
    """
    if klass not in ("benign", "complex"):
        raise TerrainError(f"terrain class must be 'benign' or 'complex', got {klass!r}")
    while True:
        if klass == "benign":
            slope, cfa = rng.uniform(0.0, 15.0), rng.uniform(0.0, 0.07)
        else:
            slope, cfa = rng.uniform(0.0, SAMPLER_MAX_SLOPE), rng.uniform(0.0, SAMPLER_MAX_CFA)
        slope, cfa = round(float(slope), 3), round(float(cfa), 4)
        if terrain_class(slope, cfa) == klass:
            break
    return TerrainConfig(
        extent=extent,
        resolution=resolution,
        base_slope=slope,
        slope_azimuth=round(float(rng.uniform(0.0, 360.0)), 3) % 360.0,
        cfa=cfa,
        noise_amplitude=noise_amplitude,
        rng_seed=int(rng.integers(2**31)),
        keep_clear=keep_clear,
    )
