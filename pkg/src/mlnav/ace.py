"""Approximate clearance evaluation: rover safety at a pose and along a path.

The checker is a deterministic plane-fit model. Each wheel rests on the
highest terrain cell within its footprint disc, the body plane is the
least-squares fit through the four wheel contacts, and belly clearance is
measured at a grid of points under the chassis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
from scipy import ndimage

from .terrain import Heightmap

TWO_PI = 2.0 * math.pi
RISK_ONSET = 0.8
RISK_SCALE = 10.0


def normalize_heading(theta: float) -> float:
    h = math.fmod(theta, TWO_PI)
    if h < 0:
        h += TWO_PI
    return 0.0 if h >= TWO_PI else h


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "heading", normalize_heading(float(self.heading)))

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.heading)


@dataclass(frozen=True)
class RoverGeometry:
    wheelbase_length: float = 2.6
    wheelbase_width: float = 2.2
    wheel_radius: float = 0.26  # carried for configuration parity; contact uses the footprint disc
    nominal_belly_clearance: float = 0.6
    wheel_footprint_radius: float = 0.25
    max_tilt: float = 20.0  # degrees
    min_clearance: float = 0.25
    max_wheel_drop: float = 0.35
    belly_grid: tuple[int, int] = (5, 3)  # samples along length x width

    def __post_init__(self):
        for name in (
            "wheelbase_length",
            "wheelbase_width",
            "wheel_radius",
            "nominal_belly_clearance",
            "wheel_footprint_radius",
            "max_tilt",
            "min_clearance",
            "max_wheel_drop",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"rover geometry field {name} must be > 0")
        if not self.min_clearance < self.nominal_belly_clearance:
            raise ValueError("min_clearance must be below nominal_belly_clearance")
        object.__setattr__(self, "belly_grid", tuple(int(v) for v in self.belly_grid))
        if min(self.belly_grid) < 1:
            raise ValueError("belly_grid counts must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "RoverGeometry":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown rover field(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def wheel_offsets(self) -> np.ndarray:
        """Wheel centers in the body frame (forward, left), shape (4, 2)."""
        hl, hw = self.wheelbase_length / 2, self.wheelbase_width / 2
        return np.array([[hl, hw], [hl, -hw], [-hl, hw], [-hl, -hw]])

    def belly_offsets(self) -> np.ndarray:
        """Strictly interior belly sample points in the body frame, shape (k, 2)."""
        nl, nw = self.belly_grid
        us = np.linspace(-self.wheelbase_length / 2, self.wheelbase_length / 2, nl + 2)[1:-1]
        vs = np.linspace(-self.wheelbase_width / 2, self.wheelbase_width / 2, nw + 2)[1:-1]
        uu, vv = np.meshgrid(us, vs, indexing="ij")
        return np.column_stack([uu.ravel(), vv.ravel()])

    @property
    def reach(self) -> float:
        """Farthest distance from the rover center touched by the checker."""
        hl, hw = self.wheelbase_length / 2, self.wheelbase_width / 2
        return math.hypot(hl, hw) + self.wheel_footprint_radius


@dataclass(frozen=True)
class AceResult:
    feasible: bool
    tilt: float
    belly_clearance: float
    max_wheel_height_spread: float
    cost: float
    out_of_bounds: bool = False


@dataclass
class PathAceResult:
    per_pose: list[AceResult] = field(default_factory=list)
    checks_run: int = 0
    feasible: bool = True
    aggregate_cost: float = 0.0


@dataclass(frozen=True)
class AceBatch:
    """Column-wise results for many poses."""

    feasible: np.ndarray
    tilt: np.ndarray
    belly_clearance: np.ndarray
    spread: np.ndarray
    cost: np.ndarray
    out_of_bounds: np.ndarray

    def __len__(self):
        return len(self.feasible)

    def result(self, i: int) -> AceResult:
        return AceResult(
            feasible=bool(self.feasible[i]),
            tilt=float(self.tilt[i]),
            belly_clearance=float(self.belly_clearance[i]),
            max_wheel_height_spread=float(self.spread[i]),
            cost=float(self.cost[i]),
            out_of_bounds=bool(self.out_of_bounds[i]),
        )


def _disc(radius_cells: float) -> np.ndarray:
    k = int(math.floor(radius_cells + 1e-9))
    off = np.arange(-k, k + 1)
    return (off[:, None] ** 2 + off[None, :] ** 2) <= radius_cells**2 + 1e-9


def wheel_contact_grid(hm: Heightmap, radius: float) -> np.ndarray:
    """Per-cell max height within ``radius`` (grey dilation by a disc)."""

    def build():
        return ndimage.maximum_filter(hm.heights, footprint=_disc(radius / hm.resolution), mode="nearest")

    return hm.derived(("wheel_contact", radius), build)


def bilinear(grid: np.ndarray, fr: np.ndarray, fc: np.ndarray) -> np.ndarray:
    """Bilinear sample at fractional (row, col); indices are clipped to the grid."""
    n_rows, n_cols = grid.shape
    fr = np.clip(fr, 0, n_rows - 1)
    fc = np.clip(fc, 0, n_cols - 1)
    r0 = np.minimum(np.floor(fr).astype(np.intp), max(n_rows - 2, 0))
    c0 = np.minimum(np.floor(fc).astype(np.intp), max(n_cols - 2, 0))
    r1 = np.minimum(r0 + 1, n_rows - 1)
    c1 = np.minimum(c0 + 1, n_cols - 1)
    tr = fr - r0
    tc = fc - c0
    top = (1 - tc) * grid[r0, c0] + tc * grid[r0, c1]
    bottom = (1 - tc) * grid[r1, c0] + tc * grid[r1, c1]
    return (1 - tr) * top + tr * bottom


class ClearanceChecker:
    """Clearance model bound to one heightmap and rover geometry.

    ``evaluate`` is the single-pose call the planners budget; ``evaluate_batch``
    runs the identical arithmetic over arrays of poses.
    """

    def __init__(self, hm: Heightmap, geom: RoverGeometry | None = None):
        self.hm = hm
        self.geom = geom or RoverGeometry()
        g = self.geom
        self.contact = wheel_contact_grid(hm, g.wheel_footprint_radius)
        self.wheel_reach = int(math.floor(g.wheel_footprint_radius / hm.resolution + 1e-9))
        self.wheel_uv = g.wheel_offsets()
        self.belly_uv = g.belly_offsets()
        design = np.column_stack([np.ones(4), self.wheel_uv])
        self.fit = np.linalg.pinv(design)  # (3, 4): wheel heights -> (z0, dz/du, dz/dv)
        self.max_grad = math.tan(math.radians(g.max_tilt))
        self.shape = hm.heights.shape
        # list views for the scalar path; indexing nested lists beats numpy scalars
        self._contact = hm.derived(("wheel_contact_rows", g.wheel_footprint_radius), self.contact.tolist)
        self._heights = hm.derived(("height_rows",), hm.heights.tolist)
        self._wheel_uv = [tuple(p) for p in self.wheel_uv.tolist()]
        self._belly_uv = [tuple(p) for p in self.belly_uv.tolist()]
        self._fit = self.fit.tolist()

    def evaluate(self, pose: Pose | Sequence[float]) -> AceResult:
        """Single-pose check in plain floats; same operation order as the batch path."""
        x, y, h = pose.as_tuple() if isinstance(pose, Pose) else (float(v) for v in pose)
        g = self.geom
        ox, oy = self.hm.origin
        res = self.hm.resolution
        n_rows, n_cols = self.shape
        k = self.wheel_reach
        c = math.cos(h)
        s = math.sin(h)
        oob = False
        zs = []
        for u, v in self._wheel_uv:
            col = round((x + u * c - v * s - ox) / res)
            row = round((y + u * s + v * c - oy) / res)
            if col - k < 0 or col + k > n_cols - 1 or row - k < 0 or row + k > n_rows - 1:
                oob = True
            zs.append(self._contact[min(max(row, 0), n_rows - 1)][min(max(col, 0), n_cols - 1)])
        f0, f1, f2 = self._fit
        a = f0[0] * zs[0] + f0[1] * zs[1] + f0[2] * zs[2] + f0[3] * zs[3]
        b = f1[0] * zs[0] + f1[1] * zs[1] + f1[2] * zs[2] + f1[3] * zs[3]
        d = f2[0] * zs[0] + f2[1] * zs[1] + f2[2] * zs[2] + f2[3] * zs[3]
        resid = [z - (a + b * u + d * v) for z, (u, v) in zip(zs, self._wheel_uv)]
        spread = max(resid) - min(resid)
        grad = math.sqrt(b * b + d * d)

        heights = self._heights
        clearance = math.inf
        for u, v in self._belly_uv:
            fc = (x + u * c - v * s - ox) / res
            fr = (y + u * s + v * c - oy) / res
            if fc < 0 or fc > n_cols - 1 or fr < 0 or fr > n_rows - 1:
                oob = True
            fr = min(max(fr, 0.0), n_rows - 1.0)
            fc = min(max(fc, 0.0), n_cols - 1.0)
            r0 = min(math.floor(fr), max(n_rows - 2, 0))
            c0 = min(math.floor(fc), max(n_cols - 2, 0))
            r1 = min(r0 + 1, n_rows - 1)
            c1 = min(c0 + 1, n_cols - 1)
            tr = fr - r0
            tc = fc - c0
            row0, row1 = heights[r0], heights[r1]
            top = (1 - tc) * row0[c0] + tc * row0[c1]
            bottom = (1 - tc) * row1[c0] + tc * row1[c1]
            terrain = (1 - tr) * top + tr * bottom
            plane = a + b * u + d * v
            clearance = min(clearance, plane + g.nominal_belly_clearance - terrain)

        feasible = (
            not oob
            and grad <= self.max_grad
            and clearance >= g.min_clearance
            and spread <= g.max_wheel_drop
        )
        tilt = math.degrees(math.atan(grad))
        if not feasible:
            return AceResult(False, tilt, clearance, spread, math.inf, oob)
        risk = 0.0
        for margin in (tilt / g.max_tilt, spread / g.max_wheel_drop, g.min_clearance / clearance):
            if margin > RISK_ONSET:
                risk += ((margin - RISK_ONSET) / (1.0 - RISK_ONSET)) ** 2
        return AceResult(True, tilt, clearance, spread, RISK_SCALE * risk, False)

    def evaluate_batch(self, x, y, heading) -> AceBatch:
        g = self.geom
        hm = self.hm
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        heading = np.asarray(heading, dtype=np.float64).reshape(-1)
        n_rows, n_cols = self.shape
        ox, oy = hm.origin
        res = hm.resolution
        # libm trig so results match the scalar path bit for bit
        uniq, inverse = np.unique(heading, return_inverse=True)
        cos_h = np.array([math.cos(v) for v in uniq])[inverse][:, None]
        sin_h = np.array([math.sin(v) for v in uniq])[inverse][:, None]

        wu, wv = self.wheel_uv[:, 0], self.wheel_uv[:, 1]
        wc = np.rint((x[:, None] + wu * cos_h - wv * sin_h - ox) / res).astype(np.intp)
        wr = np.rint((y[:, None] + wu * sin_h + wv * cos_h - oy) / res).astype(np.intp)
        k = self.wheel_reach
        oob = np.any((wc - k < 0) | (wc + k > n_cols - 1) | (wr - k < 0) | (wr + k > n_rows - 1), axis=1)
        zs = self.contact[np.clip(wr, 0, n_rows - 1), np.clip(wc, 0, n_cols - 1)]
        coef = []
        for f in self.fit:
            coef.append(f[0] * zs[:, 0] + f[1] * zs[:, 1] + f[2] * zs[:, 2] + f[3] * zs[:, 3])
        a, b, d = coef
        resid = zs - (a[:, None] + b[:, None] * wu + d[:, None] * wv)
        spread = resid.max(axis=1) - resid.min(axis=1)
        grad = np.sqrt(b * b + d * d)

        bu, bv = self.belly_uv[:, 0], self.belly_uv[:, 1]
        fc = (x[:, None] + bu * cos_h - bv * sin_h - ox) / res
        fr = (y[:, None] + bu * sin_h + bv * cos_h - oy) / res
        oob |= np.any((fc < 0) | (fc > n_cols - 1) | (fr < 0) | (fr > n_rows - 1), axis=1)
        terrain = bilinear(hm.heights, fr, fc)
        plane = a[:, None] + b[:, None] * bu + d[:, None] * bv
        clearance = np.min(plane + g.nominal_belly_clearance - terrain, axis=1)

        feasible = ~oob & (grad <= self.max_grad) & (clearance >= g.min_clearance) & (spread <= g.max_wheel_drop)
        tilt = np.array([math.degrees(math.atan(v)) for v in grad.tolist()])
        safe_clear = np.where(feasible, clearance, 1.0)
        risk = np.zeros_like(tilt)
        for margin in (tilt / g.max_tilt, spread / g.max_wheel_drop, g.min_clearance / safe_clear):
            over = margin > RISK_ONSET
            risk = risk + np.where(over, ((margin - RISK_ONSET) / (1.0 - RISK_ONSET)) ** 2, 0.0)
        cost = np.where(feasible, RISK_SCALE * risk, np.inf)
        return AceBatch(feasible, tilt, clearance, spread, cost, oob)


def evaluate_pose(hm: Heightmap, pose: Pose, geom: RoverGeometry | None = None) -> AceResult:
    return ClearanceChecker(hm, geom).evaluate(pose)


def _pose_rows(path) -> list[tuple[float, float, float]]:
    if isinstance(path, np.ndarray):
        return [tuple(row) for row in path.reshape(-1, 3)]
    return [p.as_tuple() if isinstance(p, Pose) else tuple(p) for p in path]


def evaluate_path_with(checker: ClearanceChecker, path) -> PathAceResult:
    """Evaluate poses in order, stopping at the first infeasible one."""
    rows = _pose_rows(path)
    if not rows:
        raise ValueError("cannot evaluate an empty path")
    out = PathAceResult()
    for row in rows:
        r = checker.evaluate(row)
        out.per_pose.append(r)
        out.checks_run += 1
        if not r.feasible:
            out.feasible = False
            out.aggregate_cost = math.inf
            return out
        out.aggregate_cost += r.cost
    return out


def evaluate_path(
    hm: Heightmap, path, geom: RoverGeometry | None = None, interval: float = 0.25
) -> PathAceResult:
    """Check a pose sequence sampled every ``interval`` meters of arc length."""
    if not interval > 0:
        raise ValueError("interval must be > 0")
    return evaluate_path_with(ClearanceChecker(hm, geom), path)
