"""Trajectory libraries: trees of turn-in-place nodes and constant-curvature arcs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Union

import numpy as np

from .ace import Pose, normalize_heading

EPS = 1e-9


@dataclass(frozen=True)
class Turn:
    angle: float  # radians, positive = counter-clockwise


@dataclass(frozen=True)
class Arc:
    length: float
    curvature: float  # 1/m, positive = left


Primitive = Union[Turn, Arc]


@dataclass(frozen=True)
class TurnLayer:
    count: int
    max_angle: float = math.pi

    def values(self) -> list[float]:
        """Turn angles for this layer, ascending.

        A full-circle layer (``max_angle >= pi``) spaces ``count`` headings evenly
        around the circle starting from zero, so even counts are allowed and
        +pi/-pi are never duplicated. Otherwise ``count`` must be odd and angles
        span [-max_angle, max_angle].
        """
        if self.max_angle >= math.pi - EPS:
            angles = [2 * math.pi * k / self.count for k in range(self.count)]
            return sorted(a - 2 * math.pi if a >= math.pi - EPS else a for a in angles)
        return [float(v) for v in np.linspace(-self.max_angle, self.max_angle, self.count)]


@dataclass(frozen=True)
class ArcLayer:
    count: int
    arc_length: float
    max_curvature: float = 0.4

    def values(self) -> list[float]:
        vals = np.linspace(-self.max_curvature, self.max_curvature, self.count)
        vals[self.count // 2] = 0.0
        return [float(v) for v in vals]


Layer = Union[TurnLayer, ArcLayer]


class TreeSpecError(ValueError):
    pass


@dataclass(frozen=True)
class TreeSpec:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise TreeSpecError("a tree needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.count < 1:
                raise TreeSpecError(f"layer {i}: count must be positive")
            if isinstance(layer, ArcLayer):
                if layer.count % 2 == 0:
                    raise TreeSpecError(f"layer {i}: arc count must be odd so a straight arc exists")
                if not layer.arc_length > 0:
                    raise TreeSpecError(f"layer {i}: arc_length must be > 0")
                if layer.max_curvature < 0:
                    raise TreeSpecError(f"layer {i}: max_curvature must be >= 0")
            elif isinstance(layer, TurnLayer):
                if layer.count % 2 == 0 and layer.max_angle < math.pi - EPS:
                    raise TreeSpecError(f"layer {i}: partial-range turn layers need an odd count")
            else:
                raise TreeSpecError(f"layer {i}: unknown layer type {type(layer).__name__}")

    @property
    def leaf_count(self) -> int:
        return math.prod(layer.count for layer in self.layers)

    @property
    def horizon(self) -> float:
        return sum(layer.arc_length for layer in self.layers if isinstance(layer, ArcLayer))

    def to_dict(self) -> list[dict]:
        out = []
        for layer in self.layers:
            if isinstance(layer, TurnLayer):
                out.append({"type": "turn", "count": layer.count, "max_angle": layer.max_angle})
            else:
                out.append(
                    {
                        "type": "arc",
                        "count": layer.count,
                        "arc_length": layer.arc_length,
                        "max_curvature": layer.max_curvature,
                    }
                )
        return out

    @classmethod
    def from_dict(cls, layers) -> "TreeSpec":
        if isinstance(layers, str):
            return preset(layers)
        parsed = []
        for i, d in enumerate(layers):
            d = dict(d)
            kind = d.pop("type", None)
            try:
                if kind == "turn":
                    parsed.append(TurnLayer(**d))
                elif kind == "arc":
                    parsed.append(ArcLayer(**d))
                else:
                    raise TreeSpecError(f"layer {i}: type must be 'turn' or 'arc', got {kind!r}")
            except TypeError as exc:
                raise TreeSpecError(f"layer {i}: {exc}") from exc
        return cls(tuple(parsed))


PRESETS: dict[str, TreeSpec] = {
    "default": TreeSpec((TurnLayer(14), ArcLayer(11, 3.0), ArcLayer(11, 3.0))),
    "bt": TreeSpec((TurnLayer(18), ArcLayer(15, 3.0), ArcLayer(15, 3.0))),
    "dt": TreeSpec((TurnLayer(14), ArcLayer(11, 3.0), ArcLayer(11, 3.0), ArcLayer(11, 3.0))),
    "vlt": TreeSpec((TurnLayer(11), ArcLayer(15, 1.0), ArcLayer(11, 2.0), ArcLayer(7, 3.0))),
}


def preset(name: str) -> TreeSpec:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise TreeSpecError(f"unknown tree preset {name!r}; choose from {sorted(PRESETS)}") from None


def rollout(pose: tuple[float, float, float], prim: Primitive) -> tuple[float, float, float]:
    """Exact end state of a primitive applied at ``pose``."""
    x, y, th = pose
    if isinstance(prim, Turn):
        return (x, y, normalize_heading(th + prim.angle))
    return arc_point(x, y, th, prim.curvature, prim.length)


def arc_point(x: float, y: float, th: float, kappa: float, s: float) -> tuple[float, float, float]:
    """Pose after driving arc length ``s`` at constant curvature ``kappa``.

    Uses the chord form ``s * sinc(kappa*s/2)`` along the mid-heading, which is
    exact and stays accurate as kappa goes to zero.
    """
    half = 0.5 * kappa * s
    chord = s * (math.sin(half) / half if half != 0.0 else 1.0)
    mid = th + half
    return (x + chord * math.cos(mid), y + chord * math.sin(mid), normalize_heading(th + kappa * s))


def arc_points(x, y, th, kappa, s: np.ndarray) -> np.ndarray:
    """Vectorized :func:`arc_point` over arc lengths ``s``; returns (k, 3)."""
    s = np.asarray(s, dtype=np.float64)
    half = 0.5 * kappa * s
    with np.errstate(invalid="ignore", divide="ignore"):
        sinc = np.where(half != 0.0, np.sin(half) / np.where(half != 0.0, half, 1.0), 1.0)
    chord = s * sinc
    mid = th + half
    heading = np.mod(th + kappa * s, 2 * math.pi)
    heading[heading >= 2 * math.pi] = 0.0
    return np.column_stack([x + chord * np.cos(mid), y + chord * np.sin(mid), heading])


class PathNode:
    """One tree node; the path to a leaf is the chain of parents back to the root."""

    __slots__ = (
        "parent",
        "primitive",
        "end_pose",
        "cumulative_length",
        "turn_total",
        "depth",
        "leaf_index",
        "children",
        "_samples",
    )

    def __init__(self, parent, primitive, end_pose, cumulative_length, turn_total, depth):
        self.parent: PathNode | None = parent
        self.primitive: Primitive | None = primitive
        self.end_pose: Pose = end_pose
        self.cumulative_length: float = cumulative_length
        self.turn_total: float = turn_total
        self.depth: int = depth
        self.leaf_index: int = -1
        self.children: list[PathNode] = []
        self._samples: dict[float, np.ndarray] = {}

    def __repr__(self):
        return f"PathNode(depth={self.depth}, leaf={self.leaf_index}, primitive={self.primitive})"

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def lineage(self) -> list["PathNode"]:
        """Nodes from the first child of the root down to this node."""
        chain = []
        node = self
        while node.parent is not None:
            chain.append(node)
            node = node.parent
        chain.reverse()
        return chain

    def samples(self, interval: float) -> np.ndarray:
        """Poses contributed by this node alone, shape (k, 3), cached per interval.

        A turn contributes its post-turn pose. An arc contributes poses at every
        multiple of ``interval`` of cumulative path length inside
        (start, end], plus its end pose when the end is not on the grid.
        """
        return self._sampled(interval)[0]

    def sample_lengths(self, interval: float) -> np.ndarray:
        """Cumulative path length at each pose of :meth:`samples`."""
        return self._sampled(interval)[1]

    def _sampled(self, interval: float):
        cached = self._samples.get(interval)
        if cached is not None:
            return cached
        if self.primitive is None:
            poses, lengths = np.empty((0, 3)), np.empty(0)
        elif isinstance(self.primitive, Turn):
            poses = np.array([self.end_pose.as_tuple()])
            lengths = np.array([self.cumulative_length])
        else:
            start = self.parent.end_pose
            offsets, lengths = _arc_offsets(self.cumulative_length, self.primitive.length, interval)
            poses = arc_points(start.x, start.y, start.heading, self.primitive.curvature, offsets)
            if self.primitive.length - offsets[-1] < EPS:
                poses[-1] = self.end_pose.as_tuple()
        poses.setflags(write=False)
        lengths.setflags(write=False)
        self._samples[interval] = (poses, lengths)
        return poses, lengths


def _arc_offsets(end_length: float, length: float, interval: float):
    """Sample offsets along one arc and the matching cumulative path lengths."""
    s0 = end_length - length
    first = math.floor(s0 / interval + EPS) + 1
    last = math.floor(end_length / interval + EPS)
    offsets = [k * interval - s0 for k in range(first, last + 1)]
    if not offsets or end_length - last * interval > EPS:
        offsets.append(length)
    offsets = np.minimum(np.array(offsets), length)
    return offsets, s0 + offsets


def _fill_arc_layer(nodes: list[PathNode], interval: float) -> None:
    """Sample a whole layer of equal-length arcs in one vectorized pass."""
    length = nodes[0].primitive.length
    offsets, lengths = _arc_offsets(nodes[0].cumulative_length, length, interval)
    start = np.array([n.parent.end_pose.as_tuple() for n in nodes])
    kappa = np.array([n.primitive.curvature for n in nodes])[:, None]
    x0, y0, th0 = start[:, :1], start[:, 1:2], start[:, 2:3]
    half = 0.5 * kappa * offsets
    with np.errstate(invalid="ignore", divide="ignore"):
        sinc = np.where(half != 0.0, np.sin(half) / np.where(half != 0.0, half, 1.0), 1.0)
    chord = offsets * sinc
    mid = th0 + half
    heading = np.mod(th0 + kappa * offsets, 2 * math.pi)
    heading[heading >= 2 * math.pi] = 0.0
    poses = np.stack([x0 + chord * np.cos(mid), y0 + chord * np.sin(mid), heading], axis=-1)
    snap_end = length - offsets[-1] < EPS
    lengths.setflags(write=False)
    for node, p in zip(nodes, poses):
        if snap_end:
            p[-1] = node.end_pose.as_tuple()
        p.setflags(write=False)
        node._samples[interval] = (p, lengths)


class TrajectoryLibrary:
    def __init__(self, spec: TreeSpec, root: PathNode, leaves: list[PathNode], node_count: int, layers=None):
        self.spec = spec
        self.root = root
        self.leaves = leaves
        self.node_count = node_count
        self.layers: list[list[PathNode]] = layers or []

    def precompute_samples(self, interval: float) -> None:
        """Fill every node's sample cache, one vectorized pass per arc layer."""
        for nodes in self.layers:
            if not nodes or interval in nodes[0]._samples:
                continue
            prims = [n.primitive for n in nodes]
            if all(isinstance(p, Arc) for p in prims) and len({(p.length, n.cumulative_length) for p, n in zip(prims, nodes)}) == 1:
                _fill_arc_layer(nodes, interval)
            else:
                for n in nodes:
                    n.samples(interval)

    @property
    def N(self) -> int:
        return len(self.leaves)

    @property
    def horizon(self) -> float:
        return max(leaf.cumulative_length for leaf in self.leaves)

    def __len__(self):
        return len(self.leaves)

    def __iter__(self) -> Iterator[PathNode]:
        return iter(self.leaves)

    def nodes(self) -> Iterator[PathNode]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))


def build_tree(spec: TreeSpec, start: Pose) -> TrajectoryLibrary:
    """Expand every layer from ``start``; shared prefixes are shared nodes."""
    if not isinstance(spec, TreeSpec) or not spec.layers:
        raise TreeSpecError("degenerate tree spec")
    root = PathNode(None, None, start, 0.0, 0.0, 0)
    frontier = [root]
    count = 1
    layers = []
    for depth, layer in enumerate(spec.layers, start=1):
        values = layer.values()
        nxt = []
        for node in frontier:
            base = node.end_pose.as_tuple()
            for v in values:
                if isinstance(layer, TurnLayer):
                    prim: Primitive = Turn(v)
                    length = node.cumulative_length
                    turned = node.turn_total + abs(v)
                else:
                    prim = Arc(layer.arc_length, v)
                    length = node.cumulative_length + layer.arc_length
                    turned = node.turn_total
                child = PathNode(node, prim, Pose(*rollout(base, prim)), length, turned, depth)
                node.children.append(child)
                nxt.append(child)
        count += len(nxt)
        layers.append(nxt)
        frontier = nxt
    for i, leaf in enumerate(frontier):
        leaf.leaf_index = i
    return TrajectoryLibrary(spec, root, frontier, count, layers)


def path_samples(leaf: PathNode, interval: float = 0.25) -> np.ndarray:
    """All sampled poses from root to ``leaf`` as an (n, 3) array."""
    if not interval > 0:
        raise ValueError("interval must be > 0")
    parts = [node.samples(interval) for node in leaf.lineage()]
    return np.concatenate(parts) if parts else np.empty((0, 3))


def sample_path(leaf: PathNode, interval: float = 0.25) -> list[Pose]:
    return [Pose(*row) for row in path_samples(leaf, interval)]
