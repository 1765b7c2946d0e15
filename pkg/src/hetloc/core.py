"""Planar geometry, raster grids and the seeded random stream.

Angles are radians everywhere in the library. Degrees only appear in
reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

TWO_PI = 2.0 * math.pi


def normalize_angle(theta):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    if np.ndim(theta) == 0:
        a = math.remainder(float(theta), TWO_PI)
        return math.pi if a <= -math.pi else a
    a = np.remainder(np.asarray(theta, dtype=np.float64) + math.pi, TWO_PI) - math.pi
    return np.where(a <= -math.pi, math.pi, a)


@dataclass(frozen=True)
class Pose2D:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @classmethod
    def from_array(cls, a) -> "Pose2D":
        return cls(a[0], a[1], a[2])


@dataclass(frozen=True)
class PoseOffset:
    dx: float = 0.0
    dy: float = 0.0
    dtheta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "dx", float(self.dx))
        object.__setattr__(self, "dy", float(self.dy))
        object.__setattr__(self, "dtheta", normalize_angle(self.dtheta))

    def as_pose(self) -> Pose2D:
        return Pose2D(self.dx, self.dy, self.dtheta)

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta])

    @classmethod
    def from_array(cls, a) -> "PoseOffset":
        return cls(a[0], a[1], a[2])


IDENTITY = Pose2D()


def compose(a: Pose2D, b) -> Pose2D:
    """Return ``a (+) b``: ``b`` expressed in ``a``'s frame, mapped to the global frame.

    ``b`` may be a :class:`Pose2D` or a :class:`PoseOffset`.
    """
    if isinstance(b, PoseOffset):
        b = b.as_pose()
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2D(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.theta + b.theta)


def inverse(p: Pose2D) -> Pose2D:
    c, s = math.cos(p.theta), math.sin(p.theta)
    return Pose2D(-c * p.x - s * p.y, s * p.x - c * p.y, -p.theta)


def relative_offset(a: Pose2D, b: Pose2D) -> PoseOffset:
    """Offset ``o`` with ``compose(a, o) == b``."""
    dx, dy = b.x - a.x, b.y - a.y
    c, s = math.cos(a.theta), math.sin(a.theta)
    return PoseOffset(c * dx + s * dy, -s * dx + c * dy, b.theta - a.theta)


# Vectorised variants over (N, 3) arrays of [x, y, theta].

def compose_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    out = np.empty(np.broadcast(a, b).shape)
    out[..., 0] = a[..., 0] + c * b[..., 0] - s * b[..., 1]
    out[..., 1] = a[..., 1] + s * b[..., 0] + c * b[..., 1]
    out[..., 2] = normalize_angle(a[..., 2] + b[..., 2])
    return out


def relative_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dx, dy = b[..., 0] - a[..., 0], b[..., 1] - a[..., 1]
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    out = np.empty(np.broadcast(a, b).shape)
    out[..., 0] = c * dx + s * dy
    out[..., 1] = -s * dx + c * dy
    out[..., 2] = normalize_angle(b[..., 2] - a[..., 2])
    return out


def integrate_odometry(start, offsets) -> np.ndarray:
    """Chain relative offsets from ``start``; returns (len(offsets) + 1, 3)."""
    start = start.as_array() if isinstance(start, Pose2D) else np.asarray(start, float)
    out = np.empty((len(offsets) + 1, 3))
    out[0] = start
    cur = Pose2D.from_array(start)
    for i, o in enumerate(np.asarray(offsets, dtype=np.float64)):
        cur = compose(cur, Pose2D(o[0], o[1], o[2]))
        out[i + 1] = (cur.x, cur.y, cur.theta)
    return out


def transform_points(pose: Pose2D, pts: np.ndarray) -> np.ndarray:
    """Map (N, 2) points from ``pose``'s frame into the parent frame."""
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    pts = np.asarray(pts, dtype=np.float64)
    return np.stack(
        [pose.x + c * pts[:, 0] - s * pts[:, 1], pose.y + s * pts[:, 0] + c * pts[:, 1]], axis=1
    )


@dataclass(frozen=True)
class GridSpec:
    """A raster: ``pixels[row, col]`` with col along the frame's x axis.

    ``origin`` is the pose of the centre of cell (0, 0).
    """

    width_cells: int
    height_cells: int
    resolution: float
    origin: Pose2D = field(default_factory=Pose2D)

    def __post_init__(self):
        if self.resolution <= 0:
            raise ConfigError(f"resolution must be > 0, got {self.resolution}")
        if self.width_cells <= 0 or self.height_cells <= 0:
            raise ConfigError(
                f"grid must be non-empty, got {self.width_cells}x{self.height_cells}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_cells, self.width_cells)

    @classmethod
    def centered(cls, size: int, resolution: float, height: int | None = None) -> "GridSpec":
        """Grid whose geometric centre sits on the frame origin."""
        h = size if height is None else height
        return cls(
            size, h, resolution,
            Pose2D(-(size - 1) / 2 * resolution, -(h - 1) / 2 * resolution, 0.0),
        )

    def world_to_cell(self, pts: np.ndarray) -> np.ndarray:
        """Continuous (col, row) coordinates of frame points; integers at cell centres."""
        local = transform_points(inverse(self.origin), pts)
        return local / self.resolution

    def cell_centers(self) -> np.ndarray:
        """(H, W, 2) array of cell-centre coordinates in the parent frame."""
        cols, rows = np.meshgrid(
            np.arange(self.width_cells), np.arange(self.height_cells)
        )
        local = np.stack([cols.ravel(), rows.ravel()], axis=1) * self.resolution
        return transform_points(self.origin, local).reshape(self.height_cells, self.width_cells, 2)

    def to_dict(self) -> dict:
        o = self.origin
        return {
            "width_cells": self.width_cells,
            "height_cells": self.height_cells,
            "resolution": self.resolution,
            "origin": [o.x, o.y, o.theta],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(int(d["width_cells"]), int(d["height_cells"]), float(d["resolution"]),
                   Pose2D(*d["origin"]))


# ---------------------------------------------------------------------------
# Counter-based random stream.
#
# Draw i of a stream with seed s is splitmix64_mix(s + (i + 1) * GAMMA) with
# all arithmetic modulo 2**64. Uniform floats take the top 53 bits. Normals
# use Box-Muller on consecutive uniform pairs. Splitting hashes the parent
# seed with the key, so child streams do not depend on how many draws the
# parent has made.

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _mix_int(z: int) -> int:
    return int(_mix64(np.array([z & _MASK], dtype=np.uint64))[0])


class Rng:
    """Deterministic stream of 64-bit words, uniforms and normals.

    The object is a cursor over a pure function of ``(seed, counter)``; it is
    passed explicitly, never stored globally.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK
        self.counter = int(counter)

    def __repr__(self):
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def copy(self) -> "Rng":
        return Rng(self.seed, self.counter)

    def split(self, key) -> "Rng":
        """Independent child stream for ``key`` (int or str)."""
        if isinstance(key, str):
            k = 0
            for ch in key.encode():
                k = _mix_int(k ^ ch)
        else:
            k = int(key) & _MASK
        return Rng(_mix_int(self.seed ^ _mix_int(k + _GAMMA)))

    def bits(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * np.uint64(_GAMMA)
            return _mix64(z)

    def uniform(self, low=0.0, high=1.0, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, mean=0.0, sigma=1.0, size=None):
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u = self.uniform(size=(m, 2))
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        phi = TWO_PI * u[:, 1]
        z = np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1).ravel()[:n]
        z = mean + sigma * z
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, low: int, high: int, size=None):
        """Integers in [low, high)."""
        u = self.uniform(size=size if size is not None else (1,))
        v = np.minimum(low + np.floor(u * (high - low)).astype(np.int64), high - 1)
        return int(v[0]) if size is None else v

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(size=(n,)), kind="stable")
