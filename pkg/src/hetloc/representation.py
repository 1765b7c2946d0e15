"""Scan rasterisation: BEV images, accumulated lidar submaps and Scan Context."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .core import IDENTITY, TWO_PI, GridSpec, Pose2D, relative_offset, transform_points
from .errors import UsageError
from .simworld import LIDAR, RADAR, PolarScan


@dataclass(frozen=True, eq=False)
class BevImage:
    grid: GridSpec
    pixels: np.ndarray   # (H, W) float32 in [0, 1]
    modality: str


@dataclass(frozen=True, eq=False)
class ScanContextMatrix:
    values: np.ndarray   # (rings, sectors) in [0, 1]
    max_radius: float

    @property
    def rings(self) -> int:
        return self.values.shape[0]

    @property
    def sectors(self) -> int:
        return self.values.shape[1]


def _splat_nearest(img: np.ndarray, cells: np.ndarray, values) -> None:
    idx = np.floor(cells + 0.5).astype(np.int64)
    h, w = img.shape
    ok = (idx[:, 0] >= 0) & (idx[:, 0] < w) & (idx[:, 1] >= 0) & (idx[:, 1] < h)
    v = np.broadcast_to(values, (len(cells),))[ok]
    np.maximum.at(img, (idx[ok, 1], idx[ok, 0]), v)


def _splat_bilinear(img: np.ndarray, cells: np.ndarray, values: np.ndarray) -> None:
    h, w = img.shape
    c0 = np.floor(cells).astype(np.int64)
    f = cells - c0
    for ox, oy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        wx = f[:, 0] if ox else 1.0 - f[:, 0]
        wy = f[:, 1] if oy else 1.0 - f[:, 1]
        cx, cy = c0[:, 0] + ox, c0[:, 1] + oy
        ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        np.add.at(img, (cy[ok], cx[ok]), (values * wx * wy)[ok])


def radar_points(scan: PolarScan) -> tuple[np.ndarray, np.ndarray]:
    """Non-zero radar cells as sensor-frame points and their intensities."""
    if scan.modality != RADAR:
        raise UsageError("radar_points needs a radar scan")
    nb = scan.data.shape[1]
    centers = (np.arange(nb) + 0.5) * (scan.max_range / nb)
    bi, ri = np.nonzero(scan.data)
    a = scan.beam_angles[bi]
    r = centers[ri]
    return np.stack([r * np.cos(a), r * np.sin(a)], 1), scan.data[bi, ri].astype(np.float64)


def scan_to_bev(scan: PolarScan, grid: GridSpec, sensor_pose: Pose2D = IDENTITY) -> BevImage:
    """Rasterise a scan taken at ``sensor_pose`` (in the grid's parent frame).

    Lidar endpoints set their nearest cell to 1; no-return beams are skipped.
    Radar intensities are splatted bilinearly and summed, then clipped.
    """
    img = np.zeros(grid.shape, dtype=np.float64)
    if scan.modality == LIDAR:
        pts = scan.points()
        if len(pts):
            _splat_nearest(img, grid.world_to_cell(transform_points(sensor_pose, pts)), 1.0)
    else:
        pts, vals = radar_points(scan)
        if len(pts):
            _splat_bilinear(img, grid.world_to_cell(transform_points(sensor_pose, pts)), vals)
    return BevImage(grid, np.clip(img, 0.0, 1.0).astype(np.float32), scan.modality)


def accumulate_submap(scans, poses, grid: GridSpec) -> BevImage:
    """Max-pool lidar scans into the frame of the middle pose."""
    if len(scans) != len(poses) or len(scans) == 0:
        raise UsageError(f"need matching non-empty scans/poses, got {len(scans)}/{len(poses)}")
    if any(s.modality != LIDAR for s in scans):
        raise UsageError("accumulate_submap accepts lidar scans only")
    poses = [p if isinstance(p, Pose2D) else Pose2D.from_array(p) for p in poses]
    mid = poses[len(poses) // 2]
    img = np.zeros(grid.shape, dtype=np.float64)
    for scan, pose in zip(scans, poses):
        pts = scan.points()
        if len(pts):
            rel = relative_offset(mid, pose).as_pose()
            _splat_nearest(img, grid.world_to_cell(transform_points(rel, pts)), 1.0)
    return BevImage(grid, img.astype(np.float32), LIDAR)


@lru_cache(maxsize=16)
def _polar_bins(grid: GridSpec, n_rings: int, n_sectors: int, max_radius: float) -> np.ndarray:
    """Flat bin index per grid cell (-1 when outside ``max_radius``)."""
    c = grid.cell_centers().reshape(-1, 2)
    rho = np.hypot(c[:, 0], c[:, 1])
    phi = np.mod(np.arctan2(c[:, 1], c[:, 0]), TWO_PI)
    ring = np.floor(rho / max_radius * n_rings).astype(np.int64)
    sector = np.minimum(np.floor(phi / (TWO_PI / n_sectors)).astype(np.int64), n_sectors - 1)
    flat = ring * n_sectors + sector
    return np.where(ring < n_rings, flat, -1)


def default_max_radius(grid: GridSpec) -> float:
    return 0.5 * min(grid.width_cells, grid.height_cells) * grid.resolution


def make_scan_context(bev: BevImage, n_rings: int = 32, n_sectors: int = 64,
                      max_radius: float | None = None) -> ScanContextMatrix:
    """Per ring-sector maximum of the BEV pixels, polar about the frame origin."""
    if n_rings < 4 or n_sectors < 4:
        raise UsageError(f"need n_rings, n_sectors >= 4, got {n_rings}, {n_sectors}")
    max_radius = float(max_radius or default_max_radius(bev.grid))
    bins = _polar_bins(bev.grid, n_rings, n_sectors, max_radius)
    px = bev.pixels.reshape(-1)
    ok = bins >= 0
    out = np.zeros(n_rings * n_sectors, dtype=np.float32)
    np.maximum.at(out, bins[ok], px[ok])
    return ScanContextMatrix(out.reshape(n_rings, n_sectors), max_radius)


def pgm_name(session: str, index: int, modality: str) -> str:
    return f"{session}_{index}_{modality}.pgm"


def write_pgm(path, bev: BevImage) -> Path:
    """8-bit binary PGM, north (max y) up."""
    path = Path(path)
    img = np.round(np.clip(bev.pixels, 0, 1) * 255).astype(np.uint8)[::-1]
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    """Inverse of :func:`write_pgm`; returns pixels in [0, 1] with row 0 at min y."""
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise UsageError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return (data[::-1] / float(maxval)).astype(np.float32)


def rotate_image(img: np.ndarray, angle: float, out_shape=None) -> np.ndarray:
    """Resample ``img`` so that ``out(v) = img(R(angle) v)`` about the image centres.

    Bilinear interpolation with zero padding. ``v`` are (col, row) offsets from
    the centre; with ``angle > 0`` the content turns clockwise on screen, i.e.
    the result is the image as seen from a frame rotated by ``angle``.
    """
    h, w = img.shape[-2:]
    oh, ow = out_shape or (h, w)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ocy, ocx = (oh - 1) / 2.0, (ow - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(oh) - ocy, np.arange(ow) - ocx, indexing="ij")
    c, s = math.cos(angle), math.sin(angle)
    sx = c * cc - s * rr + cx
    sy = s * cc + c * rr + cy
    return bilinear_sample(img, sx, sy)


def bilinear_sample(img: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2:]
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx, fy = sx - x0, sy - y0
    out = np.zeros(img.shape[:-2] + sx.shape, dtype=np.float64)
    for ox, oy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        xi, yi = x0 + ox, y0 + oy
        wgt = (fx if ox else 1 - fx) * (fy if oy else 1 - fy)
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        vals = img[..., np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        out += np.where(ok, wgt, 0.0) * vals
    return out.astype(img.dtype)
