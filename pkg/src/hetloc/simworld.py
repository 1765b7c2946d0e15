"""Synthetic 2D worlds, lidar/radar sensor models and multi-session data.

The radar model is intentionally crude: a smeared return per beam, additive
speckle and occasional multipath ghosts. What matters is that radar and lidar
look different enough that raw-descriptor matching across modalities fails.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import (
    TWO_PI,
    Pose2D,
    PoseOffset,
    Rng,
    compose,
    normalize_angle,
    relative_offset,
)
from .errors import ConfigError, GenerationError, UsageError

LIDAR = "lidar"
RADAR = "radar"
MODALITIES = (LIDAR, RADAR)


@dataclass(frozen=True)
class WorldParams:
    bounds: tuple[float, float, float, float] = (0.0, 0.0, 200.0, 200.0)
    min_obstacles: int = 30
    max_obstacles: int = 80
    rect_fraction: float = 0.5
    wall_length: tuple[float, float] = (4.0, 20.0)
    rect_size: tuple[float, float] = (2.0, 10.0)

    def validate(self):
        x0, y0, x1, y1 = self.bounds
        if not (x1 > x0 and y1 > y0):
            raise ConfigError(f"bounds must be non-empty, got {self.bounds}")
        if self.min_obstacles < 0 or self.max_obstacles < self.min_obstacles:
            raise ConfigError(
                f"obstacle counts must satisfy 0 <= min <= max, got "
                f"{self.min_obstacles}..{self.max_obstacles}"
            )
        if not 0.0 <= self.rect_fraction <= 1.0:
            raise ConfigError("rect_fraction must be in [0, 1]")
        for name in ("wall_length", "rect_size"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")


@dataclass(frozen=True, eq=False)
class World:
    walls: np.ndarray  # (N, 4) x1, y1, x2, y2
    rects: np.ndarray  # (M, 4) xmin, ymin, xmax, ymax
    bounds: tuple[float, float, float, float]
    seed: int

    def __eq__(self, other):
        return (
            isinstance(other, World)
            and self.bounds == other.bounds
            and self.seed == other.seed
            and np.array_equal(self.walls, other.walls)
            and np.array_equal(self.rects, other.rects)
        )

    @property
    def n_obstacles(self) -> int:
        return len(self.walls) + len(self.rects)

    def segments(self) -> np.ndarray:
        """All obstacle boundaries as (K, 4) segments."""
        r = self.rects
        edges = [
            np.stack([r[:, 0], r[:, 1], r[:, 2], r[:, 1]], 1),
            np.stack([r[:, 2], r[:, 1], r[:, 2], r[:, 3]], 1),
            np.stack([r[:, 2], r[:, 3], r[:, 0], r[:, 3]], 1),
            np.stack([r[:, 0], r[:, 3], r[:, 0], r[:, 1]], 1),
        ]
        return np.concatenate([self.walls.reshape(-1, 4)] + edges, axis=0)

    def clearance(self, pts: np.ndarray) -> np.ndarray:
        """Distance from each (N, 2) point to the nearest obstacle (0 inside a rectangle)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        seg = self.segments()
        if len(seg) == 0:
            return np.full(len(pts), np.inf)
        d = _point_segment_distance(pts, seg).min(axis=1)
        if len(self.rects):
            r = self.rects
            inside = (
                (pts[:, None, 0] >= r[None, :, 0]) & (pts[:, None, 0] <= r[None, :, 2])
                & (pts[:, None, 1] >= r[None, :, 1]) & (pts[:, None, 1] <= r[None, :, 3])
            ).any(axis=1)
            d = np.where(inside, 0.0, d)
        return d


def _point_segment_distance(pts: np.ndarray, seg: np.ndarray) -> np.ndarray:
    a = seg[None, :, 0:2]
    e = seg[None, :, 2:4] - a
    p = pts[:, None, :]
    ee = np.maximum((e * e).sum(-1), 1e-300)
    u = np.clip(((p - a) * e).sum(-1) / ee, 0.0, 1.0)
    q = a + u[..., None] * e
    return np.sqrt(((p - q) ** 2).sum(-1))


def generate_world(seed: int, params: WorldParams | None = None) -> World:
    params = params or WorldParams()
    params.validate()
    rng = Rng(seed).split("world")
    x0, y0, x1, y1 = params.bounds
    n = rng.integers(params.min_obstacles, params.max_obstacles + 1)
    walls, rects = [], []
    for _ in range(n):
        if rng.uniform() < params.rect_fraction:
            w = rng.uniform(*params.rect_size)
            h = rng.uniform(*params.rect_size)
            w, h = min(w, x1 - x0), min(h, y1 - y0)
            cx = rng.uniform(x0, x1 - w)
            cy = rng.uniform(y0, y1 - h)
            rects.append((cx, cy, cx + w, cy + h))
        else:
            half = 0.5 * rng.uniform(*params.wall_length)
            ang = rng.uniform(0.0, math.pi)
            cx, cy = rng.uniform(x0, x1), rng.uniform(y0, y1)
            dx, dy = half * math.cos(ang), half * math.sin(ang)
            walls.append((
                min(max(cx - dx, x0), x1), min(max(cy - dy, y0), y1),
                min(max(cx + dx, x0), x1), min(max(cy + dy, y0), y1),
            ))
    return World(
        walls=np.array(walls, dtype=np.float64).reshape(-1, 4),
        rects=np.array(rects, dtype=np.float64).reshape(-1, 4),
        bounds=tuple(float(b) for b in params.bounds),
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# Sensors


@dataclass(frozen=True)
class SensorParams:
    modality: str
    beams: int
    max_range: float
    range_bins: int = 0
    range_noise_sigma: float = 0.0
    dropout_prob: float = 0.0
    speckle_sigma: float = 0.0
    multipath_prob: float = 0.0
    angular_jitter_sigma: float = 0.0
    # Radar-only shape parameters.
    peak_sigma: float = 0.6          # metres of smear around the true range
    ghost_gain: float = 0.4
    ghost_range: tuple[float, float] = (1.5, 2.0)
    clutter_gain: float = 0.0        # near-range ground clutter amplitude
    clutter_range: float = 10.0      # metres; clutter decays as exp(-r / clutter_range)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.beams < 8:
            raise ConfigError(f"beams must be >= 8, got {self.beams}")
        if self.max_range <= 0:
            raise ConfigError("max_range must be > 0")
        if self.modality == RADAR and self.range_bins < 1:
            raise ConfigError("radar needs range_bins >= 1")
        for name in ("dropout_prob", "multipath_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        for name in ("range_noise_sigma", "speckle_sigma", "angular_jitter_sigma", "peak_sigma",
                     "clutter_gain", "clutter_range"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ghost_range"] = list(self.ghost_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SensorParams":
        d = dict(d)
        if "ghost_range" in d:
            d["ghost_range"] = tuple(d["ghost_range"])
        return cls(**d)

    def noiseless(self) -> "SensorParams":
        d = self.to_dict()
        for k in ("range_noise_sigma", "dropout_prob", "speckle_sigma",
                  "multipath_prob", "angular_jitter_sigma"):
            d[k] = 0.0
        return SensorParams.from_dict(d)

    def nominal_angles(self) -> np.ndarray:
        return np.arange(self.beams) * (TWO_PI / self.beams)

    def bin_centers(self) -> np.ndarray:
        return (np.arange(self.range_bins) + 0.5) * (self.max_range / self.range_bins)


def default_lidar(**kw) -> SensorParams:
    base = dict(modality=LIDAR, beams=360, max_range=50.0, range_noise_sigma=0.03,
                dropout_prob=0.01, angular_jitter_sigma=0.001)
    base.update(kw)
    return SensorParams(**base)


def default_radar(**kw) -> SensorParams:
    base = dict(modality=RADAR, beams=64, max_range=50.0, range_bins=128,
                range_noise_sigma=0.15, dropout_prob=0.05, speckle_sigma=0.08,
                multipath_prob=0.3, angular_jitter_sigma=0.01)
    base.update(kw)
    return SensorParams(**base)


@dataclass(frozen=True, eq=False)
class PolarScan:
    modality: str
    beam_angles: np.ndarray   # (B,) radians in the sensor frame
    data: np.ndarray          # lidar (B,) ranges; radar (B, bins) intensities
    max_range: float

    @property
    def range_bins(self) -> int:
        return self.data.shape[1] if self.modality == RADAR else 0

    def points(self) -> np.ndarray:
        """Lidar return endpoints (N, 2) in the sensor frame; no-return beams dropped."""
        if self.modality != LIDAR:
            raise UsageError("points() is defined for lidar scans only")
        r = self.data.astype(np.float64)
        keep = r < self.max_range
        a = self.beam_angles[keep]
        return np.stack([r[keep] * np.cos(a), r[keep] * np.sin(a)], axis=1)


def cast_rays(segments: np.ndarray, origin, angles: np.ndarray, max_range: float) -> np.ndarray:
    """Distance along each ray to the first segment hit; ``inf`` when nothing is hit
    within ``max_range``."""
    angles = np.asarray(angles, dtype=np.float64)
    if len(segments) == 0:
        return np.full(angles.shape, np.inf)
    p = np.asarray(origin, dtype=np.float64)[:2]
    d = np.stack([np.cos(angles), np.sin(angles)], axis=1)[:, None, :]   # (B,1,2)
    a = segments[None, :, 0:2]
    e = segments[None, :, 2:4] - a                                       # (1,S,2)
    ap = a - p
    denom = d[..., 0] * e[..., 1] - d[..., 1] * e[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (ap[..., 0] * e[..., 1] - ap[..., 1] * e[..., 0]) / denom
        u = (ap[..., 0] * d[..., 1] - ap[..., 1] * d[..., 0]) / denom
    ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (u >= 0.0) & (u <= 1.0)
    t = np.where(ok, t, np.inf).min(axis=1)
    return np.where(t <= max_range, t, np.inf)


def render_lidar_scan(world: World, pose: Pose2D, params: SensorParams, rng: Rng) -> PolarScan:
    if params.modality != LIDAR:
        raise UsageError("render_lidar_scan needs lidar parameters")
    nominal = params.nominal_angles()
    b = params.beams
    jitter = rng.normal(0.0, params.angular_jitter_sigma, size=(b,))
    noise = rng.normal(0.0, params.range_noise_sigma, size=(b,))
    drop = rng.uniform(size=(b,)) < params.dropout_prob
    r = cast_rays(world.segments(), (pose.x, pose.y), nominal + jitter + pose.theta, params.max_range)
    hit = np.isfinite(r) & ~drop
    r = np.where(hit, np.clip(r + noise, 1e-3, params.max_range), params.max_range)
    return PolarScan(LIDAR, nominal, r.astype(np.float32), params.max_range)


def render_radar_scan(world: World, pose: Pose2D, params: SensorParams, rng: Rng) -> PolarScan:
    if params.modality != RADAR:
        raise UsageError("render_radar_scan needs radar parameters")
    nominal = params.nominal_angles()
    b, nb = params.beams, params.range_bins
    jitter = rng.normal(0.0, params.angular_jitter_sigma, size=(b,))
    noise = rng.normal(0.0, params.range_noise_sigma, size=(b,))
    drop = rng.uniform(size=(b,)) < params.dropout_prob
    ghost = rng.uniform(size=(b,)) < params.multipath_prob
    ghost_factor = rng.uniform(params.ghost_range[0], params.ghost_range[1], size=(b,))
    speckle = rng.normal(0.0, params.speckle_sigma, size=(b, nb))

    r = cast_rays(world.segments(), (pose.x, pose.y), nominal + jitter + pose.theta, params.max_range)
    hit = np.isfinite(r) & ~drop
    centers = params.bin_centers()
    width = max(params.peak_sigma, 1e-6)
    img = np.zeros((b, nb))
    rm = np.where(hit, r + noise, 0.0)
    img += np.where(hit[:, None], np.exp(-0.5 * ((centers[None, :] - rm[:, None]) / width) ** 2), 0.0)
    rg = rm * ghost_factor
    g = hit & ghost & (rg <= params.max_range)
    img += np.where(
        g[:, None],
        params.ghost_gain * np.exp(-0.5 * ((centers[None, :] - rg[:, None]) / width) ** 2),
        0.0,
    )
    if params.clutter_gain > 0:
        img += params.clutter_gain * np.exp(-centers / max(params.clutter_range, 1e-6))[None, :]
    img = np.clip(img + speckle, 0.0, 1.0)
    return PolarScan(RADAR, nominal, img.astype(np.float32), params.max_range)


def render_scan(world: World, pose: Pose2D, params: SensorParams, rng: Rng) -> PolarScan:
    if params.modality == LIDAR:
        return render_lidar_scan(world, pose, params, rng)
    return render_radar_scan(world, pose, params, rng)


# ---------------------------------------------------------------------------
# Trajectories


def _inside(world: World, pt, margin: float) -> bool:
    x0, y0, x1, y1 = world.bounds
    return x0 + margin <= pt[0] <= x1 - margin and y0 + margin <= pt[1] <= y1 - margin


def generate_trajectory(
    world: World,
    seed: int,
    length: int,
    step: float,
    clearance: float = 3.0,
    turn_sigma: float = 0.15,
    max_retries: int = 200,
) -> list[Pose2D]:
    """Random smooth walk of ``length`` poses spaced exactly ``step`` apart.

    Every pose keeps ``clearance`` metres from obstacles and bounds; each
    heading points at the next pose.
    """
    if length < 2:
        raise ConfigError(f"length must be >= 2, got {length}")
    if step <= 0:
        raise ConfigError(f"step must be > 0, got {step}")
    rng = Rng(seed).split("trajectory")
    x0, y0, x1, y1 = world.bounds
    margin = clearance
    for attempt in range(max_retries):
        start = np.array([rng.uniform(x0 + margin, x1 - margin), rng.uniform(y0 + margin, y1 - margin)])
        if not _inside(world, start, margin) or world.clearance(start)[0] < clearance:
            continue
        heading = rng.uniform(-math.pi, math.pi)
        pts, heads = [start], []
        ok = True
        for _ in range(length - 1):
            base = heading + rng.normal(0.0, turn_sigma)
            # Fan out around the preferred heading until a free step is found.
            offsets = np.concatenate([[0.0], np.repeat(np.arange(1, 37) * (math.pi / 36), 2)])
            offsets[2::2] *= -1
            cand = base + offsets
            nxt = pts[-1][None, :] + step * np.stack([np.cos(cand), np.sin(cand)], 1)
            x_ok = (nxt[:, 0] >= x0 + margin) & (nxt[:, 0] <= x1 - margin)
            y_ok = (nxt[:, 1] >= y0 + margin) & (nxt[:, 1] <= y1 - margin)
            clr = world.clearance(nxt) >= clearance
            free = np.flatnonzero(x_ok & y_ok & clr)
            if len(free) == 0:
                ok = False
                break
            heading = float(cand[free[0]])
            heads.append(heading)
            pts.append(nxt[free[0]])
        if ok:
            heads.append(heads[-1])
            return [Pose2D(p[0], p[1], h) for p, h in zip(pts, heads)]
    raise GenerationError(
        f"could not place a {length}-pose trajectory after {max_retries} attempts"
    )


def perturb_trajectory(traj: list[Pose2D], rng: Rng, max_lateral: float = 1.5,
                       knot_spacing: int = 8) -> list[Pose2D]:
    """Shift each pose sideways by a smooth offset bounded by ``max_lateral``."""
    n = len(traj)
    n_knots = n // knot_spacing + 2
    knots = rng.uniform(-max_lateral, max_lateral, size=(n_knots,))
    lat = np.interp(np.arange(n) / knot_spacing, np.arange(n_knots), knots)
    out = []
    for p, l in zip(traj, lat):
        out.append(Pose2D(p.x - math.sin(p.theta) * l, p.y + math.cos(p.theta) * l, p.theta))
    return out


# ---------------------------------------------------------------------------
# Sessions


@dataclass(frozen=True)
class OdometryNoise:
    sigma_xy: float = 0.0
    sigma_theta: float = 0.0


@dataclass(eq=False)
class Session:
    session_id: str
    modality: str
    poses: np.ndarray        # (T, 3) ground truth
    odometry: np.ndarray     # (T-1, 3) noisy relative offsets
    scan_data: np.ndarray    # (T, B) or (T, B, bins) float32
    sensor: SensorParams

    def __post_init__(self):
        t = len(self.poses)
        if len(self.odometry) != max(t - 1, 0) or len(self.scan_data) != t:
            raise UsageError(
                f"inconsistent session lengths: poses {t}, odometry {len(self.odometry)}, "
                f"scans {len(self.scan_data)}"
            )

    def __len__(self):
        return len(self.poses)

    def pose(self, i: int) -> Pose2D:
        return Pose2D.from_array(self.poses[i])

    def scan(self, i: int) -> PolarScan:
        return PolarScan(self.modality, self.sensor.nominal_angles(), self.scan_data[i],
                         self.sensor.max_range)

    @property
    def scans(self) -> list[PolarScan]:
        return [self.scan(i) for i in range(len(self))]


def make_session(
    world: World,
    trajectory,
    params: SensorParams,
    odom_noise: OdometryNoise,
    rng: Rng,
    session_id: str = "s0",
) -> Session:
    if len(trajectory) == 0:
        raise UsageError("trajectory must be non-empty")
    poses = [p if isinstance(p, Pose2D) else Pose2D.from_array(p) for p in trajectory]
    odo_rng = rng.split("odometry")
    odom = np.zeros((len(poses) - 1, 3))
    for i in range(len(poses) - 1):
        o = relative_offset(poses[i], poses[i + 1])
        odom[i] = (
            o.dx + odo_rng.normal(0.0, odom_noise.sigma_xy),
            o.dy + odo_rng.normal(0.0, odom_noise.sigma_xy),
            normalize_angle(o.dtheta + odo_rng.normal(0.0, odom_noise.sigma_theta)),
        )
    scan_rng = rng.split("scans")
    scans = [render_scan(world, p, params, scan_rng.split(i)).data for i, p in enumerate(poses)]
    return Session(
        session_id=session_id,
        modality=params.modality,
        poses=np.array([p.as_array() for p in poses]),
        odometry=odom,
        scan_data=np.stack(scans).astype(np.float32),
        sensor=params,
    )


def dead_reckoning(session: Session, start: Pose2D | None = None) -> np.ndarray:
    cur = start if start is not None else session.pose(0)
    out = [cur.as_array()]
    for o in session.odometry:
        cur = compose(cur, PoseOffset(*o))
        out.append(cur.as_array())
    return np.array(out)


@dataclass(frozen=True)
class MultiSessionParams:
    """Layout of a simulated multi-session survey of one world."""

    world_seed: int = 1
    world: WorldParams = field(default_factory=WorldParams)
    trajectory_seed: int = 1
    length: int = 300
    step: float = 4.0
    lidar_sessions: int = 2
    radar_sessions: int = 2
    max_lateral: float = 1.5
    lidar: SensorParams = field(default_factory=default_lidar)
    radar: SensorParams = field(default_factory=default_radar)
    odom_noise: OdometryNoise = field(default_factory=OdometryNoise)
    seed: int = 0


def simulate_multisession(p: MultiSessionParams):
    """Return ``(world, base_trajectory, sessions)``.

    Every session re-traverses the same base trajectory with its own lateral
    perturbation and sensor noise, so index ``i`` is the same place in all
    sessions.
    """
    world = generate_world(p.world_seed, p.world)
    base = generate_trajectory(world, p.trajectory_seed, p.length, p.step)
    rng = Rng(p.seed)
    sessions = []
    plan = [(LIDAR, i) for i in range(p.lidar_sessions)] + [(RADAR, i) for i in range(p.radar_sessions)]
    for modality, i in plan:
        sid = f"{modality}{i}"
        srng = rng.split(sid)
        traj = perturb_trajectory(base, srng.split("lateral"), p.max_lateral)
        sensor = p.lidar if modality == LIDAR else p.radar
        sessions.append(make_session(world, traj, sensor, p.odom_noise, srng, sid))
    return world, base, sessions
