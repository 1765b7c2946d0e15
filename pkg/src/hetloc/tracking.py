"""Radar-on-lidar pose tracking.

One U-Net embeds both the radar BEV and rotated lidar map candidates. Each
(dx, dy, dtheta) bin is scored by the negative RMS feature difference, the
score volume is max-marginalised per axis and turned into probabilities, and
the expected offset is fused with odometry in a Kalman filter.

Offset convention inside the measurement model: a bin ``(dx, dy, dtheta)``
means the radar frame is the predicted frame rotated by ``dtheta`` and then
translated by ``(dx, dy)`` along the rotated axes, i.e.
``true = pred (+) (0, 0, dtheta) (+) (dx, dy, 0)``. Rotation candidates are
materialised; translations are window shifts. :func:`window_to_offset` and
:func:`offset_to_window` convert to and from ordinary relative offsets.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    GridSpec,
    Pose2D,
    PoseOffset,
    Rng,
    compose,
    normalize_angle,
    relative_offset,
)
from .errors import DataError, NumericError, TrackingLostError, UsageError
from .nn import tensor as T
from .nn.layers import SGD, UNet3
from .representation import BevImage, bilinear_sample, rotate_image, scan_to_bev
from .simworld import LIDAR, RADAR, Session

log = logging.getLogger(__name__)

LOG_FLOOR = math.log(1e-12)


# ---------------------------------------------------------------------------
# Types


@dataclass(frozen=True, eq=False)
class OffsetGrid:
    dx_values: np.ndarray
    dy_values: np.ndarray
    dtheta_values: np.ndarray

    def __post_init__(self):
        for name in ("dx_values", "dy_values", "dtheta_values"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, v)
            if len(v) % 2 == 0 or np.count_nonzero(v == 0.0) != 1:
                raise UsageError(f"{name} must have odd length and exactly one zero")
            if not np.allclose(v, -v[::-1]) or np.any(np.diff(v) <= 0):
                raise UsageError(f"{name} must be increasing and symmetric about 0")
            if len(v) > 2 and not np.allclose(np.diff(v), v[1] - v[0]):
                raise UsageError(f"{name} must be uniformly spaced")

    @classmethod
    def default(cls) -> "OffsetGrid":
        return cls.make(3.0, 0.5, 10.0, 2.0)

    @classmethod
    def make(cls, trans_max: float, trans_step: float, rot_max_deg: float,
             rot_step_deg: float) -> "OffsetGrid":
        nt = int(round(trans_max / trans_step)) if trans_step > 0 else 0
        nr = int(round(rot_max_deg / rot_step_deg)) if rot_step_deg > 0 else 0
        t = np.arange(-nt, nt + 1) * trans_step
        r = np.radians(np.arange(-nr, nr + 1) * rot_step_deg)
        return cls(t, t.copy(), r)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (len(self.dx_values), len(self.dy_values), len(self.dtheta_values))

    def same_as(self, other: "OffsetGrid") -> bool:
        return all(
            a.shape == b.shape and np.allclose(a, b)
            for a, b in ((self.dx_values, other.dx_values), (self.dy_values, other.dy_values),
                         (self.dtheta_values, other.dtheta_values))
        )

    def contains(self, o: PoseOffset) -> bool:
        return (abs(o.dx) <= self.dx_values[-1] + 1e-9 and abs(o.dy) <= self.dy_values[-1] + 1e-9
                and abs(o.dtheta) <= self.dtheta_values[-1] + 1e-9)

    def shift_cells(self, resolution: float) -> tuple[np.ndarray, np.ndarray]:
        sx = self.dx_values / resolution
        sy = self.dy_values / resolution
        if not (np.allclose(sx, np.round(sx)) and np.allclose(sy, np.round(sy))):
            raise UsageError("translation bins must be whole multiples of the BEV resolution")
        return np.round(sx).astype(int), np.round(sy).astype(int)

    def to_dict(self) -> dict:
        return {"dx_values": self.dx_values.tolist(), "dy_values": self.dy_values.tolist(),
                "dtheta_values": self.dtheta_values.tolist()}

    @classmethod
    def from_dict(cls, d) -> "OffsetGrid":
        return cls(np.array(d["dx_values"]), np.array(d["dy_values"]), np.array(d["dtheta_values"]))


@dataclass(frozen=True, eq=False)
class OffsetDistribution:
    p_x: np.ndarray
    p_y: np.ndarray
    p_theta: np.ndarray

    def axes(self):
        return (self.p_x, self.p_y, self.p_theta)

    def entropy(self) -> tuple[float, float, float]:
        return tuple(float(-(p * np.log(np.maximum(p, 1e-300))).sum()) for p in self.axes())


@dataclass(frozen=True, eq=False)
class GroundTruthOffset:
    c_x: np.ndarray
    c_y: np.ndarray
    c_theta: np.ndarray
    offset: PoseOffset        # continuous value, window convention

    @classmethod
    def from_offset(cls, o: PoseOffset, grid: OffsetGrid) -> "GroundTruthOffset":
        """Nearest-bin one-hot targets; ``o`` must lie inside the grid."""
        if not grid.contains(o):
            raise DataError(f"offset {o} lies outside the offset grid")
        hots = []
        for v, vals in ((o.dx, grid.dx_values), (o.dy, grid.dy_values), (o.dtheta, grid.dtheta_values)):
            h = np.zeros(len(vals))
            h[int(np.argmin(np.abs(vals - v)))] = 1.0
            hots.append(h)
        return cls(*hots, o)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise UsageError(f"alpha must be > 0, got {self.alpha}")


@dataclass(frozen=True, eq=False)
class TrackerState:
    mean: Pose2D
    covariance: np.ndarray


def window_to_offset(w: PoseOffset) -> PoseOffset:
    """Window-convention bin -> ordinary relative offset ``relative_offset(pred, true)``."""
    c, s = math.cos(w.dtheta), math.sin(w.dtheta)
    return PoseOffset(c * w.dx - s * w.dy, s * w.dx + c * w.dy, w.dtheta)


def offset_to_window(o: PoseOffset) -> PoseOffset:
    c, s = math.cos(o.dtheta), math.sin(o.dtheta)
    return PoseOffset(c * o.dx + s * o.dy, -s * o.dx + c * o.dy, o.dtheta)


# ---------------------------------------------------------------------------
# Map patches and candidates


def patch_size_for(window: int, grid: OffsetGrid, resolution: float) -> int:
    """Smallest map-patch side (multiple of 8) that contains every rotated, shifted window."""
    sx, sy = grid.shift_cells(resolution)
    th = float(np.max(np.abs(grid.dtheta_values)))
    half = (window / 2.0 + max(sx.max(), sy.max())) * (abs(math.cos(th)) + abs(math.sin(th)))
    return int(8 * math.ceil((2 * math.ceil(half) + 2) / 8))


def candidate_size_for(window: int, grid: OffsetGrid, resolution: float) -> int:
    sx, sy = grid.shift_cells(resolution)
    return int(8 * math.ceil((window + 2 * max(sx.max(), sy.max())) / 8))


def crop_patch(map_bev: BevImage, pose: Pose2D, size: int) -> np.ndarray:
    """``size`` x ``size`` patch of ``map_bev`` in ``pose``'s frame (bilinear, zero outside)."""
    res = map_bev.grid.resolution
    local = GridSpec.centered(size, res)
    pts = compose_grid_points(pose, local)
    cells = map_bev.grid.world_to_cell(pts.reshape(-1, 2)).reshape(size, size, 2)
    return bilinear_sample(map_bev.pixels, cells[..., 0], cells[..., 1])


def compose_grid_points(pose: Pose2D, grid: GridSpec) -> np.ndarray:
    c = grid.cell_centers()
    cs, sn = math.cos(pose.theta), math.sin(pose.theta)
    return np.stack([pose.x + cs * c[..., 0] - sn * c[..., 1],
                     pose.y + sn * c[..., 0] + cs * c[..., 1]], axis=-1)


def patch_inside_map(map_bev: BevImage, pose: Pose2D, size: int = 0) -> bool:
    """True when ``pose`` lies on the map grid with ``size // 4`` cells to spare.

    Cells outside the map read as empty, so a patch may overhang the edge;
    only a pose that has left the mapped area counts as lost.
    """
    col, row = map_bev.grid.world_to_cell(np.array([[pose.x, pose.y]]))[0]
    h, w = map_bev.grid.shape
    r = size // 4
    return r <= col <= w - 1 - r and r <= row <= h - 1 - r


def generate_candidates(map_patch, grid: OffsetGrid, window: int, resolution: float) -> np.ndarray:
    """(N_theta, S, S) rotated copies of ``map_patch``; S leaves room for every window shift.

    Candidate ``k`` satisfies ``cand_k(v) = patch(R(theta_k) v)`` about the
    patch centre. Translations are not materialised.
    """
    patch = map_patch.pixels if isinstance(map_patch, BevImage) else np.asarray(map_patch)
    need = patch_size_for(window, grid, resolution)
    if patch.shape[0] < need or patch.shape[1] < need:
        raise UsageError(
            f"map patch {patch.shape} too small: need at least {need}x{need} cells for "
            f"window {window} and this offset grid"
        )
    size = candidate_size_for(window, grid, resolution)
    return np.stack([rotate_image(patch, th, (size, size)) for th in grid.dtheta_values])


# ---------------------------------------------------------------------------
# Similarity volume


def _window_starts(cand_size: int, window: int, shifts: np.ndarray) -> np.ndarray:
    base = (cand_size - window) // 2
    starts = base + shifts
    if starts.min() < 0 or starts.max() + window > cand_size:
        raise UsageError(f"window shifts {shifts.min()}..{shifts.max()} leave the candidate")
    return starts


def similarity_volume(radar_feat, cand_feats, grid: OffsetGrid, resolution: float,
                      eps: float = 1e-12) -> T.Tensor:
    """Scores (Nx, Ny, Ntheta): minus the RMS difference between the radar
    features and each shifted window of each rotated candidate.

    ``radar_feat`` is (C, H, W); ``cand_feats`` is (Ntheta, C, S, S).
    """
    r = T.as_tensor(radar_feat)
    c = T.as_tensor(cand_feats)
    if r.ndim == 4:
        r = r.reshape(r.shape[1:])
    ch, h, w = r.shape
    k, cc, s1, s2 = c.shape
    if cc != ch or k != len(grid.dtheta_values):
        raise UsageError(f"feature shapes incompatible: radar {r.shape}, candidates {c.shape}")
    sx, sy = grid.shift_cells(resolution)
    xs = _window_starts(s2, w, sx)
    ys = _window_starts(s1, h, sy)
    n = float(ch * h * w)
    rd, cd = r.data, c.data
    ms = np.empty((len(xs), len(ys), k), dtype=np.float64)
    for i, x0 in enumerate(xs):
        for j, y0 in enumerate(ys):
            diff = cd[:, :, y0:y0 + h, x0:x0 + w] - rd[None]
            ms[i, j] = np.einsum("kchw,kchw->k", diff, diff, dtype=np.float64) / n
    rms = np.sqrt(ms + eps)

    def bw(g):
        gr = np.zeros(rd.shape, dtype=np.float64)
        gc = np.zeros(cd.shape, dtype=np.float64)
        coef = -g / (n * rms)                         # d score / d (mean sq) * 1/n * 2 / 2
        for i, x0 in enumerate(xs):
            for j, y0 in enumerate(ys):
                diff = cd[:, :, y0:y0 + h, x0:x0 + w] - rd[None]
                wdiff = coef[i, j][:, None, None, None] * diff
                gc[:, :, y0:y0 + h, x0:x0 + w] += wdiff
                gr -= wdiff.sum(axis=0)
        return (gr, gc)

    return T.Tensor((-rms).astype(np.float64), _parents=(r, c), op="similarity_volume",
                    _backward=bw)


# ---------------------------------------------------------------------------
# Distribution head and losses


def distribution_head(scores: T.Tensor, grid: OffsetGrid, temperature: float):
    """Differentiable marginals: returns (log_px, log_py, log_pt, expected (3,) tensor)."""
    s = scores * (1.0 / temperature)
    logs = [T.log_softmax(T.amax(s, axis=ax), axis=-1) for ax in ((1, 2), (0, 2), (0, 1))]
    vals = (grid.dx_values, grid.dy_values, grid.dtheta_values)
    exp = [T.tsum(T.exp(lp) * v.astype(lp.data.dtype)) for lp, v in zip(logs, vals)]
    return logs[0], logs[1], logs[2], T.stack(exp)


def offset_distribution(scores, grid: OffsetGrid, temperature: float = 0.1):
    """Per-axis max-marginal softmax. Returns ``(OffsetDistribution, expected PoseOffset)``
    (window convention)."""
    sc = scores.data if isinstance(scores, T.Tensor) else np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(sc)):
        raise NumericError("score volume contains non-finite values")
    lx, ly, lt, e = distribution_head(T.Tensor(sc.astype(np.float64)), grid, temperature)
    dist = OffsetDistribution(np.exp(lx.data), np.exp(ly.data), np.exp(lt.data))
    return dist, PoseOffset(*e.data)


def loss_L1(dist: OffsetDistribution, gt: GroundTruthOffset) -> float:
    """Cross entropy summed over the three axes, probabilities floored at 1e-12."""
    total = 0.0
    for p, c in zip(dist.axes(), (gt.c_x, gt.c_y, gt.c_theta)):
        if p.shape != c.shape:
            raise UsageError(f"distribution {p.shape} and target {c.shape} differ")
        total -= float((c * np.log(np.maximum(p, 1e-12))).sum())
    return total


def loss_L2(est: PoseOffset, gt: PoseOffset, w: LossWeights = LossWeights()) -> float:
    dth = normalize_angle(est.dtheta - gt.dtheta)
    return (est.dx - gt.dx) ** 2 + (est.dy - gt.dy) ** 2 + w.alpha * dth ** 2


def losses_tensor(scores: T.Tensor, gt: GroundTruthOffset, grid: OffsetGrid,
                  temperature: float, weights: LossWeights):
    """(L1, L2) as tensors, for training."""
    lx, ly, lt, e = distribution_head(scores, grid, temperature)
    l1 = None
    for lp, c in zip((lx, ly, lt), (gt.c_x, gt.c_y, gt.c_theta)):
        term = T.tsum(T.clamp_min(lp, LOG_FLOOR) * (-c.astype(lp.data.dtype)))
        l1 = term if l1 is None else l1 + term
    target = gt.offset.as_array().astype(e.data.dtype)
    wts = np.array([1.0, 1.0, weights.alpha], dtype=e.data.dtype)
    l2 = T.tsum(T.square(e - target) * wts)
    return l1, l2


# ---------------------------------------------------------------------------
# Feature extraction and the per-step measurement


def extract_features(bev, unet: UNet3) -> np.ndarray:
    """(C, H, W) embedding of one BEV image (or (N, C, H, W) for a stack)."""
    px = bev.pixels if isinstance(bev, BevImage) else np.asarray(bev)
    out = unet(px.astype(np.float32)).data
    return out[0] if px.ndim == 2 else out


@dataclass(frozen=True)
class TrackConfig:
    bev_size: int = 128
    resolution: float = 0.5
    trans_max: float = 3.0
    trans_step: float = 0.5
    rot_max_deg: float = 10.0
    rot_step_deg: float = 2.0
    temperature: float = 0.1
    alpha: float = 1.0
    channels: tuple[int, int, int] = (8, 16, 32)
    embed_channels: int = 1
    # Training.
    train_window: int = 64
    samples: int = 500
    epochs: int = 6
    lr: float = 0.01
    momentum: float = 0.9
    clip_norm: float = 1.0            # global gradient-norm cap; 0 disables
    seed: int = 0
    # Filter.
    meas_floor_xy: float = 0.25
    meas_floor_theta_deg: float = 1.0
    odom_sigma_xy: float = 0.1
    odom_sigma_theta_deg: float = 0.5
    init_sigma_xy: float = 0.5
    init_sigma_theta_deg: float = 2.0
    measurement: str = "network"      # network | ground_truth | none

    def offset_grid(self) -> OffsetGrid:
        return OffsetGrid.make(self.trans_max, self.trans_step, self.rot_max_deg, self.rot_step_deg)

    def weights(self) -> LossWeights:
        return LossWeights(self.alpha)

    def process_noise(self) -> np.ndarray:
        return np.diag([self.odom_sigma_xy ** 2, self.odom_sigma_xy ** 2,
                        math.radians(self.odom_sigma_theta_deg) ** 2])


def make_unet(cfg: TrackConfig) -> UNet3:
    return UNet3(Rng(cfg.seed).split("unet"), cfg.channels, cfg.embed_channels)


def measure(radar_bev, map_patch, unet: UNet3, grid: OffsetGrid, cfg: TrackConfig):
    """One measurement: returns ``(distribution, window offset, scores)``."""
    window = radar_bev.shape[-1]
    cands = generate_candidates(map_patch, grid, window, cfg.resolution)
    rf = unet(radar_bev.astype(np.float32)).data[0]
    cf = unet(cands.astype(np.float32)).data
    scores = similarity_volume(rf, cf, grid, cfg.resolution)
    dist, off = offset_distribution(scores, grid, cfg.temperature)
    return dist, off, scores.data


def measurement_covariance(dist: OffsetDistribution, grid: OffsetGrid, window_offset: PoseOffset,
                           cfg: TrackConfig) -> np.ndarray:
    """Covariance of the measured ordinary offset from the per-axis spreads."""
    var = []
    for p, v, m, floor in ((dist.p_x, grid.dx_values, window_offset.dx, cfg.meas_floor_xy),
                           (dist.p_y, grid.dy_values, window_offset.dy, cfg.meas_floor_xy),
                           (dist.p_theta, grid.dtheta_values, window_offset.dtheta,
                            math.radians(cfg.meas_floor_theta_deg))):
        var.append(max(float((p * (v - m) ** 2).sum()), floor ** 2))
    c, s = math.cos(window_offset.dtheta), math.sin(window_offset.dtheta)
    rot = np.array([[c, -s], [s, c]])
    out = np.zeros((3, 3))
    out[:2, :2] = rot @ np.diag(var[:2]) @ rot.T
    out[2, 2] = var[2]
    return out


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrackingSample:
    radar: np.ndarray        # (W, W)
    patch: np.ndarray        # (P, P) map patch at the perturbed pose
    gt: GroundTruthOffset


def build_training_samples(map_bev: BevImage, radar_session: Session, cfg: TrackConfig,
                           n: int | None = None, window: int | None = None) -> list[TrackingSample]:
    """Radar BEVs paired with map patches cropped at randomly perturbed poses.

    Perturbations are drawn uniformly inside the offset grid (window
    convention) so every target is representable.
    """
    if radar_session.modality != RADAR:
        raise DataError("training samples need a radar session")
    grid = cfg.offset_grid()
    window = window or cfg.train_window
    n = n or cfg.samples
    rng = Rng(cfg.seed).split("pt-samples")
    psize = patch_size_for(window, grid, cfg.resolution)
    bev_grid = GridSpec.centered(window, cfg.resolution)
    out, bad = [], []
    t = len(radar_session)
    for i in range(n):
        idx = int(rng.integers(0, t))
        true = radar_session.pose(idx)
        w = PoseOffset(rng.uniform(grid.dx_values[0], grid.dx_values[-1]),
                       rng.uniform(grid.dy_values[0], grid.dy_values[-1]),
                       rng.uniform(grid.dtheta_values[0], grid.dtheta_values[-1]))
        pred = _pred_from_window(true, w)
        if not patch_inside_map(map_bev, pred, psize):
            bad.append(idx)
            continue
        got = offset_to_window(relative_offset(pred, true))
        try:
            gt = GroundTruthOffset.from_offset(got, grid)
        except DataError:
            bad.append(idx)
            continue
        radar = scan_to_bev(radar_session.scan(idx), bev_grid).pixels
        out.append(TrackingSample(radar, crop_patch(map_bev, pred, psize).astype(np.float32), gt))
    if not out:
        raise DataError(f"no usable training samples (rejected indices: {bad[:10]})")
    return out


def _pred_from_window(true: Pose2D, w: PoseOffset) -> Pose2D:
    """The predicted pose for which ``true`` sits at window offset ``w``."""
    o = window_to_offset(w)
    # true = pred (+) o  =>  pred = true (+) inverse(o)
    c, s = math.cos(o.dtheta), math.sin(o.dtheta)
    inv = Pose2D(-c * o.dx - s * o.dy, s * o.dx - c * o.dy, -o.dtheta)
    return compose(true, inv)


def check_samples(samples, grid: OffsetGrid):
    bad = [i for i, s in enumerate(samples) if not grid.contains(s.gt.offset)]
    if bad:
        raise DataError(f"offsets outside the grid for samples {bad[:20]}")


def sample_loss(unet: UNet3, sample: TrackingSample, cfg: TrackConfig, grid: OffsetGrid):
    window = sample.radar.shape[-1]
    cands = generate_candidates(sample.patch, grid, window, cfg.resolution)
    r = unet(sample.radar.astype(np.float32))[0]
    c = unet(cands.astype(np.float32))
    scores = similarity_volume(r, c, grid, cfg.resolution)
    return losses_tensor(scores, sample.gt, grid, cfg.temperature, cfg.weights())


def clip_gradients(params, max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    The similarity scores are divided by a small temperature, so single
    samples occasionally produce very large gradients; without a cap these
    steps kill the ReLU units. Returns the norm before clipping.
    """
    norm = math.sqrt(sum(float(np.square(p.grad, dtype=np.float64).sum()) for p in params))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm


def train_tracking(samples, cfg: TrackConfig, unet: UNet3 | None = None, trace=None):
    """Fit the U-Net with L1 + L2. Returns ``(unet, history)``."""
    grid = cfg.offset_grid()
    check_samples(samples, grid)
    net = unet or make_unet(cfg)
    opt = SGD(net.parameters(), cfg.lr, cfg.momentum)
    rng = Rng(cfg.seed).split("train-pt")
    history = []
    for epoch in range(cfg.epochs):
        tot, l1s, l2s = [], [], []
        for i in rng.permutation(len(samples)):
            l1, l2 = sample_loss(net, samples[i], cfg, grid)
            loss = l1 + l2
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite tracking loss at epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward(params=opt.params)
            clip_gradients(opt.params, cfg.clip_norm)
            opt.step()
            tot.append(float(loss.data))
            l1s.append(float(l1.data))
            l2s.append(float(l2.data))
        row = {"epoch": epoch + 1, "loss": float(np.mean(tot)), "L1": float(np.mean(l1s)),
               "L2": float(np.mean(l2s))}
        history.append(row)
        log.info("train-pt epoch %d loss %.4f (L1 %.4f, L2 %.4f)", epoch + 1, row["loss"],
                 row["L1"], row["L2"])
        if trace:
            trace(row)
    return net, history


# ---------------------------------------------------------------------------
# Kalman filter


def _jacobians(mean: Pose2D, odom: PoseOffset):
    c, s = math.cos(mean.theta), math.sin(mean.theta)
    f = np.array([[1.0, 0.0, -s * odom.dx - c * odom.dy],
                  [0.0, 1.0, c * odom.dx - s * odom.dy],
                  [0.0, 0.0, 1.0]])
    g = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return f, g


def _sym(p):
    return 0.5 * (p + p.T)


def predict(state: TrackerState, odom: PoseOffset, noise: np.ndarray) -> TrackerState:
    """Propagate with odometry; ``noise`` is the process covariance in the odometry frame."""
    f, g = _jacobians(state.mean, odom)
    cov = f @ state.covariance @ f.T + g @ np.asarray(noise) @ g.T
    return TrackerState(compose(state.mean, odom), _sym(cov))


def measurement_update(state: TrackerState, measured: PoseOffset, meas_cov: np.ndarray) -> TrackerState:
    """Kalman correction with ``measured`` observing ``relative_offset(mean, true)``."""
    meas_cov = np.asarray(meas_cov, dtype=np.float64)
    if np.any(np.isinf(np.diag(meas_cov))):
        # An infinitely uncertain measurement carries no information: gain 0.
        return state
    m = state.mean
    c, s = math.cos(m.theta), math.sin(m.theta)
    h = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    p = state.covariance
    sm = h @ p @ h.T + np.asarray(meas_cov)
    k = np.linalg.solve(sm.T, (p @ h.T).T).T
    z = measured.as_array()
    dx = k @ z
    ikh = np.eye(3) - k @ h
    cov = ikh @ p @ ikh.T + k @ np.asarray(meas_cov) @ k.T
    return TrackerState(Pose2D(m.x + dx[0], m.y + dx[1], m.theta + dx[2]), _sym(cov))


# ---------------------------------------------------------------------------
# Tracking loop and evaluation


@dataclass
class StepRecord:
    step: int
    pose: Pose2D
    measured: PoseOffset | None
    entropy: tuple[float, float, float] | None
    covariance: np.ndarray


@dataclass
class TrackResult:
    poses: np.ndarray                 # (T, 3)
    steps: list[StepRecord] = field(default_factory=list)
    lost: bool = False


def build_lidar_map(sessions, resolution: float = 0.5, margin: float = 60.0,
                    bounds=None) -> BevImage:
    """Accumulate lidar scans at their ground-truth poses into one global BEV."""
    sessions = [s for s in sessions if s.modality == LIDAR]
    if not sessions:
        raise DataError("a lidar map needs at least one lidar session")
    if bounds is None:
        allp = np.concatenate([s.poses[:, :2] for s in sessions])
        x0, y0 = allp.min(axis=0)
        x1, y1 = allp.max(axis=0)
    else:
        x0, y0, x1, y1 = bounds
    x0, y0, x1, y1 = x0 - margin, y0 - margin, x1 + margin, y1 + margin
    w = int(math.ceil((x1 - x0) / resolution)) + 1
    h = int(math.ceil((y1 - y0) / resolution)) + 1
    grid = GridSpec(w, h, resolution, Pose2D(x0, y0, 0.0))
    img = np.zeros(grid.shape, dtype=np.float32)
    for s in sessions:
        for i in range(len(s)):
            bev = scan_to_bev(s.scan(i), grid, s.pose(i))
            np.maximum(img, bev.pixels, out=img)
    return BevImage(grid, img, LIDAR)


def track(session: Session, map_bev: BevImage, unet: UNet3 | None, cfg: TrackConfig,
          initial: Pose2D | None = None, progress=None) -> TrackResult:
    """Run the filter over a radar session.

    ``cfg.measurement`` selects the correction source: ``network`` (the
    U-Net pipeline), ``ground_truth`` (exact offsets with a tiny covariance)
    or ``none`` (dead reckoning through the filter).
    """
    if cfg.measurement not in ("network", "ground_truth", "none"):
        raise UsageError(f"unknown measurement mode {cfg.measurement!r}")
    if cfg.measurement == "network" and unet is None:
        raise UsageError("network measurements need U-Net weights")
    grid = cfg.offset_grid()
    bev_grid = GridSpec.centered(cfg.bev_size, cfg.resolution)
    psize = patch_size_for(cfg.bev_size, grid, cfg.resolution)
    start = initial or session.pose(0)
    p0 = np.diag([cfg.init_sigma_xy ** 2, cfg.init_sigma_xy ** 2,
                  math.radians(cfg.init_sigma_theta_deg) ** 2])
    state = TrackerState(start, p0)
    q = cfg.process_noise()
    poses = [start.as_array()]
    steps = [StepRecord(0, start, None, None, p0)]
    for t in range(1, len(session)):
        state = predict(state, PoseOffset(*session.odometry[t - 1]), q)
        measured, ent = None, None
        if cfg.measurement == "ground_truth":
            measured = relative_offset(state.mean, session.pose(t))
            state = measurement_update(state, measured, np.eye(3) * 1e-12)
        elif cfg.measurement == "network":
            if not patch_inside_map(map_bev, state.mean, psize):
                raise TrackingLostError(
                    f"predicted pose at step {t} left the map", last_state=state,
                    partial=TrackResult(np.array(poses), steps, lost=True),
                )
            radar = scan_to_bev(session.scan(t), bev_grid).pixels
            patch = crop_patch(map_bev, state.mean, psize)
            dist, woff, _ = measure(radar, patch, unet, grid, cfg)
            measured = window_to_offset(woff)
            ent = dist.entropy()
            state = measurement_update(state, measured, measurement_covariance(dist, grid, woff, cfg))
        poses.append(state.mean.as_array())
        steps.append(StepRecord(t, state.mean, measured, ent, state.covariance))
        if progress:
            progress(t)
    return TrackResult(np.array(poses), steps)


def evaluate_rmse(est, gt) -> tuple[float, float]:
    """(translation RMSE in metres, rotation RMSE in degrees)."""
    est = np.asarray(est, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if est.shape != gt.shape or len(est) == 0:
        raise UsageError(f"trajectories must have equal non-zero length, got {len(est)} and {len(gt)}")
    d2 = ((est[:, :2] - gt[:, :2]) ** 2).sum(axis=1)
    dth = normalize_angle(est[:, 2] - gt[:, 2])
    return float(np.sqrt(d2.mean())), float(np.degrees(np.sqrt((dth ** 2).mean())))
