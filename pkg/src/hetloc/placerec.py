"""Radar-to-lidar place recognition.

Learned route: Scan Context -> :class:`~hetloc.nn.layers.ScEncoder` ->
unit-norm descriptor, trained with a hinge triplet loss averaged over every
lidar/radar assignment of (anchor, positive, negative). Baseline route: raw
Scan Context matrices compared by shift-minimised column cosine distance.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import TWO_PI, GridSpec, Pose2D, Rng, normalize_angle
from .errors import DataError, EstimationError, NumericError, QueryError, UsageError
from .nn import tensor as T
from .nn.layers import SGD, ScEncoder
from .representation import (
    ScanContextMatrix,
    accumulate_submap,
    make_scan_context,
    scan_to_bev,
)
from .simworld import LIDAR, MODALITIES, RADAR, Session

log = logging.getLogger(__name__)

PAIRS = {"L2L": (LIDAR, LIDAR), "R2R": (RADAR, RADAR), "R2L": (RADAR, LIDAR)}


@dataclass(frozen=True, eq=False)
class Descriptor:
    values: np.ndarray
    modality: str
    place_id: int
    session_id: str


@dataclass(frozen=True)
class TripletSpec:
    anchor: tuple[int, str]
    positive: tuple[int, str]
    negative: tuple[int, str]
    margin: float = 0.5

    def __post_init__(self):
        if self.anchor[0] != self.positive[0] or self.anchor[0] == self.negative[0]:
            raise UsageError(
                f"triplet needs anchor.place == positive.place != negative.place, got "
                f"{self.anchor[0]}, {self.positive[0]}, {self.negative[0]}"
            )
        if self.margin < 0:
            raise UsageError("margin must be non-negative")

    @property
    def modalities(self) -> tuple[str, str, str]:
        return (self.anchor[1], self.positive[1], self.negative[1])


def enumerate_combinations(place_a, place_b, margin: float = 0.5,
                           available=None) -> list[TripletSpec]:
    """All 2**3 modality assignments with anchor/positive at ``place_a``.

    ``available`` optionally maps place -> set of observed modalities; a place
    missing either modality is rejected.
    """
    if available is not None:
        for p in (place_a, place_b):
            missing = set(MODALITIES) - set(available.get(p, ()))
            if missing:
                raise UsageError(f"place {p} is not observed in {sorted(missing)}")
    return [
        TripletSpec((place_a, ma), (place_a, mp), (place_b, mn), margin)
        for ma, mp, mn in itertools.product(MODALITIES, repeat=3)
    ]


def triplet_loss(pos, neg, margin) -> float:
    """Mean over combinations of ``max(0, margin + pos - neg)``.

    ``pos``/``neg`` are the anchor-positive and anchor-negative distances of
    each combination; ``margin`` may be a scalar or per-combination.
    """
    pos = np.atleast_1d(np.asarray(pos, dtype=np.float64))
    neg = np.atleast_1d(np.asarray(neg, dtype=np.float64))
    if pos.size == 0:
        raise UsageError("triplet_loss needs at least one combination")
    if pos.shape != neg.shape:
        raise UsageError(f"pos {pos.shape} and neg {neg.shape} differ")
    return float(np.mean(np.maximum(0.0, margin + pos - neg)))


def euclidean(a: T.Tensor, b: T.Tensor, eps: float = 1e-12) -> T.Tensor:
    return T.sqrt(T.tsum(T.square(a - b), axis=-1), eps)


def triplet_loss_tensor(anchor: T.Tensor, positive: T.Tensor, negative: T.Tensor,
                        margin: float) -> T.Tensor:
    """Differentiable form over (F, D) descriptor rows, one row per combination."""
    h = T.relu(margin + euclidean(anchor, positive) - euclidean(anchor, negative))
    return T.mean(h)


# ---------------------------------------------------------------------------
# Descriptors


def describe(sc, encoder: ScEncoder, place_id: int = -1, session_id: str = "",
             modality: str = "") -> Descriptor:
    values = sc.values if isinstance(sc, ScanContextMatrix) else np.asarray(sc)
    d = encoder(values.astype(np.float32)).data[0]
    return Descriptor(d, modality, place_id, session_id)


def describe_batch(scs: np.ndarray, encoder: ScEncoder, batch: int = 64) -> np.ndarray:
    out = [encoder(scs[i:i + batch].astype(np.float32)).data for i in range(0, len(scs), batch)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, encoder.dim), np.float32)


# ---------------------------------------------------------------------------
# Scan Context baseline


def _column_normalize(v: np.ndarray):
    n = np.linalg.norm(v, axis=-2, keepdims=True)
    return v / np.maximum(n, 1e-12), n[..., 0, :] > 0


def sc_baseline_distance(a, b) -> tuple[float, int]:
    """Shift-minimised mean column cosine distance.

    Columns empty in both matrices are skipped; a column populated in only one
    of them counts as distance 1. Returns ``(distance, shift)`` where ``shift``
    is the number of columns ``b`` is rolled relative to ``a``.
    """
    a = a.values if isinstance(a, ScanContextMatrix) else np.asarray(a)
    b = b.values if isinstance(b, ScanContextMatrix) else np.asarray(b)
    if a.shape != b.shape:
        raise UsageError(f"scan context shapes differ: {a.shape} vs {b.shape}")
    d, k = sc_distance_matrix(a[None], b[None], return_shift=True)
    return float(d[0, 0]), int(k[0, 0])


def sc_distance_matrix(q: np.ndarray, m: np.ndarray, return_shift: bool = False):
    """Baseline distance between every query (Q, R, S) and map entry (M, R, S).

    For shift ``k`` the cosine sum over column pairs ``(i, i + k)`` and the
    number of engaged columns are both circular cross-correlations along the
    sector axis, so all shifts are evaluated at once with real FFTs.
    """
    q = np.asarray(q, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    qn, qv = _column_normalize(q)
    mn, mv = _column_normalize(m)
    s = q.shape[-1]
    fm = np.fft.rfft(mn, axis=-1)                            # (M, R, F)
    fmv = np.fft.rfft(mv.astype(np.float64), axis=-1)        # (M, F)
    nmv = mv.sum(-1)
    dist = np.empty((len(q), len(m)))
    shift = np.empty((len(q), len(m)), dtype=np.int64)
    for i in range(len(q)):
        fq = np.conj(np.fft.rfft(qn[i], axis=-1))            # (R, F)
        cos = np.fft.irfft(np.einsum("rf,mrf->mf", fq, fm), n=s, axis=-1)          # (M, K)
        both = np.rint(np.fft.irfft(np.conj(np.fft.rfft(qv[i].astype(np.float64))) * fmv,
                                    n=s, axis=-1))
        cnt = qv[i].sum() + nmv[:, None] - both              # |A or B| per shift
        dk = np.where(cnt > 0, (cnt - cos) / np.maximum(cnt, 1), 1.0)
        # Rounding keeps exact ties tied so the smallest shift wins.
        k = np.round(dk, 12).argmin(axis=1)
        dist[i] = np.clip(dk[np.arange(len(m)), k], 0.0, 1.0)
        shift[i] = k
    return (dist, shift) if return_shift else dist


# ---------------------------------------------------------------------------
# Orientation


def estimate_relative_orientation(a: np.ndarray, b: np.ndarray) -> float:
    """Rotation of ``b`` relative to ``a`` from circular cross-correlation along sectors.

    Inputs are (..., sectors) feature arrays, e.g. encoder spectra or raw
    Scan Context. The sector shift maximising the correlation summed over all
    leading axes is converted to radians.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"spectra shapes differ: {a.shape} vs {b.shape}")
    if not np.any(a) or not np.any(b):
        raise EstimationError("orientation estimation needs non-zero inputs")
    s = a.shape[-1]
    fa = np.fft.fft(a.reshape(-1, s), axis=-1)
    fb = np.fft.fft(b.reshape(-1, s), axis=-1)
    corr = np.real(np.fft.ifft((np.conj(fa) * fb).sum(axis=0)))
    k = int(np.argmax(corr))
    return normalize_angle(k * TWO_PI / s)


# ---------------------------------------------------------------------------
# Index and queries


@dataclass(frozen=True)
class PlaceEntry:
    session_id: str
    place_id: int
    modality: str
    pose: Pose2D


@dataclass(frozen=True)
class Match:
    entry: PlaceEntry
    distance: float
    rank: int


class _Index:
    def __init__(self, entries, features):
        self.entries = list(entries)
        self.features = features
        self._sessions = np.array([e.session_id for e in self.entries], dtype=object)
        self._places = np.array([e.place_id for e in self.entries], dtype=np.int64)
        self._modalities = np.array([e.modality for e in self.entries], dtype=object)
        self.positions = np.array([[e.pose.x, e.pose.y] for e in self.entries]).reshape(-1, 2)

    def __len__(self):
        return len(self.entries)

    def _distances(self, feats, cols=None) -> np.ndarray:
        raise NotImplementedError

    def _mask(self, session_id, modality):
        keep = self._sessions != session_id
        if modality is not None:
            keep &= self._modalities == modality
        return keep

    def _rank(self, dist: np.ndarray, keep: np.ndarray, k: int) -> np.ndarray:
        idx = np.flatnonzero(keep)
        if len(idx) == 0:
            raise QueryError("no candidates left after excluding the query session")
        # Ascending distance, ties by (session_id, place_id).
        order = sorted(idx, key=lambda j: (dist[j], self._sessions[j], self._places[j]))
        return np.array(order[:k], dtype=np.int64)

    def query(self, q, k: int = 1, session_id: str = "", modality: str | None = None) -> list[Match]:
        """``k`` nearest entries outside ``session_id`` (and optionally of one modality)."""
        if isinstance(q, Descriptor):
            session_id, feats = q.session_id, q.values
        else:
            feats = q
        dist = self._distances(np.asarray(feats)[None])[0]
        keep = self._mask(session_id, modality)
        top = self._rank(dist, keep, k)
        return [Match(self.entries[j], float(dist[j]), r + 1) for r, j in enumerate(top)]

    def top1(self, feats: np.ndarray, sessions, modality: str | None = None):
        """Vectorised rank-1 retrieval for many queries: (indices, distances)."""
        cols = (np.flatnonzero(self._modalities == modality) if modality is not None
                else np.arange(len(self)))
        dist = np.full((len(feats), len(self)), np.inf)
        if len(cols):
            dist[:, cols] = self._distances(feats, cols)
        best = np.empty(len(feats), dtype=np.int64)
        bestd = np.empty(len(feats))
        for i, sid in enumerate(sessions):
            idx = cols[self._sessions[cols] != sid]
            if len(idx) == 0:
                raise QueryError("no candidates left after excluding the query session")
            d = dist[i, idx]
            cand = idx[d == d.min()]
            if len(cand) > 1:
                cand = sorted(cand, key=lambda j: (self._sessions[j], self._places[j]))
            best[i] = cand[0]
            bestd[i] = dist[i, best[i]]
        return best, bestd


class PlaceIndex(_Index):
    """Linear-scan Euclidean index over learned descriptors."""

    def __init__(self, entries, descriptors: np.ndarray):
        super().__init__(entries, np.asarray(descriptors, dtype=np.float32))

    @classmethod
    def from_descriptors(cls, descs, poses) -> "PlaceIndex":
        entries = [PlaceEntry(d.session_id, d.place_id, d.modality, p) for d, p in zip(descs, poses)]
        return cls(entries, np.stack([d.values for d in descs]))

    def _distances(self, feats, cols=None):
        q = np.asarray(feats, dtype=np.float64)
        m = self.features if cols is None else self.features[cols]
        m = m.astype(np.float64)
        d2 = (q * q).sum(1)[:, None] + (m * m).sum(1)[None, :] - 2.0 * q @ m.T
        return np.sqrt(np.maximum(d2, 0.0))


class ScanContextIndex(_Index):
    """Index over raw Scan Context matrices using the baseline distance."""

    def __init__(self, entries, matrices: np.ndarray):
        super().__init__(entries, np.asarray(matrices, dtype=np.float32))

    def _distances(self, feats, cols=None):
        return sc_distance_matrix(feats, self.features if cols is None else self.features[cols])


def query(index: _Index, q, k: int = 1, session_id: str = "", modality: str | None = None):
    return index.query(q, k, session_id, modality)


@dataclass
class RecallResult:
    recall: float | None          # percent, None when no queries
    n_queries: int
    rank1_distances: np.ndarray = field(default_factory=lambda: np.zeros(0))
    correct: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    query_entries: list = field(default_factory=list)


def evaluate_recall(index: _Index, queries, query_entries, distance_threshold: float = 3.0,
                    pairs=("L2L", "R2R", "R2L")) -> dict[str, RecallResult]:
    """Recall@1 per modality pair.

    ``queries`` holds query features aligned with ``query_entries``. For a
    pair such as ``R2L`` the radar queries search the lidar entries of the
    index. A pair with no queries is reported with ``recall=None``.
    """
    feats = np.asarray(queries)
    qmods = np.array([e.modality for e in query_entries], dtype=object)
    out = {}
    for name in pairs:
        qm, mm = PAIRS[name]
        sel = np.flatnonzero(qmods == qm)
        if len(sel) == 0 or not np.any(index._modalities == mm):
            out[name] = RecallResult(None, 0)
            continue
        ents = [query_entries[i] for i in sel]
        best, _ = index.top1(feats[sel], [e.session_id for e in ents], modality=mm)
        qpos = np.array([[e.pose.x, e.pose.y] for e in ents])
        d = np.hypot(*(qpos - index.positions[best]).T)
        ok = d <= distance_threshold
        out[name] = RecallResult(100.0 * ok.mean(), len(sel), d, ok, ents)
    return out


# ---------------------------------------------------------------------------
# Dataset preparation and training


@dataclass(frozen=True)
class PlaceRecConfig:
    bev_size: int = 128
    bev_resolution: float = 0.5
    rings: int = 32
    sectors: int = 64
    submap_window: int = 5
    channels: tuple[int, ...] = (8, 8)
    keep: tuple[int, int] = (16, 16)
    dim: int = 128
    margin: float = 0.5
    pos_threshold: float = 3.0
    neg_threshold: float = 15.0
    epochs: int = 30
    batch_places: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    min_places: int = 20
    seed: int = 0

    def grid(self) -> GridSpec:
        return GridSpec.centered(self.bev_size, self.bev_resolution)


def session_scan_contexts(session: Session, cfg: PlaceRecConfig) -> np.ndarray:
    """(T, rings, sectors) Scan Context for every pose of a session.

    Lidar places use a submap of ``submap_window`` consecutive scans centred on
    the place; radar places use the single scan.
    """
    grid = cfg.grid()
    half = cfg.submap_window // 2
    out = np.empty((len(session), cfg.rings, cfg.sectors), dtype=np.float32)
    for i in range(len(session)):
        if session.modality == LIDAR:
            lo, hi = max(0, i - half), min(len(session), i + half + 1)
            # Keep the place pose in the middle when the window is clipped at an end.
            span = min(i - lo, hi - 1 - i)
            lo, hi = i - span, i + span + 1
            bev = accumulate_submap([session.scan(j) for j in range(lo, hi)],
                                    [session.pose(j) for j in range(lo, hi)], grid)
        else:
            bev = scan_to_bev(session.scan(i), grid)
        out[i] = make_scan_context(bev, cfg.rings, cfg.sectors).values
    return out


@dataclass
class PlaceData:
    """Scan Context matrices of several sessions over one place sequence."""

    sessions: list[str]
    modalities: list[str]
    scs: list[np.ndarray]          # per session (T, R, S)
    poses: list[np.ndarray]        # per session (T, 3)

    @classmethod
    def from_sessions(cls, sessions, cfg: PlaceRecConfig) -> "PlaceData":
        return cls([s.session_id for s in sessions], [s.modality for s in sessions],
                   [session_scan_contexts(s, cfg) for s in sessions],
                   [np.asarray(s.poses) for s in sessions])

    def entries(self, k: int) -> list[PlaceEntry]:
        return [PlaceEntry(self.sessions[k], i, self.modalities[k], Pose2D.from_array(p))
                for i, p in enumerate(self.poses[k])]

    def all_entries(self):
        ents, mats = [], []
        for k in range(len(self.sessions)):
            ents += self.entries(k)
            mats.append(self.scs[k])
        return ents, np.concatenate(mats, axis=0)


def make_encoder(cfg: PlaceRecConfig) -> ScEncoder:
    return ScEncoder(Rng(cfg.seed).split("encoder"), cfg.rings, cfg.sectors, cfg.channels,
                     cfg.keep, cfg.dim)


def _hinge_terms(desc: np.ndarray, layout, places, positions, cfg, rng):
    """Index triples (anchor, positive, negative) for every combination.

    ``layout[m]`` holds the row offsets of view A and B for modality ``m``.
    """
    n = len(places)
    d = np.linalg.norm(positions[:, None] - positions[None], axis=-1)
    a_rows, p_rows, n_rows = [], [], []
    for i in range(n):
        far = np.flatnonzero(d[i] > cfg.neg_threshold)
        if len(far) == 0:
            continue
        for ma, mp, mn in itertools.product(MODALITIES, repeat=3):
            a = layout[ma][0] + i
            p = layout[mp][1] + i
            # Hardest in-batch negative for this anchor among both views.
            cands = np.concatenate([layout[mn][0] + far, layout[mn][1] + far])
            dn = np.linalg.norm(desc[cands] - desc[a], axis=1)
            a_rows.append(a)
            p_rows.append(p)
            n_rows.append(cands[int(np.argmin(dn))])
    return np.array(a_rows), np.array(p_rows), np.array(n_rows)


def train_place_recognition(data: PlaceData, cfg: PlaceRecConfig, encoder: ScEncoder | None = None,
                            trace=None) -> tuple[ScEncoder, list[dict]]:
    """Fit the encoder with the all-combinations triplet loss.

    Returns the encoder and a per-epoch loss trace. ``trace`` (a callable)
    receives each epoch's row as it is produced.
    """
    lid = [k for k, m in enumerate(data.modalities) if m == LIDAR]
    rad = [k for k, m in enumerate(data.modalities) if m == RADAR]
    if len(lid) < 2 or len(rad) < 2:
        raise DataError("training needs at least two lidar and two radar sessions")
    n_places = min(len(data.scs[k]) for k in lid + rad)
    if n_places < cfg.min_places:
        raise DataError(f"need at least {cfg.min_places} places, got {n_places}")
    ref = data.poses[lid[0]][:n_places, :2]
    # A place is usable when every session observes it within the positive radius.
    usable = np.ones(n_places, dtype=bool)
    for k in lid + rad:
        usable &= np.hypot(*(data.poses[k][:n_places, :2] - ref).T) <= cfg.pos_threshold
    places = np.flatnonzero(usable)
    if len(places) < cfg.min_places:
        raise DataError(f"only {len(places)} places are co-located across sessions")

    enc = encoder or make_encoder(cfg)
    opt = SGD(enc.parameters(), cfg.lr, cfg.momentum)
    rng = Rng(cfg.seed).split("train-pr")
    history = []
    bsz = max(2, cfg.batch_places)
    for epoch in range(cfg.epochs):
        order = places[rng.permutation(len(places))]
        losses, active = [], []
        for s in range(0, len(order), bsz):
            batch = order[s:s + bsz]
            if len(batch) < 2:
                continue
            views = {}
            mats = []
            for m, ks in ((LIDAR, lid), (RADAR, rad)):
                pick = rng.permutation(len(ks))[:2]
                views[m] = (len(mats) * len(batch), (len(mats) + 1) * len(batch))
                mats.append(data.scs[ks[pick[0]]][batch])
                mats.append(data.scs[ks[pick[1]]][batch])
            x = np.concatenate(mats, axis=0)
            desc = enc(x)
            ai, pi, ni = _hinge_terms(desc.data, views, batch, ref[batch], cfg, rng)
            if len(ai) == 0:
                continue
            loss = triplet_loss_tensor(desc[ai], desc[pi], desc[ni], cfg.margin)
            opt.zero_grad()
            loss.backward()
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite triplet loss at epoch {epoch + 1}")
            opt.step()
            losses.append(float(loss.data))
            d = desc.data.astype(np.float64)
            gap = (cfg.margin + np.linalg.norm(d[ai] - d[pi], axis=1)
                   - np.linalg.norm(d[ai] - d[ni], axis=1))
            active.append(float(np.mean(gap > 0)))
        row = {"epoch": epoch + 1, "loss": float(np.mean(losses)) if losses else 0.0,
               "active_fraction": float(np.mean(active)) if active else 0.0}
        history.append(row)
        log.info("train-pr epoch %d loss %.4f", row["epoch"], row["loss"])
        if trace:
            trace(row)
    return enc, history
