"""On-disk formats: datasets, network checkpoints and place indices.

Every artifact is a directory holding ``manifest.json`` plus one flat,
row-major, little-endian binary file per array. The manifest records each
array's dtype, shape and CRC-32. Loading verifies all checksums before any
object is built, so a damaged file never yields a partial result.
"""

from __future__ import annotations

import csv
import json
import os
import zlib
from pathlib import Path

import numpy as np

from .core import Pose2D, Rng
from .errors import ChecksumError, DataError, MissingFileError, UsageError, VersionError
from .nn.layers import Module, ScEncoder, UNet3
from .placerec import PlaceEntry, PlaceIndex
from .simworld import SensorParams, Session

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
_DTYPES = {"f4": "<f4", "f8": "<f8"}


def _crc(buf: bytes) -> str:
    return f"{zlib.crc32(buf) & 0xFFFFFFFF:08x}"


def _write_blob(root: Path, name: str, arr: np.ndarray, code: str) -> dict:
    data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    (root / name).write_bytes(data)
    return {"file": name, "dtype": code, "shape": list(np.shape(arr)), "crc32": _crc(data)}


def _read_blob(root: Path, meta: dict) -> np.ndarray:
    path = root / meta["file"]
    if not path.is_file():
        raise MissingFileError(f"missing array file {path}")
    data = path.read_bytes()
    if _crc(data) != meta["crc32"]:
        raise ChecksumError(f"checksum mismatch in {path}")
    dt = np.dtype(_DTYPES.get(meta["dtype"], "<f4"))
    n = int(np.prod(meta["shape"], dtype=np.int64))
    if len(data) != n * dt.itemsize:
        raise ChecksumError(f"{path} has {len(data)} bytes, expected {n * dt.itemsize}")
    return np.frombuffer(data, dtype=dt).reshape(meta["shape"]).copy()


def _write_manifest(root: Path, manifest: dict):
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _read_manifest(root: Path, kind: str) -> dict:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise MissingFileError(f"no {MANIFEST} in {root}")
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ChecksumError(f"unreadable manifest {path}: {exc}") from exc
    if m.get("version") != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {m.get('version')!r}, expected {FORMAT_VERSION}")
    if m.get("kind") != kind:
        raise DataError(f"{path} holds a {m.get('kind')!r}, expected a {kind!r}")
    return m


def _prepare(path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    return root


# ---------------------------------------------------------------------------
# Datasets


def save_dataset(path, sessions, config: dict | None = None, extra: dict | None = None) -> Path:
    """Write sessions to ``path``. Poses and odometry are float64, scans float32."""
    root = _prepare(path)
    ids = [s.session_id for s in sessions]
    if len(set(ids)) != len(ids):
        raise UsageError(f"duplicate session ids: {ids}")
    entries = []
    for s in sessions:
        entries.append({
            "id": s.session_id,
            "modality": s.modality,
            "sensor": s.sensor.to_dict(),
            "poses": _write_blob(root, f"{s.session_id}_poses.bin", s.poses, "f8"),
            "odometry": _write_blob(root, f"{s.session_id}_odometry.bin", s.odometry, "f8"),
            "scans": _write_blob(root, f"{s.session_id}_scans.bin", s.scan_data, "f4"),
        })
    manifest = {"version": FORMAT_VERSION, "kind": "dataset", "session_ids": ids,
                "sessions": entries, "config": config or {}}
    if extra:
        manifest.update(extra)
    _write_manifest(root, manifest)
    return root


def load_dataset(path) -> list[Session]:
    root = Path(path)
    m = _read_manifest(root, "dataset")
    arrays = [{k: _read_blob(root, e[k]) for k in ("poses", "odometry", "scans")}
              for e in m["sessions"]]
    out = []
    for e, a in zip(m["sessions"], arrays):
        sensor = SensorParams.from_dict(e["sensor"])
        out.append(Session(e["id"], e["modality"], a["poses"], a["odometry"],
                           a["scans"].astype(np.float32), sensor))
    return out


def dataset_manifest(path) -> dict:
    return _read_manifest(Path(path), "dataset")


# ---------------------------------------------------------------------------
# Checkpoints


def build_network(config: dict) -> Module:
    kind = config.get("kind")
    rng = Rng(int(config.get("seed", 0)))
    if kind == "unet3":
        return UNet3(rng.split("unet"), tuple(config["channels"]), config["out_channels"],
                     config.get("in_channels", 1))
    if kind == "sc_encoder":
        return ScEncoder(rng.split("encoder"), config["rings"], config["sectors"],
                         tuple(config["channels"]), tuple(config["keep"]), config["dim"])
    raise DataError(f"unknown network kind {kind!r}")


def save_checkpoint(path, net: Module, seed: int, steps: int, extra: dict | None = None) -> Path:
    root = _prepare(path)
    blobs = {}
    for i, (name, p) in enumerate(sorted(net.named_parameters())):
        blobs[name] = _write_blob(root, f"param_{i:03d}.bin", p.data, "f4")
    manifest = {"version": FORMAT_VERSION, "kind": "checkpoint",
                "network": dict(net.config(), seed=seed), "seed": seed, "steps": steps,
                "parameters": blobs, "checksum": net.checksum()}
    if extra:
        manifest["extra"] = extra
    _write_manifest(root, manifest)
    return root


def load_checkpoint(path) -> tuple[Module, dict]:
    root = Path(path)
    m = _read_manifest(root, "checkpoint")
    state = {k: _read_blob(root, meta) for k, meta in m["parameters"].items()}
    net = build_network(m["network"])
    net.load_state_dict(state)
    return net, m


# ---------------------------------------------------------------------------
# Place index


def save_index(path, index: PlaceIndex, extra: dict | None = None) -> Path:
    root = _prepare(path)
    blob = _write_blob(root, "descriptors.bin", index.features, "f4")
    with open(root / "poses.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["session_id", "place_id", "x", "y", "theta", "modality"])
        for e in index.entries:
            w.writerow([e.session_id, e.place_id, repr(e.pose.x), repr(e.pose.y),
                        repr(e.pose.theta), e.modality])
    with open(root / "poses.csv", "rb") as fh:
        pose_crc = _crc(fh.read())
    manifest = {"version": FORMAT_VERSION, "kind": "index", "descriptors": blob,
                "pose_table": {"file": "poses.csv", "crc32": pose_crc, "rows": len(index.entries)},
                "extra": extra or {}}
    _write_manifest(root, manifest)
    return root


def load_index(path) -> PlaceIndex:
    root = Path(path)
    m = _read_manifest(root, "index")
    feats = _read_blob(root, m["descriptors"])
    table = root / m["pose_table"]["file"]
    if not table.is_file():
        raise MissingFileError(f"missing pose table {table}")
    raw = table.read_bytes()
    if _crc(raw) != m["pose_table"]["crc32"]:
        raise ChecksumError(f"checksum mismatch in {table}")
    rows = list(csv.DictReader(raw.decode().splitlines()))
    entries = [PlaceEntry(r["session_id"], int(r["place_id"]), r["modality"],
                          Pose2D(float(r["x"]), float(r["y"]), float(r["theta"]))) for r in rows]
    if len(entries) != len(feats):
        raise DataError(f"pose table has {len(entries)} rows, descriptors {len(feats)}")
    return PlaceIndex(entries, feats)


def file_digest(path) -> str:
    """CRC-32 over a file, or over every file of a directory in sorted order."""
    p = Path(path)
    files = sorted(x for x in p.rglob("*") if x.is_file()) if p.is_dir() else [p]
    crc = 0
    for f in files:
        crc = zlib.crc32(os.fsencode(f.relative_to(p) if p.is_dir() else f.name), crc)
        crc = zlib.crc32(f.read_bytes(), crc)
    return f"{crc & 0xFFFFFFFF:08x}"
