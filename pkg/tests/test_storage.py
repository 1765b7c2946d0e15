import json

import numpy as np
import pytest

from hetloc import storage
from hetloc.core import Pose2D, Rng
from hetloc.errors import ChecksumError, DataError, MissingFileError, VersionError
from hetloc.nn.layers import ScEncoder, UNet3
from hetloc.placerec import PlaceEntry, PlaceIndex
from hetloc.simworld import MultiSessionParams, default_lidar, default_radar, simulate_multisession


@pytest.fixture(scope="module")
def sessions():
    p = MultiSessionParams(length=6, lidar=default_lidar(beams=90), radar=default_radar(beams=16, range_bins=32))
    return simulate_multisession(p)[2]


def _equal(a, b):
    assert [s.session_id for s in a] == [s.session_id for s in b]
    for x, y in zip(a, b):
        assert x.modality == y.modality and x.sensor == y.sensor
        assert np.array_equal(x.poses, y.poses)
        assert np.array_equal(x.odometry, y.odometry)
        assert np.array_equal(x.scan_data, y.scan_data)
        assert x.scan_data.dtype == y.scan_data.dtype


def test_dataset_round_trip(tmp_path, sessions):
    storage.save_dataset(tmp_path / "d", sessions, config={"k": 1})
    _equal(storage.load_dataset(tmp_path / "d"), sessions)
    m = storage.dataset_manifest(tmp_path / "d")
    assert m["session_ids"] == [s.session_id for s in sessions] and m["config"] == {"k": 1}


def test_dataset_save_is_byte_stable(tmp_path, sessions):
    storage.save_dataset(tmp_path / "a", sessions)
    storage.save_dataset(tmp_path / "b", sessions)
    assert storage.file_digest(tmp_path / "a") == storage.file_digest(tmp_path / "b")


def test_truncated_file_raises_checksum_error(tmp_path, sessions):
    root = storage.save_dataset(tmp_path / "d", sessions)
    f = root / f"{sessions[0].session_id}_scans.bin"
    f.write_bytes(f.read_bytes()[:-10])
    with pytest.raises(ChecksumError):
        storage.load_dataset(root)


def test_flipped_byte_raises_checksum_error(tmp_path, sessions):
    root = storage.save_dataset(tmp_path / "d", sessions)
    f = root / f"{sessions[-1].session_id}_poses.bin"
    raw = bytearray(f.read_bytes())
    raw[3] ^= 0xFF
    f.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        storage.load_dataset(root)


def test_unknown_version_raises_version_error(tmp_path, sessions):
    root = storage.save_dataset(tmp_path / "d", sessions)
    m = json.loads((root / "manifest.json").read_text())
    m["version"] = 99
    (root / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(VersionError):
        storage.load_dataset(root)


def test_missing_pieces(tmp_path, sessions):
    with pytest.raises(MissingFileError):
        storage.load_dataset(tmp_path / "nothing")
    root = storage.save_dataset(tmp_path / "d", sessions)
    (root / f"{sessions[0].session_id}_odometry.bin").unlink()
    with pytest.raises(MissingFileError):
        storage.load_dataset(root)
    with pytest.raises(DataError):
        storage.load_checkpoint(storage.save_dataset(tmp_path / "e", sessions))


@pytest.mark.parametrize("make", [
    lambda: UNet3(Rng(3).split("unet"), (4, 8, 8), 2),
    lambda: ScEncoder(Rng(3).split("encoder"), 16, 32, (4, 8), (4, 4), 16),
])
def test_checkpoint_round_trip(tmp_path, make):
    net = make()
    storage.save_checkpoint(tmp_path / "c", net, seed=3, steps=7, extra={"note": "x"})
    back, m = storage.load_checkpoint(tmp_path / "c")
    assert type(back) is type(net)
    assert back.checksum() == net.checksum() == m["checksum"]
    assert m["seed"] == 3 and m["steps"] == 7
    sa, sb = dict(net.named_parameters()), dict(back.named_parameters())
    assert all(np.array_equal(sa[k].data, sb[k].data) for k in sa)


def test_index_round_trip_and_damage(tmp_path):
    rng = Rng(5)
    entries = [PlaceEntry(f"s{i % 2}", i, "lidar" if i % 3 else "radar",
                          Pose2D(rng.uniform(-9, 9), rng.uniform(-9, 9), rng.uniform(-3, 3)))
               for i in range(12)]
    idx = PlaceIndex(entries, rng.normal(size=(12, 8)).astype(np.float32))
    root = storage.save_index(tmp_path / "i", idx)
    back = storage.load_index(root)
    assert back.entries == idx.entries
    assert np.array_equal(back.features, idx.features)
    csv_path = root / "poses.csv"
    csv_path.write_text(csv_path.read_text().replace("s1", "s9", 1))
    with pytest.raises(ChecksumError):
        storage.load_index(root)
