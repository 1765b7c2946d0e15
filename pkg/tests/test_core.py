import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hetloc.core import (
    GridSpec,
    Pose2D,
    PoseOffset,
    Rng,
    compose,
    compose_arrays,
    integrate_odometry,
    inverse,
    normalize_angle,
    relative_arrays,
    relative_offset,
    transform_points,
)
from hetloc.errors import ConfigError

coords = st.floats(-1e3, 1e3, allow_nan=False)
angles = st.floats(-20.0, 20.0, allow_nan=False)
poses = st.builds(Pose2D, coords, coords, angles)


def close(a: Pose2D, b: Pose2D, tol=1e-9):
    return (abs(a.x - b.x) <= tol and abs(a.y - b.y) <= tol
            and abs(normalize_angle(a.theta - b.theta)) <= tol)


def test_compose_identity_and_quarter_turn():
    p = Pose2D(3.0, -2.0, 0.7)
    assert compose(Pose2D(), p) == p
    q = compose(Pose2D(1.0, 0.0, math.pi / 2), Pose2D(1.0, 0.0, 0.0))
    assert close(q, Pose2D(1.0, 1.0, math.pi / 2), 1e-12)


def test_compose_accepts_offsets():
    a = Pose2D(1.0, 2.0, 0.3)
    o = PoseOffset(0.5, -0.2, 0.1)
    assert compose(a, o) == compose(a, o.as_pose())


@given(poses)
def test_inverse_gives_identity(p):
    assert close(compose(p, inverse(p)), Pose2D(), 1e-9)


@given(poses, poses, poses)
def test_composition_is_associative(a, b, c):
    assert close(compose(compose(a, b), c), compose(a, compose(b, c)), 1e-9)


@given(poses, poses)
def test_relative_offset_round_trip(a, b):
    o = relative_offset(a, b)
    assert close(compose(a, o.as_pose()), b, 1e-9)


def test_relative_offset_examples():
    p = Pose2D(4.0, 5.0, -1.0)
    assert relative_offset(p, p) == PoseOffset(0.0, 0.0, 0.0)
    o = relative_offset(Pose2D(), Pose2D(2.0, -1.0, 0.3))
    assert np.allclose(o.as_array(), [2.0, -1.0, 0.3], atol=1e-12)


def test_relative_offset_thousand_random_pairs():
    rng = Rng(11)
    a = np.column_stack([rng.uniform(-50, 50, (1000, 2)), rng.uniform(-4, 4, 1000)])
    b = np.column_stack([rng.uniform(-50, 50, (1000, 2)), rng.uniform(-4, 4, 1000)])
    rec = compose_arrays(a, relative_arrays(a, b))
    assert np.abs(rec[:, :2] - b[:, :2]).max() < 1e-9
    assert np.abs(normalize_angle(rec[:, 2] - b[:, 2])).max() < 1e-9


@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_normalize_angle_range_and_idempotence(t):
    n = normalize_angle(t)
    assert -math.pi < n <= math.pi
    assert normalize_angle(n) == n


def test_normalize_angle_boundaries():
    assert normalize_angle(math.pi) == math.pi
    assert normalize_angle(-math.pi) == math.pi
    assert Pose2D(0, 0, 3 * math.pi).theta == pytest.approx(math.pi)
    assert PoseOffset(0, 0, -7.0).dtheta == pytest.approx(normalize_angle(-7.0))


def test_integrate_odometry_matches_compose_chain():
    rng = Rng(3)
    offs = np.column_stack([rng.uniform(0, 2, (20, 2)), rng.uniform(-0.3, 0.3, 20)])
    traj = integrate_odometry(Pose2D(1, 2, 0.5), offs)
    p = Pose2D(1, 2, 0.5)
    for i, o in enumerate(offs):
        p = compose(p, PoseOffset(*o))
        assert close(Pose2D(*traj[i + 1]), p, 1e-9)


def test_transform_points():
    pts = transform_points(Pose2D(1.0, 0.0, math.pi / 2), np.array([[1.0, 0.0], [0.0, 2.0]]))
    assert np.allclose(pts, [[1.0, 1.0], [-1.0, 0.0]])


def test_gridspec_validation_and_geometry():
    with pytest.raises(ConfigError):
        GridSpec(0, 4, 0.5)
    with pytest.raises(ConfigError):
        GridSpec(4, 4, 0.0)
    g = GridSpec.centered(128, 0.5)
    assert g.shape == (128, 128)
    c = g.cell_centers()
    assert np.allclose(c[0, 0], [-31.75, -31.75])
    assert np.allclose(g.world_to_cell(np.array([[0.0, 0.0]])), [[63.5, 63.5]])
    assert GridSpec.from_dict(g.to_dict()) == g


SPLITMIX_SEED0 = [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4]
GOLDEN_SEED42 = [
    0xBDD732262FEB6E95, 0x28EFE333B266F103, 0x47526757130F9F52, 0x581CE1FF0E4AE394,
    0x09BC585A244823F2, 0xDE4431FA3C80DB06, 0x37E9671C45376D5D, 0xCCF635EE9E9E2FA4,
    0x5705B8770B3D7DD5, 0x9E54D738297F77AE, 0x3474724A775B19BF, 0x7E348A0E451650BE,
    0x836DED897F3E46E6, 0x851F977347ED6DB7, 0xAA47E31C02E78EDC, 0x341452C54D7C33F2,
]


def _splitmix_reference(seed, n):
    """Plain-integer SplitMix64, written independently of the library."""
    mask = (1 << 64) - 1
    out, state = [], seed
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & mask
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out.append(z ^ (z >> 31))
    return out


def test_rng_golden_values():
    assert [int(v) for v in Rng(0).bits(2)] == SPLITMIX_SEED0
    assert [int(v) for v in Rng(42).bits(16)] == GOLDEN_SEED42
    assert [int(v) for v in Rng(12345).bits(16)] == _splitmix_reference(12345, 16)


def test_rng_streams_and_splits_are_deterministic():
    a, b = Rng(7), Rng(7)
    assert np.array_equal(a.normal(size=100), b.normal(size=100))
    assert np.array_equal(a.split("x").uniform(size=5), Rng(7).split("x").uniform(size=5))
    assert not np.array_equal(Rng(7).split("x").uniform(size=5), Rng(7).split("y").uniform(size=5))
    # Children do not depend on how far the parent has advanced.
    c = Rng(7)
    c.uniform(size=10)
    assert np.array_equal(c.split(3).bits(4), Rng(7).split(3).bits(4))


def test_rng_distributions():
    r = Rng(5)
    u = r.uniform(2.0, 3.0, size=20000)
    assert u.min() >= 2.0 and u.max() < 3.0
    z = r.normal(1.0, 2.0, size=20000)
    assert abs(z.mean() - 1.0) < 0.05 and abs(z.std() - 2.0) < 0.05
    k = r.integers(0, 5, size=5000)
    assert set(np.unique(k)) == {0, 1, 2, 3, 4}
    assert sorted(r.permutation(10)) == list(range(10))
    assert isinstance(r.uniform(), float)
