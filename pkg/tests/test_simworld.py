import math

import numpy as np
import pytest

from hetloc.core import Pose2D, Rng, normalize_angle
from hetloc.errors import ConfigError, GenerationError, UsageError
from hetloc.simworld import (
    MultiSessionParams,
    OdometryNoise,
    SensorParams,
    World,
    WorldParams,
    dead_reckoning,
    default_lidar,
    default_radar,
    generate_trajectory,
    generate_world,
    make_session,
    render_lidar_scan,
    render_radar_scan,
    simulate_multisession,
)

EMPTY = World(np.zeros((0, 4)), np.zeros((0, 4)), (0.0, 0.0, 100.0, 100.0), 0)


def wall_world(x=5.0):
    """One wall perpendicular to the x axis, ``x`` metres ahead of the origin."""
    return World(np.array([[x, -10.0, x, 10.0]]), np.zeros((0, 4)), (-50.0, -50.0, 50.0, 50.0), 0)


def test_world_generation_is_deterministic_and_seed_dependent():
    a, b = generate_world(7), generate_world(7)
    assert a == b
    assert generate_world(8) != a
    p = WorldParams()
    assert p.min_obstacles <= a.n_obstacles <= p.max_obstacles


def test_world_obstacles_inside_bounds():
    w = generate_world(3, WorldParams(bounds=(0, 0, 60, 40)))
    seg = w.segments()
    assert seg[:, [0, 2]].min() >= 0 and seg[:, [0, 2]].max() <= 60
    assert seg[:, [1, 3]].min() >= 0 and seg[:, [1, 3]].max() <= 40


def test_zero_obstacles_and_invalid_params():
    w = generate_world(1, WorldParams(min_obstacles=0, max_obstacles=0))
    assert w.n_obstacles == 0
    with pytest.raises(ConfigError):
        generate_world(1, WorldParams(min_obstacles=5, max_obstacles=2))
    with pytest.raises(ConfigError):
        generate_world(1, WorldParams(bounds=(0, 0, 0, 10)))


def test_sensor_params_validation():
    with pytest.raises(ConfigError):
        default_lidar(beams=4)
    with pytest.raises(ConfigError):
        default_radar(dropout_prob=1.5)
    with pytest.raises(ConfigError):
        default_radar(max_range=0.0)
    p = default_radar(clutter_gain=0.3)
    assert SensorParams.from_dict(p.to_dict()) == p


def test_lidar_empty_world_reports_max_range():
    scan = render_lidar_scan(EMPTY, Pose2D(50, 50, 0), default_lidar().noiseless(), Rng(0))
    assert np.all(scan.data == 50.0)


def test_lidar_wall_ahead():
    p = default_lidar().noiseless()
    scan = render_lidar_scan(wall_world(5.0), Pose2D(), p, Rng(0))
    assert scan.data[0] == pytest.approx(5.0, abs=1e-5)
    assert np.all((scan.data > 0) & (scan.data <= p.max_range))


def _brute_force_range(segments, origin, angle, max_range):
    """Smallest positive ray parameter over all segments via explicit 2x2 solves."""
    best = math.inf
    d = np.array([math.cos(angle), math.sin(angle)])
    for x1, y1, x2, y2 in segments:
        e = np.array([x2 - x1, y2 - y1])
        m = np.array([[d[0], -e[0]], [d[1], -e[1]]])
        if abs(np.linalg.det(m)) < 1e-12:
            continue
        t, u = np.linalg.solve(m, np.array([x1, y1]) - origin)
        if t > 1e-9 and -1e-12 <= u <= 1 + 1e-12:
            best = min(best, t)
    return best if best <= max_range else max_range


def test_lidar_matches_ray_casting_oracle_on_100_poses():
    world = generate_world(5, WorldParams(min_obstacles=40, max_obstacles=40))
    params = default_lidar(beams=24).noiseless()
    rng = Rng(9)
    seg = world.segments()
    for _ in range(100):
        pose = Pose2D(rng.uniform(10, 190), rng.uniform(10, 190), rng.uniform(-math.pi, math.pi))
        scan = render_lidar_scan(world, pose, params, Rng(0))
        for b, a in enumerate(params.nominal_angles()):
            ref = _brute_force_range(seg, np.array([pose.x, pose.y]), a + pose.theta, params.max_range)
            assert abs(float(scan.data[b]) - ref) < 1e-4   # float32 storage of ranges up to 50 m


def test_radar_empty_world_is_zero_without_speckle():
    p = default_radar().noiseless()
    scan = render_radar_scan(EMPTY, Pose2D(50, 50, 0), p, Rng(0))
    assert np.all(scan.data == 0.0)


def test_radar_peak_at_wall_range():
    p = default_radar().noiseless()
    scan = render_radar_scan(wall_world(5.0), Pose2D(), p, Rng(0))
    edges = np.linspace(0, p.max_range, p.range_bins + 1)
    k = int(np.argmax(scan.data[0]))
    assert edges[k] <= 5.0 <= edges[k + 1]


def test_radar_intensity_bounded_and_speckle_small():
    world = generate_world(2)
    pose = Pose2D(100, 100, 0.3)
    clean = render_radar_scan(world, pose, default_radar().noiseless(), Rng(0)).data
    noisy = default_radar().noiseless()
    noisy = SensorParams.from_dict({**noisy.to_dict(), "speckle_sigma": 0.05})
    diffs = []
    for s in range(50):
        d = render_radar_scan(world, pose, noisy, Rng(s)).data
        assert d.min() >= 0.0 and d.max() <= 1.0
        diffs.append(np.abs(d - clean).mean())
    assert np.mean(diffs) <= 0.1
    loud = default_radar(speckle_sigma=2.0, clutter_gain=5.0)
    d = render_radar_scan(world, pose, loud, Rng(1)).data
    assert d.min() >= 0.0 and d.max() <= 1.0


def test_render_rejects_wrong_modality():
    with pytest.raises(UsageError):
        render_lidar_scan(EMPTY, Pose2D(), default_radar(), Rng(0))
    with pytest.raises(UsageError):
        render_radar_scan(EMPTY, Pose2D(), default_lidar(), Rng(0))


def test_trajectory_properties():
    world = generate_world(4)
    t = generate_trajectory(world, 2, 2, 3.0)
    assert math.hypot(t[1].x - t[0].x, t[1].y - t[0].y) == pytest.approx(3.0)
    traj = generate_trajectory(world, 2, 80, 3.0)
    assert traj == generate_trajectory(world, 2, 80, 3.0)
    pts = np.array([[p.x, p.y] for p in traj])
    x0, y0, x1, y1 = world.bounds
    assert np.all((pts[:, 0] > x0) & (pts[:, 0] < x1) & (pts[:, 1] > y0) & (pts[:, 1] < y1))
    assert np.all(world.clearance(pts) > 0)
    steps = np.diff(pts, axis=0)
    heads = np.array([p.theta for p in traj[:-1]])
    assert np.allclose(np.arctan2(steps[:, 1], steps[:, 0]), heads)


def test_trajectory_errors():
    world = generate_world(4)
    with pytest.raises(ConfigError):
        generate_trajectory(world, 0, 1, 1.0)
    with pytest.raises(ConfigError):
        generate_trajectory(world, 0, 5, 0.0)
    packed = World(np.zeros((0, 4)), np.array([[0, 0, 100, 100]], float), (0, 0, 100, 100), 0)
    with pytest.raises(GenerationError):
        generate_trajectory(packed, 0, 5, 1.0, max_retries=5)


def test_session_odometry():
    world = generate_world(4)
    traj = generate_trajectory(world, 1, 30, 2.0)
    s = make_session(world, traj, default_lidar(beams=16), OdometryNoise(), Rng(0))
    assert len(s) == 30 and len(s.odometry) == 29 and len(s.scan_data) == 30
    dr = dead_reckoning(s)
    assert np.abs(dr[:, :2] - s.poses[:, :2]).max() < 1e-9
    assert np.abs(normalize_angle(dr[:, 2] - s.poses[:, 2])).max() < 1e-9
    noisy = make_session(world, traj, default_lidar(beams=16), OdometryNoise(0.1, 0.01), Rng(0))
    drift = np.hypot(*(dead_reckoning(noisy)[-1, :2] - noisy.poses[-1, :2]))
    assert drift > 0
    with pytest.raises(UsageError):
        make_session(world, [], default_lidar(), OdometryNoise(), Rng(0))


def test_multisession_lateral_spread():
    p = MultiSessionParams(length=40, step=3.0, lidar=default_lidar(beams=16),
                           radar=default_radar(beams=16, range_bins=32))
    world, base, sessions = simulate_multisession(p)
    assert [s.session_id for s in sessions] == ["lidar0", "lidar1", "radar0", "radar1"]
    b = np.array([q.as_array() for q in base])
    for s in sessions:
        assert np.hypot(*(s.poses[:, :2] - b[:, :2]).T).max() <= p.max_lateral + 1e-9
    again = simulate_multisession(p)[2]
    assert all(np.array_equal(a.scan_data, c.scan_data) for a, c in zip(sessions, again))
