# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Tracking a radar on a lidar map
#
# Each step, the filter predicts the pose from odometry, crops the lidar map
# around the prediction, and compares it with the current radar BEV over a
# grid of candidate offsets. Both images pass through the same U-Net; the
# similarity is minus the RMS feature difference. A softmax over each axis
# turns the scores into a distribution whose mean is the measured offset
# and whose spread sets the measurement covariance of an extended Kalman
# filter.

# %%
import math

import numpy as np

from hetloc.config import EXPERIMENT_RADAR, EXPERIMENT_WORLD
from hetloc.core import Pose2D, PoseOffset, compose, relative_offset
from hetloc.simworld import (
    MultiSessionParams,
    OdometryNoise,
    WorldParams,
    dead_reckoning,
    default_radar,
    simulate_multisession,
)
from hetloc.tracking import (
    OffsetGrid,
    TrackConfig,
    build_lidar_map,
    build_training_samples,
    evaluate_rmse,
    offset_distribution,
    track,
    train_tracking,
    window_to_offset,
)

grid = OffsetGrid.default()
print("offset grid", grid.shape, "x/y step", grid.dx_values[1] - grid.dx_values[0], "m")

# %% [markdown]
# Offsets are expressed in the candidate window's frame: the true pose is
# the prediction, rotated by the angle bin, then shifted by the x/y bin.

# %%
pred = Pose2D(10.0, 5.0, 0.4)
w = PoseOffset(1.0, -0.5, math.radians(4))
true = compose(compose(pred, PoseOffset(0, 0, w.dtheta)), PoseOffset(w.dx, w.dy, 0))
print(relative_offset(pred, true), window_to_offset(w))

# %% [markdown]
# Score volumes become per-axis distributions by max-marginalising the
# other two axes.

# %%
scores = -np.ones(grid.shape)
scores[8, 5, 6] = -0.5
dist, expected = offset_distribution(scores, grid, temperature=0.1)
print("expected window offset:", expected, "entropy:", np.round(dist.entropy(), 3))

# %% [markdown]
# A survey with noisy odometry, and a lidar map built from one session.

# %%
p = MultiSessionParams(world_seed=1, trajectory_seed=1, length=60, step=2.0,
                       world=WorldParams(**EXPERIMENT_WORLD), radar=default_radar(**EXPERIMENT_RADAR),
                       odom_noise=OdometryNoise(0.1, math.radians(0.5)))
_, _, sessions = simulate_multisession(p)
lidar = [s for s in sessions if s.modality == "lidar"]
radar = [s for s in sessions if s.modality == "radar"][0]
map_bev = build_lidar_map(lidar[:1])
print("map", map_bev.pixels.shape)

# %% [markdown]
# The filter can be run with exact measurements (it then follows the ground
# truth) or with none (it reproduces dead reckoning). These two modes bound
# what a learned measurement can do.

# %%
gt_run = track(radar, map_bev, None, TrackConfig(measurement="ground_truth"))
dr_run = track(radar, map_bev, None, TrackConfig(measurement="none"))
print("exact measurements:", evaluate_rmse(gt_run.poses, radar.poses))
print("no measurements:   ", evaluate_rmse(dr_run.poses, radar.poses))
print("dead reckoning:    ", evaluate_rmse(dead_reckoning(radar), radar.poses))

# %% [markdown]
# A short training run on samples cut from the survey. The acceptance tests
# train on a separate world for longer and evaluate on 500 steps.

# %%
cfg = TrackConfig(bev_size=64, train_window=64, samples=40, epochs=2)
samples = build_training_samples(map_bev, radar, cfg)
unet, history = train_tracking(samples, cfg)
print([round(h["loss"], 3) for h in history])

run = track(radar, map_bev, unet, cfg)
print("network measurements:", evaluate_rmse(run.poses, radar.poses))
