# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Bird's-eye views and Scan Context
#
# Both sensors are turned into the same two pictures. A BEV image is a
# metric top-down raster centred on the sensor. A Scan Context is a polar
# ring-by-sector summary of that raster, so a rotation of the sensor is a
# circular shift of its columns.

# %%
import numpy as np

from hetloc.core import GridSpec, Pose2D, Rng
from hetloc.representation import make_scan_context, rotate_image, scan_to_bev
from hetloc.simworld import default_lidar, default_radar, generate_world, render_scan

world = generate_world(3)
pose = Pose2D(90.0, 110.0, 0.0)
grid = GridSpec.centered(128, 0.5)

bev_l = scan_to_bev(render_scan(world, pose, default_lidar(), Rng(1)), grid)
bev_r = scan_to_bev(render_scan(world, pose, default_radar(), Rng(1)), grid)
print("lidar ink", float(bev_l.pixels.sum()), "radar ink", round(float(bev_r.pixels.sum()), 1))

# %% [markdown]
# Lidar paints thin edges; radar paints blurred, cluttered blobs. That
# difference is the heterogeneity gap the learned components must bridge.

# %%
sc_l = make_scan_context(bev_l, 32, 64)
sc_r = make_scan_context(bev_r, 32, 64)
print(sc_l.values.shape, "occupied cells:", int((sc_l.values > 0).sum()), "vs", int((sc_r.values > 0).sum()))

# %% [markdown]
# Turning the sensor by a whole number of sectors shifts the Scan Context
# columns by the same amount.

# %%
k = 9
clean = default_lidar(range_noise_sigma=0.0, dropout_prob=0.0, angular_jitter_sigma=0.0)
turned = Pose2D(pose.x, pose.y, pose.theta + k * 2 * np.pi / 64)


def clean_sc(p):
    return make_scan_context(scan_to_bev(render_scan(world, p, clean, Rng(1)), grid), 32, 64)


sc_0, sc_t = clean_sc(pose), clean_sc(turned)
best = min(range(64), key=lambda s: np.abs(np.roll(sc_t.values, s, axis=1) - sc_0.values).sum())
print("best column shift:", best, "(expected", k, ")")

# %% [markdown]
# `rotate_image` is the bilinear resampler used to build rotated map
# candidates for pose tracking.

# %%
img = np.zeros((33, 33), np.float32)
img[16, 20:30] = 1.0
rot = rotate_image(img, np.pi / 2)
print("ink before and after a quarter turn:", float(img.sum()), round(float(rot.sum()), 3))
