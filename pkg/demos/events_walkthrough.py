"""
From moving shapes to voxel grids
=================================

Render a toy scene, simulate events with the contrast-threshold model,
split them around the middle frame and bin both halves into voxel grids.
Writes events_walkthrough.png next to this script.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from eventdiff.events import scer, split_events, voxelize
from eventdiff.synth import random_scenes, render_sequence, simulate_events

# one 64x64 scene, rendered 8x faster than its frame rate for the simulator
cfg = random_scenes(1, (64, 64), seed=3, duration=0.375)[0]
times = np.arange(8 * (cfg.n_frames - 1) + 1) / (8 * cfg.frame_rate)
frames = render_sequence(cfg, times)
stream = simulate_events(frames, contrast_threshold=0.2, times=times)
print(f"{cfg.n_frames} frames, {len(stream)} events, "
      f"{np.mean(stream.polarity > 0):.0%} positive")

# the middle frame is the interpolation target
t_mid = 0.5 * (stream.t_start + stream.t_end)
before, after = split_events(stream, t_mid)
print(f"split at {t_mid:.4f} s: {len(before)} before, {len(after)} after (polarity reversed)")

vox0 = voxelize(before, 8, 64, 64)
vox1 = voxelize(after, 8, 64, 64)
assert vox0.data.sum() == len(before) and vox1.data.sum() == len(after)

# the deblurring input: signed counts integrated outward from the exposure centre
acc = scer(stream, 9, 64, 64).signed()

fig, ax = plt.subplots(1, 4, figsize=(12, 3))
ax[0].imshow(frames[0, 0], cmap="gray", vmin=0, vmax=1)
ax[0].set_title("first frame")
ax[1].imshow(vox0.signed().sum(0), cmap="bwr")
ax[1].set_title("events before t")
ax[2].imshow(vox1.signed().sum(0), cmap="bwr")
ax[2].set_title("events after t (reversed)")
ax[3].imshow(acc[-1], cmap="bwr")
ax[3].set_title("SCER, outermost slice")
for a in ax:
    a.axis("off")
fig.tight_layout()
out = Path(__file__).with_suffix(".png")
fig.savefig(out, dpi=80)
print("wrote", out)
