# %% [markdown]
# Pseudo-stereo from a single view
#
# Render one synthetic stereo clip, drop its right view, rebuild it from the
# left image and depth, and compare with the real right view.

# %%
import numpy as np

from lacoste.config import SceneConfig
from lacoste.geometry import DepthField, synth_right_view
from lacoste.synthdata import generate_clip

clip = generate_clip(SceneConfig(), 0)
print(clip.name, clip.left.shape, "stereo" if clip.is_stereo else "mono")

# %%
# The renderer's disparity is baseline*focal / depth, so the scale that maps
# normalized depth back to pixels is baseline*focal / z_max.
for t in range(clip.length):
    depth = DepthField(clip.depth[t])
    donor = clip.left[t - 1] if t else clip.left[1]
    right, covered = synth_right_view(clip.left[t], depth, clip.baseline_focal / depth.z_max, donor)
    err = np.abs(right - clip.right[t])
    print(f"t={t}  covered {covered.mean():.3f}  MAE covered {255 * err[:, covered].mean():.2f}/255"
          f"  MAE all {255 * err.mean():.2f}/255")

# %%
# Holes are the border band the shift exposes plus background disoccluded by near objects.
holes = ~covered
print("hole columns per row:", holes.sum(1)[::8])
