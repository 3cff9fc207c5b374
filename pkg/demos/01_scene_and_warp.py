"""
Synthetic two-view pairs and the depth warp
===========================================

Render a textured scene from two cameras, then move a probability map
from one view to the other with the exact depth warp.
"""

# %%
# A scene is a small room of textured rectangles plus a few boxes; a pair
# is two cameras whose overlap falls inside a band.
import numpy as np

from kptrain.geometry import Warp, pixel_grid, warp_map, warp_points
from kptrain.scenegen import SceneConfig, generate_scene, sample_pair

scene = generate_scene(SceneConfig(), seed=0)
pair = sample_pair(scene, 0.35, 0.9, seed=0)
print(f"overlap {pair.overlap:.2f}, {len(pair.tracks)} co-visible tracks")
print("valid depth in A:", f"{pair.view_a.valid.mean():.1%}")

# %%
# Warp every pixel centre of A into B. Pixels that leave the image, land on
# a hole, or are occluded come back invalid.
w = Warp(pair.view_a, pair.view_b)
res = warp_points(pixel_grid(pair.view_a.shape), w)
print(f"{res.valid.mean():.1%} of A's pixels are co-visible in B")

# %%
# Dense maps are pulled the other way: ``warp_map`` samples B's map at the
# landing position of each A pixel, so the result lives on A's grid.
prob_b = np.zeros(pair.view_b.shape)
prob_b[40:80, 40:80] = 1.0
on_a, mask = warp_map(prob_b, w)
print(f"mass pulled onto A: {on_a.sum():.1f} of {prob_b.sum():.0f} (mask covers {mask.mean():.1%})")

# %%
# Optional figure
try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(1, 3, figsize=(9, 3))
    ax[0].imshow(pair.view_a.image, cmap="gray")
    ax[1].imshow(pair.view_b.image, cmap="gray")
    ax[2].imshow(on_a)
    for a, t in zip(ax, ("view A", "view B", "B's square, seen from A")):
        a.set_title(t)
        a.axis("off")
    fig.savefig("demo_scene_and_warp.png", dpi=100)
    print("wrote demo_scene_and_warp.png")
except ImportError:
    pass
