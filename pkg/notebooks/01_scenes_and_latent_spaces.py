# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: light
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# # Scenes, style codes and the W / W* gap
#
# The toy domain is a single colored ellipse on a gray background. Every image
# is rendered from seven known attributes, so image-space edits are exact and
# can be compared against latent edits later on.

import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from e4elab import scenes, toygen
from e4elab.latent_geometry import interpolate, replicate, variance_metric

OUT = os.environ.get("NOTEBOOK_OUT", os.path.join(os.path.dirname(os.path.abspath(__file__)), "_out"))
os.makedirs(OUT, exist_ok=True)

# A spec is a frozen dataclass with range checks; `render` turns it into an
# (H, W, 3) array in [-1, 1].

spec = scenes.SceneSpec(cx=0.4, cy=0.6, radius=0.2, hue=1.0, elongation=1.5, rotation=0.3)
img = scenes.render(spec, 32)
print(img.shape, img.min(), img.max())

# Editing the scene attributes directly is the ground-truth edit F used for equivariance.

edited = scenes.apply_image_edit(spec, "hue", 0.8)
fig, axes = plt.subplots(1, 2, figsize=(4, 2))
for ax, s in zip(axes, (spec, edited)):
    ax.imshow((scenes.render(s, 32) + 1) / 2)
    ax.set_title(f"hue={s.hue:.2f}")
    ax.axis("off")
fig.savefig(os.path.join(OUT, "scene_edit.png"))

# ## Style codes
#
# The generator maps z to w with an MLP and feeds one w per synthesis layer.
# A stack that repeats the same w lies in W; independent rows only lie in W*.
# `variance_metric` measures the spread of the rows around their mean.

torch.manual_seed(0)
gen = toygen.ToyGenerator().eval()
k = gen.config.num_layers
w = toygen.sample_w(2, gen, seed=0)
in_w = replicate(w[0], k)
mixed = np.stack([w[i % 2] for i in range(k)])
print("variation in W:", variance_metric(in_w))
print("variation of a mixed stack:", variance_metric(mixed))

# Interpolating from the W stack to the mixed one changes variation linearly
# here because one end has zero spread.

ts = np.linspace(0, 1, 5)
print([round(variance_metric(interpolate(in_w, mixed, t)), 4) for t in ts])

x = np.stack([toygen.synthesize(st, gen) for st in (in_w, mixed)])
print("untrained generator output:", x.shape)
