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

# # Edit directions, LEC and equivariance
#
# Latent editing consistency inverts an image, edits the code, renders,
# inverts again and undoes the edit. A perfect inverse gives exactly zero.
# We check that with a "lookup" codec whose encoder reads the code back out
# of the pixels, then look at a generic random encoder for contrast.

import numpy as np
import torch

from e4elab import evaluation as ev
from e4elab import scenes, toygen
from e4elab.editing import EditDirection, apply_edit, invert_edit, supervised_direction
from e4elab.latent_geometry import replicate
from e4elab.pipeline.experiment import synthesize_fn

# ## Lookup codec: E(G(s)) == s

K, D = 6, 8


def synth(stacks):
    return np.asarray(stacks, dtype=np.float64).reshape(-1, 4, 4, 3)


def encode(images):
    return np.asarray(images, dtype=np.float64).reshape(-1, K, D)


rng = np.random.default_rng(0)
v = rng.normal(size=D)
direction = EditDirection(v=v / np.linalg.norm(v), method="pca", name="random")
images = rng.normal(size=(16, 4, 4, 3))
print("LEC(lookup) =", ev.lec(encode, synth, direction, 1.5, images))

# A fixed random linear encoder is not the generator's inverse, so the edit
# does not survive the round trip.

P = rng.normal(size=(48, 48)) / 7


def noisy_encode(images):
    return (np.asarray(images).reshape(-1, 48) @ P).reshape(-1, K, D)


print("LEC(random) =", ev.lec(noisy_encode, synth, direction, 1.5, images))

# Edits are exact translations, undone by `invert_edit`.

s = rng.normal(size=(K, D))
d2, a2 = invert_edit(direction, 1.5)
print("inverse error:", np.abs(apply_edit(apply_edit(s, direction, 1.5), d2, a2) - s).max())

# ## Supervised directions on generator samples
#
# With an untrained generator the labels come straight from
# `scenes.estimate_attributes` on rendered samples, the same route the
# pipeline uses to calibrate edits on a trained one.

torch.manual_seed(0)
gen = toygen.ToyGenerator().eval()
w = toygen.sample_w(512, gen, seed=1)
imgs = synthesize_fn(gen)(np.stack([replicate(x, gen.config.num_layers) for x in w]))
measured = scenes.estimate_attributes(imgs)["radius"]
ok = np.isfinite(measured)
labels = np.where(measured[ok] > np.median(measured[ok]), 1.0, -1.0)
radius_dir = supervised_direction(w[ok], labels, name="radius")
print("unit norm:", np.linalg.norm(radius_dir.v))
print(radius_dir.to_json(gen.config.num_layers)[:80], "...")
