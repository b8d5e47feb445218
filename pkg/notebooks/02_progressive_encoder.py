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

# # Training an encoder with progressive offsets
#
# The encoder predicts one base code w and N-1 offsets. Offsets stay locked
# at zero during warmup and then unlock one at a time, so early training only
# finds codes in W. This notebook trains tiny models end to end in about a
# minute to show the mechanics; the numbers are not meaningful at this size.

import os
import tempfile

import numpy as np

from e4elab.encoder import ProgressiveSchedule, active_deltas, encode_images
from e4elab.latent_geometry import variance_metric
from e4elab.pipeline import experiment as X
from e4elab.pipeline.config import (DataConfig, EmbedderConfig, EncoderTrainConfig, ExperimentConfig, GanConfig,
                                    ModelConfig, TrainConfig)
from e4elab.pipeline.training import SceneData, load_encoder
from e4elab.toygen import tensor_to_images

# The unlock schedule is a closed form in the step counter.

sched = ProgressiveSchedule(warmup_steps=40, unlock_interval=20)
print([active_deltas(t, sched, 3) for t in range(0, 120, 10)])

# A 16x16 configuration with short stages. The FD gate is disabled here
# because the toy GAN only trains for a few hundred steps.

cfg = TrainConfig(
    model=ModelConfig(z_dim=8, latent_dim=16, num_layers=4, resolution=16, gen_channels=8, mapping_layers=2,
                      encoder_widths=(8, 16, 16, 16), latent_disc_hidden=32, image_disc_widths=(8, 16, 16, 16),
                      embed_dim=16),
    data=DataConfig(train_size=2048, eval_size=64),
    embedder=EmbedderConfig(steps=50, batch_size=64),
    gan=GanConfig(steps=200, max_steps=200, fd_gate=1e9, gate_samples=256),
    encoder=EncoderTrainConfig(steps=120, batch_size=16, eval_every=60, checkpoint_every=60),
    schedule=sched,
    experiment=ExperimentConfig(configurations=("A", "D"), seeds=(0,),
                                metrics=("l2", "variation", "roundtrip"), roundtrip_samples=32, n_proj=16),
)
root = os.environ.get("NOTEBOOK_ARTIFACTS") or tempfile.mkdtemp(prefix="e4e_nb_")
data = SceneData.build(cfg)
X.build_artifacts(cfg, root, data)
print(sorted(os.listdir(root)))

# Configuration A trains offsets freely; D adds the offset penalty and the
# latent discriminator. Compare how far each moves from W on held-out images.

images = tensor_to_images(data.eval)
for c in ("A", "D"):
    stacks = encode_images(load_encoder(X.encoder_path(root, c, 0)), images)
    print(c, "mean variation", np.mean([variance_metric(s) for s in stacks]))

# The same models through the report pipeline.

result = X.run_experiment(cfg, root, os.path.join(root, "report"))
for r in result.reports:
    print(f"{r.config_id} {r.name:10s} {r.value:.4f}")
