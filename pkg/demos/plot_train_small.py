"""
Training a small model and reading its attention
================================================

A compact task (three segments, a 2x2 grid) trains in under a minute.
We run both stages, score the test split, then repeat with the synchrony
loss switched off to see what it does to the audio and visual temporal
weights.
"""

import dataclasses

import numpy as np

from tjstg import synth, train
from tjstg.head import LossWeights
from tjstg.model import ModelConfig
from tjstg.train import TrainConfig

task = synth.TaskConfig(T=3, N=4, h=2, w=2, d=8, C=3, K=4, noise_sigma=0.05, seed=1)
data = {
    "train": synth.make_split(task, 1000, 0),
    "val": synth.make_split(task, 50, 1000),
    "test": synth.make_split(task, 200, 1050),
}
mcfg = ModelConfig(d=task.d, C=task.C)
tcfg = TrainConfig(batch_size=16, epochs=30, stage1_epochs=5, lr0=1e-2, lr_drop_every=20)

###############################################################################
# Stage I learns to tell matched audio/visual pairs from shuffled ones;
# stage II trains the whole network on the answers.
params, stage1, stage2 = train.train(data, mcfg, tcfg)
print("stage I match accuracy by epoch:", [round(r["match_acc"], 3) for r in stage1])
print("stage II val accuracy by epoch: ", [round(r["val_acc"], 3) for r in stage2])
result = train.evaluate(params, mcfg, data["test"])
print(f"test accuracy {result['overall']:.3f} (chance {1 / task.C:.3f})")

###############################################################################
# The spatial map should peak on the cell holding the target.
maps = train.attention_maps(params, mcfg, data["test"])
print(f"spatial hit rate {train.spatial_hit_rate(params, mcfg, data['test'], maps):.3f}")
print("first active segment map:\n", np.round(maps[0, int(np.argmax(data['test'].gt_temporal[0]))], 3))

###############################################################################
# The synchrony loss pulls the audio and visual temporal weights together.
off = dataclasses.replace(tcfg, weights=LossWeights(csl_enabled=False))
params_off, _, _ = train.train(data, mcfg, off)
print(f"mean JS(w_a, w_v): with synchrony {train.mean_js(params, mcfg, data['test']):.4f}, "
      f"without {train.mean_js(params_off, mcfg, data['test']):.4f}")
