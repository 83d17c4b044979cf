"""
Anatomy of a synthetic scene
============================

Scenes stand in for real video. A question names a target concept; the
target appears (and sounds) in some segments, and the answer counts them.
Here we generate one scene and look at where the answer is hidden.
"""

import numpy as np

from tjstg import synth
from tjstg.tsg import question_contribution_scores, select_target

cfg = synth.TaskConfig(noise_sigma=0.0, seed=0)
world = synth.make_world(cfg)
scene = synth.gen_scene(cfg, 3, world)

###############################################################################
# Shapes follow the task config: T segments, an h x w grid of d-dim cells,
# and N question words.
print("audio", scene.audio.shape, "visual map", scene.visual_map.shape, "question", scene.question_words.shape)
print("target concept", scene.target_concept, "at word", scene.target_word_index)

###############################################################################
# The ground truth says which segments contain the target and which cell
# holds it. The answer is the count of active segments (capped at C - 1).
print("active segments:", scene.gt_temporal.astype(int), "-> answer", scene.answer)
for t in np.flatnonzero(scene.gt_temporal):
    r, c = np.argwhere(scene.gt_spatial[t])[0]
    print(f"  segment {t}: target in cell ({r}, {c})")

###############################################################################
# Without noise, concepts are orthonormal and fillers live in their
# orthogonal complement, so the target cell is exactly the concept vector
# and the audio is a fixed rotation of it.
t = int(np.flatnonzero(scene.gt_temporal)[0])
cell = scene.visual_map[t][scene.gt_spatial[t] > 0][0]
print("cell . concept =", float(cell @ world.concepts[scene.target_concept]))
print("audio == rotated concept:", np.allclose(scene.audio[t], world.audio_map @ world.concepts[scene.target_concept]))

###############################################################################
# Scoring the words against the sum of all concepts picks out the target
# word: the same selection rule the model learns to use.
probe = world.concepts.sum(axis=0, keepdims=True)
idx, _ = select_target(question_contribution_scores(probe, scene.question_words), scene.question_words)
print("selected word", idx, "(target word", scene.target_word_index, ")")
