"""How the two region rewards react to different kinds of edits.

For one task, scores four candidate outputs: the ground-truth edit, the
unedited source, the correct edit plus background noise, and background
noise alone. The semantic reward only reads the edit region and the
preservation reward only reads its complement, so each failure mode shows up
in exactly one of them.

    python3 demos/02_region_rewards.py
"""
import numpy as np

from editgrpo.env import task_stream
from editgrpo.rewards import Judges, RewardWeights, region_rewards

task = task_stream(seed=0, n=1)[0]
judges = Judges.build(0)
w = RewardWeights()
rng = np.random.default_rng(0)
noise = np.clip(task.source + 0.15 * rng.standard_normal(task.source.shape), 0, 1)
keep = ~task.gt_mask[..., None]

candidates = {
    "ground-truth edit": task.target,
    "no edit": task.source,
    "edit + background noise": np.where(keep, noise, task.target),
    "background noise only": np.where(keep, noise, task.source),
}
print(f"instruction: {task.instruction.verb} {task.instruction.shape.kind}")
print(f"{'candidate':26s} {'r_sem':>7s} {'r_pres':>7s}   components")
for name, img in candidates.items():
    r = region_rewards(task, img, task.gt_mask, w, judges)
    comp = " ".join(f"{k}={v:+.3f}" for k, v in r.components.items())
    print(f"{name:26s} {r.r_sem:7.3f} {r.r_pres:7.3f}   {comp}")
