"""A two-minute end-to-end run on a small network.

Pretrains a narrow velocity field briefly, then fine-tunes it with the
decoupled and the combined objective from the same checkpoint and the same
rollout noise, and prints the smoothed reward curves and held-out metrics.
The full-size run is ``python3 -m editgrpo ablate``.

    python3 demos/03_quick_grpo.py
"""
from dataclasses import replace

import numpy as np

from editgrpo import pipeline
from editgrpo.grpo import OptimConfig
from editgrpo.pipeline import PretrainConfig, RunConfig
from editgrpo.velocity import Arch

cfg = RunConfig(out="demos_out/quick", iterations=40, eval_tasks=40,
                arch=Arch(hidden=(64, 64), time_k=4),
                optim=OptimConfig(tasks_per_iter=4),
                pretrain=PretrainConfig(steps=1500, batch=32, pool=4000, val_tasks=64))

base = pipeline.cmd_pretrain(cfg)
print(f"pretraining: validation loss {base.val_initial:.1f} -> {base.val_final:.1f}")

rows = [pipeline.table_row("base", pipeline.evaluate(base.params, cfg))]
for mode in ("combined", "decoupled"):
    res = pipeline.cmd_train(replace(cfg, mode=mode), base.params, out_sub=mode, checkpoint_every=0)
    for k in ("r_sem", "r_pres"):
        curve = pipeline.smooth([r[k] for r in res.log])
        print(f"{mode:10s} {k:6s} " + " ".join(f"{v:6.3f}" for v in curve[::8]))
    rows.append(pipeline.table_row(mode, pipeline.evaluate(res.ema, cfg)))
print()
print(pipeline.format_table(rows))
