"""Tour of the synthetic editing environment.

Draws a handful of tasks, prints each instruction and writes the source,
target and ground-truth edit mask as PNGs (upscaled 8x) to demos_out/env/.

    python3 demos/01_environment.py
"""
from pathlib import Path

import numpy as np

from editgrpo.env import task_stream, write_png
from editgrpo.regions import area, edit_mask

OUT = Path("demos_out/env")
OUT.mkdir(parents=True, exist_ok=True)


def big(img, k=8):
    return np.kron(img, np.ones((k, k, 1)))


for t in task_stream(seed=0, n=6):
    ins = t.instruction
    extra = {"recolor": f" -> {ins.new_color}", "move": f" by {ins.offset}"}.get(ins.verb, "")
    print(f"task {t.task_id}: {ins.verb} {ins.shape.kind} at {ins.shape.center}{extra}; "
          f"gt mask {area(t.gt_mask)} px")
    # on the clean target the segmenter recovers the footprint exactly
    assert np.array_equal(edit_mask(t.source, t.target, ins), t.gt_mask)
    assert np.array_equal(t.source[~t.gt_mask], t.target[~t.gt_mask])
    write_png(OUT / f"{t.task_id}_source.png", big(t.source))
    write_png(OUT / f"{t.task_id}_target.png", big(t.target))
    write_png(OUT / f"{t.task_id}_mask.png", big(np.repeat(t.gt_mask[..., None], 3, -1).astype(float)))
print(f"images in {OUT}/")
