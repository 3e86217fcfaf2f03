"""Synthetic instruction-editing environment.

A scene is a flat background plus a few non-overlapping coloured shapes. An
instruction recolors, removes, adds or moves one shape; applying it yields the
ground-truth target. Rendering has no anti-aliasing, so the ground-truth edit
mask is exact and every pixel outside it is bit-identical between source and
target.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensor import stream

PALETTE = (
    (0.9, 0.1, 0.1),
    (0.1, 0.9, 0.1),
    (0.1, 0.1, 0.9),
    (0.9, 0.9, 0.1),
    (0.9, 0.1, 0.9),
    (0.1, 0.9, 0.9),
    (0.9, 0.9, 0.9),
    (0.1, 0.1, 0.1),
    (0.5, 0.5, 0.5),
)
KINDS = ("square", "circle", "triangle")
VERBS = ("recolor", "remove", "add", "move")
EMBED_USED = 13  # verb(4) + kind(3) + geometry(3) + parameter(3)


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Shape:
    kind: str
    center: tuple[int, int]  # (row, col) of the bounding-box centre
    size: int
    color: tuple[float, float, float]
    id: int

    def box(self) -> tuple[int, int, int, int]:
        """(top, bottom, left, right), half-open."""
        top = self.center[0] - (self.size - 1) // 2
        left = self.center[1] - (self.size - 1) // 2
        return top, top + self.size, left, left + self.size

    def footprint(self, h: int, w: int) -> np.ndarray:
        top, bottom, left, right = self.box()
        s = self.size
        r, c = np.mgrid[0:s, 0:s].astype(np.float64)
        mid = (s - 1) / 2.0
        if self.kind == "square":
            local = np.ones((s, s), dtype=bool)
        elif self.kind == "circle":
            local = (r - mid) ** 2 + (c - mid) ** 2 <= (s / 2.0) ** 2
        elif self.kind == "triangle":
            local = np.abs(c - mid) <= (r + 1) / 2.0
        else:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        out = np.zeros((h, w), dtype=bool)
        rr, cc = np.nonzero(local)
        rr, cc = rr + top, cc + left
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        out[rr[ok], cc[ok]] = True
        return out

    def inside(self, h: int, w: int) -> bool:
        top, bottom, left, right = self.box()
        return top >= 0 and left >= 0 and bottom <= h and right <= w


@dataclass(frozen=True)
class Scene:
    background: tuple[float, float, float]
    shapes: tuple[Shape, ...] = ()
    height: int = 16
    width: int = 16

    def __post_init__(self):
        ids = [s.id for s in self.shapes]
        if len(set(ids)) != len(ids):
            raise ValueError("shape ids must be unique")
        for s in self.shapes:
            if not s.inside(self.height, self.width):
                raise ValueError(f"shape {s.id} leaves the image")

    def get(self, shape_id: int) -> Shape:
        for s in self.shapes:
            if s.id == shape_id:
                return s
        raise KeyError(shape_id)


@dataclass(frozen=True)
class EditInstruction:
    """What to do, to which shape, with what parameter.

    ``shape`` is the existing target (recolor/remove/move) or the new shape
    (add). ``new_color`` is set for recolor, ``offset`` (drow, dcol) for move.
    """

    verb: str
    shape: Shape
    new_color: tuple[float, float, float] | None = None
    offset: tuple[int, int] | None = None

    def __post_init__(self):
        if self.verb not in VERBS:
            raise ValueError(f"unknown verb {self.verb!r}")
        if self.verb == "recolor" and self.new_color is None:
            raise ValueError("recolor needs new_color")
        if self.verb == "move" and self.offset is None:
            raise ValueError("move needs offset")

    def moved_shape(self) -> Shape:
        dr, dc = self.offset
        return replace(self.shape, center=(self.shape.center[0] + dr, self.shape.center[1] + dc))

    def search_color(self):
        return self.shape.color

    def search_window(self, h: int, w: int, pad: int = 1) -> tuple[int, int, int, int]:
        top, bottom, left, right = self.shape.box()
        if self.verb == "move":
            t2, b2, l2, r2 = self.moved_shape().box()
            top, bottom, left, right = min(top, t2), max(bottom, b2), min(left, l2), max(right, r2)
        return max(top - pad, 0), min(bottom + pad, h), max(left - pad, 0), min(right + pad, w)


@dataclass
class EditTask:
    source: np.ndarray
    instruction: EditInstruction
    target: np.ndarray
    gt_mask: np.ndarray
    embedding: np.ndarray
    scene: Scene
    task_id: int = 0
    seed: int = 0
    task_type: str = field(default="")

    def __post_init__(self):
        if not self.task_type:
            self.task_type = self.instruction.verb

    @property
    def condition(self) -> np.ndarray:
        """Network condition: flattened source image followed by the instruction embedding."""
        return np.concatenate([self.source.ravel(), self.embedding])


@dataclass(frozen=True)
class EnvConfig:
    height: int = 16
    width: int = 16
    n_shapes: tuple[int, int] = (1, 3)
    size_range: tuple[int, int] = (3, 8)
    verbs: tuple[str, ...] = VERBS
    verb_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    max_offset: int = 5
    cond_dim: int = 16
    min_mask_fraction: float = 0.01
    max_mask_fraction: float = 0.60

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, 3)


def render(scene: Scene) -> np.ndarray:
    """Rasterize in list order; later shapes paint over earlier ones."""
    img = np.empty((scene.height, scene.width, 3))
    img[...] = scene.background
    for s in scene.shapes:
        img[s.footprint(scene.height, scene.width)] = s.color
    return img


def apply_edit(scene: Scene, instr: EditInstruction) -> Scene:
    shapes = list(scene.shapes)
    if instr.verb == "add":
        shapes.append(instr.shape)
    else:
        i = next(j for j, s in enumerate(shapes) if s.id == instr.shape.id)
        if instr.verb == "remove":
            del shapes[i]
        elif instr.verb == "recolor":
            shapes[i] = replace(shapes[i], color=tuple(instr.new_color))
        else:
            shapes[i] = instr.moved_shape()
    return replace(scene, shapes=tuple(shapes))


def condition_embed(instr: EditInstruction, h: int = 16, w: int = 16, dim: int = 16) -> np.ndarray:
    if dim < EMBED_USED:
        raise ValueError(f"condition dim must be >= {EMBED_USED}")
    e = np.zeros(dim)
    e[VERBS.index(instr.verb)] = 1.0
    e[4 + KINDS.index(instr.shape.kind)] = 1.0
    e[7:10] = (instr.shape.center[0] / h, instr.shape.center[1] / w, instr.shape.size / max(h, w))
    if instr.verb == "recolor":
        e[10:13] = instr.new_color
    elif instr.verb == "add":
        e[10:13] = instr.shape.color
    elif instr.verb == "move":
        e[10:12] = (instr.offset[0] / h, instr.offset[1] / w)
    return e


def _boxes_clear(a: Shape, b: Shape, margin: int = 1) -> bool:
    t1, b1, l1, r1 = a.box()
    t2, b2, l2, r2 = b.box()
    return b1 + margin <= t2 or b2 + margin <= t1 or r1 + margin <= l2 or r2 + margin <= l1


def _random_shape(rng, cfg: EnvConfig, color, sid: int, others) -> Shape | None:
    for _ in range(50):
        size = int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1))
        half = (size - 1) // 2
        cy = int(rng.integers(half, cfg.height - (size - half) + 1))
        cx = int(rng.integers(half, cfg.width - (size - half) + 1))
        s = Shape(KINDS[int(rng.integers(len(KINDS)))], (cy, cx), size, tuple(color), sid)
        if s.inside(cfg.height, cfg.width) and all(_boxes_clear(s, o) for o in others):
            return s
    return None


def _unused_color(rng, used):
    free = [c for c in PALETTE if c not in used]
    return free[int(rng.integers(len(free)))]


def _try_generate(rng, cfg: EnvConfig) -> tuple[Scene, EditInstruction] | None:
    bg = PALETTE[int(rng.integers(len(PALETTE)))]
    used = [bg]
    shapes: list[Shape] = []
    n = int(rng.integers(cfg.n_shapes[0], cfg.n_shapes[1] + 1))
    for sid in range(n):
        s = _random_shape(rng, cfg, _unused_color(rng, used), sid, shapes)
        if s is None:
            return None
        shapes.append(s)
        used.append(s.color)
    scene = Scene(bg, tuple(shapes), cfg.height, cfg.width)
    weights = np.asarray(cfg.verb_weights, dtype=np.float64)
    verb = cfg.verbs[int(rng.choice(len(cfg.verbs), p=weights / weights.sum()))]
    if verb != "add" and not shapes:
        return None
    if verb == "add":
        new = _random_shape(rng, cfg, _unused_color(rng, used), n, shapes)
        if new is None:
            return None
        return scene, EditInstruction("add", new)
    target = shapes[int(rng.integers(len(shapes)))]
    if verb == "remove":
        return scene, EditInstruction("remove", target)
    if verb == "recolor":
        return scene, EditInstruction("recolor", target, new_color=_unused_color(rng, used))
    others = [s for s in shapes if s.id != target.id]
    for _ in range(50):
        off = tuple(int(v) for v in rng.integers(-cfg.max_offset, cfg.max_offset + 1, size=2))
        if off == (0, 0):
            continue
        instr = EditInstruction("move", target, offset=off)
        moved = instr.moved_shape()
        if moved.inside(cfg.height, cfg.width) and all(_boxes_clear(moved, o) for o in others):
            return scene, instr
    return None


def make_task(scene: Scene, instr: EditInstruction, cfg: EnvConfig | None = None,
              task_id: int = 0, seed: int = 0) -> EditTask:
    cfg = cfg or EnvConfig(height=scene.height, width=scene.width)
    edited = apply_edit(scene, instr)
    src, tgt = render(scene), render(edited)
    h, w = scene.height, scene.width
    if instr.verb == "add":
        gt = instr.shape.footprint(h, w)
    elif instr.verb == "move":
        gt = instr.shape.footprint(h, w) | instr.moved_shape().footprint(h, w)
    else:
        gt = instr.shape.footprint(h, w)
    emb = condition_embed(instr, h, w, cfg.cond_dim)
    return EditTask(src, instr, tgt, gt, emb, scene, task_id, seed)


def generate_task(rng: np.random.Generator, cfg: EnvConfig = EnvConfig(), task_id: int = 0,
                  seed: int = 0) -> EditTask:
    """Draw one well-formed task; gives up after 100 rejected attempts."""
    total = cfg.height * cfg.width
    for _ in range(100):
        drawn = _try_generate(rng, cfg)
        if drawn is None:
            continue
        task = make_task(*drawn, cfg, task_id, seed)
        frac = task.gt_mask.sum() / total
        if cfg.min_mask_fraction <= frac <= cfg.max_mask_fraction:
            return task
    raise GenerationError("could not satisfy the mask-area bounds in 100 attempts")


def task_stream(seed: int, n: int, cfg: EnvConfig = EnvConfig(), split: int = 0, start: int = 0) -> list[EditTask]:
    """Tasks ``start .. start+n-1`` of the (seed, split) sequence; each index has its own stream."""
    return [generate_task(stream(seed, "env", split, i), cfg, task_id=i, seed=seed)
            for i in range(start, start + n)]


# --- serialization -------------------------------------------------------

def _shape_dict(s: Shape) -> dict:
    return {"kind": s.kind, "center": list(s.center), "size": s.size, "color": list(s.color), "id": s.id}


def _shape_from(d: dict) -> Shape:
    return Shape(d["kind"], tuple(d["center"]), int(d["size"]), tuple(d["color"]), int(d["id"]))


def task_to_record(task: EditTask) -> dict:
    sc, ins = task.scene, task.instruction
    return {
        "task_id": task.task_id,
        "seed": task.seed,
        "scene": {"background": list(sc.background), "height": sc.height, "width": sc.width,
                  "shapes": [_shape_dict(s) for s in sc.shapes]},
        "instruction": {"verb": ins.verb, "shape": _shape_dict(ins.shape),
                        "new_color": None if ins.new_color is None else list(ins.new_color),
                        "offset": None if ins.offset is None else list(ins.offset)},
    }


def task_from_record(rec: dict, cfg: EnvConfig | None = None) -> EditTask:
    s = rec["scene"]
    scene = Scene(tuple(s["background"]), tuple(_shape_from(d) for d in s["shapes"]), s["height"], s["width"])
    i = rec["instruction"]
    instr = EditInstruction(
        i["verb"], _shape_from(i["shape"]),
        None if i["new_color"] is None else tuple(i["new_color"]),
        None if i["offset"] is None else tuple(i["offset"]),
    )
    return make_task(scene, instr, cfg, rec.get("task_id", 0), rec.get("seed", 0))


def save_tasks(path, tasks) -> None:
    Path(path).write_text(json.dumps([task_to_record(t) for t in tasks], indent=1))


def load_tasks(path, cfg: EnvConfig | None = None) -> list[EditTask]:
    return [task_from_record(r, cfg) for r in json.loads(Path(path).read_text())]


# --- image I/O -----------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    a = to_uint8(img)
    h, w, _ = a.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(a.tobytes())


def write_png(path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(img), mode="RGB").save(path)


def read_image(path) -> np.ndarray:
    """RGB image as float intensities in [0, 1]."""
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
