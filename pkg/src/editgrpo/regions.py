"""Edit / non-edit region algebra and the programmatic segmenter.

Masks are boolean (H, W) arrays. The segmenter stands in for a grounded
segmentation model: it looks for the instruction's target colour inside a
window around the instruction's coordinates.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

SEG_TOLERANCE = 0.1
MIN_NONEDIT_FRACTION = 0.05
MIN_EDIT_FRACTION = 0.01


def area(m: np.ndarray) -> int:
    return int(np.count_nonzero(m))


def union_mask(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a | b


def complement(m: np.ndarray) -> np.ndarray:
    return ~np.asarray(m, dtype=bool)


def segment(img: np.ndarray, instr, tol: float = SEG_TOLERANCE) -> np.ndarray:
    """Pixels within ``tol`` (max over channels) of the instruction's colour.

    The colour searched for is the shape's original colour for recolor and
    remove, and its new colour for add and move. Only pixels inside
    ``instr.search_window()`` are considered.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    color = np.asarray(instr.search_color(), dtype=np.float64)
    y0, y1, x0, x1 = instr.search_window(h, w)
    out = np.zeros((h, w), dtype=bool)
    patch = img[y0:y1, x0:x1]
    out[y0:y1, x0:x1] = np.max(np.abs(patch - color), axis=-1) <= tol
    return out


def edit_mask(source, edited, instr, tol: float = SEG_TOLERANCE) -> np.ndarray:
    """Union of the segmentations of the source and of the edited image."""
    return union_mask(segment(source, instr, tol), segment(edited, instr, tol))


def area_filter(m: np.ndarray) -> tuple[bool, str]:
    """Keep/discard decision for an edit mask.

    Discards near-global edits (non-edit region under 5% of the image) and
    segmentation failures (edit region under 1%).
    """
    total = np.asarray(m).size
    a = area(m)
    if total - a < MIN_NONEDIT_FRACTION * total:
        return False, "nonedit-too-small"
    if a < MIN_EDIT_FRACTION * total:
        return False, "edit-too-small"
    return True, "kept"


def write_pbm(path, m: np.ndarray) -> None:
    """Plain-text PBM (P1); 1 marks the edit region."""
    m = np.asarray(m, dtype=bool)
    h, w = m.shape
    rows = "\n".join(" ".join("1" if v else "0" for v in row) for row in m)
    Path(path).write_text(f"P1\n{w} {h}\n{rows}\n")


def read_mask_image(path) -> np.ndarray:
    """Mask from a PBM/PNG file; any nonzero (white) pixel is in the region."""
    path = Path(path)
    if path.suffix.lower() == ".pbm":
        tokens = path.read_text().split()
        if tokens[0] != "P1":
            raise ValueError("only plain PBM (P1) is supported")
        w, h = int(tokens[1]), int(tokens[2])
        return np.array([t == "1" for t in tokens[3:3 + w * h]]).reshape(h, w)
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("L"))
    return arr > 127
