"""Locality-preservation metrics computed only over the non-edit region.

UR, PSNR and SSIM work on 8-bit values (``round(255 * x)``, clamped), PSNR
uses 255 as peak, SSIM the usual Gaussian 11x11 / sigma 1.5 window on luma.
The perceptual column is a fixed random-filter distance, *not* LPIPS; it is
labelled ``perceptual_proxy`` everywhere it is reported.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import regions
from .tensor import EmptyRegionError, stream

UR_TAU = 20
PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5
EXCLUDED_TASK_TYPES = frozenset({"style_change", "text_change", "tone_transfer"})


def to_8bit(img: np.ndarray) -> np.ndarray:
    """Float intensities in [0, 1] to 8-bit values, kept as float64."""
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0.0, 255.0)


def _region(m, shape) -> np.ndarray:
    m = np.asarray(m, dtype=bool)
    if m.shape != tuple(shape[:2]):
        raise ValueError(f"mask shape {m.shape} does not match image {shape}")
    if not m.any():
        raise EmptyRegionError("non-edit region is empty")
    return m


def unchanged_ratio(src8, edit8, keep, tau: float = UR_TAU) -> float:
    """Fraction of region pixels whose RGB L1 change is strictly below ``tau``."""
    keep = _region(keep, np.shape(src8))
    d = np.abs(np.asarray(src8, dtype=np.float64) - np.asarray(edit8, dtype=np.float64)).sum(axis=-1)
    return float(np.count_nonzero(d[keep] < tau) / np.count_nonzero(keep))


def masked_psnr(src8, edit8, keep) -> float:
    keep = _region(keep, np.shape(src8))
    d = np.asarray(src8, dtype=np.float64)[keep] - np.asarray(edit8, dtype=np.float64)[keep]
    mse = float(np.sum(d * d) / d.size)
    if mse == 0.0:
        return PSNR_CAP
    return 10.0 * math.log10(255.0 ** 2 / mse)


def gaussian_window(sigma: float = SSIM_SIGMA, radius: int = SSIM_RADIUS) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float) -> np.ndarray:
    """Per-pixel SSIM of two grayscale images, reflect-padded, population moments."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    win = gaussian_window()
    filt = lambda x: ndimage.correlate(x, win, mode="reflect")
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def gray(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) @ LUMA


def masked_ssim_values(a, b, keep, data_range: float) -> float:
    """Mean SSIM over window centres in ``keep``; pixels outside ``keep`` are zeroed first."""
    keep = _region(keep, np.shape(a))
    ga = gray(a) * keep
    gb = gray(b) * keep
    return float(ssim_map(ga, gb, data_range)[keep].mean())


def masked_ssim(src8, edit8, keep) -> float:
    return masked_ssim_values(src8, edit8, keep, 255.0)


class FilterBank:
    """Fixed random 3x3xC convolution filters for the perceptual proxy."""

    def __init__(self, seed: int = 0, n_filters: int = 8, channels: int = 3):
        rng = stream(seed, "features", 1)
        self.filters = rng.standard_normal((n_filters, 3, 3, channels)) / math.sqrt(9 * channels)

    def features(self, img: np.ndarray) -> np.ndarray:
        out = [ndimage.correlate(img, f, mode="constant", cval=0.0)[:, :, img.shape[2] // 2]
               for f in self.filters]
        return np.stack(out, axis=-1)


def perceptual_distance(a, b, keep, bank: FilterBank) -> float:
    """Mean squared feature difference over ``keep`` positions.

    Inputs are [0, 1] intensities; they are mapped to [-1, 1] and zeroed
    outside ``keep`` before filtering, so only region pixels are read.
    """
    keep = _region(keep, np.shape(a))
    m = keep[..., None]
    fa = bank.features((2.0 * np.asarray(a, dtype=np.float64) - 1.0) * m)
    fb = bank.features((2.0 * np.asarray(b, dtype=np.float64) - 1.0) * m)
    d = fa[keep] - fb[keep]
    return float(np.mean(d * d))


def masked_perceptual(src, edit, keep, bank: FilterBank) -> float:
    return perceptual_distance(src, edit, keep, bank)


@dataclass
class SampleRow:
    task_id: int
    kept: bool
    reason: str
    ur: float = float("nan")
    psnr: float = float("nan")
    ssim: float = float("nan")
    perceptual_proxy: float = float("nan")
    edit_area: int = 0


@dataclass
class MetricReport:
    rows: list[SampleRow] = field(default_factory=list)

    @property
    def kept(self) -> list[SampleRow]:
        return [r for r in self.rows if r.kept]

    def aggregate(self) -> dict:
        kept = self.kept
        if not kept:
            return {"n_kept": 0, "n_total": len(self.rows), "empty": True,
                    "ur": float("nan"), "psnr": float("nan"), "ssim": float("nan"),
                    "perceptual_proxy": float("nan")}
        # math.fsum: aggregates do not depend on sample order
        mean = lambda key: math.fsum(getattr(r, key) for r in kept) / len(kept)
        return {"n_kept": len(kept), "n_total": len(self.rows), "empty": False,
                "ur": mean("ur"), "psnr": mean("psnr"), "ssim": mean("ssim"),
                "perceptual_proxy": mean("perceptual_proxy")}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["task_id", "kept", "reason", "edit_area", "UR", "PSNR", "SSIM", "perceptual_proxy"])
            for r in self.rows:
                w.writerow([r.task_id, int(r.kept), r.reason, r.edit_area,
                            repr(r.ur), repr(r.psnr), repr(r.ssim), repr(r.perceptual_proxy)])


def evaluate_sample(source, edited, edit_region, bank: FilterBank, task_id: int = 0,
                    task_type: str = "") -> SampleRow:
    """All four metrics for one (source, edited) pair given its edit mask."""
    edit_region = np.asarray(edit_region, dtype=bool)
    a = regions.area(edit_region)
    if task_type in EXCLUDED_TASK_TYPES:
        return SampleRow(task_id, False, f"excluded-type:{task_type}", edit_area=a)
    ok, reason = regions.area_filter(edit_region)
    if not ok:
        return SampleRow(task_id, False, reason, edit_area=a)
    keep = regions.complement(edit_region)
    s8, e8 = to_8bit(source), to_8bit(edited)
    return SampleRow(
        task_id, True, reason,
        ur=unchanged_ratio(s8, e8, keep),
        psnr=masked_psnr(s8, e8, keep),
        ssim=masked_ssim(s8, e8, keep),
        perceptual_proxy=masked_perceptual(s8 / 255.0, e8 / 255.0, keep, bank),
        edit_area=a,
    )


def evaluate_set(tasks, edited_images, bank: FilterBank, mode: str = "segment") -> MetricReport:
    """Metrics for each (task, edited image) pair.

    ``mode="segment"`` builds the edit region as the union of the segmenter's
    masks on source and edited image; ``mode="gt"`` uses the task's ground
    truth mask.
    """
    if len(tasks) == 0:
        raise ValueError("need at least one sample")
    if len(tasks) != len(edited_images):
        raise ValueError("one edited image per task required")
    report = MetricReport()
    for task, edited in zip(tasks, edited_images):
        if mode == "gt":
            m = task.gt_mask
        elif mode == "segment":
            m = regions.edit_mask(task.source, edited, task.instruction)
        else:
            raise ValueError(f"unknown segmenter mode {mode!r}")
        report.rows.append(evaluate_sample(task.source, edited, m, bank, task.task_id, task.task_type))
    return report


def evaluate_directory(root, bank: FilterBank) -> MetricReport:
    """Evaluate a directory of sample folders.

    Each sub-directory holds ``source.png``, ``edited.png``, ``meta.json`` and,
    optionally, ``mask.png`` / ``mask.pbm`` marking the edit region. Without a
    mask file, ``meta.json`` must carry an ``instruction`` record so the
    segmenter can be run.
    """
    from .env import _shape_from, EditInstruction, read_image

    report = MetricReport()
    for d in sorted(p for p in Path(root).iterdir() if p.is_dir()):
        meta = json.loads((d / "meta.json").read_text())
        src, edt = read_image(d / "source.png"), read_image(d / "edited.png")
        mask_file = next((d / n for n in ("mask.png", "mask.pbm") if (d / n).exists()), None)
        if mask_file is not None:
            m = regions.read_mask_image(mask_file)
        else:
            i = meta["instruction"]
            instr = EditInstruction(i["verb"], _shape_from(i["shape"]),
                                    None if i.get("new_color") is None else tuple(i["new_color"]),
                                    None if i.get("offset") is None else tuple(i["offset"]))
            m = regions.edit_mask(src, edt, instr)
        report.rows.append(evaluate_sample(src, edt, m, bank, int(meta.get("task_id", 0)),
                                           meta.get("task_type", "")))
    return report
