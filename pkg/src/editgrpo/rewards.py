"""Region-specific rewards.

Semantic following is judged on the edit region M, locality preservation on
its complement. Both judges are deterministic stand-ins for frozen external
models:

* the score judge turns the edit-region L1 error against the ground-truth
  target into a softmax over the scores 0..5 and returns the expected score;
* the directional judge compares the feature-space change of the image with a
  linear text direction read off the instruction embedding;
* the perceptual judge is a random-filter feature distance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import regions
from .metrics import FilterBank, masked_ssim_values, perceptual_distance
from .tensor import EmptyRegionError, l1_mean, stream

SCORES = np.arange(6, dtype=np.float64)
ERROR_ANCHORS = np.array([0.5, 0.4, 0.3, 0.2, 0.1, 0.0])
KAPPA = 10.0


@dataclass(frozen=True)
class RewardWeights:
    vlm: float = 4.0
    clip: float = 1.0
    diff: float = 4.0
    ssim: float = 2.0
    lpips: float = 1.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"weight {k} must be finite and >= 0, got {v}")


@dataclass
class RewardPair:
    r_sem: float
    r_pres: float
    components: dict = field(default_factory=dict)


def score_distribution(edited, target, m, kappa: float = KAPPA) -> np.ndarray:
    """Softmax over scores 0..5 of -kappa * |e - anchor_s|, e = edit-region L1 error."""
    e = l1_mean(edited, target, m)
    logits = -kappa * np.abs(e - ERROR_ANCHORS)
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()


def r_vlm(probs) -> float:
    """Expected score, scaled to [0, 1]."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (6,) or abs(probs.sum() - 1.0) > 1e-9 or np.any(probs < 0):
        raise ValueError("probs must be a distribution over the six scores")
    return float(SCORES @ probs / 5.0)


class DirectionalJudge:
    """Fixed linear image features and a linear text direction.

    The image map is random. The text map is a ridge fit from instruction
    embeddings to the feature change of ground-truth edits, computed once from
    a dedicated environment stream, the way a pretrained text encoder comes
    already aligned with its image encoder.
    """

    def __init__(self, image_map: np.ndarray, text_map: np.ndarray):
        self.image_map = image_map  # (n_feat, n_pixels)
        self.text_map = text_map    # (n_feat, embed_dim)

    @classmethod
    def build(cls, seed: int, env_cfg=None, n_feat: int = 32, n_fit: int = 400, ridge: float = 1e-3):
        from .env import EnvConfig, task_stream

        env_cfg = env_cfg or EnvConfig()
        n_pix = env_cfg.height * env_cfg.width * 3
        rng = stream(seed, "features", 0)
        image_map = rng.standard_normal((n_feat, n_pix)) / math.sqrt(n_pix)
        tasks = task_stream(seed, n_fit, env_cfg, split=99)
        e = np.stack([t.embedding for t in tasks])
        d = np.stack([image_map @ (t.target - t.source).ravel() for t in tasks])
        a = e.T @ e + ridge * np.eye(e.shape[1])
        text_map = np.linalg.solve(a, e.T @ d).T
        return cls(image_map, text_map)

    def features(self, img) -> np.ndarray:
        return self.image_map @ np.asarray(img, dtype=np.float64).ravel()

    def direction(self, embedding) -> np.ndarray:
        return self.text_map @ np.asarray(embedding, dtype=np.float64)


def cosine(u, v) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def r_clip_proxy(source, edited, embedding, judge: DirectionalJudge, m=None) -> float:
    """Cosine between the feature change and the instruction direction.

    With a mask ``m`` only the change inside it is featurized.
    """
    diff = np.asarray(edited, dtype=np.float64) - np.asarray(source, dtype=np.float64)
    if m is not None:
        diff = diff * np.asarray(m, dtype=bool)[..., None]
    return cosine(judge.image_map @ diff.ravel(), judge.direction(embedding))


def r_diff(src, edited, keep) -> float:
    return 1.0 - l1_mean(src, edited, keep)


def r_ssim(src, edited, keep) -> float:
    return masked_ssim_values(src, edited, keep, 1.0)


def r_lpips_proxy(src, edited, keep, bank: FilterBank) -> float:
    return -perceptual_distance(src, edited, keep, bank)


@dataclass
class Judges:
    """The frozen reward models shared by every rollout of a run."""

    directional: DirectionalJudge
    filters: FilterBank

    @classmethod
    def build(cls, seed: int, env_cfg=None) -> "Judges":
        return cls(DirectionalJudge.build(seed, env_cfg), FilterBank(seed))


def semantic_reward(edited, task, m, w: RewardWeights, judges: Judges) -> tuple[float, dict]:
    vlm = r_vlm(score_distribution(edited, task.target, m))
    clip = r_clip_proxy(task.source, edited, task.embedding, judges.directional, m)
    return w.vlm * vlm + w.clip * clip, {"r_vlm": vlm, "r_clip": clip}


def preservation_reward(src, edited, keep, w: RewardWeights, judges: Judges) -> tuple[float, dict]:
    diff = r_diff(src, edited, keep)
    ssim = r_ssim(src, edited, keep)
    lp = r_lpips_proxy(src, edited, keep, judges.filters)
    return w.diff * diff + w.ssim * ssim + w.lpips * lp, {"r_diff": diff, "r_ssim": ssim, "r_lpips": lp}


def region_rewards(task, edited, m, w: RewardWeights, judges: Judges) -> RewardPair | None:
    """Both rewards for one edited sample, or ``None`` if the mask is filtered out."""
    ok, _ = regions.area_filter(m)
    if not ok:
        return None
    try:
        r_sem, c_sem = semantic_reward(edited, task, m, w, judges)
        r_pres, c_pres = preservation_reward(task.source, edited, regions.complement(m), w, judges)
    except EmptyRegionError:
        return None
    return RewardPair(r_sem, r_pres, {**c_sem, **c_pres})


REWARD_CSV_HEADER = ["task_id", "sample", "r_vlm", "r_clip", "r_diff", "r_ssim", "r_lpips", "r_sem", "r_pres"]


def reward_csv_row(task_id: int, sample: int, pair: RewardPair | None) -> list:
    if pair is None:
        return [task_id, sample] + [""] * 7
    c = pair.components
    return [task_id, sample] + [repr(float(c[k])) for k in ("r_vlm", "r_clip", "r_diff", "r_ssim", "r_lpips")] + [
        repr(float(pair.r_sem)), repr(float(pair.r_pres))]
