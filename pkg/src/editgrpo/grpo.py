"""Region-decoupled group-relative policy optimization.

Rewards for the edit region and the non-edit region are normalized within the
rollout group separately, and each advantage only multiplies the log-density
of its own region's pixels. The ``combined`` baseline sums the two rewards and
applies one advantage to the whole image.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import regions
from .env import EditTask, EnvConfig, task_stream
from .flow import SamplerConfig, Trajectory, sde_sample, step_logprob_under, step_mean
from .rewards import Judges, RewardPair, RewardWeights, region_rewards
from .tensor import EmptyRegionError, gaussian_logpdf, stream
from .velocity import NetParams, backward

log = logging.getLogger(__name__)

MODES = ("decoupled", "combined", "semantic_only", "preservation_only")


class NumericalAbort(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_beta: float = 1e-4
    lambda_sem: float = 0.5
    lambda_pres: float = 1.0
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    adam_eps: float = 1e-8
    inner_epochs: int = 1
    ema_decay: float = 0.9
    std_eps: float = 1e-8
    tasks_per_iter: int = 32
    adv_std: str = "group"  # or "batch": per-group mean, std over the whole iteration

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.kl_beta < 0 or self.lambda_sem < 0 or self.lambda_pres < 0:
            raise ValueError("loss weights must be >= 0")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.adv_std not in ("group", "batch"):
            raise ValueError(f"unknown adv_std {self.adv_std!r}")

    def for_mode(self, mode: str) -> "OptimConfig":
        if mode == "semantic_only":
            return replace(self, lambda_pres=0.0)
        if mode == "preservation_only":
            return replace(self, lambda_sem=0.0)
        if mode in ("decoupled", "combined"):
            return self
        raise ValueError(f"unknown mode {mode!r}")


def group_normalize(values, std_eps: float = 1e-8, usable=None, std=None):
    """(v - mean) / (std + std_eps) over the usable entries, population std.

    Unusable entries get advantage 0. Returns ``None`` when fewer than two
    entries are usable. ``std`` overrides the group's own std.
    """
    v = np.asarray(values, dtype=np.float64)
    usable = np.ones(v.shape, dtype=bool) if usable is None else np.asarray(usable, dtype=bool)
    if usable.sum() < 2:
        return None
    u = v[usable]
    s = u.std() if std is None else std
    out = np.zeros_like(v)
    out[usable] = (u - u.mean()) / (s + std_eps)
    return out


def region_mean_grid(grid: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Per-sample mean of (B, H, W) ``grid`` over (B, H, W) ``masks``; empty masks give 0."""
    masks = np.asarray(masks, dtype=bool)
    cnt = masks.sum(axis=(1, 2))
    s = np.where(masks, grid, 0.0).sum(axis=(1, 2))
    return np.where(cnt > 0, s / np.maximum(cnt, 1), 0.0)


def region_logprob(traj: Trajectory, masks, params: NetParams | None = None):
    """Region-aggregated log-densities, per step (T, B) and averaged over steps (B,).

    With ``params=None`` the stored rollout log-densities are used; otherwise
    every step is re-evaluated under ``params``.
    """
    masks = np.broadcast_to(np.asarray(masks, dtype=bool), traj.states.shape[1:4])
    if not masks.any(axis=(1, 2)).all():
        raise EmptyRegionError("region log-prob over an empty mask")
    per_step = []
    for k in range(traj.steps):
        g = traj.logprob[k] if params is None else step_logprob_under(params, traj, k)
        per_step.append(region_mean_grid(g, masks))
    per_step = np.stack(per_step)
    return per_step, per_step.mean(axis=0)


def clip_pg_loss(adv, logp_new, logp_old, eps: float):
    """-min(rho * A, clip(rho, 1 - eps, 1 + eps) * A) and its derivative in logp_new."""
    adv = np.asarray(adv, dtype=np.float64)
    rho = np.exp(np.asarray(logp_new, dtype=np.float64) - np.asarray(logp_old, dtype=np.float64))
    unclipped = rho * adv
    clipped = np.clip(rho, 1.0 - eps, 1.0 + eps) * adv
    loss = -np.minimum(unclipped, clipped)
    # the gradient flows only where the unclipped branch is selected
    active = unclipped <= clipped
    grad = np.where(active, -adv * rho, 0.0)
    return loss, grad


def kl_penalty(traj: Trajectory, params: NetParams, ref_params: NetParams) -> float:
    """Mean over steps and elements of |mu - mu_ref|^2 / (2 sigma^2) at the rollout states."""
    return kl_and_upstreams(traj, params, ref_params)[0]


def kl_and_upstreams(traj: Trajectory, params, ref_params):
    if np.any(traj.stds <= 0):
        raise ValueError("KL is undefined for a noiseless rollout")
    total, ups = 0.0, []
    n = traj.steps * traj.means[0].size
    for k in range(traj.steps):
        mu, _ = step_mean(params, traj, k)
        mu_ref, _ = step_mean(ref_params, traj, k)
        d = mu - mu_ref
        s2 = traj.stds[k] ** 2
        total += float(np.sum(d * d) / (2 * s2)) / n
        ups.append(d / (s2 * n))
    return total, ups


@dataclass
class GroupBatch:
    task: EditTask
    traj: Trajectory
    masks: np.ndarray                 # (G, H, W) edit masks M^i
    rewards: list[RewardPair | None]
    usable: np.ndarray                # (G,) bool
    adv_sem: np.ndarray | None = None
    adv_pres: np.ndarray | None = None
    adv_comb: np.ndarray | None = None

    @property
    def r_sem(self) -> np.ndarray:
        return np.array([r.r_sem if r else np.nan for r in self.rewards])

    @property
    def r_pres(self) -> np.ndarray:
        return np.array([r.r_pres if r else np.nan for r in self.rewards])

    def normalize(self, std_eps: float = 1e-8, stds: dict | None = None) -> bool:
        stds = stds or {}
        rs, rp = np.nan_to_num(self.r_sem), np.nan_to_num(self.r_pres)
        self.adv_sem = group_normalize(rs, std_eps, self.usable, stds.get("sem"))
        self.adv_pres = group_normalize(rp, std_eps, self.usable, stds.get("pres"))
        self.adv_comb = group_normalize(rs + rp, std_eps, self.usable, stds.get("comb"))
        return self.adv_sem is not None


def policy_loss(batch: GroupBatch, params: NetParams, ref_params: NetParams, terms, eps: float,
                beta: float, old_logprob: np.ndarray | None = None):
    """Clipped policy-gradient loss over region terms, plus beta * KL.

    ``terms`` is a list of ``(name, advantages (G,), masks (G, H, W), weight)``.
    Each term contributes ``weight * mean_i 1/T sum_k ClipPG(A_i, rho_ik)`` with
    ``rho_ik`` the ratio of region-mean log-densities. Returns
    ``(breakdown, grads)``.
    """
    traj = batch.traj
    old = traj.logprob if old_logprob is None else old_logprob
    usable = batch.usable
    n_use = int(usable.sum())
    t_steps = traj.steps
    grads = params.zeros_like()
    out = {name: 0.0 for name, *_ in terms}
    clipped = total_terms = 0
    kl = 0.0
    n_el = t_steps * traj.means[0].size
    for k in range(t_steps):
        mu, cache = step_mean(params, traj, k)
        sigma = traj.stds[k]
        lp = gaussian_logpdf(traj.states[k + 1], mu, sigma).sum(axis=-1)
        pix_w = np.zeros(lp.shape)
        for name, adv, masks, weight in terms:
            masks = np.asarray(masks, dtype=bool)
            new_r = region_mean_grid(lp, masks)
            old_r = region_mean_grid(old[k], masks)
            loss, dl = clip_pg_loss(adv, new_r, old_r, eps)
            loss = np.where(usable, loss, 0.0)
            dl = np.where(usable, dl, 0.0)
            out[name] += weight * float(loss.sum()) / (n_use * t_steps)
            cnt = np.maximum(masks.sum(axis=(1, 2)), 1)
            coef = weight * dl / (n_use * t_steps * cnt)
            pix_w += coef[:, None, None] * masks
            rho = np.exp(new_r - old_r)
            clipped += int(np.sum(usable & (np.abs(rho - 1.0) > eps)))
            total_terms += n_use
        dmu = pix_w[..., None] * (traj.states[k + 1] - mu) / (sigma * sigma)
        if beta > 0:
            mu_ref, _ = step_mean(ref_params, traj, k)
            d = mu - mu_ref
            kl += float(np.sum(d * d) / (2 * sigma * sigma)) / n_el
            dmu = dmu + beta * d / (sigma * sigma * n_el)
        g, _ = backward(params, cache, dmu * (traj.times[k + 1] - traj.times[k]))
        grads.flat += g.flat
    out["kl"] = kl
    out["total"] = sum(out[name] for name, *_ in terms) + beta * kl
    out["clip_frac"] = clipped / max(total_terms, 1)
    return out, grads


def decoupled_step(batch: GroupBatch, params, ref_params, cfg: OptimConfig):
    """Loss breakdown and gradients: semantic advantage on M, preservation on its complement."""
    if batch.adv_sem is None or batch.usable.sum() < 2:
        log.info("task %s: fewer than two usable samples, group skipped", batch.traj.task_id)
        return None
    terms = [("loss_sem", batch.adv_sem, batch.masks, cfg.lambda_sem),
             ("loss_pres", batch.adv_pres, ~batch.masks, cfg.lambda_pres)]
    return policy_loss(batch, params, ref_params, terms, cfg.clip_eps, cfg.kl_beta)


def global_step(batch: GroupBatch, params, ref_params, cfg: OptimConfig):
    """Baseline: one advantage from r_sem + r_pres, log-prob over the whole image."""
    if batch.adv_comb is None or batch.usable.sum() < 2:
        log.info("task %s: fewer than two usable samples, group skipped", batch.traj.task_id)
        return None
    full = np.ones_like(batch.masks)
    terms = [("loss_global", batch.adv_comb, full, cfg.lambda_sem + cfg.lambda_pres)]
    return policy_loss(batch, params, ref_params, terms, cfg.clip_eps, cfg.kl_beta)


class AdamW:
    """Adam with decoupled weight decay, operating on a flat parameter vector."""

    def __init__(self, n: int, lr: float, betas=(0.9, 0.999), weight_decay: float = 0.0, eps: float = 1e-8):
        self.lr, self.betas, self.wd, self.eps = lr, tuple(betas), weight_decay, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, flat: np.ndarray, grad: np.ndarray) -> None:
        b1, b2 = self.betas
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        mhat = self.m / (1 - b1 ** self.t)
        vhat = self.v / (1 - b2 ** self.t)
        flat *= 1.0 - self.lr * self.wd
        flat -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        return {"adam_m": self.m, "adam_v": self.v, "adam_t": np.array([float(self.t)])}

    def load(self, state: dict[str, np.ndarray]) -> None:
        self.m, self.v, self.t = state["adam_m"].copy(), state["adam_v"].copy(), int(state["adam_t"][0])


def ema_update(ema: NetParams, params: NetParams, decay: float) -> NetParams:
    if ema.flat.shape != params.flat.shape:
        raise ValueError("EMA and parameters differ in shape")
    if not 0 <= decay < 1:
        raise ValueError("decay must lie in [0, 1)")
    return NetParams(params.arch, decay * ema.flat + (1.0 - decay) * params.flat)


def rollout_noise(noise_seed: int, iteration: int, task_index: int, g: int, shape):
    """Initial noise and per-sample step generators for one rollout group."""
    gens = [stream(noise_seed, "rollout", iteration, task_index, i) for i in range(g)]
    x1 = np.stack([r.standard_normal(shape) for r in gens])
    return x1, gens


def collect_group(task: EditTask, old_params: NetParams, sampler: SamplerConfig, cfg: OptimConfig,
                  weights: RewardWeights, judges: Judges, noise_seed: int, iteration: int,
                  task_index: int, oracle_masks: bool = False) -> GroupBatch:
    """Roll out G samples under the old policy and score them region by region."""
    x1, gens = rollout_noise(noise_seed, iteration, task_index, cfg.group_size, task.source.shape)
    traj = sde_sample(old_params, x1, task.condition, sampler, gens, task_id=task.task_id)
    masks, rewards = [], []
    for i in range(cfg.group_size):
        # scored unclipped: clamping to [0, 1] lets the policy hide sampler
        # noise by pushing means past the range
        edited = traj.final[i]
        m = task.gt_mask.copy() if oracle_masks else regions.edit_mask(task.source, edited, task.instruction)
        masks.append(m)
        rewards.append(region_rewards(task, edited, m, weights, judges))
    usable = np.array([r is not None for r in rewards])
    return GroupBatch(task, traj, np.stack(masks), rewards, usable)


LOG_FIELDS = ["iteration", "r_sem", "r_pres", "r_vlm", "r_clip", "r_diff", "r_ssim", "r_lpips",
              "abs_adv_sem", "abs_adv_pres", "clip_frac", "kl", "loss_sem", "loss_pres", "loss_global",
              "loss_total", "n_usable"]


@dataclass
class TrainResult:
    params: NetParams
    ema: NetParams
    log: list[dict] = field(default_factory=list)
    optimizer: AdamW | None = None


def _mean(xs):
    xs = [x for x in xs if x == x]
    return math.fsum(xs) / len(xs) if xs else float("nan")


def train(base: NetParams, env_cfg: EnvConfig, cfg: OptimConfig, sampler: SamplerConfig,
          weights: RewardWeights, judges: Judges, *, mode: str = "decoupled", task_seed: int = 0,
          noise_seed: int = 0, iterations: int = 300, oracle_masks: bool = False,
          ref_params: NetParams | None = None, on_iteration=None) -> TrainResult:
    """Region-decoupled GRPO fine-tuning of ``base``.

    Each iteration draws ``tasks_per_iter`` tasks, rolls out a group per task
    under a frozen snapshot of the current policy, fixes the advantages, then
    averages the group gradients into one AdamW step per inner epoch, updates
    the EMA and re-syncs the snapshot.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    cfg = cfg.for_mode(mode)
    step_fn = global_step if mode == "combined" else decoupled_step
    params = base.copy()
    ema = base.copy()
    ref = (ref_params or base).copy()
    opt = AdamW(base.arch.n_params, cfg.lr, cfg.betas, cfg.weight_decay, cfg.adam_eps)
    result = TrainResult(params, ema, [], opt)
    for it in range(iterations):
        old = params.copy()
        tasks = task_stream(task_seed, cfg.tasks_per_iter, env_cfg, split=1, start=it * cfg.tasks_per_iter)
        batches = [collect_group(t, old, sampler, cfg, weights, judges, noise_seed, it, j, oracle_masks)
                   for j, t in enumerate(tasks)]
        stds = None
        if cfg.adv_std == "batch":
            pooled = [b for b in batches if b.usable.sum() >= 2]
            if pooled:
                rs = np.concatenate([np.nan_to_num(b.r_sem)[b.usable] - np.nanmean(b.r_sem) for b in pooled])
                rp = np.concatenate([np.nan_to_num(b.r_pres)[b.usable] - np.nanmean(b.r_pres) for b in pooled])
                rc = np.concatenate([(np.nan_to_num(b.r_sem + b.r_pres))[b.usable] - np.nanmean(b.r_sem + b.r_pres)
                                     for b in pooled])
                stds = {"sem": rs.std(), "pres": rp.std(), "comb": rc.std()}
        for b in batches:
            b.normalize(cfg.std_eps, stds)
        breakdowns = []
        for _ in range(cfg.inner_epochs):
            acc, n_acc = np.zeros_like(params.flat), 0
            for b in batches:
                res = step_fn(b, params, ref, cfg)
                if res is None:
                    continue
                info, grads = res
                if not (math.isfinite(info["total"]) and np.all(np.isfinite(grads.flat))):
                    raise NumericalAbort(f"non-finite loss or gradient at iteration {it}: {info}")
                acc += grads.flat
                n_acc += 1
                breakdowns.append(info)
            if n_acc:
                opt.step(params.flat, acc / n_acc)
        ema = ema_update(ema, params, cfg.ema_decay)
        result.ema = ema
        row = _log_row(it, batches, breakdowns)
        result.log.append(row)
        if on_iteration is not None:
            on_iteration(it, result)
    return result


def _log_row(it: int, batches, breakdowns) -> dict:
    pairs = [r for b in batches for r in b.rewards if r is not None]
    comp = lambda k: _mean([p.components[k] for p in pairs])
    advs = lambda attr: _mean([float(np.abs(getattr(b, attr))[b.usable].mean())
                               for b in batches if getattr(b, attr) is not None])
    bd = lambda k: _mean([d.get(k, float("nan")) for d in breakdowns])
    return {
        "iteration": it,
        "r_sem": _mean([p.r_sem for p in pairs]),
        "r_pres": _mean([p.r_pres for p in pairs]),
        "r_vlm": comp("r_vlm"), "r_clip": comp("r_clip"), "r_diff": comp("r_diff"),
        "r_ssim": comp("r_ssim"), "r_lpips": comp("r_lpips"),
        "abs_adv_sem": advs("adv_sem"), "abs_adv_pres": advs("adv_pres"),
        "clip_frac": bd("clip_frac"), "kl": bd("kl"),
        "loss_sem": bd("loss_sem"), "loss_pres": bd("loss_pres"), "loss_global": bd("loss_global"),
        "loss_total": bd("total"), "n_usable": len(pairs),
    }


def write_log_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r["iteration"], *[repr(float(r[k])) for k in LOG_FIELDS[1:-1]], r["n_usable"]])
