"""Flow matching: the training loss, the Euler ODE sampler and the Gaussian-step SDE sampler.

Samplers run on a batch of independent starts at once (the G members of a
rollout group); each step costs one batched forward pass. Time runs from
t = 1 (noise) down to t = 0 (image) on a uniform grid.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .tensor import LOG_SQRT_2PI, gaussian_logpdf
from .velocity import NetParams, backward, forward


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 6
    noise_level: float = 0.9

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ValueError("steps must be positive")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")

    @property
    def times(self) -> np.ndarray:
        return np.linspace(1.0, 0.0, self.steps + 1)

    def step_std(self, k: int) -> float:
        t = self.times
        return self.noise_level * math.sqrt(abs(t[k + 1] - t[k]))


@dataclass
class Trajectory:
    """Rollouts of B samples sharing one condition.

    ``states[k]`` is the batch at ``times[k]``; ``states[0]`` is the initial
    noise and ``states[-1]`` the final image. ``logprob[k]`` holds the
    channel-summed per-pixel log-density of the step k -> k+1 transition and is
    ``None`` for a noiseless rollout.
    """

    states: np.ndarray         # (T+1, B, H, W, C)
    means: np.ndarray          # (T, B, H, W, C)
    stds: np.ndarray           # (T,)
    times: np.ndarray          # (T+1,)
    logprob: np.ndarray | None  # (T, B, H, W)
    cond: np.ndarray           # (B, cond_dim)
    task_id: int = -1

    @property
    def steps(self) -> int:
        return len(self.stds)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def interpolate(x0, x1, t: float) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim:
        t = t.reshape(t.shape + (1,) * (x0.ndim - t.ndim))
    return (1.0 - t) * x0 + t * x1


def fm_loss_and_grads(p: NetParams, x0, x1, c, rng: np.random.Generator, t=None):
    """Mean over the batch of ||(x1 - x0) - v(x_t, t, c)||^2, t ~ U(0, 1).

    Returns (loss, grads). ``t`` may be passed explicitly (tests, finite
    differences); otherwise it is drawn from ``rng``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.ndim == 3:
        x0, x1 = x0[None], x1[None]
    b = x0.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    if t is None:
        t = rng.uniform(0.0, 1.0, size=b)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    xt = interpolate(x0, x1, t)
    v, cache = forward(p, xt, t, c)
    resid = v - (x1 - x0)
    loss = float(np.sum(resid * resid) / b)
    grads, _ = backward(p, cache, 2.0 * resid / b)
    return loss, grads


def _batch(x1):
    x1 = np.asarray(x1, dtype=np.float64)
    return (x1[None], True) if x1.ndim == 3 else (x1, False)


def ode_sample(p: NetParams, x1, c, cfg: SamplerConfig) -> np.ndarray:
    """Euler integration of the learned ODE from t = 1 to t = 0."""
    x, single = _batch(x1)
    times = cfg.times
    for k in range(cfg.steps):
        v, _ = forward(p, x, times[k], c)
        x = x + v * (times[k + 1] - times[k])
    return x[0] if single else x


def sde_sample(p: NetParams, x1, c, cfg: SamplerConfig, rng, task_id: int = -1) -> Trajectory:
    """Euler mean plus isotropic Gaussian noise of std ``a * sqrt(|dt|)``.

    ``rng`` is one Generator, or a sequence with one Generator per sample so
    that each sample's noise is independent of the batch composition.
    """
    x, _ = _batch(x1)
    b = x.shape[0]
    rngs = list(rng) if isinstance(rng, (list, tuple)) else None
    if rngs is not None and len(rngs) != b:
        raise ValueError("need one generator per sample")
    c = np.asarray(c, dtype=np.float64)
    cond = np.broadcast_to(c, (b, c.shape[-1])).copy() if c.ndim == 1 else c.copy()
    times = cfg.times
    states, means = [x], []
    stds = np.array([cfg.step_std(k) for k in range(cfg.steps)])
    logprob = [] if cfg.noise_level > 0 else None
    for k in range(cfg.steps):
        v, _ = forward(p, x, times[k], cond)
        mu = x + v * (times[k + 1] - times[k])
        if logprob is None:
            x = mu
        else:
            if rngs is None:
                eps = rng.standard_normal(mu.shape)
            else:
                eps = np.stack([r.standard_normal(mu.shape[1:]) for r in rngs])
            x = mu + stds[k] * eps
            logprob.append(gaussian_logpdf(x, mu, stds[k]).sum(axis=-1))
        means.append(mu)
        states.append(x)
    return Trajectory(
        states=np.stack(states),
        means=np.stack(means),
        stds=stds,
        times=times,
        logprob=None if logprob is None else np.stack(logprob),
        cond=cond,
        task_id=task_id,
    )


def step_mean(p: NetParams, traj: Trajectory, k: int):
    """Transition mean of step k under ``p``, with the forward cache."""
    if not 0 <= k < traj.steps:
        raise IndexError(f"step {k} out of range for {traj.steps} steps")
    x = traj.states[k]
    v, cache = forward(p, x, traj.times[k], traj.cond)
    return x + v * (traj.times[k + 1] - traj.times[k]), cache


def step_logprob_under(p: NetParams, traj: Trajectory, k: int) -> np.ndarray:
    """Per-pixel (channel-summed) log-density of the realized step k under ``p``."""
    mu, _ = step_mean(p, traj, k)
    if traj.stds[k] <= 0:
        raise ValueError("noiseless step has no density")
    return gaussian_logpdf(traj.states[k + 1], mu, traj.stds[k]).sum(axis=-1)


def step_logprob_backward(p: NetParams, traj: Trajectory, k: int, pixel_weights: np.ndarray):
    """Log-density of step k and the gradient of sum(pixel_weights * logprob).

    ``pixel_weights`` has shape (B, H, W). Returns (logprob (B, H, W), grads).
    """
    mu, cache = step_mean(p, traj, k)
    sigma = traj.stds[k]
    resid = traj.states[k + 1] - mu
    lp = gaussian_logpdf(traj.states[k + 1], mu, sigma).sum(axis=-1)
    dmu = pixel_weights[..., None] * resid / (sigma * sigma)
    grads, _ = backward(p, cache, dmu * (traj.times[k + 1] - traj.times[k]))
    return lp, grads


def scalar_step_logprob(traj: Trajectory, k: int, i: int) -> float:
    """Joint log-density of sample i's step k, straight from the Gaussian formula."""
    d = traj.states[k + 1, i] - traj.means[k, i]
    s = traj.stds[k]
    return float(-d.size * (LOG_SQRT_2PI + math.log(s)) - np.sum(d * d) / (2 * s * s))


def dump_trajectory_csv(path, traj: Trajectory, region: np.ndarray | None = None) -> None:
    """Per-step debug table: norms, sigma and region log-prob means (sample 0)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "t", "state_norm", "mean_norm", "sigma", "logprob_region", "logprob_rest"])
        for k in range(traj.steps):
            lp_in = lp_out = ""
            if traj.logprob is not None:
                g = traj.logprob[k, 0]
                if region is not None and region.any():
                    lp_in = repr(float(g[region].mean()))
                if region is not None and (~region).any():
                    lp_out = repr(float(g[~region].mean()))
                if region is None:
                    lp_in = repr(float(g.mean()))
            w.writerow([k, repr(float(traj.times[k])), repr(float(np.linalg.norm(traj.states[k, 0]))),
                        repr(float(np.linalg.norm(traj.means[k, 0]))), repr(float(traj.stds[k])),
                        lp_in, lp_out])
