"""The velocity field v(x_t, t, c): a small tanh MLP with hand-written gradients.

All parameters live in one flat float64 vector; the per-layer matrices are
reshaped views into it. That keeps the optimizer, EMA, finite-difference
checks and checkpointing one-liners.

Output head. A width-256 MLP cannot carry a 768-dim noise sample through its
hidden layers, so with ``skip=True`` the head routes the noisy state and the
source image (which rides at the front of the condition vector) around the
MLP through two learned gains and divides by ``max(t, t_floor)``::

    v = (W3 h2 + b3 + g_x * x_t + g_s * source) / max(t, t_floor)

With ``g_x = 1, g_s = -1`` (their initial values) this is the conditional
velocity ``(x_t - x0_hat) / t`` for the clean-image estimate
``x0_hat = source - mlp``, so the MLP only has to learn the localized edit
residual. ``skip=False`` gives the plain MLP.
"""
from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "editgrpo-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Arch:
    image_shape: tuple[int, int, int] = (16, 16, 3)
    hidden: tuple[int, ...] = (256, 256)
    time_k: int = 8
    cond_dim: int = 16 + 16 * 16 * 3
    skip: bool = True
    t_floor: float = 0.15
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ValueError(f"bad image shape {self.image_shape}")
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError(f"bad hidden widths {self.hidden}")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.skip and self.cond_dim < self.n_pixels:
            raise ValueError("skip head needs the source image inside the condition vector")
        if self.time_k < 0 or self.cond_dim < 0 or not self.t_floor > 0:
            raise ValueError("bad time/condition settings")

    @property
    def n_pixels(self) -> int:
        h, w, c = self.image_shape
        return h * w * c

    @property
    def n_in(self) -> int:
        return self.n_pixels + 2 * self.time_k + self.cond_dim

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        widths = [self.n_in, *self.hidden, self.n_pixels]
        out = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]), start=1):
            out.append((f"W{i}", (a, b)))
            out.append((f"b{i}", (b,)))
        if self.skip:
            out.append(("skip", (2,)))
        return out

    @property
    def n_params(self) -> int:
        return sum(math.prod(s) for _, s in self.layout())


@dataclass
class NetParams:
    arch: Arch
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.arch.n_params,):
            raise ValueError(f"expected {self.arch.n_params} params, got {self.flat.shape}")

    def views(self) -> dict[str, np.ndarray]:
        out, i = {}, 0
        for name, shape in self.arch.layout():
            n = math.prod(shape)
            out[name] = self.flat[i:i + n].reshape(shape)
            i += n
        return out

    def copy(self) -> "NetParams":
        return NetParams(self.arch, self.flat.copy())

    def zeros_like(self) -> "NetParams":
        return NetParams(self.arch, np.zeros_like(self.flat))


@dataclass
class ForwardCache:
    z: np.ndarray
    acts: list[np.ndarray]
    x: np.ndarray
    src: np.ndarray | None
    scale: np.ndarray
    batch_shape: tuple[int, ...]
    params_id: int
    used: bool = field(default=False)


def init_params(rng: np.random.Generator, arch: Arch, zero_head: bool = False) -> NetParams:
    """He-style normal weights, zero biases, skip gains (1, -1).

    ``zero_head=True`` zeroes the output layer instead, so a skip-head model
    starts as an exact source copier.
    """
    p = NetParams(arch, np.zeros(arch.n_params))
    last = f"W{len(arch.hidden) + 1}"
    for name, view in p.views().items():
        if name.startswith("W") and not (zero_head and name == last):
            view[...] = rng.standard_normal(view.shape) * math.sqrt(2.0 / view.shape[0])
        elif name == "skip":
            view[...] = (1.0, -1.0)
    return p


def time_embed(t, k: int = 8) -> np.ndarray:
    """[sin(2 pi j t)]_j ++ [cos(2 pi j t)]_j for j = 1..k; batched over t."""
    t = np.asarray(t, dtype=np.float64)
    ang = 2.0 * np.pi * t[..., None] * np.arange(1, k + 1)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _as_batch(x_t, t, c, arch: Arch):
    x = np.asarray(x_t, dtype=np.float64)
    single = x.shape == arch.image_shape
    if single:
        x = x[None]
    if x.shape[1:] != arch.image_shape:
        raise ValueError(f"x_t shape {np.shape(x_t)} does not match {arch.image_shape}")
    b = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    c = np.asarray(c, dtype=np.float64)
    c = np.broadcast_to(c, (b, c.shape[-1])) if c.ndim == 1 else c
    if c.shape != (b, arch.cond_dim):
        raise ValueError(f"condition shape {c.shape} does not match ({b}, {arch.cond_dim})")
    return x.reshape(b, -1), t, c, single


def forward(p: NetParams, x_t, t, c) -> tuple[np.ndarray, ForwardCache]:
    """Velocity for one state (H, W, C) or a batch (B, H, W, C)."""
    arch = p.arch
    x, t, c, single = _as_batch(x_t, t, c, arch)
    w = p.views()
    z = np.concatenate([x, time_embed(t, arch.time_k), c], axis=1)
    acts = [z]
    n_layers = len(arch.hidden) + 1
    for i in range(1, n_layers):
        acts.append(np.tanh(acts[-1] @ w[f"W{i}"] + w[f"b{i}"]))
    raw = acts[-1] @ w[f"W{n_layers}"] + w[f"b{n_layers}"]
    src = None
    if arch.skip:
        src = c[:, :arch.n_pixels]
        raw = raw + w["skip"][0] * x + w["skip"][1] * src
    scale = 1.0 / np.maximum(t, arch.t_floor) if arch.skip else np.ones_like(t)
    v = raw * scale[:, None]
    shape = arch.image_shape if single else (x.shape[0], *arch.image_shape)
    cache = ForwardCache(z, acts, x, src, scale, shape, id(p.flat))
    return v.reshape(shape), cache


def backward(p: NetParams, cache: ForwardCache, upstream) -> tuple[NetParams, np.ndarray]:
    """Gradients of <upstream, v> w.r.t. the parameters and w.r.t. x_t."""
    if cache.used:
        raise RuntimeError("forward cache already consumed")
    if cache.params_id != id(p.flat):
        raise RuntimeError("forward cache was produced by different parameters")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != cache.batch_shape:
        raise ValueError(f"upstream shape {upstream.shape} != output {cache.batch_shape}")
    cache.used = True
    arch = p.arch
    w = p.views()
    g = p.zeros_like()
    gw = g.views()
    n_layers = len(arch.hidden) + 1
    d = upstream.reshape(cache.x.shape) * cache.scale[:, None]
    dx = np.zeros_like(cache.x)
    if arch.skip:
        gw["skip"][0] = np.sum(d * cache.x)
        gw["skip"][1] = np.sum(d * cache.src)
        dx += w["skip"][0] * d
    for i in range(n_layers, 0, -1):
        a_in = cache.acts[i - 1]
        gw[f"W{i}"][...] = a_in.T @ d
        gw[f"b{i}"][...] = d.sum(axis=0)
        d = d @ w[f"W{i}"].T
        if i > 1:
            d = d * (1.0 - a_in * a_in)
    dx += d[:, :arch.n_pixels]
    return g, dx.reshape(cache.batch_shape)


def velocity(p: NetParams, x_t, t, c) -> np.ndarray:
    return forward(p, x_t, t, c)[0]


def _encode(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").astype(np.float64)


def save_checkpoint(path, params: NetParams, *, step: int = 0, rng_position: int = 0,
                    extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    """JSON record with base64 float64 payloads; round-trips bit-exactly."""
    arch = asdict(params.arch)
    record = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": arch,
        "step": int(step),
        "rng_position": int(rng_position),
        "params": _encode(params.flat),
        "extra": {k: _encode(v) for k, v in (extra or {}).items()},
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(record, indent=1, sort_keys=True))


def load_checkpoint(path) -> tuple[NetParams, dict]:
    record = json.loads(Path(path).read_text())
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an editgrpo checkpoint")
    if record.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {record.get('version')}")
    params = NetParams(Arch(**record["arch"]), _decode(record["params"]))
    info = {
        "step": record["step"],
        "rng_position": record["rng_position"],
        "extra": {k: _decode(v) for k, v in record["extra"].items()},
        "meta": record["meta"],
    }
    return params, info
