"""Run configuration and the end-to-end commands behind the CLI.

Every command is a pure function of its ``RunConfig`` (plus a checkpoint
where one is needed) and writes plain CSV / JSON / PNG files into the run's
output directory.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np

from . import grpo
from .env import EnvConfig, task_stream, write_png
from .flow import SamplerConfig, fm_loss_and_grads, ode_sample
from .grpo import MODES, AdamW, NumericalAbort, OptimConfig
from .metrics import FilterBank, MetricReport, evaluate_set
from .rewards import Judges, RewardWeights, semantic_reward
from .tensor import stream
from .velocity import Arch, NetParams, init_params, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

# task splits of one seed; tasks never cross splits
SPLIT_PRETRAIN, SPLIT_TRAIN, SPLIT_EVAL, SPLIT_PRETRAIN_VAL = 0, 1, 2, 8

MODE_LABELS = {
    "base": "Base",
    "semantic_only": "Semantic-Only",
    "preservation_only": "Preservation-Only",
    "combined": "Combined Optimization",
    "decoupled": "Decoupled Optimization",
}
TABLE_COLUMNS = ["method", "mode", "UR", "PSNR", "SSIM", "perceptual_proxy", "semantic", "score", "n_kept", "n_total"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 12000
    batch: int = 64
    lr: float = 1e-3
    pool: int = 20000
    val_tasks: int = 256
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.pool < 1 or self.val_tasks < 1 or self.log_every < 1:
            raise ValueError("pretrain sizes must be positive (steps may be 0)")
        if not self.lr > 0:
            raise ValueError("pretrain lr must be > 0")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    mode: str = "decoupled"
    iterations: int = 300
    eval_tasks: int = 200
    oracle_masks: bool = False
    out: str = "runs/default"
    env: EnvConfig = field(default_factory=EnvConfig)
    arch: Arch = field(default_factory=Arch)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    weights: RewardWeights = field(default_factory=RewardWeights)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iterations < 0 or self.eval_tasks < 1:
            raise ValueError("iterations must be >= 0 and eval_tasks >= 1")
        if self.arch.cond_dim != self.env.height * self.env.width * 3 + self.env.cond_dim:
            raise ValueError("arch.cond_dim must equal the env condition size (source pixels + embedding)")
        if self.arch.image_shape != self.env.image_shape:
            raise ValueError("arch.image_shape must match the env image shape")

    def to_dict(self) -> dict:
        return asdict(self)

    def run_dict(self) -> dict:
        """Config without the output directory, as stored in checkpoints (reruns elsewhere stay identical)."""
        d = self.to_dict()
        del d["out"]
        return d


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name) if name in ("env", "arch", "sampler", "optim", "weights", "pretrain") else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "config")


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    return config_from_dict(data)


def with_overrides(cfg: RunConfig, **flags) -> RunConfig:
    """Apply CLI flags (``None`` means not given) on top of ``cfg``."""
    try:
        if flags.get("seed") is not None:
            cfg = replace(cfg, seed=int(flags["seed"]))
        if flags.get("mode") is not None:
            cfg = replace(cfg, mode=flags["mode"])
        if flags.get("out") is not None:
            cfg = replace(cfg, out=str(flags["out"]))
        if flags.get("iters") is not None:
            cfg = replace(cfg, iterations=int(flags["iters"]))
        if flags.get("group_size") is not None:
            cfg = replace(cfg, optim=replace(cfg.optim, group_size=int(flags["group_size"])))
        if flags.get("noise_level") is not None:
            cfg = replace(cfg, sampler=replace(cfg.sampler, noise_level=float(flags["noise_level"])))
        if flags.get("steps") is not None:
            cfg = replace(cfg, sampler=replace(cfg.sampler, steps=int(flags["steps"])))
        if flags.get("oracle_masks"):
            cfg = replace(cfg, oracle_masks=True)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return cfg


def _out_dir(cfg: RunConfig, sub: str = "") -> Path:
    d = Path(cfg.out) / sub if sub else Path(cfg.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------- pretraining

@dataclass
class PretrainResult:
    params: NetParams
    losses: list[float]
    val_initial: float
    val_final: float
    seconds: float = 0.0


def validation_batch(cfg: RunConfig):
    """A fixed FM batch (targets, noise, times, conditions) for loss tracking."""
    tasks = task_stream(cfg.seed, cfg.pretrain.val_tasks, cfg.env, split=SPLIT_PRETRAIN_VAL)
    rng = stream(cfg.seed, "fm", 1)
    x0 = np.stack([t.target for t in tasks])
    x1 = rng.standard_normal(x0.shape)
    t = rng.uniform(0.0, 1.0, size=len(tasks))
    c = np.stack([t.condition for t in tasks])
    return x0, x1, t, c


def pretrain(cfg: RunConfig, on_step=None) -> PretrainResult:
    """Flow-matching pretraining on (condition -> ground-truth target) pairs.

    Adam with cosine learning-rate decay over a fixed pool of tasks; the
    reported initial/final losses are measured on a fixed validation batch.
    """
    pc = cfg.pretrain
    params = init_params(stream(cfg.seed, "init"), cfg.arch)
    vx0, vx1, vt, vc = validation_batch(cfg)
    val = lambda: fm_loss_and_grads(params, vx0, vx1, vc, None, t=vt)[0]
    start = time.perf_counter()
    val0 = val()
    losses: list[float] = []
    if pc.steps == 0:
        return PretrainResult(params, losses, val0, val0, time.perf_counter() - start)
    pool = task_stream(cfg.seed, pc.pool, cfg.env, split=SPLIT_PRETRAIN)
    targets = np.stack([t.target for t in pool])
    conds = np.stack([t.condition for t in pool])
    del pool
    rng = stream(cfg.seed, "fm", 0)
    opt = AdamW(cfg.arch.n_params, pc.lr)
    for s in range(pc.steps):
        idx = rng.integers(len(targets), size=pc.batch)
        x0 = targets[idx]
        x1 = rng.standard_normal(x0.shape)
        loss, grads = fm_loss_and_grads(params, x0, x1, conds[idx], rng)
        if not (math.isfinite(loss) and np.all(np.isfinite(grads.flat))):
            raise NumericalAbort(f"pretraining diverged at step {s} (loss {loss})")
        opt.lr = pc.lr * 0.5 * (1.0 + math.cos(math.pi * s / pc.steps))
        opt.step(params.flat, grads.flat)
        losses.append(loss)
        if on_step is not None and (s % pc.log_every == 0 or s == pc.steps - 1):
            on_step(s, loss)
    return PretrainResult(params, losses, val0, val(), time.perf_counter() - start)


def cmd_pretrain(cfg: RunConfig) -> PretrainResult:
    out = _out_dir(cfg)
    res = pretrain(cfg, on_step=lambda s, l: log.info("pretrain step %d loss %.4f", s, l))
    save_checkpoint(out / "base.json", res.params, step=len(res.losses),
                    meta={"kind": "pretrain", "config": cfg.run_dict()})
    with open(out / "pretrain_loss.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for i, l in enumerate(res.losses):
            w.writerow([i, repr(l)])
    summary = {"val_initial": res.val_initial, "val_final": res.val_final,
               "ratio": res.val_final / res.val_initial, "steps": len(res.losses), "seconds": res.seconds}
    (out / "pretrain_summary.json").write_text(json.dumps(summary, indent=1))
    return res


# ------------------------------------------------------------------ GRPO runs

def cmd_train(cfg: RunConfig, base: NetParams, out_sub: str = "", judges: Judges | None = None,
              checkpoint_every: int = 100) -> grpo.TrainResult:
    """GRPO fine-tuning in ``cfg.mode``; writes the reward curves and checkpoints."""
    out = _out_dir(cfg, out_sub)
    judges = judges or Judges.build(cfg.seed, cfg.env)

    def checkpoint(it, res, name=None):
        extra = {"ema": res.ema.flat, **res.optimizer.state()}
        save_checkpoint(out / (name or f"ckpt_{it + 1:05d}.json"), res.params, step=it + 1, extra=extra,
                        meta={"kind": "grpo", "mode": cfg.mode, "config": cfg.run_dict()})

    def on_iteration(it, res):
        r = res.log[-1]
        log.info("[%s] it %d r_sem %.4f r_pres %.4f kl %.2e", cfg.mode, it, r["r_sem"], r["r_pres"], r["kl"])
        if checkpoint_every and (it + 1) % checkpoint_every == 0:
            checkpoint(it, res)

    res = grpo.train(base, cfg.env, cfg.optim, cfg.sampler, cfg.weights, judges, mode=cfg.mode,
                     task_seed=cfg.seed, noise_seed=cfg.seed, iterations=cfg.iterations,
                     oracle_masks=cfg.oracle_masks, on_iteration=on_iteration)
    grpo.write_log_csv(out / "train_log.csv", res.log)
    write_reward_curves(out / "reward_curves.dat", res.log)
    checkpoint(cfg.iterations - 1, res, "final.json")
    return res


def smooth(values, window: int = 10) -> np.ndarray:
    """Trailing moving average (shorter window at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def write_reward_curves(path, rows, window: int = 10) -> None:
    """Whitespace-separated columns for gnuplot: iteration, raw and smoothed rewards."""
    rs = [r["r_sem"] for r in rows]
    rp = [r["r_pres"] for r in rows]
    ss, sp = smooth(rs, window), smooth(rp, window)
    with open(path, "w") as f:
        f.write("# iteration r_sem r_pres r_sem_smooth r_pres_smooth\n")
        for i in range(len(rows)):
            f.write(f"{rows[i]['iteration']} {rs[i]!r} {rp[i]!r} {ss[i]!r} {sp[i]!r}\n")


# ----------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    report: MetricReport
    semantic: float
    score: float
    edited: np.ndarray

    def summary(self) -> dict:
        return {**self.report.aggregate(), "semantic": self.semantic, "score": self.score}


def eval_tasks(cfg: RunConfig):
    return task_stream(cfg.seed, cfg.eval_tasks, cfg.env, split=SPLIT_EVAL)


def evaluate(params: NetParams, cfg: RunConfig, tasks=None, judges: Judges | None = None,
             bank: FilterBank | None = None) -> EvalResult:
    """Deterministic ODE edits of held-out tasks, locality metrics and semantic score.

    The semantic score is the mean semantic reward with the ground-truth
    mask; ``score`` is the judge's expected 0-5 score alone.
    """
    tasks = eval_tasks(cfg) if tasks is None else tasks
    judges = judges or Judges.build(cfg.seed, cfg.env)
    bank = bank or FilterBank(cfg.seed)
    x1 = np.stack([stream(cfg.seed, "eval", 0, t.task_id).standard_normal(t.source.shape) for t in tasks])
    cond = np.stack([t.condition for t in tasks])
    ode_cfg = SamplerConfig(cfg.sampler.steps, 0.0)
    edited = np.clip(ode_sample(params, x1, cond, ode_cfg), 0.0, 1.0)
    report = evaluate_set(tasks, edited, bank, mode="segment")
    sem, score = [], []
    for t, e in zip(tasks, edited):
        r, comp = semantic_reward(e, t, t.gt_mask, cfg.weights, judges)
        sem.append(r)
        score.append(5.0 * comp["r_vlm"])
    return EvalResult(report, math.fsum(sem) / len(sem), math.fsum(score) / len(score), edited)


def cmd_eval(cfg: RunConfig, params: NetParams, out_sub: str = "", n_images: int = 8) -> EvalResult:
    out = _out_dir(cfg, out_sub)
    tasks = eval_tasks(cfg)
    res = evaluate(params, cfg, tasks)
    res.report.write_csv(out / "eval_samples.csv")
    (out / "eval_summary.json").write_text(json.dumps(res.summary(), indent=1))
    img_dir = out / "images"
    img_dir.mkdir(exist_ok=True)
    for t, e in list(zip(tasks, res.edited))[:n_images]:
        write_png(img_dir / f"{t.task_id:04d}_source.png", t.source)
        write_png(img_dir / f"{t.task_id:04d}_edited.png", e)
        write_png(img_dir / f"{t.task_id:04d}_target.png", t.target)
    return res


def table_row(name: str, res: EvalResult) -> dict:
    agg = res.summary()
    return {"method": MODE_LABELS[name], "mode": name, "UR": agg["ur"], "PSNR": agg["psnr"], "SSIM": agg["ssim"],
            "perceptual_proxy": agg["perceptual_proxy"], "semantic": agg["semantic"], "score": agg["score"],
            "n_kept": agg["n_kept"], "n_total": agg["n_total"]}


def cmd_ablate(cfg: RunConfig, base: NetParams, modes=("semantic_only", "preservation_only", "combined", "decoupled"),
               eval_params: str = "ema") -> list[dict]:
    """Base plus every mode from the same checkpoint with identical task and noise seeds."""
    out = _out_dir(cfg)
    judges = Judges.build(cfg.seed, cfg.env)
    bank = FilterBank(cfg.seed)
    tasks = eval_tasks(cfg)
    rows = [table_row("base", evaluate(base, cfg, tasks, judges, bank))]
    for mode in modes:
        mcfg = replace(cfg, mode=mode)
        res = cmd_train(mcfg, base, out_sub=mode, judges=judges, checkpoint_every=0)
        params = res.ema if eval_params == "ema" else res.params
        rows.append(table_row(mode, evaluate(params, mcfg, tasks, judges, bank)))
    write_table(out / "ablation.csv", rows)
    (out / "ablation.json").write_text(json.dumps(rows, indent=1))
    return rows


def write_table(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TABLE_COLUMNS)
        for r in rows:
            w.writerow([r[k] if isinstance(r[k], str) else repr(r[k]) for k in TABLE_COLUMNS])


def format_table(rows) -> str:
    head = "| Method | UR | PSNR | SSIM | Perceptual (proxy) | Semantic | Score (0-5) |"
    lines = [head, "|" + "---|" * 7]
    for r in rows:
        lines.append(f"| {r['method']} | {r['UR']:.4f} | {r['PSNR']:.2f} | {r['SSIM']:.4f} | "
                     f"{r['perceptual_proxy']:.4f} | {r['semantic']:.4f} | {r['score']:.3f} |")
    return "\n".join(lines)


def cmd_report(out) -> str:
    path = Path(out) / "ablation.json"
    rows = json.loads(path.read_text())
    text = format_table(rows)
    (Path(out) / "report.md").write_text(text + "\n")
    return text


def load_base(path) -> NetParams:
    params, _ = load_checkpoint(path)
    return params
