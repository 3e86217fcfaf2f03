"""Acceptance suite: one PASS/FAIL line per criterion at the stated tolerances.

Criteria 5-7 run the full pipeline (pretraining, then four 300-iteration
GRPO runs and a 200-task evaluation), which takes roughly 40 minutes on one
core. Select the fast criteria with ``-k "c1 or c2 or c3 or c4 or c8"``.
"""
import csv
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, tiny_config_dict
from test_flow import PLAIN, TINY, constant_field, rollout, tiny
from test_grpo import fd, make_batch, net
from test_metrics import PAIRS, brute_psnr, brute_ur, reference_ssim
from editgrpo import cli, pipeline
from editgrpo.flow import SamplerConfig, fm_loss_and_grads, ode_sample, sde_sample, step_logprob_under
from editgrpo.grpo import OptimConfig, clip_pg_loss, group_normalize, kl_penalty, policy_loss, region_logprob
from editgrpo.metrics import masked_psnr, masked_ssim, unchanged_ratio
from editgrpo.regions import area_filter, edit_mask
from editgrpo.tensor import gaussian_logpdf, l1_mean, stream


class Checks:
    """Collects named sub-checks of one criterion and reports a single line."""

    def __init__(self, criterion: str):
        self.criterion = criterion
        self.failed = []
        self.details = []
        self.start = time.perf_counter()

    def check(self, name: str, ok: bool, detail: str = ""):
        self.details.append(f"{name}={detail}" if detail else name)
        if not ok:
            self.failed.append(name)

    def finish(self, budget_s: float | None = None, elapsed: float | None = None):
        elapsed = time.perf_counter() - self.start if elapsed is None else elapsed
        if budget_s is not None:
            self.check("runtime", elapsed <= budget_s, f"{elapsed:.1f}s/{budget_s:.0f}s")
        status = "PASS" if not self.failed else "FAIL"
        line = f"{status} {self.criterion}: " + "; ".join(self.details)
        if self.failed:
            line += "  [failed: " + ", ".join(self.failed) + "]"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert not self.failed, line


def max_rel_err(num, ana, floor=1e-3):
    return float(np.max(np.abs(num - ana) / np.maximum(np.abs(num), floor)))


# ---------------------------------------------------------------- fast criteria

def test_c1_gradient_suite():
    c = Checks("C1 gradient suite")
    # (a) flow-matching loss
    p = tiny()
    assert p.arch.n_params <= 500
    rng = np.random.default_rng(3)
    x0, x1 = rng.standard_normal((2, 3, *TINY.image_shape))
    cond = rng.standard_normal((3, TINY.cond_dim))
    t = np.array([0.1, 0.5, 0.9])
    _, g = fm_loss_and_grads(p, x0, x1, cond, None, t=t)
    num = fd(lambda: fm_loss_and_grads(p, x0, x1, cond, None, t=t)[0], p.flat)
    err = max_rel_err(num, g.flat)
    c.check("fm_loss", err <= 1e-4, f"{err:.1e}")
    # (b) full decoupled loss, off-policy ratios inside the clip band
    p, ref = net(), net(5)
    assert p.arch.n_params <= 500
    b = make_batch(p, g=2, r_sem=[0.2, 0.9], r_pres=[0.7, 0.1])
    old = b.traj.logprob + 0.05 * np.random.default_rng(0).standard_normal(b.traj.logprob.shape)
    cfg = OptimConfig(kl_beta=0.3)
    terms = [("loss_sem", b.adv_sem, b.masks, cfg.lambda_sem), ("loss_pres", b.adv_pres, ~b.masks, cfg.lambda_pres)]
    f = lambda: policy_loss(b, p, ref, terms, cfg.clip_eps, cfg.kl_beta, old_logprob=old)[0]["total"]
    _, g = policy_loss(b, p, ref, terms, cfg.clip_eps, cfg.kl_beta, old_logprob=old)
    err = max_rel_err(fd(f, p.flat), g.flat)
    c.check("decoupled_loss", err <= 1e-4, f"{err:.1e}")
    # (c) KL penalty alone
    _, g = policy_loss(b, p, ref, [], cfg.clip_eps, 1.0)
    err = max_rel_err(fd(lambda: kl_penalty(b.traj, p, ref), p.flat), g.flat)
    c.check("kl", err <= 1e-4, f"{err:.1e}")
    c.finish(60)


def test_c2_grpo_algebra():
    c = Checks("C2 GRPO algebra")
    rng = np.random.default_rng(0)
    worst_mean, worst_std = 0.0, 1.0
    shift_err = 0.0
    for _ in range(100):
        v = rng.standard_normal(8) * rng.uniform(0.1, 10)
        a = group_normalize(v)
        worst_mean = max(worst_mean, abs(a.mean()))
        worst_std = min(worst_std, a.std())
        k, s = rng.uniform(0.5, 20), rng.uniform(-100, 100)
        shift_err = max(shift_err, np.abs(group_normalize(k * v + s) - a).max())
    c.check("zero_mean", worst_mean <= 1e-10, f"{worst_mean:.1e}")
    c.check("unit_std", 1 - 1e-6 <= worst_std <= 1.0, f"min {worst_std:.9f}")
    c.check("shift_scale", shift_err <= 1e-6, f"{shift_err:.1e}")
    c.check("constant_group", bool(np.all(group_normalize([3.0] * 8) == 0.0)))

    p = net()
    b1 = make_batch(p, r_sem=[1, 2, 3, 4], r_pres=[0.5, 0.1, 0.9, 0.3])
    b2 = make_batch(p, r_sem=[1, 2, 30, 4], r_pres=[0.5, 0.1, 0.9, 0.3])
    c.check("decoupling", bool(np.array_equal(b1.adv_pres, b2.adv_pres)))

    b = make_batch(p)
    lp_m, _ = region_logprob(b.traj, b.masks)
    lp_c, _ = region_logprob(b.traj, ~b.masks)
    total = b.traj.logprob.sum(axis=(2, 3))
    part = np.max(np.abs(b.masks.sum(axis=(1, 2)) * lp_m + (~b.masks).sum(axis=(1, 2)) * lp_c - total))
    c.check("partition", part <= 1e-10, f"{part:.1e}")

    loss, grad = clip_pg_loss(0.7, 0.3, 0.3, 0.2)
    c.check("on_policy", loss == -0.7 and grad == -0.7)
    loss, grad = clip_pg_loss(1.0, math.log(2.0), 0.0, 0.2)
    c.check("clip_saturation", abs(loss + 1.2) <= 1e-12 and grad == 0.0)
    b = make_batch(p, r_sem=[1, 2, 3, 4], r_pres=[4, 3, 2, 1])
    terms = [("loss_sem", np.abs(b.adv_sem), b.masks, 0.5), ("loss_pres", np.abs(b.adv_pres), ~b.masks, 1.0)]
    _, g = policy_loss(b, p, p, terms, 0.2, 0.0, old_logprob=b.traj.logprob - 10.0)
    c.check("saturated_batch_zero_grad", bool(np.all(g.flat == 0.0)))
    c.finish(60)


def test_c3_metric_oracles():
    c = Checks("C3 metric oracles")
    ur = psnr = l1 = ssim = 0.0
    for a, b, m in PAIRS:
        ur = max(ur, abs(unchanged_ratio(a, b, m) - brute_ur(a, b, m)))
        psnr = max(psnr, abs(masked_psnr(a, b, m) - brute_psnr(a, b, m)))
        direct = np.abs(a - b)[m].mean()
        l1 = max(l1, abs(l1_mean(a, b, m) - direct))
        ssim = max(ssim, abs(masked_ssim(a, b, m) - reference_ssim(a, b, m)))
    c.check("UR", ur <= 1e-12, f"{ur:.1e}")
    c.check("PSNR", psnr <= 1e-12, f"{psnr:.1e}")
    c.check("l1_mean", l1 <= 1e-12, f"{l1:.1e}")
    c.check("SSIM", ssim <= 1e-9, f"{ssim:.1e}")
    base = np.full((16, 16, 3), 100.0)
    full = np.ones((16, 16), bool)
    c.check("tau_15_unchanged", unchanged_ratio(base, base + 5, full) == 1.0)
    c.check("tau_21_changed", unchanged_ratio(base, base + 7, full) == 0.0)

    def mask(n):
        m = np.zeros(256, bool)
        m[:n] = True
        return m.reshape(16, 16)

    # 5% of 256 pixels is 12.8 and 1% is 2.56
    filt = (area_filter(mask(2))[0], area_filter(mask(3))[0], area_filter(mask(243))[0], area_filter(mask(244))[0])
    c.check("area_filter", filt == (False, True, True, False), str(filt))
    c.finish(60)


def test_c4_sampler_suite():
    c = Checks("C4 sampler")
    p = tiny()
    x1 = stream(0, "rollout").standard_normal((3, *TINY.image_shape))
    cond = stream(1, "rollout").standard_normal(TINY.cond_dim)
    cfg = SamplerConfig(6, 0.0)
    traj = sde_sample(p, x1, cond, cfg, stream(2, "rollout"))
    c.check("a0_equals_ode", bool(np.array_equal(traj.final, ode_sample(p, x1, cond, cfg))))
    worst = 0.0
    for steps in (1, 2, 5, 6, 17):
        r = np.random.default_rng(steps)
        x0, x1 = r.standard_normal((2, *PLAIN.image_shape))
        out = ode_sample(constant_field(PLAIN, x1 - x0), x1, np.zeros(2), SamplerConfig(steps, 0.0))
        worst = max(worst, np.abs(out - x0).max())
    c.check("constant_field_x0", worst <= 1e-12, f"{worst:.1e}")
    traj = rollout(p)
    exact = all(np.array_equal(step_logprob_under(p, traj, k), traj.logprob[k]) and
                np.array_equal(gaussian_logpdf(traj.states[k + 1], traj.means[k], traj.stds[k]).sum(axis=-1),
                               traj.logprob[k]) for k in range(traj.steps))
    c.check("logprob_recompute", exact)
    c.finish(60)


# ---------------------------------------------------------------- end-to-end

@pytest.fixture(scope="session")
def e2e_cfg(tmp_path_factory):
    return pipeline.RunConfig(out=str(tmp_path_factory.mktemp("acceptance")))


@pytest.fixture(scope="session")
def pretrained(e2e_cfg):
    return pipeline.cmd_pretrain(e2e_cfg)


@pytest.fixture(scope="session")
def ablation(e2e_cfg, pretrained):
    start = time.perf_counter()
    rows = pipeline.cmd_ablate(e2e_cfg, pretrained.params)
    return {r["mode"]: r for r in rows}, time.perf_counter() - start


def test_c5_end_to_end_pretraining(e2e_cfg, pretrained):
    c = Checks("C5 pretraining")
    ratio = pretrained.val_final / pretrained.val_initial
    c.check("loss_ratio<0.25", ratio < 0.25, f"{ratio:.4f}")
    res = pipeline.evaluate(pretrained.params, e2e_cfg)
    targets = np.stack([t.target for t in pipeline.eval_tasks(e2e_cfg)])
    l1 = float(np.mean(np.abs(res.edited - targets)))
    c.check("heldout_L1<=0.05", l1 <= 0.05, f"{l1:.4f}")
    c.finish(15 * 60, pretrained.seconds)


def test_segmenter_gate_on_pretrained_outputs(e2e_cfg, pretrained):
    c = Checks("segmenter IoU gate")
    tasks = pipeline.eval_tasks(e2e_cfg)
    edited = pipeline.evaluate(pretrained.params, e2e_cfg, tasks).edited
    ious = []
    for t, e in zip(tasks, edited):
        m = edit_mask(t.source, e, t.instruction)
        ious.append((m & t.gt_mask).sum() / max((m | t.gt_mask).sum(), 1))
    iou = float(np.mean(ious))
    c.check("mean_IoU>=0.5", iou >= 0.5, f"{iou:.3f}")
    c.finish()


def test_c6_ablation_orderings(ablation):
    rows, seconds = ablation
    c = Checks("C6 ablation orderings")
    ur = {m: r["UR"] for m, r in rows.items()}
    sem = {m: r["semantic"] for m, r in rows.items()}
    c.check("UR pres>dec>sem", ur["preservation_only"] > ur["decoupled"] > ur["semantic_only"],
            f"{ur['preservation_only']:.4f}/{ur['decoupled']:.4f}/{ur['semantic_only']:.4f}")
    c.check("sem sem_only>pres_only", sem["semantic_only"] > sem["preservation_only"],
            f"{sem['semantic_only']:.4f}/{sem['preservation_only']:.4f}")
    c.check("dec>=base UR", ur["decoupled"] >= ur["base"], f"{ur['decoupled']:.4f}/{ur['base']:.4f}")
    c.check("dec>=base sem", sem["decoupled"] >= sem["base"], f"{sem['decoupled']:.4f}/{sem['base']:.4f}")
    c.finish(45 * 60, seconds)


def _curves(out, mode):
    with open(Path(out) / mode / "train_log.csv") as f:
        rows = list(csv.DictReader(f))
    return ({k: pipeline.smooth(np.array([float(r[k]) for r in rows])) for k in ("r_sem", "r_pres")})


def _decile(v, first: bool):
    d = np.array_split(v, 10)[0 if first else -1]
    return float(np.nanmean(d))


def test_c7_reward_curves(e2e_cfg, ablation):
    c = Checks("C7 reward curves")
    dec = _curves(e2e_cfg.out, "decoupled")
    sem_only = _curves(e2e_cfg.out, "semantic_only")
    for k in ("r_sem", "r_pres"):
        lo, hi = _decile(dec[k], True), _decile(dec[k], False)
        c.check(f"decoupled {k} rises", hi > lo, f"{lo:.4f}->{hi:.4f}")
    a, b = _decile(sem_only["r_pres"], False), _decile(dec["r_pres"], False)
    c.check("sem_only r_pres<=decoupled", a <= b, f"{a:.4f}/{b:.4f}")
    c.finish()


def test_c8_determinism(tmp_path):
    c = Checks("C8 determinism")
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(__import__("json").dumps(tiny_config_dict(tmp_path / "unused")))
    for run in ("a", "b"):
        out = str(tmp_path / run)
        common = ["--config", str(cfg_path), "--out", out]
        assert cli.main(["pretrain", *common]) == 0
        assert cli.main(["train", *common, "--checkpoint", f"{out}/base.json"]) == 0
        assert cli.main(["eval", *common, "--checkpoint", f"{out}/final.json"]) == 0
        assert cli.main(["ablate", *common, "--checkpoint", f"{out}/base.json"]) == 0
    # the pretraining summary records wall-clock seconds; everything else must match
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                   if p.is_file() and p.name != "pretrain_summary.json")
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files]
    n_csv = sum(f.suffix == ".csv" for f in files)
    n_ckpt = sum(f.suffix == ".json" for f in files)
    c.check("bit_identical", all(same), f"{sum(same)}/{len(files)} files ({n_csv} csv, {n_ckpt} json)")
    c.finish()
