import math

import numpy as np
import pytest

from editgrpo.env import task_stream
from editgrpo.metrics import FilterBank
from editgrpo.regions import complement
from editgrpo.rewards import (DirectionalJudge, Judges, RewardWeights, preservation_reward, r_clip_proxy, r_diff,
                              r_lpips_proxy, r_ssim, r_vlm, region_rewards, reward_csv_row, score_distribution,
                              semantic_reward)
from editgrpo.tensor import EmptyRegionError

from test_metrics import reference_ssim


@pytest.fixture(scope="module")
def judges():
    return Judges.build(0)


@pytest.fixture(scope="module")
def tasks():
    return task_stream(0, 20)


def noisy(img, amp, seed=0):
    return np.clip(img + amp * np.random.default_rng(seed).standard_normal(img.shape), 0, 1)


class TestScoreJudge:
    def test_perfect_edit_mode_five(self, tasks):
        t = tasks[0]
        p = score_distribution(t.target, t.target, t.gt_mask)
        assert int(np.argmax(p)) == 5

    def test_wrong_edit_mode_zero(self, tasks):
        t = tasks[0]
        p = score_distribution(np.clip(1.0 - t.target, 0, 1) * 0 + (t.target < 0.5), t.target, t.gt_mask)
        assert int(np.argmax(p)) == 0

    def test_normalized(self, tasks):
        for i, t in enumerate(tasks):
            p = score_distribution(noisy(t.target, 0.3, i), t.target, t.gt_mask)
            assert abs(p.sum() - 1.0) <= 1e-12

    def test_empty_mask(self, tasks):
        t = tasks[0]
        with pytest.raises(EmptyRegionError):
            score_distribution(t.target, t.target, np.zeros((16, 16), bool))

    def test_expectation_examples(self):
        assert r_vlm(np.full(6, 1 / 6)) == pytest.approx(0.5, abs=1e-15)
        assert r_vlm(np.eye(6)[5]) == 1.0
        assert abs(r_vlm([0.1, 0, 0, 0, 0, 0.9]) - 0.9) <= 1e-15

    def test_rejects_non_distribution(self):
        with pytest.raises(ValueError):
            r_vlm([0.2] * 6)
        with pytest.raises(ValueError):
            r_vlm([0.5, 0.5])

    def test_monotone_in_error(self, tasks):
        t = tasks[1]
        vals = [r_vlm(score_distribution(noisy(t.target, a, 3), t.target, t.gt_mask))
                for a in np.linspace(0, 0.6, 13)]
        # same noise draw, growing amplitude: error grows, reward never rises
        assert np.all(np.diff(vals) <= 1e-15)


class TestClipProxy:
    def test_no_change_is_zero(self, tasks, judges):
        t = tasks[0]
        assert r_clip_proxy(t.source, t.source, t.embedding, judges.directional) == 0.0

    def test_parallel_change_is_one(self, tasks, judges):
        t = tasks[0]
        d = judges.directional
        delta = np.linalg.pinv(d.image_map) @ d.direction(t.embedding)
        edited = t.source + delta.reshape(t.source.shape)
        assert abs(r_clip_proxy(t.source, edited, t.embedding, d) - 1.0) <= 1e-12

    def test_antisymmetric(self, tasks, judges):
        t = tasks[2]
        e = noisy(t.target, 0.1)
        a = r_clip_proxy(t.source, e, t.embedding, judges.directional)
        b = r_clip_proxy(e, t.source, t.embedding, judges.directional)
        assert a == -b and -1 <= a <= 1

    def test_ground_truth_edits_align(self, judges):
        # the text map is a linear fit on a separate stream; held-out true edits lean the same way
        vals = [r_clip_proxy(t.source, t.target, t.embedding, judges.directional) for t in task_stream(1, 200)]
        assert np.mean(vals) > 0

    def test_build_deterministic(self):
        a, b = DirectionalJudge.build(3), DirectionalJudge.build(3)
        assert np.array_equal(a.image_map, b.image_map) and np.array_equal(a.text_map, b.text_map)


class TestPreservationComponents:
    def test_diff(self, tasks):
        t = tasks[0]
        keep = complement(t.gt_mask)
        assert r_diff(t.source, t.source, keep) == 1.0
        shifted = t.source.copy()
        shifted[keep] = np.where(shifted[keep] > 0.5, shifted[keep] - 0.25, shifted[keep] + 0.25)
        assert abs(r_diff(t.source, shifted, keep) - 0.75) <= 1e-15

    def test_diff_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b = rng.random((2, 16, 16, 3))
            m = rng.random((16, 16)) < 0.5
            s = sum(abs(a[i, j, c] - b[i, j, c]) for i, j in zip(*np.nonzero(m)) for c in range(3))
            assert abs(r_diff(a, b, m) - (1 - s / (3 * m.sum()))) <= 1e-12

    def test_ssim(self):
        rng = np.random.default_rng(1)
        a = rng.random((16, 16, 3))
        full = np.ones((16, 16), bool)
        assert abs(r_ssim(a, a, full) - 1.0) <= 1e-12
        assert r_ssim(a, 1.0 - a, full) < 0
        for _ in range(10):
            b = rng.random((16, 16, 3))
            m = rng.random((16, 16)) < 0.6
            # the 8-bit reference at L=255 equals the intensity version at L=1 on scaled inputs
            assert abs(r_ssim(a, b, m) - reference_ssim(a * 255, b * 255, m)) <= 1e-9

    def test_lpips_proxy(self):
        rng = np.random.default_rng(2)
        bank = FilterBank(0)
        for _ in range(10):
            a, b = rng.random((2, 16, 16, 3))
            m = rng.random((16, 16)) < 0.6
            assert r_lpips_proxy(a, a, m, bank) == 0.0
            v = r_lpips_proxy(a, b, m, bank)
            assert v <= 0
            assert abs(v - r_lpips_proxy(b, a, m, bank)) <= 1e-12

    def test_diff_monotone(self, tasks):
        t = tasks[3]
        keep = complement(t.gt_mask)
        vals = [r_diff(t.source, noisy(t.source, a, 5), keep) for a in np.linspace(0, 0.5, 11)]
        assert np.all(np.diff(vals) <= 0)


class TestCombined:
    def test_perfect_edit(self, tasks, judges):
        t = tasks[0]
        w = RewardWeights()
        r_pres, comp = preservation_reward(t.source, t.target, complement(t.gt_mask), w, judges)
        assert r_pres == 6.0
        r_sem, c = semantic_reward(t.target, t, t.gt_mask, w, judges)
        vlm = r_vlm(score_distribution(t.target, t.target, t.gt_mask))
        assert r_sem == 4.0 * vlm + 1.0 * c["r_clip"]
        logits = -10.0 * np.array([0.5, 0.4, 0.3, 0.2, 0.1, 0.0])
        p = np.exp(logits) / np.exp(logits).sum()
        assert abs(vlm - p @ np.arange(6) / 5) <= 1e-12

    def test_zero_weights(self, tasks, judges):
        t = tasks[1]
        w = RewardWeights(0, 0, 0, 0, 0)
        e = noisy(t.target, 0.2)
        assert semantic_reward(e, t, t.gt_mask, w, judges)[0] == 0.0
        assert preservation_reward(t.source, e, complement(t.gt_mask), w, judges)[0] == 0.0

    def test_breakdown_resums(self, tasks, judges):
        w = RewardWeights()
        for i, t in enumerate(tasks):
            pair = region_rewards(t, noisy(t.target, 0.1, i), t.gt_mask, w, judges)
            c = pair.components
            assert abs(pair.r_sem - (w.vlm * c["r_vlm"] + w.clip * c["r_clip"])) <= 1e-12
            assert abs(pair.r_pres - (w.diff * c["r_diff"] + w.ssim * c["r_ssim"] + w.lpips * c["r_lpips"])) <= 1e-12
            assert 0 <= c["r_vlm"] <= 1 and 0 <= c["r_diff"] <= 1 and -1 <= c["r_clip"] <= 1
            assert c["r_lpips"] <= 0 and -1 <= c["r_ssim"] <= 1

    def test_filtered_mask_gives_no_signal(self, tasks, judges):
        m = np.zeros((16, 16), bool)
        m[0, 0] = True
        assert region_rewards(tasks[0], tasks[0].target, m, RewardWeights(), judges) is None
        assert reward_csv_row(3, 1, None) == [3, 1] + [""] * 7

    @pytest.mark.parametrize("bad", [-1.0, math.inf, math.nan])
    def test_bad_weights(self, bad):
        with pytest.raises(ValueError):
            RewardWeights(vlm=bad)


class TestRegionExclusivity:
    def test_edit_pixels_do_not_affect_preservation(self, tasks, judges):
        w = RewardWeights()
        rng = np.random.default_rng(0)
        for i, t in enumerate(tasks):
            e = noisy(t.target, 0.1, i)
            keep = complement(t.gt_mask)
            ref = preservation_reward(t.source, e, keep, w, judges)
            e2 = e.copy()
            e2[t.gt_mask] = rng.random((t.gt_mask.sum(), 3))
            assert preservation_reward(t.source, e2, keep, w, judges) == ref

    def test_nonedit_pixels_do_not_affect_semantics(self, tasks, judges):
        w = RewardWeights()
        rng = np.random.default_rng(1)
        for i, t in enumerate(tasks):
            e = noisy(t.target, 0.1, i)
            ref = semantic_reward(e, t, t.gt_mask, w, judges)
            e2 = e.copy()
            keep = complement(t.gt_mask)
            e2[keep] = rng.random((keep.sum(), 3))
            assert semantic_reward(e2, t, t.gt_mask, w, judges) == ref
