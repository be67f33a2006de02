import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from na_irstd.lattice import LatticeSpec
from na_irstd.relevance import (
    RelevanceScorer,
    coverage,
    gather_patches,
    mask_to_patch_labels,
    patch_hard_labels,
    patch_precision,
    patch_soft_labels,
    reduction_ratio,
    score_loss,
    select_per_stage,
    soft_label_field,
    target_centers,
    topk_select,
)

from fd import check_param_grads


def brute_field(centers, sigma, h, w):
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            if centers:
                d2 = min((y - r) ** 2 + (x - c) ** 2 for r, c in centers)
                out[y, x] = math.exp(-d2 / (2 * sigma * sigma))
    return out


class TestCenters:
    def test_single_pixel(self):
        m = np.zeros((16, 16), np.uint8)
        m[5, 7] = 1
        assert target_centers(m) == [(5, 7)]

    def test_square(self):
        m = np.zeros((16, 16), np.uint8)
        m[2:5, 2:5] = 1
        assert target_centers(m) == [(3, 3)]

    def test_empty(self):
        assert target_centers(np.zeros((8, 8))) == []

    def test_diagonal_pixels_are_one_component(self):
        m = np.zeros((8, 8), np.uint8)
        m[1, 1] = m[2, 2] = 1
        assert len(target_centers(m)) == 1

    def test_half_rounds_up(self):
        m = np.zeros((8, 8), np.uint8)
        m[2, 2:4] = 1  # centroid column 2.5
        assert target_centers(m) == [(2, 3)]


class TestSoftField:
    def test_one_at_center(self):
        w = soft_label_field([(10, 12)], 8.0, 32, 32)
        assert w[10, 12] == 1.0

    def test_value_at_sigma(self):
        w = soft_label_field([(0, 0)], 8.0, 32, 32)
        assert w[0, 8] == pytest.approx(math.exp(-0.5), abs=1e-12)
        assert w[0, 8] == pytest.approx(0.60653, abs=1e-5)

    def test_nearest_center_wins(self):
        centers = [(4, 4), (20, 25)]
        w = soft_label_field(centers, 3.0, 32, 32)
        np.testing.assert_allclose(w, brute_field(centers, 3.0, 32, 32), rtol=0, atol=1e-15)

    def test_empty_is_zero(self):
        assert not soft_label_field([], 8.0, 16, 16).any()

    @pytest.mark.parametrize("sigma", [0, -1.0])
    def test_rejects_bad_sigma(self, sigma):
        with pytest.raises(ValueError):
            soft_label_field([(1, 1)], sigma, 4, 4)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 23), st.integers(0, 23)), min_size=1, max_size=4),
           st.floats(0.5, 20))
    def test_bounds_and_monotonicity(self, centers, sigma):
        w = soft_label_field(centers, sigma, 24, 24)
        assert (w >= 0).all() and (w <= 1).all()
        rows, cols = np.mgrid[0:24, 0:24]
        d = np.min([np.hypot(rows - r, cols - c) for r, c in centers], axis=0)
        order = np.argsort(d, axis=None, kind="stable")
        assert (np.diff(w.ravel()[order]) <= 1e-15).all()


class TestPatchLabels:
    def test_constant_fields(self):
        spec = LatticeSpec(16, 16, 4)
        assert (patch_soft_labels(np.ones((16, 16)), spec) == 1).all()
        assert (patch_soft_labels(np.zeros((16, 16)), spec) == 0).all()

    def test_single_pixel(self):
        spec = LatticeSpec(8, 8, 4)
        w = np.zeros((8, 8))
        w[5, 2] = 1  # patch (1, 0) -> index 2
        labels = patch_soft_labels(w, spec)
        assert labels[2] == 1 / 16
        assert labels.sum() == 1 / 16

    def test_hard_labels(self):
        spec = LatticeSpec(8, 8, 4)
        m = np.zeros((8, 8))
        m[3, 3:5] = 1  # straddles patches 0 and 1
        assert patch_hard_labels(m, spec).tolist() == [1, 1, 0, 0]

    def test_soft_labels_from_mask(self):
        spec = LatticeSpec(64, 64, 32)
        m = np.zeros((64, 64))
        m[10, 10] = 1
        y = mask_to_patch_labels(m, spec, 8.0)
        assert y.argmax() == 0 and (y >= 0).all() and (y <= 1).all()
        with pytest.raises(ValueError):
            mask_to_patch_labels(m, spec, 8.0, mode="fuzzy")


class TestScorer:
    def test_shared_weights(self):
        scorer = RelevanceScorer(8)
        t = torch.randn(8)
        s = scorer(torch.stack([t, torch.randn(8), t]).unsqueeze(0))
        assert s.shape == (1, 3)
        assert s[0, 0] == s[0, 2]
        assert ((s > 0) & (s < 1)).all()

    def test_prior_bias(self):
        scorer = RelevanceScorer(8, prior=0.02)
        nn.init.zeros_(scorer.mlp[-1].weight)
        s = scorer(torch.randn(2, 5, 8))
        assert torch.allclose(s, torch.full((2, 5), 0.02), atol=1e-6)

    def test_loss_gradients(self):
        prev = torch.get_default_dtype()
        torch.set_default_dtype(torch.float64)
        try:
            torch.manual_seed(0)
            scorer = RelevanceScorer(8)
            tokens = torch.randn(2, 6, 8)
            y = torch.rand(2, 6)
            errs = check_param_grads(scorer, lambda: score_loss(scorer(tokens), y))
            assert max(errs.values()) < 1e-4, errs
        finally:
            torch.set_default_dtype(prev)


class TestScoreLoss:
    def test_half(self):
        s = torch.full((64,), 0.5)
        assert score_loss(s, s).item() == pytest.approx(math.log(2), abs=1e-6)

    def test_limit(self):
        assert score_loss(torch.full((10,), 1e-9), torch.zeros(10)).item() < 1e-6

    def test_permutation_invariant(self):
        s, y = torch.rand(20), torch.rand(20)
        p = torch.randperm(20)
        assert score_loss(s[p], y[p]).item() == pytest.approx(score_loss(s, y).item(), rel=1e-6)

    def test_saturated_scores_stay_finite(self):
        assert torch.isfinite(score_loss(torch.tensor([0.0, 1.0]), torch.tensor([1.0, 0.0])))


def sort_oracle(scores, k):
    ranked = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    return sorted(ranked[:k])


class TestTopK:
    def test_argmax(self):
        s = torch.zeros(64)
        s[17] = 1
        assert topk_select(s, 1).tolist() == [17]

    def test_ties_prefer_low_index(self):
        assert topk_select(torch.full((10,), 0.3), 3).tolist() == [0, 1, 2]

    def test_random_against_sort(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            s = rng.integers(0, 5, size=64).astype(np.float32)  # plenty of ties
            assert topk_select(torch.from_numpy(s), 5).tolist() == sort_oracle(s.tolist(), 5)

    def test_batched(self):
        s = torch.rand(4, 64)
        idx = topk_select(s, 5)
        for b in range(4):
            assert idx[b].tolist() == sort_oracle(s[b].tolist(), 5)

    def test_k_larger_than_n(self):
        with pytest.warns(UserWarning, match="exceeds"):
            assert topk_select(torch.rand(4), 9).tolist() == [0, 1, 2, 3]

    def test_bad_k(self):
        with pytest.raises(ValueError):
            topk_select(torch.rand(4), 0)

    def test_no_gradient(self):
        s = torch.rand(8, requires_grad=True)
        assert not topk_select(s, 3).requires_grad

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(-50, 50), min_size=6, max_size=40), st.integers(1, 5))
    def test_monotone_transform_invariance(self, values, k):
        # tenths keep distinct inputs distinct after the transforms
        s = torch.tensor(values, dtype=torch.float64) / 10
        base = topk_select(s, k)
        assert torch.equal(topk_select(torch.sigmoid(s), k), base)
        assert torch.equal(topk_select(3 * s + 1, k), base)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=8, max_size=32, unique=True), st.integers(1, 6), st.data())
    def test_raising_and_lowering(self, values, k, data):
        s = torch.tensor(values, dtype=torch.float64)
        ordered = torch.sort(s, descending=True).values
        j = data.draw(st.integers(0, len(values) - 1))
        raised = s.clone()
        raised[j] = ordered[k - 1] + 0.5
        assert j in topk_select(raised, k).tolist()
        sel = topk_select(s, k).tolist()
        lowered = s.clone()
        lowered[sel[0]] = ordered[k] - 0.5
        assert sel[0] not in topk_select(lowered, k).tolist()

    def test_same_indices_for_every_stage(self):
        feats = [torch.randn(2, 16, c, 4, 4) for c in (3, 5)]
        scores = torch.rand(2, 16)
        idx, gathered = select_per_stage(feats, scores, 4)
        for f, g in zip(feats, gathered):
            assert g.shape == (2, 4, f.shape[2], 4, 4)
            for b in range(2):
                assert torch.equal(g[b], f[b, idx[b]])

    def test_gather(self):
        f = torch.arange(2 * 5).reshape(2, 5).float()
        assert gather_patches(f, torch.tensor([[0, 4], [1, 2]])).tolist() == [[0, 4], [6, 7]]


class TestReduction:
    def test_reported_ratio(self):
        r = reduction_ratio(64, 5)
        assert float(r) == 0.921875
        assert round(float(r) * 100, 1) == 92.2

    def test_edges(self):
        assert reduction_ratio(64, 64) == 0
        assert reduction_ratio(2, 1) == 0.5

    def test_invalid(self):
        with pytest.raises(ValueError):
            reduction_ratio(4, 5)


class TestCoverage:
    spec = LatticeSpec(64, 64, 16)

    def _mask(self, *pixels):
        m = np.zeros((64, 64), np.uint8)
        for r, c in pixels:
            m[r, c] = 1
        return m

    def test_single_covered(self):
        assert coverage([5], self._mask((20, 20)), self.spec) == 1.0

    def test_half_covered(self):
        assert coverage([0], self._mask((1, 1), (60, 60)), self.spec) == 0.5

    def test_no_targets(self):
        assert coverage([0, 1], self._mask(), self.spec) is None

    def test_random_against_recount(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            pts = {(int(r), int(c)) for r, c in rng.integers(0, 64, size=(rng.integers(1, 6), 2))}
            # isolated single pixels so each point is one target
            pts = [p for p in pts if all(max(abs(p[0] - q[0]), abs(p[1] - q[1])) > 1 for q in pts if q != p)]
            if not pts:
                continue
            sel = rng.choice(16, size=5, replace=False).tolist()
            hits = sum(((r // 16) * 4 + c // 16) in sel for r, c in pts)
            assert coverage(sel, self._mask(*pts), self.spec) == pytest.approx(hits / len(pts))

    def test_precision(self):
        m = self._mask((1, 1))
        assert patch_precision([0, 1], m, self.spec) == 0.5
