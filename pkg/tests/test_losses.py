import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from langdet.losses import (
    EPS,
    AslConfig,
    FocalConfig,
    asymmetric_loss,
    asymmetric_loss_arrays,
    binary_focal,
    binary_focal_arrays,
    clamp_prob,
    class_match_cost,
    multiclass_focal_cost,
)

from helpers import numeric_grad, rel_err


def focal_reference(p, t, alpha=0.25, gamma=2.0):
    """Textbook scalar form, written out separately from the vectorized code."""
    if t == 1:
        return -alpha * (1 - p) ** gamma * math.log(p)
    return -(1 - alpha) * p**gamma * math.log(1 - p)


def asl_reference(s, t, gp=0.0, gn=4.0, m=0.05):
    if t == 1:
        return -((1 - s) ** gp) * math.log(s)
    sm = max(s - m, 0.0)
    return -(sm**gn) * math.log(1 - sm)


class TestFocal:
    @pytest.mark.parametrize("p", [0.01, 0.3, 0.5, 0.9, 0.999])
    @pytest.mark.parametrize("t", [0, 1])
    def test_matches_reference(self, p, t):
        assert binary_focal(p, t).value == pytest.approx(focal_reference(p, t), rel=1e-12)

    def test_gamma_zero_is_weighted_bce(self):
        cfg = FocalConfig(alpha=0.25, gamma=0.0)
        assert binary_focal(0.3, 1, cfg).value == pytest.approx(-0.25 * math.log(0.3))
        assert binary_focal(0.3, 0, cfg).value == pytest.approx(-0.75 * math.log(0.7))

    def test_match_cost_is_positive_focal(self):
        assert class_match_cost(0.7) == pytest.approx(focal_reference(0.7, 1))

    def test_rejects_boundary_probability(self):
        with pytest.raises(ValueError):
            binary_focal(0.0, 1)
        with pytest.raises(ValueError):
            binary_focal(1.0, 0)

    def test_rejects_bad_target(self):
        with pytest.raises(ValueError):
            binary_focal(0.5, 2)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            FocalConfig(alpha=1.0)
        with pytest.raises(ValueError):
            FocalConfig(gamma=-1.0)

    def test_multiclass_index(self):
        probs = np.array([0.2, 0.6, 0.1])
        assert multiclass_focal_cost(probs, 1) == pytest.approx(focal_reference(0.6, 1))
        with pytest.raises(IndexError):
            multiclass_focal_cost(probs, 3)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0.02, 0.98, size=8)
        t = rng.integers(0, 2, size=8)
        _, g = binary_focal_arrays(p, t)
        num = numeric_grad(lambda: float(binary_focal_arrays(p, t)[0].sum()), p)
        assert rel_err(g, num) < 1e-4

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1e-6, 1 - 1e-6), st.sampled_from([0, 1]))
    def test_nonnegative(self, p, t):
        assert binary_focal(p, t).value >= 0.0


class TestAsymmetric:
    def test_clipped_negative_contributes_nothing(self):
        r = asymmetric_loss(np.array([0.04]), np.array([0]))
        assert r.value == 0.0
        assert r.grad[0] == 0.0

    @pytest.mark.parametrize("s", [0.03, 0.2, 0.5, 0.95])
    @pytest.mark.parametrize("t", [0, 1])
    def test_matches_reference(self, s, t):
        v = asymmetric_loss(np.array([s]), np.array([t])).value
        assert v == pytest.approx(asl_reference(s, t), rel=1e-12, abs=1e-300)

    def test_mu_scales(self):
        s, t = np.array([0.3, 0.8]), np.array([1, 0])
        base = asymmetric_loss(s, t).value
        assert asymmetric_loss(s, t, mu_asl=2.5).value == pytest.approx(2.5 * base)

    def test_mask_drops_entries(self):
        s, t = np.array([0.3, 0.8, 0.6]), np.array([1, 0, 0])
        full = asymmetric_loss_arrays(s, t)[0]
        r = asymmetric_loss(s, t, mask=np.array([1, 0, 1]))
        assert r.value == pytest.approx(full[0] + full[2])
        assert r.grad[1] == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            asymmetric_loss(np.array([0.3, 0.4]), np.array([1]))

    def test_bad_clip(self):
        with pytest.raises(ValueError):
            AslConfig(clip_m=1.0)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        # keep negatives away from the clip kink at s = m
        s = rng.uniform(0.1, 0.95, size=10)
        t = rng.integers(0, 2, size=10)
        cfg = AslConfig(gamma_pos=float(rng.uniform(0, 2)), gamma_neg=4.0, clip_m=0.05)
        _, g = asymmetric_loss_arrays(s, t, cfg)
        num = numeric_grad(lambda: float(asymmetric_loss_arrays(s, t, cfg)[0].sum()), s)
        assert rel_err(g, num) < 1e-4

    def test_easy_negative_pressure_smaller_than_bce(self):
        # the asymmetric focusing is the point: an easy negative costs far less than BCE
        s = 0.2
        assert asl_reference(s, 0) < 0.05 * -math.log(1 - s)


def test_clamp_prob():
    p = clamp_prob(np.array([0.0, 0.5, 1.0]))
    assert p[0] == EPS and p[2] == 1 - EPS and p[1] == 0.5
