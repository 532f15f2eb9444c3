import math

import numpy as np
import pytest

from langdet.cem import (
    SGD,
    Adam,
    CemParams,
    ConfigError,
    cem_attention_weights,
    cem_backward,
    cem_forward,
    cem_loss_and_grads,
    cem_train_step,
    multi_hot,
    topk_select,
    training_category_set,
)
from langdet.losses import AslConfig
from langdet.nn import StaleCacheError, param_items, sigmoid

from helpers import numeric_grad, rel_err


def setup(seed=0, K=5, d=8, P=6, B=None):
    rng = np.random.default_rng(seed)
    E = rng.normal(size=(K, d))
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    params = CemParams.init(K, d, rng)
    for _, a in param_items(params):
        a += 0.1 * rng.normal(size=a.shape)
    F = rng.normal(size=(P, d) if B is None else (B, P, d))
    return rng, E, params, F


class TestForward:
    def test_shapes_unbatched(self):
        _, E, p, F = setup()
        s, E2 = cem_forward(E, F, p)
        assert s.shape == (5,) and E2.shape == (5, 8)
        assert np.all((s > 0) & (s < 1))

    def test_batched_matches_unbatched(self):
        _, E, p, F = setup(B=3)
        s, E2 = cem_forward(E, F, p)
        for b in range(3):
            sb, e2b = cem_forward(E, F[b], p)
            np.testing.assert_allclose(s[b], sb, atol=1e-14)
            np.testing.assert_allclose(E2[b], e2b, atol=1e-14)

    def test_score_formula(self):
        _, E, p, F = setup()
        s, E2 = cem_forward(E, F, p)
        logit = (E2 @ p.score_proj * E).sum(axis=1) / math.sqrt(8) + p.bias
        np.testing.assert_allclose(s, sigmoid(logit), atol=1e-15)

    def test_two_layers_required(self):
        _, E, p, F = setup()
        with pytest.raises(ValueError):
            CemParams(p.layers[:1], p.score_proj, p.bias)

    def test_attention_maps(self):
        _, E, p, F = setup()
        maps = cem_attention_weights(E, F, p)
        assert len(maps) == 2
        for w in maps:
            assert w.shape == (5, 6)
            np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)

    def test_dimension_mismatch(self):
        _, E, p, F = setup()
        with pytest.raises(ValueError):
            cem_forward(E, F[:, :4], p)

    def test_bias_shape(self):
        _, E, p, F = setup()
        with pytest.raises(ValueError):
            cem_forward(E[:4], F, p)


class TestBackward:
    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        rng, E, p, F = setup(seed, B=2)
        ws = rng.normal(size=(2, 5))
        we = rng.normal(size=(2, 5, 8))

        def loss():
            s, E2 = cem_forward(E, F, p)
            return float((ws * s).sum() + (we * E2).sum())

        _, _, cache = cem_forward(E, F, p, return_cache=True)
        g, dE, dF = cem_backward(ws, cache, p, dE2=we)
        assert rel_err(dE, numeric_grad(loss, E)) < 1e-4
        assert rel_err(dF, numeric_grad(loss, F)) < 1e-4
        for (name, a), (_, ga) in zip(param_items(p), param_items(g)):
            assert rel_err(ga, numeric_grad(loss, a)) < 1e-4, name

    def test_stale_cache(self):
        _, E, p, F = setup()
        _, _, cache = cem_forward(E, F, p, return_cache=True)
        p.version += 1
        with pytest.raises(StaleCacheError):
            cem_backward(np.ones(5), cache, p)

    def test_foreign_params(self):
        _, E, p, F = setup()
        _, _, cache = cem_forward(E, F, p, return_cache=True)
        _, _, other, _ = setup(1)
        with pytest.raises(StaleCacheError):
            cem_backward(np.ones(5), cache, other)


class TestSelection:
    def test_topk_order_and_ties(self):
        assert topk_select([0.1, 0.9, 0.5, 0.9], 3) == [1, 3, 2]
        assert topk_select([0.5, 0.5, 0.5], 2) == [0, 1]

    def test_topk_saturates(self):
        assert topk_select([0.3, 0.1], 5) == [0, 1]

    def test_topk_invalid(self):
        with pytest.raises(ValueError):
            topk_select([0.1], 0)

    def test_training_set_gt_first(self):
        ids = training_category_set([4, 1, 4], np.array([0.9, 0.0, 0.8, 0.1, 0.0, 0.7]), 4)
        assert ids == [1, 4, 0, 2]

    def test_training_set_prefers_allowed(self):
        scores = np.array([0.9, 0.1, 0.8, 0.2])
        allowed = np.array([0, 1, 0, 1])
        assert training_category_set([1], scores, 3, allowed) == [1, 3, 0]

    def test_training_set_too_many_gts(self):
        with pytest.raises(ConfigError, match="raise top_k"):
            training_category_set([0, 1, 2], np.zeros(5), 2)

    def test_multi_hot(self):
        np.testing.assert_array_equal(multi_hot([0, 2], 4), [1, 0, 1, 0])


class TestTraining:
    @pytest.mark.parametrize("opt_cls", [SGD, Adam])
    def test_steps_reduce_loss(self, opt_cls):
        rng, E, p, _ = setup(3, K=6, d=8)
        # each image shows one category's embedding in a few cells
        F = rng.normal(scale=0.05, size=(12, 6, 8))
        T = np.zeros((12, 6))
        for b in range(12):
            c = b % 6
            F[b, :3] += E[c]
            T[b, c] = 1
        opt = opt_cls(0.2 if opt_cls is SGD else 0.01)
        first = cem_train_step(E, F, T, p, opt)
        for _ in range(60):
            last = cem_train_step(E, F, T, p, opt)
        assert last < 0.5 * first
        assert p.version == 61

    def test_learnable_embeddings_move(self):
        rng, E, p, F = setup(4, B=2)
        E0 = E.copy()
        cem_train_step(E, F, np.eye(5)[:2], p, SGD(0.1), learnable_embeddings=True)
        assert not np.allclose(E, E0)

    def test_loss_and_grad_shapes(self):
        _, E, p, F = setup(B=2)
        loss, g, dE = cem_loss_and_grads(E, F, np.eye(5)[:2], p, AslConfig())
        assert np.isfinite(loss) and dE.shape == E.shape

    def test_clip_norm_bounds_update(self):
        rng, E, p, F = setup(5)
        before = [a.copy() for _, a in param_items(p)]
        grads = p.__class__.init(5, 8, rng)
        for _, a in param_items(grads):
            a[...] = 100.0
        SGD(1.0, momentum=0.0, clip_norm=1.0).step(p, grads)
        moved = np.sqrt(sum(((a - b) ** 2).sum() for (_, a), b in zip(param_items(p), before)))
        assert moved == pytest.approx(1.0, rel=1e-9)
