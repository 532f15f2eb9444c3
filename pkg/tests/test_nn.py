import numpy as np
import pytest

from langdet.nn import (
    DecoderLayerParams,
    cross_attention,
    decoder_layer,
    decoder_layer_backward,
    inverse_sigmoid,
    layer_norm,
    param_items,
    positional_encoding,
    sigmoid,
    zeros_like_tree,
)

from helpers import numeric_grad, rel_err


def test_sigmoid_stable_and_exact_at_zero():
    x = np.array([-800.0, 0.0, 800.0])
    s = sigmoid(x)
    assert s[1] == 0.5
    assert s[0] == 0.0 and s[2] == 1.0
    assert np.all(np.isfinite(s))


def test_inverse_sigmoid_roundtrip():
    p = np.linspace(0.01, 0.99, 50)
    np.testing.assert_allclose(sigmoid(inverse_sigmoid(p)), p, atol=1e-14)


def test_positional_encoding_unit_norm_and_distinct():
    xy = np.random.default_rng(0).random((20, 2))
    pe = positional_encoding(xy, 16)
    np.testing.assert_allclose(np.linalg.norm(pe, axis=1), 1.0, atol=1e-12)
    assert np.linalg.matrix_rank(pe) > 4


def test_layer_norm_identity_on_normalized_rows():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 8))
    x = (x - x.mean(axis=1, keepdims=True)) / x.std(axis=1, keepdims=True)
    y, _ = layer_norm(x, np.ones(8), np.zeros(8))
    # only the epsilon inside the square root separates y from x
    np.testing.assert_allclose(y, x, atol=1e-4)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(1)
    p = DecoderLayerParams.init(8, 16, rng)
    _, w, _ = cross_attention(rng.normal(size=(3, 4, 8)), rng.normal(size=(3, 10, 8)), p)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


def test_dimension_mismatch():
    rng = np.random.default_rng(1)
    p = DecoderLayerParams.init(8, 16, rng)
    with pytest.raises(ValueError):
        cross_attention(rng.normal(size=(4, 8)), rng.normal(size=(10, 6)), p)


@pytest.mark.parametrize("seed", range(20))
def test_decoder_layer_gradient(seed):
    rng = np.random.default_rng(seed)
    d = 6
    p = DecoderLayerParams.init(d, 2 * d, rng)
    for _, a in param_items(p):
        a += 0.1 * rng.normal(size=a.shape)
    x = rng.normal(size=(2, 3, d))
    f = rng.normal(size=(2, 5, d))
    qpos = rng.normal(size=(2, 3, d)) if seed % 2 else None
    wout = rng.normal(size=(2, 3, d))

    def loss():
        return float((decoder_layer(x, f, p, qpos)[0] * wout).sum())

    _, cache = decoder_layer(x, f, p, qpos)
    g = zeros_like_tree(p)
    dx, df = decoder_layer_backward(wout, cache, p, g)
    assert rel_err(dx, numeric_grad(loss, x)) < 1e-4
    assert rel_err(df, numeric_grad(loss, f)) < 1e-4
    for (name, a), (_, ga) in zip(param_items(p), param_items(g)):
        assert rel_err(ga, numeric_grad(loss, a)) < 1e-4, name


def test_param_items_skip_non_params():
    from langdet.cem import CemParams
    p = CemParams.init(4, 8, np.random.default_rng(0))
    names = [n for n, _ in param_items(p)]
    assert "version" not in names
    assert names[0].startswith("layers.0.")
    assert "score_proj" in names and "bias" in names
