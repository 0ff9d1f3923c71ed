import numpy as np
import pytest

from hotloc import tensor as T
from hotloc.hotformer import embed, init_params, toy_config
from hotloc.pooling import FUSER_BLOCKS, gem, mixer_head, pyramid_attn_pool, pyramid_descriptor, token_fuser
from hotloc.tensor import as_tensor, parameter


def fuser_params(q, c=None, seed=0, zero=False):
    rng = np.random.default_rng(seed)
    p = {}
    for i in range(FUSER_BLOCKS):
        p[f"fuser{i}.ln.g"] = np.ones(c or 4)
        p[f"fuser{i}.ln.b"] = np.zeros(c or 4)
        p[f"fuser{i}.w1"] = rng.normal(0, 0.5, size=(q, q))
        p[f"fuser{i}.b1"] = rng.normal(0, 0.1, size=q)
        p[f"fuser{i}.w2"] = np.zeros((q, q)) if zero else rng.normal(0, 0.5, size=(q, q))
        p[f"fuser{i}.b2"] = np.zeros(q)
    return {k: parameter(v) for k, v in p.items()}


def mixer_params(q, c, kbar, cbar, seed=0):
    rng = np.random.default_rng(seed)
    return {
        "mixer.token.w": parameter(rng.normal(size=(kbar, q))),
        "mixer.token.b": parameter(rng.normal(size=(kbar, 1))),
        "mixer.channel.w": parameter(rng.normal(size=(c, cbar))),
        "mixer.channel.b": parameter(rng.normal(size=cbar)),
    }


# --- pyramid attention pooling --------------------------------------------


def test_single_feature_token():
    t = np.array([[0.4, -1.0, 2.0]])
    q = np.random.default_rng(0).normal(size=(5, 3))
    out = pyramid_attn_pool(as_tensor(t), as_tensor(q)).data
    np.testing.assert_array_equal(out, np.repeat(t, 5, axis=0))


def test_zero_queries_give_uniform_mean():
    f = np.random.default_rng(1).normal(size=(7, 4))
    out = pyramid_attn_pool(as_tensor(f), as_tensor(np.zeros((3, 4)))).data
    np.testing.assert_allclose(out, np.repeat(f.mean(axis=0, keepdims=True), 3, axis=0), atol=1e-15)


def test_pool_brute_force():
    rng = np.random.default_rng(2)
    f, q = rng.normal(size=(5, 4)), rng.normal(size=(3, 4))
    out = pyramid_attn_pool(as_tensor(f), as_tensor(q)).data
    for i in range(3):
        s = [float(q[i] @ f[j]) / 2.0 for j in range(5)]
        e = [np.exp(v - max(s)) for v in s]
        expected = sum(e[j] * f[j] for j in range(5)) / sum(e)
        assert np.max(np.abs(out[i] - expected)) <= 1e-12


def test_pool_rows_stochastic_and_order_free():
    rng = np.random.default_rng(3)
    f, q = rng.normal(size=(20, 6)), rng.normal(size=(4, 6))
    rec = []
    out = pyramid_attn_pool(as_tensor(f), as_tensor(q), rec).data
    np.testing.assert_allclose(rec[0].sum(axis=1), 1.0, atol=1e-14)
    shuffled = pyramid_attn_pool(as_tensor(f[rng.permutation(20)]), as_tensor(q)).data
    np.testing.assert_allclose(out, shuffled, atol=1e-14)


def test_pool_grad():
    rng = np.random.default_rng(4)
    f, q = parameter(rng.normal(size=(6, 4))), parameter(rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 4))
    assert T.grad_check(lambda: T.sum_(pyramid_attn_pool(f, q) * w), [f, q]) < 1e-6


# --- token fuser ----------------------------------------------------------


def test_fuser_zero_w2_is_identity():
    x = np.random.default_rng(0).normal(size=(6, 4))
    np.testing.assert_array_equal(token_fuser(as_tensor(x), fuser_params(6, zero=True)).data, x)


@pytest.mark.parametrize("q", [1, 2, 9, 36])
def test_fuser_shape(q):
    x = np.random.default_rng(q).normal(size=(q, 4))
    assert token_fuser(as_tensor(x), fuser_params(q)).shape == (q, 4)


def test_fuser_hand_fixture():
    # block 0 only (others zeroed); LN over channels, MLP over the token axis
    params = fuser_params(2, c=2, zero=True)
    params["fuser0.w1"] = parameter([[0.6, -0.4], [0.3, 0.9]])
    params["fuser0.b1"] = parameter([0.1, -0.2])
    params["fuser0.w2"] = parameter([[1.0, 0.5], [-0.7, 0.2]])
    params["fuser0.b2"] = parameter([0.05, 0.0])
    out = token_fuser(as_tensor([[1.0, -0.5], [0.25, 2.0]]), params).data
    expected = [[1.382314391184464, -1.199676745814506], [0.36104059321523035, 2.148077932654554]]
    np.testing.assert_allclose(out, expected, atol=1e-9)


def test_fuser_grad():
    rng = np.random.default_rng(5)
    params = fuser_params(5, seed=1)
    x = parameter(rng.normal(size=(5, 4)))
    w = rng.normal(size=(5, 4))
    probe = [x, params["fuser0.w1"], params["fuser2.w2"], params["fuser3.ln.g"]]
    assert T.grad_check(lambda: T.sum_(token_fuser(x, params) * w), probe) < 1e-6


# --- mixer ----------------------------------------------------------------


def test_mixer_dimension_and_norm():
    x = np.random.default_rng(0).normal(size=(128, 256))
    d = mixer_head(as_tensor(x), mixer_params(128, 256, 32, 8)).data
    assert d.shape == (256,)
    assert abs(np.linalg.norm(d) - 1.0) < 1e-12


def test_mixer_scale_invariance():
    # with zero biases the pre-normalization vector scales linearly with the input
    rng = np.random.default_rng(1)
    params = mixer_params(10, 6, 4, 3)
    params["mixer.token.b"] = parameter(np.zeros((4, 1)))
    params["mixer.channel.b"] = parameter(np.zeros(3))
    x = rng.normal(size=(10, 6))
    a = mixer_head(as_tensor(x), params).data
    b = mixer_head(as_tensor(7 * x), params).data
    np.testing.assert_allclose(a, b, atol=1e-14)
    v = rng.normal(size=12)
    np.testing.assert_allclose(T.l2_normalize(as_tensor(7 * v)).data, T.l2_normalize(as_tensor(v)).data, atol=1e-15)


def test_mixer_brute_force():
    rng = np.random.default_rng(2)
    params = mixer_params(5, 3, 2, 2)
    x = rng.normal(size=(5, 3))
    tw, tb = params["mixer.token.w"].data, params["mixer.token.b"].data
    cw, cb = params["mixer.channel.w"].data, params["mixer.channel.b"].data
    y = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            y[i, j] = sum((sum(tw[i, t] * x[t, c] for t in range(5)) + tb[i, 0]) * cw[c, j] for c in range(3)) + cb[j]
    flat = y.reshape(-1)
    np.testing.assert_allclose(mixer_head(as_tensor(x), params).data, flat / np.linalg.norm(flat), atol=1e-14)


def test_mixer_rejects_too_few_tokens():
    with pytest.raises(ValueError):
        mixer_head(as_tensor(np.ones((3, 4))), mixer_params(3, 4, 5, 2))


# --- GeM ------------------------------------------------------------------


def test_gem_p1_is_mean_and_large_p_tends_to_max():
    f = np.abs(np.random.default_rng(0).normal(size=(9, 3))) + 0.1
    np.testing.assert_allclose(gem(as_tensor(f), as_tensor([1.0])).data, f.mean(axis=0), atol=1e-13)
    big = gem(as_tensor(f), as_tensor([200.0])).data
    np.testing.assert_allclose(big, f.max(axis=0), rtol=2e-2)


def test_gem_grad_includes_p():
    rng = np.random.default_rng(1)
    f = parameter(np.abs(rng.normal(size=(6, 3))) + 0.2)
    p = parameter([3.0])
    w = rng.normal(size=3)
    assert T.grad_check(lambda: T.sum_(gem(f, p) * w), [f, p]) < 1e-6


# --- full descriptor ------------------------------------------------------


def test_pyramid_descriptor_records_attention():
    cfg = toy_config()
    params = init_params(cfg, seed=0, std=0.3)
    rng = np.random.default_rng(0)
    levels = [as_tensor(rng.normal(size=(40, 32))), as_tensor(rng.normal(size=(11, 32)))]
    rec = []
    d = pyramid_descriptor(levels, params, rec).data
    assert [r.shape for r in rec] == [(24, 40), (12, 11)]
    assert abs(np.linalg.norm(d) - 1.0) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_descriptor_contract_on_submaps(seed):
    from conftest import forest_submap

    cfg = toy_config()
    d = embed(forest_submap(seed), init_params(cfg, seed=seed), cfg)
    assert d.shape == (cfg.mixer_tokens * cfg.mixer_channels,)
    assert abs(np.linalg.norm(d) - 1.0) <= 1e-9
