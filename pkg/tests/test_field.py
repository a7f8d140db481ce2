import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dwtnerf.encoding import HashGridConfig
from dwtnerf.field import (AttentionConfig, AttentionWeights, FieldConfig, FieldModel, field_forward, init_attention,
                           mha, output_attention)
from dwtnerf.render import Camera, generate_rays, intrinsics, render_rays
from dwtnerf.tensor import ShapeError, Tensor, no_grad

from helpers import gradcheck


def brute_mha(x, w: AttentionWeights):
    """Materialise every head's full attention matrix with explicit loops for the softmax."""
    H, _, hd = w.wq.shape
    heads = []
    for h in range(H):
        q, k, v = x @ w.wq.data[h], x @ w.wk.data[h], x @ w.wv.data[h]
        scores = q @ k.T / math.sqrt(hd)
        attn = np.empty_like(scores)
        for i in range(len(x)):
            e = np.exp(scores[i] - scores[i].max())
            attn[i] = e / e.sum()
        heads.append(attn @ v)
    return np.concatenate(heads, axis=1) @ w.wo.data


def tiny_config(**kw):
    base = dict(hash=HashGridConfig(levels=2, features_per_level=2, table_size=2 ** 5, base_resolution=2,
                                    growth_factor=2.0), hidden=6, heads_in=2, heads_out=2)
    base.update(kw)
    return FieldConfig(**base)


def test_attention_config():
    assert AttentionConfig(2, 95).width == 48
    assert AttentionConfig(1, 4).width == 4
    assert AttentionConfig(2, 8, head_dim=3).width == 3
    with pytest.raises(ValueError):
        AttentionConfig(0, 4)


def test_single_token_closed_form(rng):
    cfg = AttentionConfig(2, 8)
    w = init_attention(cfg, rng)
    x = rng.normal(size=(1, 8))
    want = np.concatenate([x @ w.wv.data[h] for h in range(2)], axis=1) @ w.wo.data
    np.testing.assert_array_equal(mha(Tensor(x), cfg, w).data, want)


def test_brute_force_5x8(rng):
    cfg = AttentionConfig(2, 8)
    w = init_attention(cfg, rng)
    x = rng.normal(size=(5, 8))
    assert np.abs(mha(Tensor(x), cfg, w).data - brute_mha(x, w)).max() < 1e-12


def test_batched_token_sets_are_independent(rng):
    cfg = AttentionConfig(2, 8)
    w = init_attention(cfg, rng)
    x = rng.normal(size=(3, 5, 8))
    out = mha(Tensor(x), cfg, w).data
    for g in range(3):
        assert np.abs(out[g] - brute_mha(x[g], w)).max() < 1e-12


def test_identical_tokens_give_identical_rows(rng):
    cfg = AttentionConfig(2, 6)
    w = init_attention(cfg, rng)
    row = rng.normal(size=(1, 6))
    out = mha(Tensor(np.repeat(row, 4, axis=0)), cfg, w).data
    assert np.all(out == out[0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 9))
def test_permutation_equivariance(seed, n):
    r = np.random.default_rng(seed)
    cfg = AttentionConfig(2, 8)
    w = init_attention(cfg, r)
    x = r.normal(size=(n, 8))
    perm = r.permutation(n)
    a = mha(Tensor(x[perm]), cfg, w).data
    b = mha(Tensor(x), cfg, w).data[perm]
    assert np.array_equal(a, b)


def test_mha_width_mismatch(rng):
    w = init_attention(AttentionConfig(2, 8), rng)
    with pytest.raises(ShapeError):
        mha(Tensor(np.zeros((3, 7))), AttentionConfig(2, 7), w)
    with pytest.raises(ShapeError):
        mha(Tensor(np.zeros((3, 8))), AttentionConfig(1, 8), w)


def test_mha_gradients(rng):
    cfg = AttentionConfig(2, 5)
    w = init_attention(cfg, rng)
    x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    proj = rng.normal(size=(4, 5))
    params = dict(w.named("a"), x=x)
    err = gradcheck(lambda: (mha(x, cfg, w) * proj).sum(), params, eps=1e-5)
    assert max(err.values()) < 1e-4, err


# -------------------------------------------------------------- field stages

def test_zero_final_layers_give_activation_at_zero(rng):
    model = FieldModel(tiny_config(), seed=1)
    for layer in (model.density[-1], model.color[-1]):
        layer.weight.data[:] = 0.0
        layer.bias.data[:] = 0.0
    trimmed = Tensor(rng.normal(size=(7, 1)))
    hybrid = Tensor(rng.normal(size=(7, model.config.hybrid_dim)))
    sigma, color = field_forward(trimmed, hybrid, model)
    np.testing.assert_allclose(sigma.data, math.log(2.0), atol=1e-15)
    np.testing.assert_allclose(color.data, 0.5, atol=1e-15)


def test_field_forward_is_row_wise(rng):
    model = FieldModel(tiny_config(), seed=2)
    t = rng.normal(size=(1, 1))
    h = rng.normal(size=(1, model.config.hybrid_dim))
    s1, c1 = field_forward(Tensor(t), Tensor(h), model)
    s64, c64 = field_forward(Tensor(np.repeat(t, 64, 0)), Tensor(np.repeat(h, 64, 0)), model)
    np.testing.assert_allclose(s64.data, s1.data[0], rtol=0, atol=1e-15)
    np.testing.assert_allclose(c64.data, np.repeat(c1.data, 64, 0), rtol=0, atol=1e-15)


def test_density_gradient(rng):
    model = FieldModel(tiny_config(), seed=3)
    trimmed = Tensor(rng.normal(size=(5, 1)))
    hybrid = Tensor(rng.normal(size=(5, model.config.hybrid_dim)))
    params = {k: v for k, v in model.parameters().items() if k.startswith("density")}
    err = gradcheck(lambda: field_forward(trimmed, hybrid, model)[0].mean(), params, eps=1e-5)
    assert max(err.values()) < 1e-4, err


def identity_out_attention(model):
    """W^Q = W^K = 0; W^V splits the 4 columns over 2 heads and W^O stitches them back."""
    w = model.attn_out
    w.wq.data[:] = 0.0
    w.wk.data[:] = 0.0
    w.wv.data[:] = 0.0
    w.wv.data[0, 0, 0] = w.wv.data[0, 1, 1] = 1.0
    w.wv.data[1, 2, 0] = w.wv.data[1, 3, 1] = 1.0
    w.wo.data[:] = np.eye(4)


def test_output_attention_identity_pass_through(rng):
    model = FieldModel(tiny_config(head_dim_out=2), seed=4)
    identity_out_attention(model)
    sigma = Tensor(rng.random(1) * 3)
    color = Tensor(rng.random((1, 3)))
    s2, c2 = output_attention(sigma, color, model)
    zeta = np.concatenate([sigma.data[:, None], color.data], axis=1)
    attended = mha(Tensor(zeta), model.config.attention_out(), model.attn_out).data
    np.testing.assert_allclose(attended, zeta, atol=1e-15)
    np.testing.assert_allclose(s2.data, np.log1p(np.exp(sigma.data)), atol=1e-15)
    np.testing.assert_allclose(c2.data, 1 / (1 + np.exp(-color.data)), atol=1e-15)


def test_output_attention_single_token_and_permutation(rng):
    model = FieldModel(tiny_config(), seed=5)
    sigma, color = rng.random(1), rng.random((1, 3))
    zeta = np.concatenate([sigma[:, None], color], axis=1)
    w = model.attn_out
    closed = np.concatenate([zeta @ w.wv.data[h] for h in range(2)], axis=1) @ w.wo.data
    s2, c2 = output_attention(Tensor(sigma), Tensor(color), model)
    np.testing.assert_allclose(s2.data, np.log1p(np.exp(closed[:, 0])), atol=1e-15)
    sig, col = rng.random(6), rng.random((6, 3))
    perm = rng.permutation(6)
    a = output_attention(Tensor(sig[perm]), Tensor(col[perm]), model)
    b = output_attention(Tensor(sig), Tensor(col), model)
    assert np.array_equal(a[0].data, b[0].data[perm])
    assert np.array_equal(a[1].data, b[1].data[perm])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["samples", "rays"]))
def test_outputs_in_range(seed, axis):
    r = np.random.default_rng(seed)
    model = FieldModel(tiny_config(token_axis=axis), seed=seed % 1000)
    pts = r.random((3, 5, 3))
    d = r.normal(size=(3, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    with no_grad():
        sigma, color = model(pts, d)
    assert sigma.shape == (3, 5) and color.shape == (3, 5, 3)
    assert np.all(sigma.data >= 0)
    assert np.all((color.data >= 0) & (color.data <= 1))


def test_samples_axis_is_independent_of_ray_grouping(rng):
    model = FieldModel(tiny_config(), seed=6)
    pts = rng.random((4, 5, 3))
    d = rng.normal(size=(4, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    with no_grad():
        full = model(pts, d)[0].data
        halves = np.concatenate([model(pts[:2], d[:2])[0].data, model(pts[2:], d[2:])[0].data])
    np.testing.assert_allclose(full, halves, atol=1e-13)


def test_state_round_trip_and_errors():
    a, b = FieldModel(tiny_config(), seed=1), FieldModel(tiny_config(), seed=2)
    b.load_state({k: v.data for k, v in a.parameters().items()})
    for k, v in a.parameters().items():
        assert np.array_equal(v.data, b.parameters()[k].data)
    with pytest.raises(KeyError):
        b.load_state({})
    bad = {k: v.data for k, v in a.parameters().items()}
    bad["color.0.bias"] = np.zeros(99)
    with pytest.raises(ShapeError):
        b.load_state(bad)
    with pytest.raises(ValueError):
        FieldConfig(token_axis="pixels")


def conditioned_field_loss(axis, rng):
    """A small render loss whose gradients stand well clear of finite-difference noise.

    The samples of a ray share most hybrid columns (the direction encoding), so at
    initial scale the attention scores are nearly equal and the query/key gradients
    are ~1e-9, i.e. rounding noise for a 1e-5 step. Larger hash features and
    attention projections make the attention patterns, and their gradients, non-trivial.
    """
    model = FieldModel(tiny_config(token_axis=axis), seed=7)
    model.tables.data[:] = rng.normal(scale=3.0, size=model.tables.shape)
    model.attn_in.wq.data *= 6.0
    model.attn_in.wk.data *= 6.0
    model.attn_in.wv.data *= 3.0
    model.attn_out.wq.data *= 3.0
    model.attn_out.wk.data *= 3.0
    pose = np.eye(4)
    pose[:3, 3] = [0.5, 0.5, 2.0]
    cam = Camera(intrinsics(4.0, 3.5, 3.5), pose, 8, 8)
    batch = generate_rays(cam, [[2, 3], [5, 4]], near=1.0, far=3.0)
    proj = rng.normal(size=(2, 3))

    def loss():
        out = render_rays(model, batch, 4)
        return (out.color * proj).sum() + out.depth.sum() * 0.1

    return loss, model.parameters()


PARAMETER_GROUPS = {"hash_tables", "density.0.weight", "density.0.bias", "density.1.weight", "density.1.bias",
                    "color.0.weight", "color.1.weight", "color.2.weight", "color.2.bias",
                    "attn_in.wq", "attn_in.wk", "attn_in.wv", "attn_in.wo",
                    "attn_out.wq", "attn_out.wk", "attn_out.wv", "attn_out.wo"}


@pytest.mark.parametrize("axis", ["samples", "rays"])
def test_end_to_end_gradient_every_parameter_group(axis, rng):
    loss, params = conditioned_field_loss(axis, rng)
    assert PARAMETER_GROUPS <= set(params)
    err = gradcheck(loss, params, eps=1e-5, max_entries=25)
    assert max(err.values()) < 1e-4, err
