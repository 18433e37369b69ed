import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sgfnet import sgf
from sgfnet.sgf import (FeaturePair, SgfOptions, SgfParams, aggregate, attention_mask, channel_activation, cross_features,
                        fuse, global_cross_attention, joint_score, large_kernel_attention, project_qkv,
                        spatial_attention, spectral_channel_attention, spectral_feature_enhancement, sgf_forward)
from sgfnet.spectral import SpectralBasisSet, default_group_count
from sgfnet.tensor import DimensionError, Tensor, backward, precision, tensor


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def params_for(c, seed=0, k=3, **opts):
    p = SgfParams.init(c, k, seed=seed, options=SgfOptions(**opts))
    if p.mask_conv_rgb is not None:
        # zero at init would make every spatial map flat
        r = np.random.default_rng(seed + 99)
        for conv in (p.mask_conv_rgb, p.mask_conv_t):
            conv.w.data[...] = r.uniform(-1, 1, conv.w.shape)
    return p


def basis_for(c, h=7, w=7):
    return SpectralBasisSet.build(default_group_count(c), h, w)


def pair(rng, shape, scale=1.0):
    return FeaturePair(tensor(scale * rng.standard_normal(shape)), tensor(scale * rng.standard_normal(shape)))


def zero_(*ts):
    for t in ts:
        t.data[...] = 0


# ---------------------------------------------------------------------------
# straight-line oracles, written index by index


def o_pool(x, hp, wp):
    c, h, w = x.shape
    out = np.zeros((c, hp, wp))
    for i in range(hp):
        h0, h1 = (i * h) // hp, math.ceil((i + 1) * h / hp)
        for j in range(wp):
            w0, w1 = (j * w) // wp, math.ceil((j + 1) * w / wp)
            for ci in range(c):
                out[ci, i, j] = x[ci, h0:h1, w0:w1].sum() / ((h1 - h0) * (w1 - w0))
    return out


def o_dct(x, bs):
    c = x.shape[0]
    hp, wp = bs.size
    p = o_pool(x, hp, wp)
    per = c // bs.groups
    s = np.zeros(c)
    for ci in range(c):
        fh, fw = bs.freq_pairs[ci // per]
        for i in range(hp):
            for j in range(wp):
                s[ci] += p[ci, i, j] * math.cos((i + .5) * math.pi * fh / hp) * math.cos((j + .5) * math.pi * fw / wp)
    return s


def o_mlp(s, mlp):
    w1, b1, w2, b2 = (t.data for t in (mlp.w1, mlp.b1, mlp.w2, mlp.b2))
    hidden = [max(0.0, sum(w1[o, i] * s[i] for i in range(len(s))) + b1[o]) for o in range(len(b1))]
    return np.array([sum(w2[o, i] * hidden[i] for i in range(len(hidden))) + b2[o] for o in range(len(b2))])


def o_dw(x, dw):
    w, b, d = dw.w.data, dw.b.data, dw.dilation
    c, h, wd = x.shape
    k = w.shape[1]
    p = d * (k - 1) // 2
    out = np.zeros_like(x)
    for ci in range(c):
        for i in range(h):
            for j in range(wd):
                acc = b[ci]
                for a in range(k):
                    for bb in range(k):
                        y, z = i + a * d - p, j + bb * d - p
                        if 0 <= y < h and 0 <= z < wd:
                            acc += w[ci, a, bb] * x[ci, y, z]
                out[ci, i, j] = acc
    return out


def o_pw(x, pw):
    w, b = pw.w.data, pw.b.data
    c, h, wd = x.shape
    out = np.zeros((w.shape[0], h, wd))
    for o in range(w.shape[0]):
        for i in range(h):
            for j in range(wd):
                out[o, i, j] = b[o] + sum(w[o, ci] * x[ci, i, j] for ci in range(c))
    return out


def o_channel_attention(enh_cat, p, bs):
    """5x5 dw -> 7x7 dw (dilation 3) -> 1x1, score from that, applied to the input."""
    lka = o_pw(o_dw(o_dw(enh_cat, p.lka.dw5), p.lka.dw7), p.lka.pw)
    q = o_mlp(o_dct(lka, bs), p.mlp_rgbt)
    return np.stack([enh_cat[ci] * sig(q[ci]) for ci in range(enh_cat.shape[0])])


def o_cross_attention(agg_rgb, agg_t, p, spatial_norm):
    c, h, w = agg_rgb.shape
    n = h * w

    def qkv(x, proj):
        return [o_pw(x, conv).reshape(-1, n) for conv in (proj.q, proj.k, proj.v)]

    def mask(q, k):
        s = np.array([[sum(q[ci, i] * k[ci, j] for ci in range(q.shape[0])) for j in range(n)] for i in range(n)])
        m = np.zeros_like(s)
        for j in range(n):
            col = np.exp(s[:, j] - s[:, j].max())
            m[:, j] = col / col.sum()
        return m

    q_r, k_r, v_r = qkv(agg_rgb, p.qkv_rgb)
    q_t, k_t, v_t = qkv(agg_t, p.qkv_t)
    m_r, m_t = mask(q_r, k_r), mask(q_t, k_t)
    cross_t = np.array([[sum(v_t[ci, i] * m_r[i, j] for i in range(n)) for j in range(n)] for ci in range(c)])
    cross_r = np.array([[sum(v_r[ci, i] * m_t[i, j] for i in range(n)) for j in range(n)] for ci in range(c)])
    cross_t = cross_t.reshape(c, h, w) + agg_t
    cross_r = cross_r.reshape(c, h, w) + agg_rgb

    def gate(agg, cross, conv):
        logits = o_pw(cross, conv)[0].reshape(-1)
        e = np.exp(logits - logits.max())
        m = (e / e.sum()).reshape(h, w)
        if spatial_norm == "mean":
            m = m * n
        return agg * m[None]

    return gate(agg_rgb, cross_r, p.mask_conv_rgb), gate(agg_t, cross_t, p.mask_conv_t)


# ---------------------------------------------------------------------------
# spectral feature enhancement


def test_channel_activation_zero_input_gives_zero(f64):
    p = params_for(8)
    zero_(p.mlp_rgb.b1, p.mlp_rgb.b2)
    q = channel_activation(tensor(np.zeros((2, 8, 7, 7))), p.mlp_rgb, basis_for(8))
    assert np.all(q.data == 0)


def test_channel_activation_identity_mlp_gives_scaled_means(f64, rng):
    mlp = SgfParams.init(8, 3, reduction=1, seed=0).mlp_rgb
    mlp.w1.data[...] = np.eye(8)
    mlp.w2.data[...] = np.eye(8)
    zero_(mlp.b1, mlp.b2)
    x = rng.uniform(0, 1, (1, 8, 14, 14))  # positive so the ReLU passes everything
    q = channel_activation(tensor(x), mlp, SpectralBasisSet.build(1)).data
    np.testing.assert_allclose(q, 49 * x.mean(axis=(2, 3)), rtol=1e-10)


def test_channel_activation_width_mismatch():
    p = params_for(8)
    with pytest.raises(DimensionError):
        channel_activation(tensor(np.zeros((1, 16, 7, 7))), p.mlp_rgb, basis_for(16))


def test_zero_scores_give_half_and_sigmoid_one(f64, rng):
    p = params_for(8)
    zero_(p.mlp_rgb.w2, p.mlp_rgb.b2, p.mlp_t.w2, p.mlp_t.b2)
    f = pair(rng, (2, 8, 5, 5))
    enh, com = spectral_feature_enhancement(f, p, basis_for(8, 5, 5))
    np.testing.assert_allclose(enh.rgb.data, 0.5 * f.rgb.data, rtol=1e-12)
    np.testing.assert_allclose(com.thermal.data, sig(1.0) * f.thermal.data, rtol=1e-12)
    assert sig(1.0) == pytest.approx(0.7310585786, abs=1e-9)


def test_zero_features_give_zero_branches(f64):
    p = params_for(8)
    z = FeaturePair(tensor(np.zeros((1, 8, 5, 5))), tensor(np.zeros((1, 8, 5, 5))))
    enh, com = spectral_feature_enhancement(z, p, basis_for(8, 5, 5))
    for t in (*enh, *com):
        assert np.all(t.data == 0)


@given(st.integers(0, 2**16))
def test_branches_scale_each_channel_by_joint_score(seed):
    r = np.random.default_rng(seed)
    with precision("f64"):
        p = params_for(8, seed=seed)
        bs = basis_for(8, 5, 5)
        f = pair(r, (2, 8, 5, 5), scale=0.5)
        enh, com = spectral_feature_enhancement(f, p, bs)
        # recompute the scores independently of the block
        q = np.stack([8 * o_mlp(o_dct(f.rgb.data[n], bs), p.mlp_rgb) * o_mlp(o_dct(f.thermal.data[n], bs), p.mlp_t)
                      for n in range(2)])
    for m in ("rgb", "thermal"):
        x = getattr(f, m).data
        np.testing.assert_allclose(getattr(enh, m).data, x * sig(q)[:, :, None, None], atol=1e-12)
        np.testing.assert_allclose(getattr(com, m).data, x * sig(1 - q)[:, :, None, None], atol=1e-12)


def test_joint_score_matches_double_loop_oracle(f64, rng):
    p = params_for(16)
    bs = basis_for(16, 7, 7)
    f = pair(rng, (1, 16, 7, 7))
    q = joint_score(f, p, bs).data[0]
    expect = 16 * o_mlp(o_dct(f.rgb.data[0], bs), p.mlp_rgb) * o_mlp(o_dct(f.thermal.data[0], bs), p.mlp_t)
    assert np.abs(q - expect).max() < 1e-5


def test_mismatched_modalities_rejected(rng):
    p = params_for(8)
    with pytest.raises(DimensionError):
        spectral_feature_enhancement(FeaturePair(tensor(np.ones((1, 8, 4, 4))), tensor(np.ones((1, 8, 5, 5)))),
                                     p, basis_for(8, 4, 4))


# ---------------------------------------------------------------------------
# channel attention


def test_lka_identity_when_kernels_are_deltas(f64, rng):
    p = params_for(8)
    for dw in (p.lka.dw5, p.lka.dw7):
        k = dw.w.shape[1]
        dw.w.data[...] = 0
        dw.w.data[:, k // 2, k // 2] = 1
        zero_(dw.b)
    p.lka.pw.w.data[...] = np.eye(16)
    zero_(p.lka.pw.b)
    x = rng.standard_normal((1, 16, 6, 6))
    np.testing.assert_allclose(large_kernel_attention(tensor(x), p.lka).data, x, atol=1e-12)


def test_lka_receptive_field_is_eleven(f64):
    p = params_for(8)
    for t in (p.lka.dw5.w, p.lka.dw7.w, p.lka.pw.w):
        t.data[...] = np.abs(t.data) + 0.1
    base = np.zeros((1, 16, 30, 30))
    ref = large_kernel_attention(tensor(base), p.lka).data[0, :, 15, 15]

    def changed(dy, dx):
        x = base.copy()
        x[0, :, 15 + dy, 15 + dx] = 1.0
        return np.any(large_kernel_attention(tensor(x), p.lka).data[0, :, 15, 15] != ref)

    assert changed(11, 11) and changed(-11, 0)
    assert not changed(12, 0) and not changed(0, -12)


def test_lka_zero_input_gives_bias_only(f64):
    p = params_for(8)
    for t in (p.lka.dw5.b, p.lka.dw7.b, p.lka.pw.b):
        zero_(t)
    assert np.all(large_kernel_attention(tensor(np.zeros((1, 16, 5, 5))), p.lka).data == 0)


def test_channel_attention_zeroed_mlp_halves_input(f64, rng):
    p = params_for(8)
    zero_(p.mlp_rgbt.w2, p.mlp_rgbt.b2)
    x = rng.standard_normal((1, 16, 5, 5))
    np.testing.assert_allclose(spectral_channel_attention(tensor(x), p, basis_for(16, 5, 5)).data, 0.5 * x, atol=1e-12)


def test_channel_attention_scales_each_channel_into_unit_interval(f64, rng):
    p = params_for(8)
    x = rng.uniform(0.5, 1.0, (1, 16, 5, 5))
    ratio = spectral_channel_attention(tensor(x), p, basis_for(16, 5, 5)).data / x
    per_channel = ratio.reshape(16, -1)
    np.testing.assert_allclose(per_channel, per_channel[:, :1].repeat(25, axis=1), rtol=1e-12)
    assert np.all((per_channel > 0) & (per_channel < 1))


def test_channel_attention_chain_matches_oracle(f64, rng):
    # 2C = 8 channels on a 7x7 map
    p = SgfParams.init(8, 3, seed=3)
    lka = sgf.Lka.init(8, np.random.default_rng(5))
    mlp = sgf.Mlp.init(8, 4, np.random.default_rng(6))
    p.lka, p.mlp_rgbt = lka, mlp
    bs = basis_for(8)
    x = rng.standard_normal((1, 8, 7, 7))
    got = spectral_channel_attention(tensor(x), p, bs).data[0]
    assert np.abs(got - o_channel_attention(x[0], p, bs)).max() < 1e-5


# ---------------------------------------------------------------------------
# aggregation and fusion


def test_aggregate_examples(f64, rng):
    enh = rng.standard_normal((1, 8, 3, 3))
    out = aggregate(tensor(enh), tensor(np.zeros_like(enh)))
    np.testing.assert_array_equal(out.rgb.data, enh[:, :4])
    np.testing.assert_array_equal(out.thermal.data, enh[:, 4:])
    z = aggregate(tensor(np.zeros((1, 8, 2, 2))), tensor(np.zeros((1, 8, 2, 2))))
    assert np.all(z.rgb.data == 0) and np.all(z.thermal.data == 0)


def test_aggregate_keeps_modality_order():
    marker_rgb = np.full((1, 4, 2, 2), 1.0)
    marker_t = np.full((1, 4, 2, 2), 2.0)
    from sgfnet.tensor import concat_channels
    cat = concat_channels([tensor(marker_rgb), tensor(marker_t)])
    out = aggregate(cat, None)
    assert np.all(out.rgb.data == 1) and np.all(out.thermal.data == 2)


def test_fuse_examples(rng):
    a, b = tensor(rng.standard_normal((1, 8, 3, 3))), tensor(rng.standard_normal((1, 8, 3, 3)))
    zero = tensor(np.zeros((1, 8, 3, 3)))
    np.testing.assert_array_equal(fuse(FeaturePair(a, zero)).rgb.data, a.data)
    out = fuse(FeaturePair(zero, b))
    np.testing.assert_array_equal(out.rgb.data, b.data)
    np.testing.assert_array_equal(out.thermal.data, b.data)
    assert fuse(FeaturePair(a, b)).thermal is b


# ---------------------------------------------------------------------------
# global cross-modal attention


def test_mask_columns_sum_to_one(f64, rng):
    p = params_for(8)
    q, k, _ = project_qkv(tensor(rng.standard_normal((2, 8, 4, 5))), p.qkv_rgb)
    m = attention_mask(q, k).data
    assert m.shape == (2, 20, 20)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-6)


def test_singleton_mask_and_cross_is_value_plus_residual(f64, rng):
    p = params_for(8)
    agg = pair(rng, (1, 8, 1, 1))
    q, k, _ = project_qkv(agg.rgb, p.qkv_rgb)
    assert attention_mask(q, k).data.tolist() == [[[1.0]]]
    cross = cross_features(agg, p)
    v_t = p.qkv_t.v(agg.thermal).data
    np.testing.assert_allclose(cross.thermal.data, v_t + agg.thermal.data, atol=1e-12)


def test_zero_value_projection_leaves_residual_only(f64, rng):
    p = params_for(8)
    zero_(p.qkv_rgb.v.w, p.qkv_rgb.v.b, p.qkv_t.v.w, p.qkv_t.v.b)
    agg = pair(rng, (1, 8, 3, 4))
    cross = cross_features(agg, p)
    np.testing.assert_array_equal(cross.rgb.data, agg.rgb.data)
    np.testing.assert_array_equal(cross.thermal.data, agg.thermal.data)


@given(st.integers(0, 2**16), st.sampled_from(["mean", "sum"]))
def test_spatial_map_is_a_distribution(seed, norm):
    r = np.random.default_rng(seed)
    with precision("f64"):
        p = params_for(8, seed=seed)
        x = tensor(r.uniform(-10, 10, (2, 8, 4, 6)))
        m = spatial_attention(x, p.mask_conv_rgb, norm).data
    total = m.sum(axis=(2, 3)) / (24 if norm == "mean" else 1)
    np.testing.assert_allclose(total, 1.0, atol=1e-6)
    assert np.all(m > 0)


def test_fresh_gate_is_identity_in_mean_mode(f64, rng):
    p = SgfParams.init(8, 3, seed=0)
    agg = pair(rng, (1, 8, 3, 4))
    att = global_cross_attention(agg, p, "mean")
    np.testing.assert_allclose(att.rgb.data, agg.rgb.data, atol=1e-12)
    np.testing.assert_allclose(att.thermal.data, agg.thermal.data, atol=1e-12)


def test_unknown_spatial_norm():
    p = params_for(8)
    with pytest.raises(ValueError):
        spatial_attention(tensor(np.ones((1, 8, 2, 2))), p.mask_conv_rgb, "max")


@pytest.mark.parametrize("norm", ["mean", "sum"])
@pytest.mark.parametrize("hw", [(2, 2), (3, 2)])
def test_cross_attention_chain_matches_oracle(f64, rng, norm, hw):
    p = params_for(8, seed=11)
    agg = pair(rng, (1, 8) + hw)
    att = global_cross_attention(agg, p, norm)
    exp_rgb, exp_t = o_cross_attention(agg.rgb.data[0], agg.thermal.data[0], p, norm)
    assert np.abs(att.rgb.data[0] - exp_rgb).max() < 1e-5
    assert np.abs(att.thermal.data[0] - exp_t).max() < 1e-5


def test_unfused_mask_path_agrees_with_fused_cross_features(f64, rng):
    from sgfnet.tensor import matmul, reshape
    p = params_for(8)
    agg = pair(rng, (2, 8, 3, 3))
    q, k, _ = project_qkv(agg.rgb, p.qkv_rgb)
    _, _, v_t = project_qkv(agg.thermal, p.qkv_t)
    plain = reshape(matmul(v_t, attention_mask(q, k)), agg.thermal.shape).data + agg.thermal.data
    np.testing.assert_allclose(cross_features(agg, p).thermal.data, plain, atol=1e-12)


# ---------------------------------------------------------------------------
# whole block


def test_block_shapes_and_determinism(rng):
    p = params_for(16, k=5)
    f = pair(rng, (2, 16, 6, 8))
    bs = basis_for(16, 6, 7)
    fused, prelim = sgf_forward(f, p, bs)
    assert fused.rgb.shape == fused.thermal.shape == (2, 16, 6, 8)
    assert prelim.shape == (2, 5, 6, 8)
    again, prelim2 = sgf_forward(f, p, bs)
    np.testing.assert_array_equal(fused.rgb.data, again.rgb.data)
    np.testing.assert_array_equal(prelim.data, prelim2.data)


def test_block_gradient_on_small_input():
    from sgfnet.gradcheck import check_params
    from sgfnet.tensor import mul, sum as tsum
    with precision("f64"):
        r = np.random.default_rng(0)
        p = params_for(8)
        bs = basis_for(8, 4, 4)
        f = FeaturePair(tensor(r.standard_normal((1, 8, 4, 4)), requires_grad=True),
                        tensor(r.standard_normal((1, 8, 4, 4)), requires_grad=True))
        w = tensor(r.standard_normal((1, 8, 4, 4)))
        wp = tensor(r.standard_normal((1, 3, 4, 4)))

        def loss():
            fused, prelim = sgf_forward(f, p, bs)
            return tsum(mul(fused.rgb, w)) + tsum(mul(prelim, wp))

        errs = check_params(loss, {"rgb": f.rgb, "t": f.thermal, **dict(p.named())}, max_coords=30)
    assert max(errs.values()) < 1e-3


@given(st.integers(0, 2**16))
def test_block_outputs_finite_in_float32(seed):
    r = np.random.default_rng(seed)
    p = params_for(16, seed=seed)
    f = FeaturePair(tensor(r.uniform(-10, 10, (1, 16, 4, 6))), tensor(r.uniform(-10, 10, (1, 16, 4, 6))))
    fused, prelim = sgf_forward(f, p, basis_for(16, 4, 6))
    assert all(np.all(np.isfinite(t.data)) for t in (fused.rgb, fused.thermal, prelim))


def test_disabled_stages_have_no_parameters():
    full = dict(params_for(16).named())
    bare = dict(params_for(16, enable_sfe=False, enable_sca=False, enable_gsa=False, enable_head=False).named())
    assert bare == {}
    assert {n.split(".")[0] for n in full} == {"mlp_rgb", "mlp_t", "mlp_rgbt", "lka", "qkv_rgb", "qkv_t",
                                                "mask_conv_rgb", "mask_conv_t", "head"}


def test_all_stages_off_is_plain_addition(rng):
    opts = SgfOptions(False, False, False, False)
    f = pair(rng, (1, 16, 4, 4))
    fused, prelim = sgf_forward(f, params_for(16, enable_sfe=False, enable_sca=False, enable_gsa=False,
                                              enable_head=False), basis_for(16, 4, 4), opts)
    assert prelim is None
    np.testing.assert_array_equal(fused.rgb.data, f.rgb.data + f.thermal.data)


def test_channel_width_validation():
    with pytest.raises(DimensionError):
        SgfParams.init(12, 3)
