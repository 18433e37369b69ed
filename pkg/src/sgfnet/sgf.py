"""The spectral-aware global fusion (SGF) block.

Three stages run in sequence on an RGB/thermal feature pair:

1. spectral feature enhancement: a joint DCT-derived channel score gates
   both modalities, with a complementary branch gated by ``sigmoid(1 - Q)``;
2. spectral channel attention over the concatenated ``2C`` channels, with
   the score computed from a large-kernel-attention view of the features;
3. global cross-modal spatial attention, where each modality's affinity
   matrix mixes the other modality's values.

Each stage can be switched off for ablations through :class:`SgfOptions`.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .spectral import SpectralBasisSet, dct_pool
from .tensor import (
    DimensionError,
    Tensor,
    broadcast_mul_channel,
    broadcast_mul_spatial,
    concat_channels,
    conv2d_depthwise,
    conv2d_pointwise,
    cross_attention,
    linear,
    matmul,
    relu,
    reshape,
    scalar_mul,
    sigmoid,
    softmax,
    softmax_spatial,
    split_channels,
    transpose,
)


class FeaturePair(NamedTuple):
    rgb: Tensor
    thermal: Tensor


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class _Params:
    """Mixin: iterate ``(dotted_name, tensor)`` over nested dataclass fields."""

    def named(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            name = f"{prefix}{f.name}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, _Params):
                yield from value.named(name + ".")


@dataclass
class Pointwise(_Params):
    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, c_in: int, c_out: int, rng) -> "Pointwise":
        return cls(_uniform(rng, (c_out, c_in), c_in), _uniform(rng, (c_out,), c_in))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_pointwise(x, self.w, self.b)


@dataclass
class Depthwise(_Params):
    w: Tensor
    b: Tensor
    dilation: int = 1

    @classmethod
    def init(cls, channels: int, k: int, rng, dilation: int = 1) -> "Depthwise":
        return cls(_uniform(rng, (channels, k, k), k * k), _uniform(rng, (channels,), k * k), dilation)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_depthwise(x, self.w, self.b, self.dilation)


@dataclass
class Mlp(_Params):
    """Two-layer perceptron ``width -> width/r -> width`` with a ReLU in between."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, width: int, reduction: int, rng) -> "Mlp":
        hidden = max(1, width // reduction)
        return cls(
            _uniform(rng, (hidden, width), width), _uniform(rng, (hidden,), width),
            _uniform(rng, (width, hidden), hidden), _uniform(rng, (width,), hidden),
        )

    def __call__(self, s: Tensor) -> Tensor:
        return linear(relu(linear(s, self.w1, self.b1)), self.w2, self.b2)


@dataclass
class Lka(_Params):
    dw5: Depthwise
    dw7: Depthwise
    pw: Pointwise

    @classmethod
    def init(cls, channels: int, rng) -> "Lka":
        return cls(
            Depthwise.init(channels, 5, rng),
            Depthwise.init(channels, 7, rng, dilation=3),
            Pointwise.init(channels, channels, rng),
        )


@dataclass
class Qkv(_Params):
    q: Pointwise
    k: Pointwise
    v: Pointwise

    @classmethod
    def init(cls, channels: int, rng) -> "Qkv":
        reduced = max(1, channels // 8)
        return cls(
            Pointwise.init(channels, reduced, rng),
            Pointwise.init(channels, reduced, rng),
            Pointwise.init(channels, channels, rng),
        )


@dataclass(frozen=True)
class SgfOptions:
    enable_sfe: bool = True
    enable_sca: bool = True
    enable_gsa: bool = True
    enable_head: bool = True
    # "mean": spatial map rescaled by H*W so a uniform map is the identity gate; "sum": raw softmax
    spatial_norm: str = "mean"


@dataclass
class SgfParams(_Params):
    channels: int
    num_classes: int
    mlp_rgb: Mlp | None = None
    mlp_t: Mlp | None = None
    mlp_rgbt: Mlp | None = None
    lka: Lka | None = None
    qkv_rgb: Qkv | None = None
    qkv_t: Qkv | None = None
    mask_conv_rgb: Pointwise | None = None
    mask_conv_t: Pointwise | None = None
    head: Pointwise | None = None

    @classmethod
    def init(cls, channels: int, num_classes: int, reduction: int = 4, seed=0,
             options: SgfOptions = SgfOptions()) -> "SgfParams":
        if channels % 8 or channels % reduction:
            raise DimensionError(f"channel width {channels} must be divisible by 8 and by r={reduction}")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        p = cls(channels, num_classes)
        if options.enable_sfe:
            p.mlp_rgb = Mlp.init(channels, reduction, rng)
            p.mlp_t = Mlp.init(channels, reduction, rng)
        if options.enable_sca:
            p.lka = Lka.init(2 * channels, rng)
            p.mlp_rgbt = Mlp.init(2 * channels, reduction, rng)
        if options.enable_gsa:
            p.qkv_rgb = Qkv.init(channels, rng)
            p.qkv_t = Qkv.init(channels, rng)
            p.mask_conv_rgb = Pointwise.init(channels, 1, rng)
            p.mask_conv_t = Pointwise.init(channels, 1, rng)
            # flat spatial maps at init: the gate starts as the identity instead of
            # amplifying a few random positions
            p.mask_conv_rgb.w.data[...] = 0
            p.mask_conv_t.w.data[...] = 0
        if options.enable_head:
            p.head = Pointwise.init(channels, num_classes, rng)
        return p


# ---------------------------------------------------------------------------
# spectral feature enhancement


def channel_activation(x: Tensor, mlp: Mlp, basis_set: SpectralBasisSet) -> Tensor:
    """Raw ``[N, C]`` channel scores ``mlp(dct_pool(x))``; callers apply the sigmoid."""
    if mlp.w1.shape[1] != x.shape[1]:
        raise DimensionError(f"MLP width {mlp.w1.shape[1]} does not match {x.shape[1]} channels")
    return mlp(dct_pool(x, basis_set))


def joint_score(f: FeaturePair, params: SgfParams, basis_set: SpectralBasisSet) -> Tensor:
    q_rgb = channel_activation(f.rgb, params.mlp_rgb, basis_set)
    q_t = channel_activation(f.thermal, params.mlp_t, basis_set)
    return scalar_mul(q_rgb * q_t, f.rgb.shape[1])


def spectral_feature_enhancement(f: FeaturePair, params: SgfParams, basis_set: SpectralBasisSet
                                 ) -> tuple[FeaturePair, FeaturePair]:
    """Gate both modalities with ``sigmoid(Q)`` and ``sigmoid(1 - Q)``, ``Q = C * Q_rgb * Q_t``."""
    if f.rgb.shape != f.thermal.shape:
        raise DimensionError(f"modalities differ: {f.rgb.shape} vs {f.thermal.shape}")
    q = joint_score(f, params, basis_set)
    s_enh = sigmoid(q)
    s_com = sigmoid(1.0 - q)
    enh = FeaturePair(broadcast_mul_channel(f.rgb, s_enh), broadcast_mul_channel(f.thermal, s_enh))
    com = FeaturePair(broadcast_mul_channel(f.rgb, s_com), broadcast_mul_channel(f.thermal, s_com))
    return enh, com


# ---------------------------------------------------------------------------
# spectral channel attention


def large_kernel_attention(x: Tensor, lka: Lka) -> Tensor:
    """5x5 depthwise, then 7x7 depthwise with dilation 3, then 1x1 conv."""
    if lka.pw.w.shape[1] != x.shape[1]:
        raise DimensionError(f"LKA width {lka.pw.w.shape[1]} does not match {x.shape[1]} channels")
    return lka.pw(lka.dw7(lka.dw5(x)))


def spectral_channel_attention(enh_cat: Tensor, params: SgfParams, basis_set: SpectralBasisSet) -> Tensor:
    # the score comes from the LKA view but weights the un-convolved features
    q = channel_activation(large_kernel_attention(enh_cat, params.lka), params.mlp_rgbt, basis_set)
    return broadcast_mul_channel(enh_cat, sigmoid(q))


def aggregate(enh_weighted: Tensor, com_cat: Tensor | None) -> FeaturePair:
    """Sum the two branches and split back into (rgb, thermal) halves."""
    total = enh_weighted if com_cat is None else enh_weighted + com_cat
    c = total.shape[1] // 2
    rgb, thermal = split_channels(total, [c, c])
    return FeaturePair(rgb, thermal)


# ---------------------------------------------------------------------------
# global cross-modal spatial attention


def project_qkv(x: Tensor, qkv: Qkv) -> tuple[Tensor, Tensor, Tensor]:
    """Query/key ``[N, C', HW]`` and value ``[N, C, HW]`` matrices."""
    n, _, h, w = x.shape
    return tuple(reshape(conv(x), (n, -1, h * w)) for conv in (qkv.q, qkv.k, qkv.v))


def attention_mask(q: Tensor, k: Tensor) -> Tensor:
    """``softmax(q^T k)`` normalised along columns: every ``mask[n, :, j]`` sums to 1."""
    return softmax(matmul(transpose(q), k), axis=1)


def spatial_attention(cross: Tensor, conv: Pointwise, spatial_norm: str = "mean") -> Tensor:
    """Single-channel ``[N,1,H,W]`` map; softmax over all positions (times ``H*W`` in "mean" mode)."""
    s = softmax_spatial(conv(cross))
    if spatial_norm == "mean":
        return scalar_mul(s, cross.shape[2] * cross.shape[3])
    if spatial_norm != "sum":
        raise ValueError(f"unknown spatial_norm {spatial_norm!r}")
    return s


def cross_features(agg: FeaturePair, params: SgfParams) -> FeaturePair:
    """Each modality's values mixed by the other modality's affinity, plus the residual."""
    if agg.rgb.shape != agg.thermal.shape:
        raise DimensionError(f"modalities differ: {agg.rgb.shape} vs {agg.thermal.shape}")
    q_rgb, k_rgb, v_rgb = project_qkv(agg.rgb, params.qkv_rgb)
    q_t, k_t, v_t = project_qkv(agg.thermal, params.qkv_t)
    shape = agg.rgb.shape
    cross_t = reshape(cross_attention(q_rgb, k_rgb, v_t), shape) + agg.thermal
    cross_rgb = reshape(cross_attention(q_t, k_t, v_rgb), shape) + agg.rgb
    return FeaturePair(cross_rgb, cross_t)


def global_cross_attention(agg: FeaturePair, params: SgfParams, spatial_norm: str = "mean") -> FeaturePair:
    cross = cross_features(agg, params)
    return FeaturePair(
        broadcast_mul_spatial(agg.rgb, spatial_attention(cross.rgb, params.mask_conv_rgb, spatial_norm)),
        broadcast_mul_spatial(agg.thermal, spatial_attention(cross.thermal, params.mask_conv_t, spatial_norm)),
    )


def fuse(att: FeaturePair) -> FeaturePair:
    if att.rgb.shape != att.thermal.shape:
        raise DimensionError(f"modalities differ: {att.rgb.shape} vs {att.thermal.shape}")
    return FeaturePair(att.rgb + att.thermal, att.thermal)


def sgf_forward(f: FeaturePair, params: SgfParams, basis_set: SpectralBasisSet,
                options: SgfOptions = SgfOptions()) -> tuple[FeaturePair, Tensor | None]:
    """Run the block; returns the fused pair and the preliminary logits (``None`` without a head)."""
    if options.enable_sfe:
        enh, com = spectral_feature_enhancement(f, params, basis_set)
    else:
        enh, com = f, None
    if options.enable_sfe or options.enable_sca:
        enh_cat = concat_channels([enh.rgb, enh.thermal])
        if options.enable_sca:
            enh_cat = spectral_channel_attention(enh_cat, params, basis_set)
        com_cat = None if com is None else concat_channels([com.rgb, com.thermal])
        agg = aggregate(enh_cat, com_cat)
    else:
        agg = f
    att = global_cross_attention(agg, params, options.spatial_norm) if options.enable_gsa else agg
    fused = fuse(att)
    prelim = params.head(fused.rgb) if options.enable_head and params.head is not None else None
    return fused, prelim
