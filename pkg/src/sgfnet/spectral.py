"""2-D DCT cosine bases, multi-spectral channel pooling and a DCT high-pass filter."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, Tensor, adaptive_avg_pool, weighted_spatial_sum


def make_basis(size_h: int, size_w: int, f_h: int, f_w: int) -> np.ndarray:
    """Cosine basis ``cos((h+1/2) pi f_h / H') * cos((w+1/2) pi f_w / W')`` of shape ``[H', W']``."""
    if not (0 <= f_h < size_h and 0 <= f_w < size_w):
        raise ValueError(f"frequency ({f_h}, {f_w}) outside a {size_h}x{size_w} basis")
    rows = np.cos((np.arange(size_h) + 0.5) * math.pi * f_h / size_h)
    cols = np.cos((np.arange(size_w) + 0.5) * math.pi * f_w / size_w)
    return np.outer(rows, cols)


def select_frequency_pairs(n: int, size_h: int, size_w: int) -> list[tuple[int, int]]:
    """First ``n`` pairs in zigzag order: ascending ``f_h + f_w``, ties by ascending ``f_h``."""
    if n < 1 or n > size_h * size_w:
        raise ValueError(f"cannot select {n} distinct pairs from a {size_h}x{size_w} basis")
    pairs = [(fh, fw) for fh in range(size_h) for fw in range(size_w)]
    pairs.sort(key=lambda p: (p[0] + p[1], p[0]))
    return pairs[:n]


def default_group_count(channels: int) -> int:
    return 16 if channels >= 16 else channels


@dataclass(frozen=True, eq=False)
class SpectralBasisSet:
    """The cosine bases assigned to the channel groups, in group order."""

    size: tuple[int, int]
    freq_pairs: tuple[tuple[int, int], ...]
    bases: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, groups: int, size_h: int = 7, size_w: int = 7, freq_pairs=None) -> "SpectralBasisSet":
        if freq_pairs is None:
            freq_pairs = select_frequency_pairs(groups, size_h, size_w)
        freq_pairs = tuple((int(a), int(b)) for a, b in freq_pairs)
        if len(freq_pairs) != groups:
            raise ValueError(f"{len(freq_pairs)} frequency pairs given for {groups} groups")
        if len(set(freq_pairs)) != len(freq_pairs):
            raise ValueError("frequency pairs must be distinct")
        bases = np.stack([make_basis(size_h, size_w, fh, fw) for fh, fw in freq_pairs])
        bases.setflags(write=False)
        return cls((size_h, size_w), freq_pairs, bases)

    @property
    def groups(self) -> int:
        return len(self.freq_pairs)

    def channel_weights(self, channels: int) -> np.ndarray:
        """``[C, H', W']`` weights: each contiguous channel group gets its group's basis."""
        return _channel_weights(self, channels)


@functools.lru_cache(maxsize=64)
def _channel_weights(basis_set: SpectralBasisSet, channels: int) -> np.ndarray:
    if channels % basis_set.groups:
        raise DimensionError(f"{channels} channels not divisible into {basis_set.groups} groups")
    w = np.repeat(basis_set.bases, channels // basis_set.groups, axis=0)
    w.setflags(write=False)
    return w


def dct_pool(x: Tensor, basis_set: SpectralBasisSet) -> Tensor:
    """Multi-spectral channel descriptor ``[N, C]``.

    ``x`` is average-pooled to the basis size, then every channel is reduced
    against the (unnormalised) cosine basis of its group.
    """
    hp, wp = basis_set.size
    pooled = adaptive_avg_pool(x, hp, wp)
    return weighted_spatial_sum(pooled, basis_set.channel_weights(x.shape[1]))


# ---------------------------------------------------------------------------
# full-image orthonormal DCT-II


@functools.lru_cache(maxsize=32)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix; row ``k`` is the scaled 1-D cosine of frequency ``k``."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(math.pi * (i + 0.5) * k / n) * math.sqrt(2.0 / n)
    m[0] /= math.sqrt(2.0)
    m.setflags(write=False)
    return m


def dct2_full(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return dct_matrix(img.shape[0]) @ img @ dct_matrix(img.shape[1]).T


def idct2_full(coeffs) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    return dct_matrix(coeffs.shape[0]).T @ coeffs @ dct_matrix(coeffs.shape[1])


def high_pass_mask(shape: tuple[int, int], cutoff: float) -> np.ndarray:
    """Boolean mask of coefficients kept by :func:`high_pass`."""
    if not 0.0 <= cutoff <= 1.0:
        raise ValueError(f"cutoff must lie in [0, 1], got {cutoff}")
    h, w = shape
    radius = np.hypot(np.arange(h)[:, None] / h, np.arange(w)[None, :] / w)
    return radius >= cutoff * math.sqrt(2.0)


def high_pass(img, cutoff: float) -> np.ndarray:
    """Zero the DCT coefficients below the radial ``cutoff`` and transform back."""
    img = np.asarray(img, dtype=np.float64)
    keep = high_pass_mask(img.shape, cutoff)
    return idct2_full(dct2_full(img) * keep)
