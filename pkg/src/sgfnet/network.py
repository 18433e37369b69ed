"""Two-stream encoder with per-stage SGF fusion, a top-down decoder and deep supervision."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import serialize
from .data import SegSample
from .metrics import ConfusionMatrix
from .sgf import Depthwise, FeaturePair, Pointwise, SgfOptions, SgfParams, sgf_forward
from .spectral import SpectralBasisSet, default_group_count
from .tensor import (
    Tensor,
    adaptive_avg_pool,
    backward,
    div,
    log_softmax,
    mul,
    no_grad,
    precision,
    relu,
    scalar_mul,
    softmax,
    sum as tsum,
    upsample_bilinear,
)

logger = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class NetworkConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    num_classes: int = 4
    input_size: tuple[int, int] = (64, 96)
    basis_size: tuple[int, int] = (7, 7)
    reduction: int = 4
    seed: int = 0
    learning_rate: float = 0.02
    lr_decay: float = 0.95
    momentum: float = 0.9
    grad_clip: float = 10.0
    batch_size: int = 2
    epochs: int = 30
    smoothing: float = 0.1
    dice_eps: float = 1e-5
    enable_sfe: bool = True
    enable_sca: bool = True
    enable_gsa: bool = True
    enable_ds: bool = True
    modality: str = "both"
    spatial_norm: str = "mean"
    freq_pairs: tuple[tuple[int, int], ...] | None = None
    precision: str = "f32"

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.input_size = tuple(int(v) for v in self.input_size)
        self.basis_size = tuple(int(v) for v in self.basis_size)
        if len(self.stage_channels) != 4:
            raise ValueError("exactly four encoder stages are required")
        for c in self.stage_channels:
            if c % 8 or c % self.reduction:
                raise ValueError(f"stage width {c} must be divisible by 8 and by r={self.reduction}")
        if self.modality not in ("both", "rgb", "thermal"):
            raise ValueError(f"modality must be both, rgb or thermal, not {self.modality!r}")
        if self.input_size[0] % 16 or self.input_size[1] % 16:
            raise ValueError(f"input size {self.input_size} must be divisible by 16")

    @property
    def sgf_options(self) -> SgfOptions:
        return SgfOptions(self.enable_sfe, self.enable_sca, self.enable_gsa, self.enable_ds, self.spatial_norm)


# ---------------------------------------------------------------------------
# model


class SGFNet:
    """Parameters plus forward pass of the toy RGB-T segmentation network."""

    def __init__(self, config: NetworkConfig):
        self.config = config
        c = config.stage_channels
        k = config.num_classes
        rng = np.random.default_rng(config.seed)
        with precision(config.precision):
            self.encoder = {}
            for stream, c_in in (("rgb", 3), ("thermal", 1)):
                stages = []
                for s, c_out in enumerate(c):
                    width = c_in if s == 0 else c[s - 1]
                    stages.append((Depthwise.init(width, 3, rng), Pointwise.init(width, c_out, rng)))
                self.encoder[stream] = stages
            self.sgf = [SgfParams.init(cs, k, config.reduction, rng, config.sgf_options) for cs in c]
            self.decoder = [(Depthwise.init(c[s + 1], 3, rng), Pointwise.init(c[s + 1], c[s], rng))
                            for s in range(3)]
            self.head = Pointwise.init(c[0], k, rng)
        self.basis_sets = self._basis_sets()

    def _basis_sets(self) -> list[SpectralBasisSet]:
        cfg = self.config
        h, w = cfg.input_size
        sets = []
        for s, cs in enumerate(cfg.stage_channels):
            fh, fw = h >> (s + 1), w >> (s + 1)
            size = (min(cfg.basis_size[0], fh), min(cfg.basis_size[1], fw))
            groups = default_group_count(cs)
            # tiny maps hold fewer distinct frequency pairs than groups; halving keeps C divisible
            while groups > size[0] * size[1]:
                groups //= 2
            pairs = cfg.freq_pairs[:groups] if cfg.freq_pairs else None
            sets.append(SpectralBasisSet.build(groups, size[0], size[1], pairs))
        return sets

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for stream, stages in self.encoder.items():
            for s, (dw, pw) in enumerate(stages):
                params.update(dw.named(f"enc.{stream}.{s}.dw."))
                params.update(pw.named(f"enc.{stream}.{s}.pw."))
        for s, p in enumerate(self.sgf):
            params.update(p.named(f"sgf.{s}."))
        for s, (dw, pw) in enumerate(self.decoder):
            params.update(dw.named(f"dec.{s}.dw."))
            params.update(pw.named(f"dec.{s}.pw."))
        params.update(self.head.named("head."))
        return params

    def prepare_inputs(self, rgb: np.ndarray, thermal: np.ndarray) -> tuple[Tensor, Tensor]:
        """Batch arrays to tensors, substituting streams for single-modality ablations."""
        if self.config.modality == "thermal":
            rgb = np.repeat(thermal, 3, axis=1)
        elif self.config.modality == "rgb":
            thermal = rgb.mean(axis=1, keepdims=True)
        dt = self.head.w.dtype
        return Tensor(rgb, dtype=dt), Tensor(thermal, dtype=dt)

    def encoder_stage(self, x: Tensor, stream: str, s: int) -> Tensor:
        dw, pw = self.encoder[stream][s]
        y = relu(pw(dw(x)))
        return adaptive_avg_pool(y, y.shape[2] // 2, y.shape[3] // 2)

    def encoder_forward(self, img: Tensor, stream: str) -> list[Tensor]:
        """Unfused per-stage features of one stream (strides 2, 4, 8, 16)."""
        h, w = img.shape[2:]
        if h % 16 or w % 16:
            raise ValueError(f"input {h}x{w} not divisible by 16")
        feats = []
        for s in range(4):
            img = self.encoder_stage(img, stream, s)
            feats.append(img)
        return feats

    def forward(self, rgb: Tensor, thermal: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Final logits and the upsampled per-stage preliminary logits (empty without DS)."""
        h, w = rgb.shape[2:]
        if h % 16 or w % 16:
            raise ValueError(f"input {h}x{w} not divisible by 16")
        opts = self.config.sgf_options
        x_rgb, x_t = rgb, thermal
        skips, prelims = [], []
        for s in range(4):
            pair = FeaturePair(self.encoder_stage(x_rgb, "rgb", s), self.encoder_stage(x_t, "thermal", s))
            fused, prelim = sgf_forward(pair, self.sgf[s], self.basis_sets[s], opts)
            skips.append(fused.rgb)
            if prelim is not None:
                prelims.append(upsample_bilinear(prelim, h, w))
            x_rgb, x_t = fused.rgb, fused.thermal
        d = skips[3]
        for s in (2, 1, 0):
            dw, pw = self.decoder[s]
            up = upsample_bilinear(d, d.shape[2] * 2, d.shape[3] * 2)
            d = relu(pw(dw(up)) + skips[s])
        final = upsample_bilinear(self.head(d), h, w)
        return final, prelims

    def predict(self, rgb: np.ndarray, thermal: np.ndarray) -> np.ndarray:
        """Label maps ``[N, H, W]`` for a batch of arrays."""
        with no_grad():
            final, _ = self.forward(*self.prepare_inputs(rgb, thermal))
        return final.data.argmax(axis=1)


# ---------------------------------------------------------------------------
# losses


def one_hot(labels: np.ndarray, k: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels out of range [0, {k})")
    return (labels[:, None] == np.arange(k)[None, :, None, None]).astype(dtype)


def dice_loss(logits: Tensor, labels: np.ndarray, eps: float = 1e-5) -> Tensor:
    """Soft Dice ``1 - (2 sum p y + eps) / (sum p^2 + sum y^2 + eps)`` averaged over present classes."""
    k = logits.shape[1]
    y = one_hot(labels, k, logits.dtype)
    p = softmax(logits, axis=1)
    inter = tsum(mul(p, Tensor(y, dtype=logits.dtype)), axis=(0, 2, 3))
    p_sq = tsum(mul(p, p), axis=(0, 2, 3))
    y_sq = y.sum(axis=(0, 2, 3))
    dice = div(scalar_mul(inter, 2.0) + eps, p_sq + Tensor(y_sq + eps, dtype=logits.dtype))
    present = (y_sq > 0).astype(logits.dtype)
    mean_dice = scalar_mul(tsum(mul(dice, Tensor(present, dtype=logits.dtype))), 1.0 / present.sum())
    return 1.0 - mean_dice


def soft_ce_loss(logits: Tensor, labels: np.ndarray, smoothing: float = 0.1) -> Tensor:
    """Cross-entropy against ``(1 - s) one_hot + s / K``, averaged over pixels."""
    n, k, h, w = logits.shape
    target = (1.0 - smoothing) * one_hot(labels, k, logits.dtype) + smoothing / k
    logp = log_softmax(logits, axis=1)
    return scalar_mul(tsum(mul(logp, Tensor(target, dtype=logits.dtype))), -1.0 / (n * h * w))


def segmentation_loss(logits: Tensor, labels: np.ndarray, smoothing: float = 0.1, eps: float = 1e-5) -> Tensor:
    return dice_loss(logits, labels, eps) + soft_ce_loss(logits, labels, smoothing)


def total_loss(final: Tensor, prelims: Sequence[Tensor], labels: np.ndarray,
               smoothing: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Final-map loss plus one term per preliminary map."""
    loss = segmentation_loss(final, labels, smoothing, eps)
    for p in prelims:
        loss = loss + segmentation_loss(p, labels, smoothing, eps)
    return loss


# ---------------------------------------------------------------------------
# training


def stack_batch(samples: Sequence[SegSample]):
    return (np.stack([s.rgb for s in samples]), np.stack([s.thermal for s in samples]),
            np.stack([s.labels for s in samples]))


def evaluate(model: SGFNet, samples: Sequence[SegSample], batch_size: int = 8) -> ConfusionMatrix:
    cm = ConfusionMatrix(model.config.num_classes)
    for i in range(0, len(samples), batch_size):
        rgb, th, labels = stack_batch(samples[i:i + batch_size])
        cm.accumulate(model.predict(rgb, th), labels)
    return cm


@dataclass
class TrainResult:
    model: SGFNet
    step_losses: list[float] = field(default_factory=list)
    log_lines: list[str] = field(default_factory=list)
    epoch: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def format_log_line(epoch: int, loss: float, m: dict) -> str:
    return f"epoch={epoch} loss={loss:.6f} miou={m['miou']:.6f} macc={m['macc']:.6f}"


def clip_scale(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Factor bringing the global L2 norm of ``grads`` down to ``max_norm`` (1 when within, or disabled)."""
    if max_norm <= 0:
        return 1.0
    norm = math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads))
    return max_norm / norm if norm > max_norm else 1.0


def train(config: NetworkConfig, dataset: Sequence[SegSample], eval_set: Sequence[SegSample] | None = None,
          out_dir=None, resume=None, on_log: Callable[[str], None] | None = None,
          max_steps: int | None = None) -> TrainResult:
    """SGD with momentum, learning rate decayed once per epoch, global-norm gradient clipping.

    Batch order in epoch ``e`` is a permutation drawn from ``(seed, e)``, so a
    run resumed from an epoch checkpoint replays the uninterrupted run exactly.
    Per-epoch metrics come from ``eval_set`` when given, else from the
    training predictions of that epoch.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    if resume is not None:
        model, velocity, start_epoch = load_checkpoint(resume)
        model.config = config
    else:
        model, velocity, start_epoch = SGFNet(config), {}, 0
    params = model.parameters()
    for name, p in params.items():
        velocity.setdefault(name, np.zeros_like(p.data))
    result = TrainResult(model, epoch=start_epoch, velocity=velocity)
    steps = 0
    for epoch in range(start_epoch, config.epochs):
        lr = config.learning_rate * config.lr_decay ** epoch
        order = np.random.default_rng([config.seed, epoch]).permutation(len(dataset))
        running = ConfusionMatrix(config.num_classes)
        epoch_losses = []
        for b in range(0, len(order), config.batch_size):
            rgb, th, labels = stack_batch([dataset[i] for i in order[b:b + config.batch_size]])
            final, prelims = model.forward(*model.prepare_inputs(rgb, th))
            loss = total_loss(final, prelims, labels, config.smoothing, config.dice_eps)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(f"non-finite loss {value} at epoch {epoch + 1}, step {len(result.step_losses)}")
            backward(loss)
            scale = clip_scale([p.grad for p in params.values() if p.grad is not None], config.grad_clip)
            for name, p in params.items():
                if p.grad is None:
                    continue
                v = velocity[name]
                v *= config.momentum
                v += p.grad if scale == 1.0 else scale * p.grad
                p.data -= lr * v
                p.grad = None
            running.accumulate(final.data.argmax(axis=1), labels)
            epoch_losses.append(value)
            result.step_losses.append(value)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        result.epoch = epoch + 1
        stats = evaluate(model, eval_set).metrics() if eval_set else running.metrics()
        line = format_log_line(epoch + 1, float(np.mean(epoch_losses)), stats)
        result.log_lines.append(line)
        if on_log is not None:
            on_log(line)
        logger.info(line)
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / "checkpoint", model, velocity, epoch + 1)
        if max_steps is not None and steps >= max_steps:
            break
    return result


# ---------------------------------------------------------------------------
# checkpoints


def _format(value) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{a}:{b}" for a, b in value)
        return ",".join(str(v) for v in value)
    return str(value)


def config_items(config: NetworkConfig) -> dict[str, str]:
    return {f.name: _format(getattr(config, f.name)) for f in dataclasses.fields(config)
            if getattr(config, f.name) is not None}


def save_checkpoint(directory, model: SGFNet, velocity: dict[str, np.ndarray] | None = None, epoch: int = 0) -> None:
    tensors = {name: p.data for name, p in model.parameters().items()}
    for name, v in (velocity or {}).items():
        tensors[f"opt.{name}"] = v
    meta = {"epoch": epoch}
    meta.update({f"config.{k}": v for k, v in config_items(model.config).items()})
    serialize.save_bundle(directory, tensors, meta)


def load_checkpoint(directory) -> tuple[SGFNet, dict[str, np.ndarray], int]:
    from .config import network_config_from_items

    tensors, meta = serialize.load_bundle(directory)
    config = network_config_from_items({k[len("config."):]: v for k, v in meta.items() if k.startswith("config.")})
    model = SGFNet(config)
    params = model.parameters()
    missing = set(params) - set(tensors)
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, p in params.items():
        if tensors[name].shape != p.shape:
            raise ValueError(f"parameter {name}: checkpoint shape {tensors[name].shape} != {p.shape}")
        p.data = tensors[name].astype(p.dtype)
    velocity = {k[4:]: v.astype(params[k[4:]].dtype) for k, v in tensors.items() if k.startswith("opt.")}
    return model, velocity, int(meta.get("epoch", 0))
