"""Codec training: data pipeline, Adam, and the unrolled training loop.

The per-step loss averages the observer distortion over every unrolled
reconstruction, L = (1/T) * sum_t d(x, x_hat_t), with stochastic
binarization during training. There is no entropy term; TrainConfig
rejects beta != 0 outright.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import imageops, losses
from .autodiff import Parameter, Tensor
from .bitstream import ceil16
from .codec import CodecLayout, CodecParams, progressive_from_normalized

TRAIN_LOG_HEADER = ("step", "loss", "d_H", "d_C", "lr", "wall_time")
VAL_LOG_HEADER = ("step", "val_loss", "val_msssim")


class TrainError(ValueError):
    pass


class NonFiniteGradientError(TrainError):
    """An optimizer step was rejected because a gradient went non-finite."""


class TrainingDiverged(TrainError):
    """Loss went non-finite; the last good checkpoint was kept."""


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 4e-4
    batch_size: int = 4
    epochs: int = 3
    unroll_steps: int = 8
    beta: float = 0.0
    seed: int = 0
    resize_side: int = 256
    crop_size: int = 224
    grad_clip: float = 5.0
    val_interval: int = 200
    adam: AdamConfig = field(default_factory=AdamConfig)
    normalization: tuple | None = None  # ((mean r,g,b), (std r,g,b)); None = fit to data

    def __post_init__(self):
        if self.beta != 0.0:
            raise TrainError("the entropy term is out of scope: beta must be 0")
        if self.unroll_steps < 1:
            raise TrainError(f"unroll_steps must be >= 1, got {self.unroll_steps}")
        if self.crop_size > self.resize_side:
            raise TrainError(f"crop {self.crop_size} exceeds resize side {self.resize_side}")
        if self.batch_size < 1 or self.epochs < 1:
            raise TrainError("batch_size and epochs must be >= 1")

    @staticmethod
    def desk(**overrides) -> "TrainConfig":
        """64px-image defaults that keep the paper-scale optimizer constants."""
        base = dict(resize_side=64, crop_size=56, unroll_steps=4)
        base.update(overrides)
        return TrainConfig(**base)


DESK_LAYOUT = CodecLayout()


# ---------------------------------------------------------------------------
# data pipeline


def augment_geometry(x: np.ndarray, split: str, rng, cfg: TrainConfig) -> np.ndarray:
    """Resize + crop (+ flip on the train split), without normalization."""
    img = imageops.resize_smallest_side(np.asarray(x, dtype=np.float32), cfg.resize_side)
    _, h, w = img.shape
    if h < cfg.crop_size or w < cfg.crop_size:
        raise TrainError(f"image {h}x{w} smaller than crop {cfg.crop_size} after resize")
    if split == "train":
        if rng is None:
            raise TrainError("train-split augmentation needs a seeded generator")
        img = imageops.random_crop(img, cfg.crop_size, rng)
        if rng.random() < 0.5:
            img = imageops.hflip(img)
    elif split == "val":
        img = imageops.center_crop(img, cfg.crop_size)
    else:
        raise TrainError(f"unknown split {split!r}")
    return np.ascontiguousarray(img)


def preprocess(x: np.ndarray, split: str, rng, cfg: TrainConfig) -> np.ndarray:
    """Full pipeline: aspect-preserving resize, crop/flip, then per-channel
    (x - mean) / std with cfg.normalization."""
    if cfg.normalization is None:
        raise TrainError("preprocess needs cfg.normalization (fit or set it first)")
    mean, std = (np.asarray(v, dtype=np.float32) for v in cfg.normalization)
    return imageops.normalize(augment_geometry(x, split, rng, cfg), mean, std)


def fit_normalization(dataset, cfg: TrainConfig, sample: int = 256) -> tuple:
    """Per-channel stats from a deterministic prefix of the training set."""
    n = min(len(dataset), sample)
    imgs = (imageops.resize_smallest_side(dataset.image(i), cfg.resize_side) for i in range(n))
    mean, std = imageops.channel_stats(imgs)
    return mean, std


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Bias-corrected Adam over Parameter objects (reads .grad in place)."""

    def __init__(self, params: list, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        for p in self.params:
            if not np.isfinite(p.grad).all():
                raise NonFiniteGradientError(f"non-finite gradient in {p.name}; step rejected")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p.tensor.data -= update.astype(p.value.dtype, copy=False)


def clip_global_norm(params: list, max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        total += float(np.square(p.grad, dtype=np.float64).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for p in params:
            p.grad *= s
    return norm


# ---------------------------------------------------------------------------
# codec training


def step_loss(x01_padded: np.ndarray, iterations: int, params: CodecParams,
              loss_cfg: losses.LossConfig, lossnet=None, rng=None,
              mode: str = "stochastic"):
    """Forward the progressive loop and build the averaged per-step loss.

    Returns (loss tensor, info) where info carries the per-iteration
    distortion terms plus d_H / d_C component means (nan when a component
    is not part of the objective).
    """
    alpha = loss_cfg.alpha
    x01_t = Tensor(x01_padded.astype(params.dtype))
    xn = Tensor(imageops.normalize(x01_padded, params.norm_mean, params.norm_std)
                .astype(params.dtype))
    trace = progressive_from_normalized(xn, iterations, params, mode=mode, rng=rng)
    inv = params.norm_std.astype(np.float32)
    terms = []
    dh_vals, dc_vals = [], []
    for recon in trace.reconstructions:
        y01 = ad.channel_affine(recon, inv, params.norm_mean)  # denorm, unclamped
        if alpha == 0.0:
            d_h = losses.human_distortion(x01_t, y01, loss_cfg)
            term = ad.scale(d_h, loss_cfg.lambda_h)
            dh_vals.append(d_h.item())
        elif alpha == 1.0:
            term = losses.feature_distortion(x01_t, y01, lossnet, loss_cfg.layer_ids)
            dc_vals.append(term.item())
        else:
            d_h = losses.human_distortion(x01_t, y01, loss_cfg)
            d_c = losses.feature_distortion(x01_t, y01, lossnet, loss_cfg.layer_ids)
            term = ad.add(ad.scale(d_h, (1.0 - alpha) * loss_cfg.lambda_h),
                          ad.scale(d_c, alpha))
            dh_vals.append(d_h.item())
            dc_vals.append(d_c.item())
        terms.append(term)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    loss = ad.scale(total, 1.0 / iterations)
    info = {
        "terms": terms,
        "trace": trace,
        "d_h": float(np.mean(dh_vals)) if dh_vals else float("nan"),
        "d_c": float(np.mean(dc_vals)) if dc_vals else float("nan"),
    }
    return loss, info


def _val_probe(val_set, params, cfg, loss_cfg, limit: int = 16):
    """Mean MS-SSIM of deterministic reconstructions on a small val slice."""
    n = min(len(val_set), limit)
    if n == 0:
        return float("nan")
    scores = []
    for i in range(n):
        img = augment_geometry(val_set.image(i), "val", None, cfg)
        from .codec import reconstruct_progressive
        trace = reconstruct_progressive(img, cfg.unroll_steps, params, mode="deterministic")
        m_cfg = loss_cfg.for_min_side(min(img.shape[1:]))
        scores.append(losses.ms_ssim(img, trace.decoded(), m_cfg).item())
    return float(np.mean(scores))


def train_codec(train_set, val_set, loss_cfg: losses.LossConfig, cfg: TrainConfig,
                lossnet=None, layout: CodecLayout | None = None, out_dir=None,
                progress=None):
    """Train the codec under the interpolated objective.

    Returns (CodecParams, train log rows, val log rows). Emits checkpoints
    and CSV logs under out_dir when given. Raises TrainingDiverged (after
    writing the last good checkpoint) if the loss goes non-finite.
    """
    if loss_cfg.alpha > 0.0 and lossnet is None:
        raise TrainError("alpha > 0 needs a frozen loss network")
    if lossnet is not None:
        lossnet.freeze()
    layout = layout or DESK_LAYOUT
    if cfg.unroll_steps > layout.t_max:
        raise TrainError(f"unroll_steps {cfg.unroll_steps} exceeds layout t_max {layout.t_max}")

    norm = cfg.normalization or fit_normalization(train_set, cfg)
    mean, std = (np.asarray(v, dtype=np.float32) for v in norm)
    params = CodecParams(layout, seed=cfg.seed, norm_mean=mean, norm_std=std)
    # the loop distorts padded crops; size the MS-SSIM pyramid to them
    train_loss_cfg = loss_cfg.for_min_side(ceil16(cfg.crop_size)) if loss_cfg.alpha < 1.0 else loss_cfg

    opt = Adam(params.parameters(), lr=cfg.learning_rate,
               beta1=cfg.adam.beta1, beta2=cfg.adam.beta2, eps=cfg.adam.eps)
    order_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xB0)))
    n = len(train_set)
    if n < cfg.batch_size:
        raise TrainError(f"training set of {n} images smaller than one batch of {cfg.batch_size}")

    log, val_log = [], []
    step = 0
    t0 = time.time()
    last_good = None

    def emit_checkpoint(tag):
        nonlocal last_good
        if out_dir is None:
            return None
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, f"codec_{tag}.ckpt")
        params.save(path)
        last_good = path
        return path

    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(n)
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            idxs = [int(i) for i in perm[start : start + cfg.batch_size]]
            params.zero_grads()
            batch_loss, batch_dh, batch_dc = 0.0, [], []
            for i in idxs:
                aug_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2, epoch, i)))
                bin_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 3, epoch, i)))
                crop = augment_geometry(train_set.image(i), "train", aug_rng, cfg)
                x01p = imageops.pad_to_multiple(crop, 16)
                with ad.Tape() as tape:
                    loss, info = step_loss(x01p, cfg.unroll_steps, params,
                                           train_loss_cfg, lossnet=lossnet, rng=bin_rng)
                value = loss.item()
                if not math.isfinite(value):
                    where = f"; last good checkpoint: {last_good}" if last_good else ""
                    raise TrainingDiverged(f"loss became {value} at step {step + 1}{where}")
                ad.backward(loss, tape)
                batch_loss += value
                batch_dh.append(info["d_h"])
                batch_dc.append(info["d_c"])
            for p in params.parameters():
                p.grad /= cfg.batch_size
            clip_global_norm(params.parameters(), cfg.grad_clip)
            opt.step()
            step += 1
            log.append((step, batch_loss / cfg.batch_size,
                        float(np.mean(batch_dh)), float(np.mean(batch_dc)),
                        cfg.learning_rate, time.time() - t0))
            if progress is not None:
                progress(step, log[-1])
            if cfg.val_interval and step % cfg.val_interval == 0:
                val_log.append((step, batch_loss / cfg.batch_size,
                                _val_probe(val_set, params, cfg, loss_cfg)))
        emit_checkpoint(f"epoch{epoch + 1}")
    emit_checkpoint("final")
    if out_dir is not None:
        from .configio import write_csv
        write_csv(os.path.join(out_dir, "train_log.csv"), TRAIN_LOG_HEADER, log)
        write_csv(os.path.join(out_dir, "val_log.csv"), VAL_LOG_HEADER, val_log)
    return params, log, val_log
