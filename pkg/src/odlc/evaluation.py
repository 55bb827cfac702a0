"""Measurement protocols: rate-quality and rate-accuracy curves, the
alpha trade-off sweep, and the loss-layer ablation.

The quality parameter of this codec is the iteration count. Codecs are
either CodecParams or any callable (image, iters) -> (decoded image,
payload_bits), which keeps stubs trivial to inject in tests. Classifiers
are never retrained on decoded images anywhere in here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import imageops, losses, lossnet as lossnet_mod
from .codec import CodecParams, compress, decompress

CURVE_HEADER = ("level", "bpp", "metric", "n")
SWEEP_HEADER = ("alpha", "iters", "bpp", "msssim", "preservation", "accuracy")
ABLATION_HEADER = ("layers", "iters", "preservation")

# S_inf -> S_comp presets: the full-size protocol pairs plus the desk pair
CROP_PAIRS = {224: 256, 299: 336, 56: 64}


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    s_comp: int = 64
    s_inf: int = 56
    grid: tuple = (1, 2, 3, 4)
    metric: str = "msssim"

    def __post_init__(self):
        if self.s_comp < self.s_inf:
            raise EvalError(f"s_comp {self.s_comp} must be >= s_inf {self.s_inf}")
        if not self.grid:
            raise EvalError("quality grid must be non-empty")
        if self.metric not in ("msssim", "preservation", "accuracy"):
            raise EvalError(f"unknown metric {self.metric!r}")

    @staticmethod
    def for_inference_size(s_inf: int, **kw) -> "EvalConfig":
        if s_inf not in CROP_PAIRS:
            raise EvalError(f"no preset crop pair for s_inf={s_inf}; known: {sorted(CROP_PAIRS)}")
        return EvalConfig(s_comp=CROP_PAIRS[s_inf], s_inf=s_inf, **kw)


@dataclass(frozen=True)
class CurvePoint:
    level: int
    bpp: float
    value: float
    n: int

    def __post_init__(self):
        if self.bpp <= 0:
            raise EvalError(f"curve point bpp must be positive, got {self.bpp}")


def roundtrip(codec, img: np.ndarray, iters: int):
    """(decoded, payload_bits) through a real codec or a stub callable."""
    if isinstance(codec, CodecParams):
        bs = compress(img, iters, codec)
        return decompress(bs, codec), bs.payload_bits
    out = codec(img, iters)
    if not (isinstance(out, tuple) and len(out) == 2):
        raise EvalError("codec stubs must return (decoded image, payload_bits)")
    return out


def preservation_rate(codec, classifier, images, iters: int) -> float:
    """Fraction of images whose predicted label survives the round trip."""
    if len(images) == 0:
        raise EvalError("preservation_rate: empty image set")
    s_inf = classifier.layout.input_resolution
    kept = 0
    for img in images:
        before, _ = lossnet_mod.classify(imageops.center_crop(img, s_inf), classifier)
        decoded, _bits = roundtrip(codec, img, iters)
        after, _ = lossnet_mod.classify(imageops.center_crop(decoded, s_inf), classifier)
        kept += int(before == after)
    return kept / len(images)


def _comp_crop(img: np.ndarray, s_comp: int) -> np.ndarray:
    return imageops.center_crop(imageops.resize_smallest_side(img, s_comp), s_comp)


def eval_accuracy_curve(codec, classifier, val_set, cfg: EvalConfig):
    """Per quality level: resize to S_comp, center crop, round trip, center
    crop S_inf, classify. Returns {"accuracy": [CurvePoint], "preservation":
    [CurvePoint]} with bpp averaged over the set at each level."""
    n = len(val_set)
    if n == 0:
        raise EvalError("eval_accuracy_curve: empty validation set")
    if classifier.layout.input_resolution != cfg.s_inf:
        raise EvalError(f"classifier expects {classifier.layout.input_resolution}px inputs, "
                        f"config says s_inf={cfg.s_inf}")
    crops = [_comp_crop(val_set.image(i), cfg.s_comp) for i in range(n)]
    truths = [val_set.label(i) for i in range(n)]
    clean_labels = [lossnet_mod.classify(imageops.center_crop(c, cfg.s_inf), classifier)[0]
                    for c in crops]
    acc_points, pres_points = [], []
    for level in cfg.grid:
        bits_total = 0
        correct = kept = 0
        for crop, truth, clean in zip(crops, truths, clean_labels):
            decoded, bits = roundtrip(codec, crop, level)
            bits_total += bits
            label, _ = lossnet_mod.classify(imageops.center_crop(decoded, cfg.s_inf), classifier)
            correct += int(label == truth)
            kept += int(label == clean)
        bpp = bits_total / (n * cfg.s_comp * cfg.s_comp)
        acc_points.append(CurvePoint(level=level, bpp=bpp, value=correct / n, n=n))
        pres_points.append(CurvePoint(level=level, bpp=bpp, value=kept / n, n=n))
    return {"accuracy": acc_points, "preservation": pres_points}


def _quality_inputs(val_set, cfg: EvalConfig):
    """Constant-resolution sets are evaluated at their native size (no
    resize, no crop); mixed sets go through resize + center crop."""
    n = len(val_set)
    imgs = [val_set.image(i) for i in range(n)]
    shapes = {im.shape for im in imgs}
    if len(shapes) == 1:
        return imgs
    return [_comp_crop(im, cfg.s_comp) for im in imgs]


def eval_quality_curve(codec, val_set, cfg: EvalConfig):
    """(bpp, mean MS-SSIM) per quality level between decoded and original."""
    n = len(val_set)
    if n == 0:
        raise EvalError("eval_quality_curve: empty validation set")
    imgs = _quality_inputs(val_set, cfg)
    points = []
    for level in cfg.grid:
        bits_total = 0
        px_total = 0
        scores = []
        for img in imgs:
            decoded, bits = roundtrip(codec, img, level)
            bits_total += bits
            px_total += img.shape[1] * img.shape[2]
            m_cfg = losses.LossConfig().for_min_side(min(img.shape[1:]))
            scores.append(losses.ms_ssim(img, decoded, m_cfg).item())
        points.append(CurvePoint(level=level, bpp=bits_total / px_total,
                                 value=float(np.mean(scores)), n=n))
    return points


def tradeoff_sweep(checkpoints: dict, classifier, val_set, t_list, cfg: EvalConfig):
    """Cross product over alpha checkpoints and iteration counts.

    Returns (rows, skipped): rows are (alpha, iters, bpp, msssim,
    preservation, accuracy) tuples; alphas with a missing checkpoint are
    reported in skipped rather than failing the sweep.
    """
    present = {a: p for a, p in checkpoints.items() if p is not None}
    if len(present) < 2:
        raise EvalError("tradeoff_sweep needs at least 2 alpha checkpoints")
    skipped = sorted(a for a in checkpoints if checkpoints[a] is None)
    n = len(val_set)
    crops = [_comp_crop(val_set.image(i), cfg.s_comp) for i in range(n)]
    truths = [val_set.label(i) for i in range(n)]
    clean = [lossnet_mod.classify(imageops.center_crop(c, cfg.s_inf), classifier)[0]
             for c in crops]
    m_cfg = losses.LossConfig().for_min_side(cfg.s_comp)
    rows = []
    for alpha in sorted(present):
        codec = present[alpha]
        for level in t_list:
            bits_total = 0
            scores = []
            correct = kept = 0
            for crop, truth, base in zip(crops, truths, clean):
                decoded, bits = roundtrip(codec, crop, level)
                bits_total += bits
                scores.append(losses.ms_ssim(crop, decoded, m_cfg).item())
                label, _ = lossnet_mod.classify(imageops.center_crop(decoded, cfg.s_inf),
                                                classifier)
                correct += int(label == truth)
                kept += int(label == base)
            rows.append((alpha, level, bits_total / (n * cfg.s_comp * cfg.s_comp),
                         float(np.mean(scores)), kept / n, correct / n))
    return rows, skipped


def ablate_layers(layer_sets, train_set, val_set, f_lossnet, classifier,
                  loss_cfg_base, train_cfg, t_list, cfg: EvalConfig,
                  layout=None):
    """Train one alpha=1 codec per tap set (from scratch) and measure label
    preservation across iteration counts. Returns (rows, train_logs)."""
    from . import trainer
    from dataclasses import replace

    rows = []
    train_logs = {}
    n = len(val_set)
    crops = [_comp_crop(val_set.image(i), cfg.s_comp) for i in range(n)]
    for layer_ids in layer_sets:
        tag = "+".join(layer_ids)
        loss_cfg = replace(loss_cfg_base, alpha=1.0, layer_ids=tuple(layer_ids))
        params, log, _ = trainer.train_codec(train_set, val_set, loss_cfg, train_cfg,
                                             lossnet=f_lossnet, layout=layout)
        train_logs[tag] = log
        for level in t_list:
            rows.append((tag, level, preservation_rate(params, classifier, crops, level)))
    return rows, train_logs
