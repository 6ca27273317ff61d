"""Segmentation losses: cross-entropy, soft Dice, their average, and the
uncertainty-weighted teacher-student consistency loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndcore as nd
from .errors import ConfigError, DimensionError
from .ndcore import Tensor


@dataclass
class LossValue:
    """A differentiable scalar loss plus its reported components."""

    tensor: Tensor
    ce: float = float("nan")
    dice: float = float("nan")
    weight_mean: float = 1.0

    @property
    def value(self) -> float:
        return self.tensor.item()

    def backward(self) -> None:
        self.tensor.backward()


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """[B, H, W] integer labels -> [B, C, H, W] one-hot."""
    labels = np.asarray(labels).astype(np.int64)
    return np.moveaxis(np.eye(num_classes, dtype=dtype)[labels], -1, 1)


def _check_one_hot(t: np.ndarray) -> None:
    if not (np.all((t == 0) | (t == 1)) and np.allclose(t.sum(axis=1), 1.0)):
        raise ConfigError("target is not one-hot per pixel")


def _weights(pixel_weights, shape) -> np.ndarray | None:
    if pixel_weights is None:
        return None
    w = np.asarray(pixel_weights, dtype=np.float64)
    B, _, H, W = shape
    if w.shape == (H, W):
        w = np.broadcast_to(w, (B, H, W))
    if w.shape != (B, H, W):
        raise DimensionError(f"pixel weights {w.shape} do not match logits {shape}")
    if np.any(w < 0):
        raise ConfigError("pixel weights must be nonnegative")
    return w


def _target(target, logits: Tensor) -> np.ndarray:
    t = np.asarray(getattr(target, "data", target), dtype=logits.dtype)
    if t.shape != logits.shape:
        raise DimensionError(f"target {t.shape} does not match logits {logits.shape}")
    return t


def _ce_tensor(logits: Tensor, target: np.ndarray, w: np.ndarray | None) -> Tensor:
    logp = nd.log_softmax_channel(logits)
    per_pixel = -(logp * Tensor(target)).sum(axis=1)
    if w is not None:
        per_pixel = per_pixel * Tensor(w.astype(logits.dtype))
    return per_pixel.mean()


def _dice_tensor(probs: Tensor, target: np.ndarray, smooth: float) -> Tensor:
    t = Tensor(target)
    inter = (probs * t).sum(axis=(2, 3))
    denom = probs.sum(axis=(2, 3)) + Tensor(target.sum(axis=(2, 3)).astype(target.dtype)) + smooth
    return 1.0 - ((inter * 2.0 + smooth) / denom).mean()


def cross_entropy(logits: Tensor, target_onehot, pixel_weights=None, soft: bool = False) -> LossValue:
    """Pixel-mean of -sum_c t_c log softmax(z)_c, each pixel scaled by its weight.

    ``soft=True`` accepts any per-pixel distribution as target.
    """
    t = _target(target_onehot, logits)
    if not soft:
        _check_one_hot(t)
    w = _weights(pixel_weights, logits.shape)
    loss = _ce_tensor(logits, t, w)
    return LossValue(loss, ce=loss.item(), weight_mean=1.0 if w is None else float(w.mean()))


def soft_dice(probs: Tensor, target_onehot, smooth: float = 1.0) -> LossValue:
    """1 - mean over (batch, class) of (2 sum p t + s) / (sum p + sum t + s)."""
    if smooth <= 0:
        raise ConfigError("smooth must be > 0")
    t = np.asarray(getattr(target_onehot, "data", target_onehot), dtype=probs.dtype)
    if t.shape != probs.shape:
        raise DimensionError(f"target {t.shape} does not match probs {probs.shape}")
    loss = _dice_tensor(probs, t, smooth)
    return LossValue(loss, dice=loss.item())


def ce_dice(logits: Tensor, target_onehot, pixel_weights=None, smooth: float = 1.0, soft: bool = False) -> LossValue:
    """Average of cross-entropy and soft Dice.

    Dice is a global overlap, so per-pixel weights enter it only through
    their mean.
    """
    t = _target(target_onehot, logits)
    if not soft:
        _check_one_hot(t)
    w = _weights(pixel_weights, logits.shape)
    ce = _ce_tensor(logits, t, w)
    dice = _dice_tensor(nd.softmax_channel(logits), t, smooth)
    wmean = 1.0 if w is None else float(w.mean())
    if w is not None:
        dice = dice * wmean
    total = (ce + dice) * 0.5
    return LossValue(total, ce=ce.item(), dice=dice.item(), weight_mean=wmean)


def pseudo_label(teacher_logits, num_classes: int | None = None) -> np.ndarray:
    """One-hot argmax of teacher logits; ties resolve to the lowest class."""
    z = np.asarray(getattr(teacher_logits, "data", teacher_logits))
    c = z.shape[1] if num_classes is None else num_classes
    return one_hot(np.argmax(z, axis=1), c, dtype=z.dtype)


def unsup_pair_loss(student_logits: Tensor, teacher_logits, weight_map, pseudo_mode: str = "hard", smooth: float = 1.0) -> LossValue:
    """Weighted consistency between a student and (detached) teacher predictions."""
    z_t = np.asarray(getattr(teacher_logits, "data", teacher_logits), dtype=student_logits.dtype)
    if z_t.shape != student_logits.shape:
        raise DimensionError(f"teacher logits {z_t.shape} != student logits {student_logits.shape}")
    if pseudo_mode == "hard":
        return ce_dice(student_logits, pseudo_label(z_t), weight_map, smooth)
    if pseudo_mode == "soft":
        return ce_dice(student_logits, nd.softmax_array(z_t, axis=1), weight_map, smooth, soft=True)
    raise ConfigError(f"unknown pseudo mode {pseudo_mode!r}")
