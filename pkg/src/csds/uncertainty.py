"""Entropy uncertainty of teacher predictions and its color/structure modulation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import imaging
from .errors import ConfigError, DimensionError, NumericError
from .ndcore import softmax_array

STAGES = ("base", "color_modulated", "structure_modulated")


@dataclass(frozen=True)
class UncertaintyMap:
    values: np.ndarray
    stage: str = "base"

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class UncertaintySettings:
    tau_color: float = 0.5
    tau_structure: float = 0.5
    lambda_color: float = 0.5
    lambda_structure: float = 0.5
    smoothing: str = "gaussian3x3"
    eps: float = 1e-8


def entropy_map(probs, eps: float = 1e-8) -> UncertaintyMap:
    """Natural-log Shannon entropy per pixel of a [C, H, W] probability map."""
    p = imaging.as_array(probs)
    if p.ndim != 3:
        raise DimensionError(f"expected [C, H, W] probabilities, got {p.shape}")
    if np.any(p < 0):
        raise NumericError("negative probability")
    h = -(p * np.log(p + eps)).sum(axis=0)
    # eps makes the p = 1 term slightly negative; true entropy is >= 0
    return UncertaintyMap(np.maximum(h, 0.0), "base")


def modulate(u: UncertaintyMap, mask: np.ndarray, lam: float) -> UncertaintyMap:
    """Scale ``u`` by ``1 + lam`` where ``mask`` is set; advances the stage tag."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"modulation strength must lie in [0, 1], got {lam}")
    mask = np.asarray(mask)
    if mask.shape != u.shape:
        raise DimensionError(f"mask shape {mask.shape} != map shape {u.shape}")
    idx = STAGES.index(u.stage)
    if idx == len(STAGES) - 1:
        raise ConfigError("map is already fully modulated")
    return UncertaintyMap(u.values * (1.0 + lam * mask.astype(np.float64)), STAGES[idx + 1])


def csds_uncertainty(teacher_logits, image, settings: UncertaintySettings = UncertaintySettings()):
    """Color- and structure-modulated uncertainty for one sample.

    ``teacher_logits`` is [C, H, W]; ``image`` is the [3, H, W] view the
    teacher was given. Returns ``(color_map, structure_map)``, where the
    structure map is built on top of the color map.
    """
    z = imaging.as_array(teacher_logits)
    if z.ndim != 3 or z.shape[0] < 2:
        raise DimensionError(f"expected [C>=2, H, W] logits, got {z.shape}")
    if z.shape[1:] != imaging.as_array(image).shape[1:]:
        raise DimensionError("logits and image differ in spatial size")
    base = entropy_map(softmax_array(z, axis=0), settings.eps)
    m_color = imaging.color_mask(image, settings.tau_color, settings.smoothing, settings.eps)
    color_map = modulate(base, m_color, settings.lambda_color)
    m_struct = imaging.structure_mask(image, settings.tau_structure, settings.eps)
    structure_map = modulate(color_map, m_struct, settings.lambda_structure)
    return color_map, structure_map


def to_loss_weight(u, mode: str = "direct") -> np.ndarray:
    """Turn an uncertainty map into per-pixel loss weights.

    ``direct`` rescales the map to unit mean (all-ones if the map is all
    zero); ``inverse_exp`` returns ``exp(-u)``.
    """
    values = u.values if isinstance(u, UncertaintyMap) else np.asarray(u, dtype=np.float64)
    if mode == "direct":
        m = values.mean()
        if m <= 0:
            return np.ones_like(values)
        return values / m
    if mode == "inverse_exp":
        return np.exp(-values)
    raise ConfigError(f"unknown weight mode {mode!r}")
