"""Per-pixel image statistics feeding the uncertainty modulation.

All functions take a ``[3, H, W]`` image (a :class:`~csds.ndcore.Tensor` or a
numpy array) and return plain numpy maps. Nothing here is differentiated.
Border handling is replicate padding throughout.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError

GAUSSIAN_SIGMA = 1.0


def as_array(x) -> np.ndarray:
    data = getattr(x, "data", x)
    return np.asarray(data, dtype=np.float64)


def _rgb(image) -> np.ndarray:
    arr = as_array(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DimensionError(f"expected a [3, H, W] image, got shape {arr.shape}")
    return arr


def channel_variance_map(image) -> np.ndarray:
    """Population variance across the R, G, B values of each pixel.

    Uses the pairwise form ((R-G)^2 + (G-B)^2 + (B-R)^2) / 9, which is exactly
    zero on gray pixels and symmetric in the channels.
    """
    r, g, b = _rgb(image)
    return ((r - g) ** 2 + (g - b) ** 2 + (b - r) ** 2) / 9.0


def _kernel(mode: str) -> np.ndarray:
    if mode == "avgpool3x3":
        return np.full((3, 3), 1.0 / 9.0)
    if mode == "gaussian3x3":
        g = np.exp(-0.5 * np.arange(-1, 2) ** 2 / GAUSSIAN_SIGMA**2)
        k = np.outer(g, g)
        return k / k.sum()
    raise ConfigError(f"unknown smoothing mode {mode!r}")


def smooth(values: np.ndarray, mode: str = "gaussian3x3") -> np.ndarray:
    """3x3 smoothing with replicate borders; the kernel sums to one."""
    m = np.asarray(values, dtype=np.float64)
    k = _kernel(mode)
    H, W = m.shape
    padded = np.pad(m, 1, mode="edge")
    out = np.zeros_like(m)
    for i in range(3):
        for j in range(3):
            out += k[i, j] * padded[i:i + H, j:j + W]
    return out


def normalize_max(values: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    m = np.asarray(values, dtype=np.float64)
    if m.size == 0:
        return m.copy()
    return m / (m.max() + eps)


def threshold_mask(values: np.ndarray, tau: float) -> np.ndarray:
    """Boolean mask of pixels strictly above ``tau``."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"threshold must lie in [0, 1], got {tau}")
    return np.asarray(values) > tau


def edge_strength(image) -> np.ndarray:
    """Unnormalized edge map: forward differences summed over channels, divided by 3.

    The last column (row) repeats itself under replicate padding, so its
    horizontal (vertical) difference is zero.
    """
    arr = _rgb(image)
    gh = np.zeros_like(arr)
    gv = np.zeros_like(arr)
    gh[:, :, :-1] = np.abs(arr[:, :, 1:] - arr[:, :, :-1])
    gv[:, :-1, :] = np.abs(arr[:, 1:, :] - arr[:, :-1, :])
    return (gh.sum(axis=0) + gv.sum(axis=0)) / 3.0


def edge_magnitude_map(image, eps: float = 1e-8) -> np.ndarray:
    return normalize_max(edge_strength(image), eps)


def color_mask(image, tau: float, smoothing: str = "gaussian3x3", eps: float = 1e-8) -> np.ndarray:
    """Pixels whose smoothed, max-normalized chromatic variance exceeds ``tau``."""
    v = smooth(channel_variance_map(image), smoothing)
    return threshold_mask(normalize_max(v, eps), tau)


def structure_mask(image, tau: float, eps: float = 1e-8) -> np.ndarray:
    return threshold_mask(edge_magnitude_map(image, eps), tau)


def map_to_uint8(values: np.ndarray, top: float | None = None) -> np.ndarray:
    """Scale a nonnegative map to 0..255 by ``top`` (default: its own maximum; all-zero stays zero)."""
    m = np.asarray(values, dtype=np.float64)
    if top is None:
        top = m.max() if m.size else 0.0
    if top <= 0:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.clip(np.round(m / top * 255.0), 0, 255).astype(np.uint8)
