"""Color, structural and shared geometric augmentations.

Images are ``[C, H, W]`` float arrays in [0, 1]. Everything random takes an
explicit :class:`~csds.ndcore.Rng`, so a transform is reproducible from
(seed, sample index).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DimensionError
from .ndcore import Rng

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class ColorJitterParams:
    brightness_delta: float = 0.0
    contrast_factor: float = 1.0
    saturation_factor: float = 1.0
    hue_delta: float = 0.0


@dataclass(frozen=True)
class JitterRanges:
    brightness: tuple[float, float] = (-0.1, 0.1)
    contrast: tuple[float, float] = (0.8, 1.2)
    saturation: tuple[float, float] = (0.8, 1.2)
    hue: tuple[float, float] = (-0.05, 0.05)

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation", "hue"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"empty jitter range for {name}: {lo} > {hi}", key=name)


@dataclass(frozen=True)
class ElasticField:
    dx: np.ndarray
    dy: np.ndarray
    alpha: float
    sigma: float

    def __neg__(self) -> ElasticField:
        return ElasticField(-self.dx, -self.dy, self.alpha, self.sigma)


@dataclass(frozen=True)
class SharedGeom:
    hflip: bool = False
    vflip: bool = False
    rot90: int = 0


@dataclass(frozen=True)
class AugmentedPair:
    """An unlabeled image, one branch view of it, and the transform parameters."""

    image: np.ndarray
    view: np.ndarray
    kind: str
    params: object = field(default=None)


def _image(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


# -- color jitter ------------------------------------------------------------

def sample_color_jitter(rng: Rng, ranges: JitterRanges = JitterRanges()) -> ColorJitterParams:
    return ColorJitterParams(
        brightness_delta=float(rng.uniform(*ranges.brightness)),
        contrast_factor=float(rng.uniform(*ranges.contrast)),
        saturation_factor=float(rng.uniform(*ranges.saturation)),
        hue_delta=float(rng.uniform(*ranges.hue)),
    )


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb
    maxc = rgb.max(axis=0)
    minc = rgb.min(axis=0)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def color_jitter(image, params: ColorJitterParams) -> np.ndarray:
    """Brightness, contrast, saturation, hue, in that order; identity stages are skipped."""
    x = _image(image).copy()
    if x.ndim != 3 or x.shape[0] != 3:
        raise DimensionError(f"color_jitter needs a [3, H, W] image, got {x.shape}")
    if params.brightness_delta != 0.0:
        x = np.clip(x + params.brightness_delta, 0.0, 1.0)
    if params.contrast_factor != 1.0:
        m = x.mean()
        x = np.clip((x - m) * params.contrast_factor + m, 0.0, 1.0)
    if params.saturation_factor != 1.0:
        gray = np.tensordot(_LUMA, x, axes=1)[None]
        x = np.clip(gray + params.saturation_factor * (x - gray), 0.0, 1.0)
    if params.hue_delta != 0.0:
        hsv = rgb_to_hsv(x)
        hsv[0] = (hsv[0] + params.hue_delta) % 1.0
        x = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    return x


# -- histogram matching ------------------------------------------------------

def _quantize(channel: np.ndarray) -> np.ndarray:
    return np.clip(np.round(channel * 255.0), 0, 255).astype(np.int64)


def histogram_match(source, reference) -> np.ndarray:
    """Per-channel CDF matching of ``source`` onto ``reference`` at 256 levels.

    Each source level maps to the smallest reference level whose CDF reaches
    the source CDF at that level.
    """
    src = _image(source)
    ref = _image(reference)
    if src.ndim != 3 or ref.ndim != 3 or src.shape[0] != ref.shape[0]:
        raise DimensionError(f"incompatible images {src.shape} and {ref.shape}")
    out = np.empty_like(src)
    for c in range(src.shape[0]):
        qs = _quantize(src[c])
        qr = _quantize(ref[c])
        cdf_s = np.cumsum(np.bincount(qs.ravel(), minlength=256)) / qs.size
        cdf_r = np.cumsum(np.bincount(qr.ravel(), minlength=256)) / qr.size
        lut = np.searchsorted(cdf_r, cdf_s - 1e-12, side="left").clip(0, 255)
        out[c] = lut[qs] / 255.0
    return out


# -- elastic deformation -----------------------------------------------------

def sample_elastic(h: int, w: int, alpha: float, sigma: float, rng: Rng) -> ElasticField:
    """Smoothed uniform noise rescaled so the largest displacement equals ``alpha``."""
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}", key="alpha")
    if sigma <= 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}", key="sigma")
    fields = []
    for _ in range(2):
        noise = rng.uniform(-1.0, 1.0, size=(h, w))
        smooth = gaussian_filter(noise, sigma=sigma, mode="nearest", truncate=3.0)
        peak = np.abs(smooth).max()
        if alpha == 0 or peak == 0:
            fields.append(np.zeros((h, w)))
        else:
            fields.append(smooth * (alpha / peak))
    return ElasticField(fields[0], fields[1], float(alpha), float(sigma))


def warp(image, f: ElasticField, interp: str = "bilinear") -> np.ndarray:
    """Sample ``image`` at (x + dx, y + dy); out-of-range coordinates clamp to the border.

    Accepts ``[H, W]`` or ``[C, H, W]`` arrays.
    """
    x = _image(image)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3:
        raise DimensionError(f"warp needs [H, W] or [C, H, W], got {x.shape}")
    C, H, W = x.shape
    if f.dx.shape != (H, W) or f.dy.shape != (H, W):
        raise DimensionError(f"field shape {f.dx.shape} does not match image {H}x{W}")
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    sx = np.clip(xx + f.dx, 0, W - 1)
    sy = np.clip(yy + f.dy, 0, H - 1)
    if interp == "nearest":
        ix = np.floor(sx + 0.5).astype(int).clip(0, W - 1)
        iy = np.floor(sy + 0.5).astype(int).clip(0, H - 1)
        out = x[:, iy, ix]
    elif interp == "bilinear":
        x0 = np.floor(sx).astype(int)
        y0 = np.floor(sy).astype(int)
        x1 = np.minimum(x0 + 1, W - 1)
        y1 = np.minimum(y0 + 1, H - 1)
        fx = sx - x0
        fy = sy - y0
        top = x[:, y0, x0] * (1 - fx) + x[:, y0, x1] * fx
        bot = x[:, y1, x0] * (1 - fx) + x[:, y1, x1] * fx
        out = top * (1 - fy) + bot * fy
    else:
        raise ConfigError(f"unknown interpolation {interp!r}")
    return out[0] if squeeze else out


# -- shared flips / right-angle rotations ------------------------------------

def sample_shared_geom(rng: Rng) -> SharedGeom:
    return SharedGeom(hflip=rng.coin(), vflip=rng.coin(), rot90=int(rng.integers(0, 4)))


def _geom(x: np.ndarray, g: SharedGeom) -> np.ndarray:
    if g.hflip:
        x = x[..., :, ::-1]
    if g.vflip:
        x = x[..., ::-1, :]
    if g.rot90 % 4:
        x = np.rot90(x, k=g.rot90 % 4, axes=(-2, -1))
    return np.ascontiguousarray(x)


def shared_geom_apply(image, mask=None, g: SharedGeom = SharedGeom()):
    """Apply one flip/rotation to an image and, if given, its mask."""
    out = _geom(_image(image), g)
    return out, (None if mask is None else _geom(np.asarray(getattr(mask, "data", mask)), g))


def shared_geom_invert(image, g: SharedGeom) -> np.ndarray:
    x = np.asarray(getattr(image, "data", image))
    if g.rot90 % 4:
        x = np.rot90(x, k=-(g.rot90 % 4), axes=(-2, -1))
    if g.vflip:
        x = x[..., ::-1, :]
    if g.hflip:
        x = x[..., :, ::-1]
    return np.ascontiguousarray(x)


# -- branch views --------------------------------------------------------------

def color_view(image, reference, rng: Rng, ranges: JitterRanges = JitterRanges()) -> AugmentedPair:
    """Fair coin between color jitter and histogram matching to ``reference``."""
    img = _image(image)
    if reference is not None and rng.coin():
        return AugmentedPair(img, histogram_match(img, reference), "histogram_match", None)
    params = sample_color_jitter(rng, ranges)
    return AugmentedPair(img, color_jitter(img, params), "color_jitter", params)


def structure_view(image, rng: Rng, alpha: float, sigma: float) -> AugmentedPair:
    img = _image(image)
    f = sample_elastic(img.shape[-2], img.shape[-1], alpha, sigma, rng)
    return AugmentedPair(img, warp(img, f, "bilinear"), "elastic", f)
