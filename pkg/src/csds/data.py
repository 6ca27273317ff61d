"""Synthetic gland images, PNG ingestion, and the train/test/fold split protocol."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, GenerationError
from .ndcore import Rng

log = logging.getLogger(__name__)

NUM_FOLDS = 5
TEST_FRACTION = 0.2
MASK_THRESHOLD = 127


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    mask: np.ndarray  # [1, H, W] uint8 in {0, 1}
    id: str
    labeled: bool = True


@dataclass(frozen=True)
class SynthConfig:
    size: int = 64
    gland_count: tuple[int, int] = (2, 5)
    radius: tuple[float, float] = (0.10, 0.22)  # fraction of canvas side
    lumen_ratio: float = 0.55
    hematoxylin: tuple[float, float, float] = (0.42, 0.22, 0.58)
    eosin: tuple[float, float, float] = (0.90, 0.55, 0.72)
    lumen: tuple[float, float, float] = (0.96, 0.90, 0.94)
    stain_shift: float = 0.18
    noise: float = 0.04
    nuclei_density: float = 0.004
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.gland_count
        if lo > hi or lo < 0:
            raise ConfigError(f"invalid gland_count range {self.gland_count}", key="gland_count")
        if not 0 < self.radius[0] <= self.radius[1]:
            raise ConfigError(f"invalid radius range {self.radius}", key="radius")
        if not 0 <= self.lumen_ratio < 1:
            raise ConfigError("lumen_ratio must lie in [0, 1)", key="lumen_ratio")
        if self.size < 8:
            raise ConfigError("size must be >= 8", key="size")


MIN_AREA, MAX_AREA = 0.05, 0.7


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = math.cos(theta), math.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / rx) ** 2 + (v / ry) ** 2


def _render(cfg: SynthConfig, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    S = cfg.size
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    n = int(rng.integers(cfg.gland_count[0], cfg.gland_count[1] + 1))
    mask = np.zeros((S, S), dtype=bool)
    ring = np.zeros((S, S), dtype=bool)
    lumen = np.zeros((S, S), dtype=bool)
    for _ in range(n):
        r = rng.uniform(*cfg.radius) * S
        aspect = rng.uniform(0.6, 1.0)
        cy, cx = rng.uniform(0, S, size=2)
        d = _ellipse(yy, xx, cy, cx, r * aspect, r, rng.uniform(0, math.pi))
        inside = d <= 1.0
        inner = d <= cfg.lumen_ratio**2
        mask |= inside
        ring |= inside & ~inner
        lumen |= inner
    lumen &= mask
    ring &= ~lumen

    # per-image stain variation: independent shift of each stain color plus global gain
    shift_h = rng.uniform(-cfg.stain_shift, cfg.stain_shift, size=3)
    shift_e = rng.uniform(-cfg.stain_shift, cfg.stain_shift, size=3)
    gain = rng.uniform(0.85, 1.1)
    hema = np.clip(np.array(cfg.hematoxylin) + shift_h, 0, 1)
    eos = np.clip(np.array(cfg.eosin) + shift_e, 0, 1)
    pale = np.clip(np.array(cfg.lumen) + 0.3 * shift_e, 0, 1)

    texture = gaussian_filter(rng.normal(0, 1, size=(S, S)), 1.5)
    texture /= np.abs(texture).max() + 1e-8
    img = np.empty((3, S, S))
    for c in range(3):
        img[c] = eos[c] + 0.06 * texture
        img[c][ring] = hema[c]
        img[c][lumen] = pale[c]

    # scattered stromal nuclei share the epithelium stain
    nuclei = rng.random((S, S)) < cfg.nuclei_density
    nuclei = gaussian_filter(nuclei.astype(float), 0.8) > 0.05
    nuclei &= ~mask
    for c in range(3):
        img[c][nuclei] = hema[c]

    img = gaussian_filter(img, (0, 0.7, 0.7))
    img = img * gain + rng.normal(0, cfg.noise, size=img.shape)
    return np.clip(img, 0, 1).astype(np.float32), mask


def generate_sample(cfg: SynthConfig, index: int) -> Sample:
    """Render sample ``index``; identical (seed, index) gives an identical sample."""
    cfg.validate()
    rng = Rng(cfg.seed).split(index)
    for _ in range(100):
        img, mask = _render(cfg, rng)
        frac = mask.mean()
        if MIN_AREA <= frac <= MAX_AREA:
            return Sample(img, mask[None].astype(np.uint8), f"synth_{index:05d}")
    raise GenerationError(f"could not reach mask area in [{MIN_AREA}, {MAX_AREA}] for index {index}")


def generate_corpus(cfg: SynthConfig, n: int) -> list[Sample]:
    return [generate_sample(cfg, i) for i in range(n)]


# -- splits -------------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class DatasetSplits:
    test: list[str]
    folds: list[list[str]]
    labeled_ratio: float
    seed: int
    train_order: list[str] = field(default_factory=list)

    def fold(self, k: int) -> tuple[list[str], list[str], list[str]]:
        """(labeled, unlabeled, validation) ids when fold ``k`` is held out."""
        if not 0 <= k < len(self.folds):
            raise ConfigError(f"fold index {k} out of range", key="fold")
        val = set(self.folds[k])
        train = [i for i in self.train_order if i not in val]
        n_lab = max(1, _round_half_up(self.labeled_ratio * len(train)))
        return train[:n_lab], train[n_lab:], list(self.folds[k])

    def to_json(self) -> dict:
        out = asdict(self)
        out["fold_views"] = [
            dict(zip(("labeled", "unlabeled", "validation"), self.fold(k))) for k in range(len(self.folds))
        ]
        return out


def make_splits(ids: list[str], seed: int, labeled_ratio: float) -> DatasetSplits:
    """Fixed 20% test set, five round-robin folds over the rest, labeled prefix per fold."""
    if len(ids) < 10:
        raise ConfigError(f"need at least 10 ids, got {len(ids)}")
    if not 0 < labeled_ratio <= 1:
        raise ConfigError("labeled_ratio must lie in (0, 1]", key="labeled_ratio")
    if len(set(ids)) != len(ids):
        raise ConfigError("ids must be unique")
    order = [ids[i] for i in Rng(seed).permutation(len(ids))]
    n_test = math.ceil(TEST_FRACTION * len(ids))
    test, rest = order[:n_test], order[n_test:]
    folds = [rest[k::NUM_FOLDS] for k in range(NUM_FOLDS)]
    return DatasetSplits(test, folds, labeled_ratio, seed, train_order=rest)


def write_manifest(splits: DatasetSplits, path) -> None:
    Path(path).write_text(json.dumps(splits.to_json(), indent=2))


# -- PNG I/O ------------------------------------------------------------------

def save_sample(sample: Sample, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rgb = np.clip(np.round(sample.image.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(rgb, "RGB").save(root / "images" / f"{sample.id}.png")
    Image.fromarray((sample.mask[0] * 255).astype(np.uint8), "L").save(root / "masks" / f"{sample.id}.png")


def _read_png(path: Path, mode: str, resize_to: int | None, resample) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert(mode)
            if resize_to is not None and im.size != (resize_to, resize_to):
                im = im.resize((resize_to, resize_to), resample)
            return np.asarray(im)
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc


def load_dir(path, resize_to: int | None = 256, skipped: list | None = None) -> list[Sample]:
    """Load ``images/*.png`` with masks from ``masks/<stem>.png``.

    Images missing a mask are skipped and their stems appended to ``skipped``.
    """
    root = Path(path)
    images = sorted((root / "images").glob("*.png"))
    if not images:
        log.warning("no images found under %s", root / "images")
        return []
    out = []
    for img_path in images:
        mask_path = root / "masks" / img_path.name
        if not mask_path.exists():
            log.warning("skipping %s: no mask", img_path.name)
            if skipped is not None:
                skipped.append(img_path.stem)
            continue
        rgb = _read_png(img_path, "RGB", resize_to, Image.BILINEAR)
        m = _read_png(mask_path, "L", resize_to, Image.NEAREST)
        image = (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()
        mask = (m > MASK_THRESHOLD).astype(np.uint8)[None]
        out.append(Sample(image, mask, img_path.stem))
    return out
