"""Overlap metrics and fold aggregation."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DimensionError


def _pair(pred, gt):
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise DimensionError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def dice_score(pred, gt) -> float:
    """Dice in percent; two empty masks score 100."""
    p, g = _pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2 * int((p & g).sum()) / total


def jaccard_score(pred, gt) -> float:
    p, g = _pair(pred, gt)
    union = int((p | g).sum())
    if union == 0:
        return 100.0
    return 100.0 * int((p & g).sum()) / union


def mean_scores(preds: Iterable, gts: Iterable) -> tuple[float, float]:
    """Per-image Dice and Jaccard averaged over a set of images."""
    d, j = [], []
    for p, g in zip(preds, gts):
        d.append(dice_score(p, g))
        j.append(jaccard_score(p, g))
    return float(np.mean(d)), float(np.mean(j))


@dataclass(frozen=True)
class Aggregate:
    mean: float
    std: float
    n: int

    @property
    def single(self) -> bool:
        return self.n == 1

    def __str__(self) -> str:
        return f"{self.mean:.2f} ± {self.std:.2f}"


def aggregate(values: Iterable[float]) -> Aggregate:
    """Mean and sample standard deviation (n - 1); std is 0 for a single value."""
    v = sorted(float(x) for x in values)
    if not v:
        raise ValueError("nothing to aggregate")
    n = len(v)
    m = math.fsum(v) / n
    std = math.sqrt(math.fsum((x - m) ** 2 for x in v) / (n - 1)) if n > 1 else 0.0
    return Aggregate(m, std, n)


REPORT_HEADER = ["config", "n_folds", "dice", "jaccard", "single_fold"]


def aggregate_folds(rows: Iterable[dict]) -> list[dict]:
    """Group final test rows by configuration and format ``mean ± std`` cells.

    Each row needs ``config``, ``dice`` and ``jaccard``. Output is sorted by
    configuration name so it does not depend on input order.
    """
    groups: dict[str, dict[str, list[float]]] = defaultdict(lambda: {"dice": [], "jaccard": []})
    for r in rows:
        groups[r["config"]]["dice"].append(float(r["dice"]))
        groups[r["config"]]["jaccard"].append(float(r["jaccard"]))
    out = []
    for name in sorted(groups):
        d = aggregate(groups[name]["dice"])
        j = aggregate(groups[name]["jaccard"])
        out.append(
            {"config": name, "n_folds": d.n, "dice": str(d), "jaccard": str(j), "single_fold": int(d.single)}
        )
    return out


def write_report(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_csv(path) -> list[dict]:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
