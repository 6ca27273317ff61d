"""Dual-student training with an EMA teacher.

A color student sees color-jittered or histogram-matched views of unlabeled
images, a structure student sees elastically warped views, and both are
pulled toward the teacher's pseudo-labels with uncertainty-derived pixel
weights. The teacher is never touched by the optimizer; it only moves
through :func:`ema_update`.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment, losses, metrics, segnet
from .augment import JitterRanges
from .config import RunConfig
from .data import DatasetSplits, Sample, SynthConfig, generate_corpus, load_dir, make_splits
from .errors import ConfigError, DivergenceError, IncompatibleStateError
from .ndcore import Rng, Tensor, no_grad
from .segnet import ModelState, SegNetConfig
from .uncertainty import UncertaintySettings, csds_uncertainty, to_loss_weight

log = logging.getLogger(__name__)

BRANCHES = ("color", "structure")
METRICS_HEADER = [
    "run_id", "fold", "epoch", "split", "model", "dice", "jaccard",
    "loss_sup", "loss_unsup", "loss_total", "lambda_unsup",
]


# -- optimizer --------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay and bias correction."""

    def __init__(self, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0
        self.skipped = 0

    def step(self, params: ModelState, grads: dict[str, np.ndarray] | None = None) -> bool:
        """One update; returns False (and counts a skip) if any gradient is non-finite."""
        if grads is None:
            grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in params}
        for name, t in params:
            g = grads[name]
            if g.shape != t.shape:
                raise IncompatibleStateError(f"gradient shape {g.shape} != parameter {name} {t.shape}")
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            return False
        self.step_count += 1
        t_ = self.step_count
        bc1 = 1.0 - self.beta1**t_
        bc2 = 1.0 - self.beta2**t_
        decay = 1.0 - self.lr * self.weight_decay
        for name, p in params:
            g = grads[name].astype(p.dtype, copy=False)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data * decay - self.lr * update
        return True


# -- EMA teacher ------------------------------------------------------------

@dataclass
class EmaConfig:
    alpha: float = 0.99
    strategy: str = "mean"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"EMA alpha must lie in [0, 1], got {self.alpha}", key="ema.alpha")
        if self.strategy not in ("mean", "alternate", "best_student_only"):
            raise ConfigError(f"unknown EMA strategy {self.strategy!r}", key="ema.strategy")


def ema_source(cfg: EmaConfig, epoch: int, val_scores=(0.0, 0.0)) -> str:
    """Which student feeds the teacher: 'mean', 'color' or 'structure'."""
    if cfg.strategy == "mean":
        return "mean"
    if cfg.strategy == "alternate":
        return "color" if epoch % 2 == 0 else "structure"
    color, structure = val_scores
    return "structure" if structure > color else "color"


def ema_update(teacher: ModelState, color: ModelState | None, structure: ModelState | None,
               cfg: EmaConfig, epoch: int = 0, val_scores=(0.0, 0.0)) -> str:
    """Move the teacher toward its source student(s) in place; returns the source used.

    A disabled student is passed as None; the remaining one is then the source.
    """
    if color is None and structure is None:
        raise ConfigError("EMA update needs at least one student")
    for s in (color, structure):
        if s is not None:
            segnet.check_compatible(teacher, s)
    source = ema_source(cfg, epoch, val_scores)
    if color is None:
        source = "structure"
    elif structure is None:
        source = "color"
    a = cfg.alpha
    for name, t in teacher:
        if source == "mean":
            t.data = a * t.data + ((1 - a) * 0.5) * (color.params[name].data + structure.params[name].data)
        else:
            src = color if source == "color" else structure
            t.data = a * t.data + (1 - a) * src.params[name].data
    return source


# -- schedules ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 80
    batch_size: int = 4
    lambda_unsup: float = 1.0
    ramp_fraction: float = 0.2

    @property
    def ramp_epochs(self) -> float:
        return self.ramp_fraction * self.epochs


def lambda_unsup(epoch: float, schedule: TrainSchedule) -> float:
    """Gaussian ramp-up base * exp(-5 (1 - t)^2), t = min(1, epoch / ramp)."""
    ramp = schedule.ramp_epochs
    if ramp <= 0:
        return schedule.lambda_unsup
    t = min(1.0, epoch / ramp)
    return schedule.lambda_unsup * math.exp(-5.0 * (1.0 - t) ** 2)


# -- one step ---------------------------------------------------------------

@dataclass
class Networks:
    teacher: ModelState
    color: ModelState | None
    structure: ModelState | None

    def students(self) -> dict[str, ModelState]:
        return {k: getattr(self, k) for k in BRANCHES if getattr(self, k) is not None}


@dataclass
class StepReport:
    loss_sup: float
    loss_unsup: float
    loss_total: float
    lambda_unsup: float
    branch_sup: dict = field(default_factory=dict)
    branch_unsup: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)
    ema_source: str = ""


def _stack(images) -> np.ndarray:
    return np.stack([np.asarray(x, dtype=np.float32) for x in images])


def uncertainty_settings(cfg: RunConfig) -> UncertaintySettings:
    u = cfg.uncertainty
    return UncertaintySettings(u.tau_color, u.tau_structure, u.lambda_color, u.lambda_structure, u.smoothing, u.eps)


def jitter_ranges(cfg: RunConfig) -> JitterRanges:
    a = cfg.augment
    return JitterRanges(tuple(a.brightness), tuple(a.contrast), tuple(a.saturation), tuple(a.hue))


def prepare_labeled(batch_l: list[Sample], cfg: RunConfig, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    images, masks = [], []
    for i, s in enumerate(batch_l):
        img, m = s.image, s.mask
        if cfg.augment.shared_geom:
            img, m = augment.shared_geom_apply(img, m, augment.sample_shared_geom(rng.split(i)))
        images.append(img)
        masks.append(m[0])
    return _stack(images), losses.one_hot(np.stack(masks), cfg.model.num_classes)


def prepare_unlabeled(batch_u: list[Sample], cfg: RunConfig, rng: Rng, fallback: np.ndarray | None):
    """Clean, color-view and structure-view batches for the unlabeled samples."""
    clean = []
    for i, s in enumerate(batch_u):
        img = s.image
        if cfg.augment.shared_geom:
            img, _ = augment.shared_geom_apply(img, None, augment.sample_shared_geom(rng.split(i).split(0)))
        clean.append(img)
    color_pairs, struct_pairs = [], []
    ranges = jitter_ranges(cfg)
    for i, img in enumerate(clean):
        r = rng.split(i)
        if len(clean) > 1:
            j = int(r.split(1).integers(0, len(clean) - 1))
            ref = clean[j if j < i else j + 1]
        else:
            ref = fallback
        color_pairs.append(augment.color_view(img, ref, r.split(2), ranges))
        struct_pairs.append(augment.structure_view(img, r.split(3), cfg.augment.elastic_alpha, cfg.augment.elastic_sigma))
    return clean, color_pairs, struct_pairs


def train_step(batch_l: list[Sample], batch_u: list[Sample], nets: Networks, opts: dict[str, AdamW],
               cfg: RunConfig, rng: Rng, epoch: int = 0, lam: float | None = None) -> StepReport:
    """One optimization step for every enabled student (teacher untouched).

    Random draws come from fixed child streams of ``rng`` (0: labeled,
    1: unlabeled), so disabling the unsupervised branch leaves the labeled
    augmentation identical.
    """
    students = nets.students()
    schedule = TrainSchedule(cfg.schedule.epochs, cfg.schedule.batch_size, cfg.schedule.lambda_unsup,
                             cfg.schedule.ramp_fraction)
    lam = lambda_unsup(epoch, schedule) if lam is None else lam
    for s in students.values():
        s.zero_grad()

    xl, yl = prepare_labeled(batch_l, cfg, rng.split(0))
    sup_terms = {}
    for name, s in students.items():
        sup_terms[name] = losses.ce_dice(segnet.forward(s, xl, train_mode=True), yl)
    loss_sup = sum((v.tensor for v in sup_terms.values()), start=Tensor(np.float32(0.0)))

    unsup_terms = {}
    use_unsup = cfg.ablation.unsup_enabled and len(batch_u) > 0
    if use_unsup:
        clean, color_pairs, struct_pairs = prepare_unlabeled(batch_u, cfg, rng.split(1), xl[0])
        settings = uncertainty_settings(cfg)
        mode = cfg.uncertainty.weight_mode
        if "color" in students:
            x_clean = _stack(clean)
            with no_grad():
                z_t = segnet.forward(nets.teacher, x_clean, train_mode=False).data
            w = np.stack([to_loss_weight(csds_uncertainty(z_t[i], x_clean[i], settings)[0], mode)
                          for i in range(len(clean))])
            z_s = segnet.forward(students["color"], _stack([p.view for p in color_pairs]), train_mode=True)
            unsup_terms["color"] = losses.unsup_pair_loss(z_s, z_t, w, cfg.ablation.pseudo_mode)
        if "structure" in students:
            x_warp = _stack([p.view for p in struct_pairs])
            with no_grad():
                z_t = segnet.forward(nets.teacher, x_warp, train_mode=False).data
            w = np.stack([to_loss_weight(csds_uncertainty(z_t[i], x_warp[i], settings)[1], mode)
                          for i in range(len(struct_pairs))])
            z_s = segnet.forward(students["structure"], x_warp, train_mode=True)
            unsup_terms["structure"] = losses.unsup_pair_loss(z_s, z_t, w, cfg.ablation.pseudo_mode)
    loss_unsup = sum((v.tensor for v in unsup_terms.values()), start=Tensor(np.float32(0.0)))

    total = loss_sup + loss_unsup * np.float32(lam) if unsup_terms else loss_sup
    total.backward()

    skipped = {}
    for name, s in students.items():
        skipped[name] = not opts[name].step(s)

    return StepReport(
        loss_sup=loss_sup.item(),
        loss_unsup=loss_unsup.item(),
        loss_total=total.item(),
        lambda_unsup=float(lam),
        branch_sup={k: v.value for k, v in sup_terms.items()},
        branch_unsup={k: v.value for k, v in unsup_terms.items()},
        skipped=skipped,
    )


# -- evaluation ---------------------------------------------------------------

def evaluate(state: ModelState, samples: list[Sample], batch_size: int = 8) -> tuple[float, float]:
    """Mean per-image Dice and Jaccard (percent) of foreground predictions."""
    preds, gts = [], []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        labels = segnet.predict(state, _stack([s.image for s in chunk]))
        preds.extend(labels == 1)
        gts.extend(s.mask[0] == 1 for s in chunk)
    return metrics.mean_scores(preds, gts)


# -- full run -------------------------------------------------------------------

@dataclass
class RunResult:
    best_model: str
    best_epoch: int
    best_val_dice: float
    test_dice: float
    test_jaccard: float
    rows: list[dict]
    ema_updates: int
    optimizer_steps: int
    checkpoint: str = ""
    wall_time: float = 0.0

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=METRICS_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()


def build_networks(cfg: RunConfig) -> Networks:
    mc = SegNetConfig(3, cfg.model.num_classes, cfg.model.base_width, cfg.model.depth, cfg.run.seed)
    root = Rng(cfg.run.seed).split(100)
    if cfg.ablation.teacher_init == "shared":
        base = segnet.build(mc, root.split(0))
        make = lambda k: base.copy()  # noqa: E731
    else:
        make = lambda k: segnet.build(mc, root.split(k))  # noqa: E731
    teacher = make(0)
    for t in teacher.tensors():
        t.requires_grad = False
    return Networks(
        teacher=teacher,
        color=make(1) if cfg.ablation.enable_color_student else None,
        structure=make(2) if cfg.ablation.enable_structure_student else None,
    )


def load_samples(cfg: RunConfig) -> list[Sample]:
    d = cfg.data
    if d.source == "dir":
        return load_dir(d.data_dir, d.resize_to)
    sc = SynthConfig(size=d.size, gland_count=tuple(d.gland_count), radius=tuple(d.radius),
                     lumen_ratio=d.lumen_ratio, stain_shift=d.stain_shift, noise=d.noise,
                     nuclei_density=d.nuclei_density, seed=d.synth_seed)
    return generate_corpus(sc, d.num_samples)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def fit(cfg: RunConfig, samples: list[Sample] | None = None, splits: DatasetSplits | None = None,
        out_dir=None) -> RunResult:
    """Train on one fold; validate students and teacher every epoch; test the best student."""
    t0 = time.perf_counter()
    cfg.validate()
    samples = load_samples(cfg) if samples is None else samples
    by_id = {s.id: s for s in samples}
    if splits is None:
        splits = make_splits(sorted(by_id), cfg.run.seed, cfg.run.labeled_ratio)
    lab_ids, unl_ids, val_ids = splits.fold(cfg.run.fold)
    labeled = [by_id[i] for i in lab_ids]
    unlabeled = [by_id[i] for i in unl_ids]
    val = [by_id[i] for i in val_ids]
    test = [by_id[i] for i in splits.test]

    nets = build_networks(cfg)
    students = nets.students()
    oc = cfg.optim
    opts = {k: AdamW(oc.lr, (oc.beta1, oc.beta2), oc.eps, oc.weight_decay) for k in students}
    ema_cfg = EmaConfig(cfg.ema.alpha, cfg.ema.strategy)
    bs = cfg.schedule.batch_size
    use_unsup = cfg.ablation.unsup_enabled and bool(unlabeled)
    # the epoch length ignores ablation flags so every variant takes the same number of steps
    steps_per_epoch = max(1, math.ceil(max(len(unlabeled), len(labeled)) / bs))

    out = Path(out_dir) if out_dir is not None else None
    run_rng = Rng(cfg.run.seed).split(200)
    rows: list[dict] = []
    best = {"dice": -1.0, "model": "", "epoch": -1, "state": None}
    val_scores = (0.0, 0.0)
    ema_updates = 0
    step = 0
    lab_cursor = 0
    lab_order = list(range(len(labeled)))

    for epoch in range(cfg.schedule.epochs):
        erng = run_rng.split(epoch)
        unl_order = erng.split(0).permutation(len(unlabeled)) if unlabeled else []
        sums = {"sup": 0.0, "unsup": 0.0, "total": 0.0}
        lam = 0.0
        for k in range(steps_per_epoch):
            batch_l = []
            for _ in range(min(bs, len(labeled))):
                if lab_cursor == 0:
                    lab_order = list(erng.split(1).split(k).permutation(len(labeled)))
                batch_l.append(labeled[lab_order[lab_cursor]])
                lab_cursor = (lab_cursor + 1) % len(labeled)
            batch_u = [unlabeled[j] for j in unl_order[k * bs:(k + 1) * bs]] if use_unsup else []
            rep = train_step(batch_l, batch_u, nets, opts, cfg, erng.split(2).split(k), epoch)
            if not math.isfinite(rep.loss_total):
                ckpt = None
                if out is not None:
                    ckpt = str(segnet.save_checkpoint(next(iter(students.values())), out / "diverged.ckpt"))
                raise DivergenceError(f"non-finite loss at epoch {epoch} step {k}", checkpoint=ckpt)
            ema_update(nets.teacher, nets.color, nets.structure, ema_cfg, epoch, val_scores)
            ema_updates += 1
            step += 1
            sums["sup"] += rep.loss_sup
            sums["unsup"] += rep.loss_unsup
            sums["total"] += rep.loss_total
            lam = rep.lambda_unsup

        scores = {}
        for name, state in (("teacher", nets.teacher), *students.items()):
            scores[name] = evaluate(state, val)
            rows.append({
                "run_id": cfg.run.run_id, "fold": cfg.run.fold, "epoch": epoch, "split": "val", "model": name,
                "dice": _fmt(scores[name][0]), "jaccard": _fmt(scores[name][1]),
                "loss_sup": _fmt(sums["sup"] / steps_per_epoch), "loss_unsup": _fmt(sums["unsup"] / steps_per_epoch),
                "loss_total": _fmt(sums["total"] / steps_per_epoch), "lambda_unsup": _fmt(lam),
            })
        val_scores = (scores.get("color", (-1.0,))[0], scores.get("structure", (-1.0,))[0])
        for name in BRANCHES:
            if name in students and scores[name][0] > best["dice"]:
                best.update(dice=scores[name][0], model=name, epoch=epoch, state=students[name].copy())
                if out is not None:
                    segnet.save_checkpoint(best["state"], out / "best_student.ckpt")
        log.info("epoch %d val dice %s", epoch, {k: round(v[0], 2) for k, v in scores.items()})

    test_dice, test_jac = evaluate(best["state"], test) if test else (float("nan"), float("nan"))
    rows.append({
        "run_id": cfg.run.run_id, "fold": cfg.run.fold, "epoch": best["epoch"], "split": "test",
        "model": best["model"], "dice": _fmt(test_dice), "jaccard": _fmt(test_jac),
        "loss_sup": "", "loss_unsup": "", "loss_total": "", "lambda_unsup": "",
    })
    result = RunResult(
        best_model=best["model"], best_epoch=best["epoch"], best_val_dice=best["dice"],
        test_dice=test_dice, test_jaccard=test_jac, rows=rows, ema_updates=ema_updates,
        optimizer_steps=step, wall_time=time.perf_counter() - t0,
    )
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint = str(out / "best_student.ckpt")
        segnet.save_checkpoint(nets.teacher, out / "teacher.ckpt")
        (out / "metrics.csv").write_text(result.metrics_csv())
        (out / "splits.json").write_text(json.dumps(splits.to_json(), indent=2))
        manifest = {
            "config_hash": cfg.digest(), "seed": cfg.run.seed, "fold": cfg.run.fold,
            "wall_time_s": result.wall_time, "best_model": result.best_model, "best_epoch": result.best_epoch,
            "test_dice": test_dice, "test_jaccard": test_jac, "config": cfg.to_dict(),
        }
        (out / "run.json").write_text(json.dumps(manifest, indent=2))
    return result
