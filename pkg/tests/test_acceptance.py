"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import csv
import math
import time

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter
from scipy.stats import ks_2samp

from csds import augment as A
from csds import imaging, metrics, segnet, trainer
from csds import losses as L
from csds import ndcore as nd
from csds.cli import main
from csds.config import RunConfig
from csds.data import SynthConfig, generate_corpus
from csds.ndcore import Rng, Tensor
from csds.segnet import SegNetConfig
from csds.trainer import AdamW, EmaConfig, ema_source, ema_update
from csds.uncertainty import UncertaintySettings, csds_uncertainty, entropy_map

SEEDS = range(20)

# Shared protocol for the trend and ablation criteria. Deviations from the
# library defaults are what fits 15 epochs on 64x64 inputs; see README.
TREND_BASE = {
    "data.num_samples": 60, "data.size": 64, "run.labeled_ratio": 0.10,
    "schedule.epochs": 15, "model.base_width": 8,
    "optim.lr": 3e-3, "ema.alpha": 0.9, "schedule.ramp_fraction": 0.5,
}
TREND_SEEDS = (0, 1, 2)
VARIANTS = {
    "csds": {},
    "supervised": {"ablation.unsup_enabled": False},
    "color_only": {"ablation.enable_structure_student": False},
    "structure_only": {"ablation.enable_color_student": False},
}


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


# -- 1 ------------------------------------------------------------------------------

def _grad_cases(r):
    x4 = Tensor(r.normal(size=(2, 3, 4, 4)))
    w = r.normal(size=(4, 3, 3, 3))
    b = r.normal(size=4)
    other = r.normal(size=(2, 3, 4, 4))
    pos = Tensor(r.uniform(0.5, 2.0, size=(2, 3)))
    nz = r.normal(size=(2, 3, 4, 4))
    relu_in = Tensor(np.where(np.abs(nz) < 0.05, 0.3, nz))
    lab = r.integers(0, 2, size=(2, 4, 4))
    t = L.one_hot(lab, 2, np.float64)
    z2 = Tensor(r.normal(size=(2, 2, 4, 4)))
    pw = r.uniform(0.1, 2.0, size=(2, 4, 4))
    teacher = r.normal(size=(2, 2, 4, 4))
    sk = Tensor(r.normal(size=(1, 2, 4, 4)))
    sk_t = L.one_hot(r.integers(0, 2, size=(1, 4, 4)), 2, np.float64)
    return [
        ("conv2d.x", lambda v: nd.tsum(nd.conv2d(v, Tensor(w), Tensor(b), pad=1)
                                         * Tensor(np.cos(np.arange(64)).reshape(1, 4, 4, 4))), x4),
        ("conv2d.w", lambda v: nd.tsum(nd.mul(nd.conv2d(x4, v, Tensor(b), pad=1), nd.conv2d(x4, v, None, pad=1))),
         Tensor(w)),
        ("conv2d.stride2", lambda v: nd.tsum(nd.exp(nd.conv2d(v, Tensor(w * 0.2), None, stride=2, pad=1))), x4),
        ("add/sub/mul/div", lambda v: nd.tsum(nd.div(nd.mul(nd.add(v, 1.0), nd.sub(v, other)), nd.add(nd.mul(v, v), 1.0))), x4),
        ("exp/log", lambda v: nd.tsum(nd.log(nd.add(nd.exp(v), 1.0))), pos),
        ("relu", lambda v: nd.tsum(nd.mul(nd.relu(v), Tensor(other))), relu_in),
        ("mean/sum", lambda v: nd.mean(nd.mul(nd.tsum(v, axis=1, keepdims=True), v)), x4),
        ("concat/reshape", lambda v: nd.tsum(nd.mul(nd.reshape(nd.concat([v, nd.mul(v, v)], 1), (2, -1)),
                                                        Tensor(np.tile(np.linspace(-1, 1, 96), (2, 1))))), x4),
        ("maxpool/upsample", lambda v: nd.tsum(nd.mul(nd.upsample_nearest(nd.max_pool2d(v), 2), Tensor(other))), x4),
        ("softmax", lambda v: nd.tsum(nd.mul(nd.softmax_channel(v), Tensor(other))), x4),
        ("log_softmax", lambda v: nd.tsum(nd.mul(nd.log_softmax_channel(v), Tensor(other))), x4),
        ("loss.cross_entropy", lambda v: L.cross_entropy(v, t, pw).tensor, z2),
        ("loss.soft_dice", lambda v: L.soft_dice(nd.softmax_channel(v), t).tensor, z2),
        ("loss.ce_dice", lambda v: L.ce_dice(v, t, pw).tensor, z2),
        ("loss.unsup_pair", lambda v: L.unsup_pair_loss(v, teacher, pw).tensor, z2),
        ("loss.unsup_pair_soft", lambda v: L.unsup_pair_loss(v, teacher, pw, "soft").tensor, z2),
        ("skip+loss", lambda v: L.ce_dice(nd.add(v, nd.upsample_nearest(nd.max_pool2d(v), 2)), sk_t).tensor, sk),
    ]


def test_criterion_1_gradient_suite(capsys):
    t0 = time.perf_counter()
    worst = {}
    for seed in SEEDS:
        for name, f, x in _grad_cases(np.random.default_rng(seed)):
            worst[name] = max(worst.get(name, 0.0), nd.gradient_check(f, x))
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v < 1e-3}
    ok = not bad and elapsed < 60
    report(capsys, 1, ok, f"{len(worst)} ops x {len(SEEDS)} seeds, max rel err {max(worst.values()):.2e}, "
                          f"{elapsed:.1f}s" + (f", failing {bad}" if bad else ""))


# -- 2 --------------------------------------------------------------------------------

def test_criterion_2_uncertainty_algebra(capsys):
    r = np.random.default_rng(0)
    checks = []
    for C in (2, 3, 5):
        z = r.normal(scale=6, size=(C, 16, 16))
        u = entropy_map(nd.softmax_array(z, axis=0)).values
        checks.append(np.all(u >= 0) and np.all(u <= math.log(C) + C * 1e-8))
    z0 = np.zeros((2, 8, 8))
    checks.append(np.abs(entropy_map(nd.softmax_array(z0, axis=0)).values - math.log(2)).max() < 1e-6)
    for seed in range(20):
        r = np.random.default_rng(seed)
        z, img = r.normal(size=(2, 16, 16)), gaussian_filter(r.random((3, 16, 16)), (0, 1, 1))
        s = UncertaintySettings(tau_color=0.3, tau_structure=0.3, lambda_color=0.5, lambda_structure=0.5)
        base = entropy_map(nd.softmax_array(z, axis=0)).values
        uc, us = csds_uncertainty(z, img, s)
        mc = imaging.color_mask(img, 0.3, s.smoothing, s.eps)
        ms = imaging.structure_mask(img, 0.3, s.eps)
        checks.append(np.all(us.values >= uc.values) and np.all(uc.values >= base))
        checks.append(np.array_equal(uc.values[~mc], base[~mc]) and np.all(uc.values[mc] > base[mc]))
        checks.append(np.array_equal(us.values[~ms], uc.values[~ms]) and np.all(us.values[ms] > uc.values[ms]))
        zc, zs = csds_uncertainty(z, img, UncertaintySettings(lambda_color=0.0, lambda_structure=0.0))
        checks.append(np.array_equal(zc.values, base) and np.array_equal(zs.values, base))
    report(capsys, 2, all(checks), f"{sum(map(bool, checks))}/{len(checks)} algebra checks hold")


# -- 3 ----------------------------------------------------------------------------------

def test_criterion_3_imaging_oracles(capsys):
    px = np.array([1.0, 0.0, 0.0]).reshape(3, 1, 1)
    cv = imaging.channel_variance_map(px)[0, 0]
    const = imaging.edge_magnitude_map(np.full((3, 8, 8), 0.4))
    step = np.zeros((3, 4, 6))
    step[0, :, 3:] = 1.0
    raw = imaging.edge_strength(step)
    thr = imaging.threshold_mask(np.array([0.5, 0.5000001, 0.4999999]), 0.5)
    checks = {
        "variance(1,0,0)": abs(cv - 2 / 9) <= 1e-6,
        "constant edge": not const.any(),
        "step edge": np.allclose(raw[:, 2], 1 / 3, atol=1e-12) and raw[:, [0, 1, 3, 4, 5]].max() == 0,
        "strict threshold": list(thr) == [False, True, False],
    }
    report(capsys, 3, all(checks.values()), ", ".join(f"{k}={'ok' if v else 'bad'}" for k, v in checks.items()))


# -- 4 -----------------------------------------------------------------------------------

def _smooth_8bit(seed, size, sigma, gamma=(0.7, 1.0, 1.6)):
    r = np.random.default_rng(seed)
    x = gaussian_filter(r.normal(size=(3, size, size)), (0, sigma, sigma))
    x = (x - x.min(axis=(1, 2), keepdims=True)) / np.ptp(x, axis=(1, 2), keepdims=True)
    return np.round(x ** np.array(gamma)[:, None, None] * 255) / 255


def test_criterion_4_augmentation_contracts(capsys):
    src = _smooth_8bit(0, 256, 6.0)
    ref = _smooth_8bit(7, 256, 3.0, (1.4, 0.8, 1.0))
    ident = np.abs(A.histogram_match(src, src) - src).max()
    matched = A.histogram_match(src, ref)
    ks = max(ks_2samp(matched[c].ravel(), ref[c].ravel()).statistic for c in range(3))
    f0 = A.sample_elastic(64, 64, 0.0, 8.0, Rng(0))
    img = _smooth_8bit(1, 64, 2.0)
    alpha0 = np.array_equal(A.warp(img, f0, "nearest"), img) and np.abs(A.warp(img, f0) - img).max() < 1e-6
    inv = max(np.abs(A.warp(A.warp(img, f, "bilinear"), -f, "bilinear") - img).mean()
              for f in (A.sample_elastic(64, 64, 3.0, 8.0, Rng(s)) for s in range(5)))
    probe = np.full((3, 32, 32), 0.3)
    probe[:, 10, 20] = [0.9, 0.1, 0.2]
    coords = True
    for s in range(20):
        v = A.color_view(probe, _smooth_8bit(s, 32, 2.0), Rng(s)).view
        rest = np.delete(v.reshape(3, -1), 10 * 32 + 20, axis=1)
        coords &= bool(np.ptp(rest, axis=1).max() < 1e-12)
    ok = ident <= 1 / 255 + 1e-12 and ks <= 0.02 and alpha0 and inv <= 2e-2 and coords
    report(capsys, 4, ok, f"self-match max diff {ident * 255:.2f}/255, KS {ks:.4f}, alpha0 {alpha0}, "
                          f"inverse MAE {inv:.4f}, color coords fixed {coords}")


# -- 5 -------------------------------------------------------------------------------------

def test_criterion_5_ema_exactness(capsys):
    cfg = SegNetConfig(base_width=4, depth=2)
    t, c, s = (segnet.build(cfg, Rng(k)) for k in range(3))
    old = {n: x.data.copy() for n, x in t}
    ema_update(t, c, s, EmaConfig(0.99, "mean"))
    exact = all(np.array_equal(x.data, 0.99 * old[n] + ((1 - 0.99) * 0.5) * (c[n].data + s[n].data)) for n, x in t)
    names_ordered = t.names() == c.names() == s.names()
    alt = [ema_source(EmaConfig(0.5, "alternate"), e) for e in range(4)] == ["color", "structure"] * 2
    best = EmaConfig(0.5, "best_student_only")
    best_ok = (ema_source(best, 0, (70.0, 71.0)) == "structure" and ema_source(best, 0, (71.0, 70.0)) == "color"
               and ema_source(best, 0, (70.0, 70.0)) == "color")

    rc = RunConfig().replace(**{"model.base_width": 4, "model.depth": 2, "optim.lr": 1e-3})
    samples = generate_corpus(SynthConfig(size=16, seed=0), 6)
    nets = trainer.build_networks(rc)
    opts = {k: AdamW(1e-3) for k in nets.students()}
    before = nets.teacher.digest()
    trainer.train_step(samples[:2], samples[2:], nets, opts, rc, Rng(0))
    untouched = nets.teacher.digest() == before and all(x.grad is None for _, x in nets.teacher)
    ema_update(nets.teacher, nets.color, nets.structure, EmaConfig(0.99))
    moved = nets.teacher.digest() != before
    ok = exact and names_ordered and alt and best_ok and untouched and moved
    report(capsys, 5, ok, f"mean bit-exact {exact}, alternate parity {alt}, best-student tie->color {best_ok}, "
                          f"teacher only moved by EMA {untouched and moved}")


# -- 6 ----------------------------------------------------------------------------------------

def test_criterion_6_zero_lambda_degeneracy(capsys):
    rc = RunConfig().replace(**{"model.base_width": 4, "model.depth": 2, "optim.lr": 1e-3})
    samples = generate_corpus(SynthConfig(size=16, seed=1), 6)

    def run(cfg, lam):
        nets = trainer.build_networks(cfg)
        opts = {k: AdamW(1e-3) for k in nets.students()}
        rep = trainer.train_step(samples[:2], samples[2:], nets, opts, cfg, Rng(5), lam=lam)
        return rep, nets

    ra, a = run(rc, 0.0)
    rb, b = run(rc.replace(**{"ablation.unsup_enabled": False}), None)
    loss_diff = abs(ra.loss_total - rb.loss_total)
    grad_diff = max(np.abs(x.grad - b.students()[k][n].grad).max()
                    for k, st in a.students().items() for n, x in st)
    ok = loss_diff <= 1e-7 and grad_diff <= 1e-7 and ra.loss_unsup > 0
    report(capsys, 6, ok, f"|dloss| {loss_diff:.1e}, max |dgrad| {grad_diff:.1e}")


# -- 7, 8 -----------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trend():
    out = {}
    for name, extra in VARIANTS.items():
        t0 = time.perf_counter()
        dice = [trainer.fit(RunConfig().replace(**{**TREND_BASE, "run.seed": sd, **extra})).test_dice
                for sd in TREND_SEEDS]
        out[name] = (float(np.mean(dice)), dice, time.perf_counter() - t0)
    return out


def _fmt(entry):
    return f"{entry[0]:.2f} ({', '.join(f'{d:.1f}' for d in entry[1])})"


@pytest.mark.slow
def test_criterion_7_end_to_end_trend(trend, capsys):
    csds, sup = trend["csds"], trend["supervised"]
    gain = csds[0] - sup[0]
    runtime = csds[2] + sup[2]
    ok = gain >= 2.0 and runtime < 15 * 60
    report(capsys, 7, ok, f"csds {_fmt(csds)} vs supervised {_fmt(sup)}, gain {gain:+.2f}, "
                          f"runtime {runtime:.0f}s")


@pytest.mark.slow
def test_criterion_8_component_ablation(trend, capsys):
    csds = trend["csds"][0]
    singles = {k: trend[k] for k in ("color_only", "structure_only")}
    ok = all(csds >= v[0] - 0.5 for v in singles.values())
    report(capsys, 8, ok, f"csds {_fmt(trend['csds'])}; " +
           "; ".join(f"{k} {_fmt(v)}" for k, v in singles.items()) + " (guard: csds >= single - 0.5)")


# -- 9 ------------------------------------------------------------------------------------------------

def test_criterion_9_determinism(tmp_path, capsys):
    args = ["--set", "model.base_width=4", "--set", "model.depth=2", "--set", "data.size=32",
            "--set", "data.num_samples=20", "--set", "schedule.epochs=2", "--set", "optim.lr=1e-3", "--seed", "3"]
    codes = [main(["train", *args, "--out", str(tmp_path / k)]) for k in ("a", "b")]
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "metrics.csv").read_bytes()
    ok = codes == [0, 0] and a == b
    report(capsys, 9, ok, f"two runs, metrics.csv {len(a)} bytes, identical {a == b}")


# -- 10 -------------------------------------------------------------------------------------------------

def test_criterion_10_report_format(tmp_path, capsys):
    paths = []
    for k, d in enumerate([80, 82, 84, 86, 88]):
        p = tmp_path / f"fold{k}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=trainer.METRICS_HEADER)
            w.writeheader()
            w.writerow({"run_id": "synthetic", "fold": k, "epoch": 3, "split": "test", "model": "color",
                        "dice": d, "jaccard": d - 10})
        paths.append(str(p))
    code = main(["report", *paths, "--out", str(tmp_path / "r")])
    with open(tmp_path / "r" / "report.csv", newline="") as fh:
        row = next(csv.DictReader(fh))
    closed = str(metrics.aggregate([80, 82, 84, 86, 88]))
    ok = code == 0 and closed == "84.00 ± 3.16" and row["dice"] == closed and row["n_folds"] == "5"
    report(capsys, 10, ok, f"report row dice '{row['dice']}' over {row['n_folds']} folds")
