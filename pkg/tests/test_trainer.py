import math

import numpy as np
import pytest

from csds import segnet, trainer
from csds.config import RunConfig
from csds.data import SynthConfig, generate_corpus
from csds.errors import ConfigError, IncompatibleStateError
from csds.ndcore import Rng
from csds.segnet import SegNetConfig
from csds.trainer import AdamW, EmaConfig, TrainSchedule, ema_source, ema_update, lambda_unsup

SMALL = {"model.base_width": 4, "model.depth": 2, "data.size": 16, "data.num_samples": 10,
         "schedule.epochs": 2, "schedule.batch_size": 2}


def small_cfg(**extra):
    return RunConfig().replace(**{**SMALL, **extra})


def net(seed=0, width=4):
    return segnet.build(SegNetConfig(base_width=width, depth=1), Rng(seed), dtype=np.float64)


# -- AdamW ----------------------------------------------------------------------

def test_adamw_zero_lr_is_identity():
    s = net()
    before = s.digest()
    grads = {n: np.ones_like(t.data) for n, t in s}
    assert AdamW(lr=0.0).step(s, grads)
    assert s.digest() == before


def test_adamw_zero_gradient_only_decays():
    s = net()
    old = {n: t.data.copy() for n, t in s}
    AdamW(lr=1e-2, weight_decay=0.05).step(s, {n: np.zeros_like(t.data) for n, t in s})
    for n, t in s:
        np.testing.assert_allclose(t.data, old[n] * (1 - 1e-2 * 0.05), rtol=0, atol=1e-15)


def test_adamw_first_step_closed_form():
    s = net(1)
    r = np.random.default_rng(1)
    grads = {n: r.normal(size=t.shape) for n, t in s}
    old = {n: t.data.copy() for n, t in s}
    lr, wd, eps = 1e-3, 0.05, 1e-8
    AdamW(lr=lr, weight_decay=wd, eps=eps).step(s, grads)
    for n, t in s:
        g = grads[n]
        expected = old[n] * (1 - lr * wd) - lr * g / (np.abs(g) + eps)
        np.testing.assert_allclose(t.data, expected, rtol=1e-12, atol=1e-15)


def test_adamw_second_step_bias_correction():
    p = net(2)
    g1 = {n: np.full(t.shape, 0.3) for n, t in p}
    g2 = {n: np.full(t.shape, -0.1) for n, t in p}
    old = {n: t.data.copy() for n, t in p}
    opt = AdamW(lr=1e-2, weight_decay=0.0)
    opt.step(p, g1)
    mid = {n: t.data.copy() for n, t in p}
    opt.step(p, g2)
    m = (0.9 * 0.1 * 0.3 + 0.1 * -0.1) / (1 - 0.9**2)
    v = (0.999 * 0.001 * 0.09 + 0.001 * 0.01) / (1 - 0.999**2)
    for n, t in p:
        np.testing.assert_allclose(mid[n], old[n] - 1e-2 * 0.3 / (0.3 + 1e-8), atol=1e-14)
        np.testing.assert_allclose(t.data, mid[n] - 1e-2 * m / (math.sqrt(v) + 1e-8), atol=1e-14)
    assert opt.step_count == 2


def test_adamw_skips_non_finite_and_checks_shapes():
    s = net()
    before = s.digest()
    grads = {n: np.zeros_like(t.data) for n, t in s}
    grads["head.bias"] = np.array([np.nan, 0.0])
    opt = AdamW(lr=1e-2)
    assert not opt.step(s, grads)
    assert opt.skipped == 1 and opt.step_count == 0 and s.digest() == before
    grads["head.bias"] = np.zeros(3)
    with pytest.raises(IncompatibleStateError):
        opt.step(s, grads)


# -- EMA ------------------------------------------------------------------------------

def test_ema_mean_bit_exact():
    t, c, s = net(0), net(1), net(2)
    old = {n: x.data.copy() for n, x in t}
    assert ema_update(t, c, s, EmaConfig(0.99, "mean")) == "mean"
    for n, x in t:
        expected = 0.99 * old[n] + ((1 - 0.99) * 0.5) * (c.params[n].data + s.params[n].data)
        np.testing.assert_array_equal(x.data, expected)


def test_ema_scalar_example():
    t, c, s = net(0), net(1), net(2)
    for m, v in ((t, 1.0), (c, 0.0), (s, 2.0)):
        for _, x in m:
            x.data = np.full_like(x.data, v)
    ema_update(t, c, s, EmaConfig(0.99))
    for _, x in t:
        np.testing.assert_allclose(x.data, 1.0, atol=1e-15)
    for _, x in c:
        x.data[...] = 2.0
    ema_update(t, c, s, EmaConfig(0.99))
    for _, x in t:
        np.testing.assert_allclose(x.data, 0.99 + 0.02, atol=1e-15)


def test_ema_alpha_limits():
    t, c, s = net(0), net(1), net(2)
    before = t.digest()
    ema_update(t, c, s, EmaConfig(1.0))
    assert t.digest() == before
    ema_update(t, c, s, EmaConfig(0.0))
    for n, x in t:
        np.testing.assert_allclose(x.data, (c.params[n].data + s.params[n].data) / 2, atol=1e-15)


def test_ema_alternate_parity_and_best_student():
    alt = EmaConfig(0.5, "alternate")
    assert [ema_source(alt, e) for e in range(4)] == ["color", "structure", "color", "structure"]
    best = EmaConfig(0.5, "best_student_only")
    assert ema_source(best, 3, (80.0, 81.0)) == "structure"
    assert ema_source(best, 3, (82.0, 81.0)) == "color"
    assert ema_source(best, 3, (81.0, 81.0)) == "color"  # ties go to the color student
    t, c, s = net(0), net(1), net(2)
    old = {n: x.data.copy() for n, x in t}
    ema_update(t, c, s, alt, epoch=1)
    for n, x in t:
        np.testing.assert_array_equal(x.data, 0.5 * old[n] + 0.5 * s.params[n].data)


def test_ema_single_student_and_errors():
    t, c = net(0), net(1)
    assert ema_update(t, c, None, EmaConfig(0.9)) == "color"
    with pytest.raises(ConfigError):
        ema_update(t, None, None, EmaConfig(0.9))
    with pytest.raises(IncompatibleStateError):
        ema_update(t, net(1, width=8), None, EmaConfig(0.9))
    for bad in (dict(alpha=1.5), dict(strategy="median")):
        with pytest.raises(ConfigError):
            EmaConfig(**bad)


# -- schedule -------------------------------------------------------------------------

def test_lambda_ramp_examples():
    sch = TrainSchedule(epochs=10, lambda_unsup=2.0, ramp_fraction=0.5)
    assert abs(lambda_unsup(0, sch) - 2.0 * math.exp(-5)) < 1e-15
    assert lambda_unsup(5, sch) == 2.0 and lambda_unsup(9, sch) == 2.0
    assert lambda_unsup(0, TrainSchedule(lambda_unsup=0.7, ramp_fraction=0.0)) == 0.7
    values = [lambda_unsup(e, sch) for e in range(10)]
    assert values == sorted(values)


# -- train step -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(SynthConfig(size=16, seed=3), 6)


def step(corpus, cfg, lam=None, seed=7):
    nets = trainer.build_networks(cfg)
    opts = {k: AdamW(cfg.optim.lr, weight_decay=cfg.optim.weight_decay) for k in nets.students()}
    rep = trainer.train_step(corpus[:2], corpus[2:6], nets, opts, cfg, Rng(seed), epoch=0, lam=lam)
    return rep, nets


def test_zero_lambda_matches_supervised_only(corpus):
    cfg = small_cfg(**{"optim.lr": 1e-3})
    rep_a, a = step(corpus, cfg, lam=0.0)
    rep_b, b = step(corpus, cfg.replace(**{"ablation.unsup_enabled": False}))
    assert rep_a.loss_unsup > 0
    assert abs(rep_a.loss_total - rep_b.loss_total) <= 1e-7
    for name in ("color", "structure"):
        for n, t in a.students()[name]:
            np.testing.assert_allclose(t.grad, b.students()[name].params[n].grad, atol=1e-7, rtol=0)


def test_step_replay_is_bit_exact(corpus):
    cfg = small_cfg(**{"optim.lr": 1e-3})
    ra, a = step(corpus, cfg)
    rb, b = step(corpus, cfg)
    assert ra.loss_total == rb.loss_total and ra.branch_unsup == rb.branch_unsup
    for name in ("color", "structure"):
        assert a.students()[name].digest() == b.students()[name].digest()


def test_teacher_untouched_by_step(corpus):
    cfg = small_cfg(**{"optim.lr": 1e-3})
    nets = trainer.build_networks(cfg)
    before = nets.teacher.digest()
    opts = {k: AdamW(1e-3) for k in nets.students()}
    trainer.train_step(corpus[:2], corpus[2:6], nets, opts, cfg, Rng(0))
    assert nets.teacher.digest() == before
    assert all(t.grad is None for _, t in nets.teacher)
    assert nets.color.digest() != before
    ema_update(nets.teacher, nets.color, nets.structure, EmaConfig(0.9))
    assert nets.teacher.digest() != before


def test_shared_and_independent_init():
    shared = trainer.build_networks(small_cfg())
    assert shared.teacher.digest() == shared.color.digest() == shared.structure.digest()
    ind = trainer.build_networks(small_cfg(**{"ablation.teacher_init": "independent"}))
    assert len({ind.teacher.digest(), ind.color.digest(), ind.structure.digest()}) == 3
    only = trainer.build_networks(small_cfg(**{"ablation.enable_structure_student": False}))
    assert list(only.students()) == ["color"]


# -- full run ------------------------------------------------------------------------------

def test_fit_smoke_and_determinism(tmp_path):
    cfg = small_cfg(**{"schedule.epochs": 1, "optim.lr": 1e-3})
    a = trainer.fit(cfg, out_dir=tmp_path / "a")
    b = trainer.fit(cfg, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a.ema_updates == a.optimizer_steps > 0
    assert a.best_model in ("color", "structure")
    assert 0 <= a.test_dice <= 100
    lines = a.metrics_csv().splitlines()
    assert lines[0] == ",".join(trainer.METRICS_HEADER)
    assert len(lines) == 1 + 3 + 1  # teacher + two students, then the test row
    for name in ("best_student.ckpt", "teacher.ckpt", "splits.json", "run.json"):
        assert (tmp_path / "a" / name).exists()
    assert segnet.load_checkpoint(tmp_path / "a" / "best_student.ckpt").digest() != ""
    assert b.test_dice == a.test_dice


def test_fit_rejects_bad_fold():
    with pytest.raises(ConfigError):
        trainer.fit(small_cfg(**{"run.fold": 7}))
