import io
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import crandn
from problems import SN, Ensemble, recovery_case
from kdeq.fixed_point import FixedPointConfig, SamplingMask, zero_filled
from kdeq.networks import init_sspgd, lipschitz_bound
from kdeq.synth import missing_entry_nmse
from kdeq.train import (LOG_HEADER, SamplePair, TrainConfig, TrainingError, adam_init,
                        adam_update, init_params, loss_eval, make_pair, reconstruct,
                        split_mask, train)

FP = FixedPointConfig(tol=1e-8, max_iters=5000, solver="anderson")


def _omega(n=10, shape=(4, 4)):
    keep = np.zeros(shape, bool)
    keep.ravel()[:n] = True
    return SamplingMask(keep)


def test_split_counts():
    lam, gam = split_mask(_omega(), 0.5, seed=0)
    assert lam.count == 5 and gam.keep.sum() == 5
    om = _omega().keep
    assert not np.any(lam.keep & ~om)
    assert np.array_equal(gam.keep, om & ~lam.keep)
    assert lam.role == "lambda" and gam.role == "gamma"


def test_split_rho_one():
    lam, gam = split_mask(_omega(), 1.0)
    assert np.array_equal(lam.keep, _omega().keep)
    assert not gam.keep.any()


def test_split_deterministic_and_acs():
    from kdeq.synth import MaskSpec, gen_mask
    m = gen_mask(MaskSpec("2d-random", 3, 6, seed=2), (24, 24))
    a, _ = split_mask(m, 0.5, seed=11)
    b, _ = split_mask(m, 0.5, seed=11)
    assert np.array_equal(a.keep, b.keep)
    assert a.keep[m.acs_mask()].all()
    with pytest.raises(ValueError):
        split_mask(m, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 1.0))
def test_split_partitions_omega(seed, rho):
    rng = np.random.default_rng(seed)
    keep = rng.random((9, 9)) < 0.6
    keep[0, 0] = True
    m = SamplingMask(keep)
    lam, gam = split_mask(m, rho, seed)
    assert not np.any(lam.keep & gam.keep)
    assert np.array_equal(lam.keep | gam.keep, keep)
    assert lam.count == round(rho * m.count)


def test_loss_hand_value():
    t = np.array([2.0, 0.0]).reshape(2, 1, 1) + 0j
    x = np.array([2.0, 1.0]).reshape(2, 1, 1) + 0j
    loss, cot = loss_eval(x, t, SamplingMask(np.ones((2, 1), bool)))
    assert loss == pytest.approx(0.25)
    np.testing.assert_allclose(cot.ravel(), [0.0, 0.5])


def test_loss_zero_at_reference():
    t = crandn(np.random.default_rng(0), (4, 4, 2))
    loss, cot = loss_eval(t, t, None)
    assert loss == 0.0 and not cot.any()
    with pytest.raises(ValueError):
        loss_eval(t, np.zeros_like(t), None)
    with pytest.raises(ValueError):
        loss_eval(t, t, None, kind="huber")


@pytest.mark.parametrize("kind", ["mse", "l1l2"])
def test_loss_cotangent_fd(kind):
    rng = np.random.default_rng(1)
    x, t = crandn(rng, (5, 4, 2)), crandn(rng, (5, 4, 2))
    mask = SamplingMask(rng.random((5, 4)) < 0.6)
    _, cot = loss_eval(x, t, mask, kind)
    h = 1e-6
    for idx in [(0, 0, 0), (2, 1, 1), (4, 3, 0)]:
        for unit in (1.0, 1j):
            e = np.zeros_like(x)
            e[idx] = h * unit
            fd = (loss_eval(x + e, t, mask, kind)[0] - loss_eval(x - e, t, mask, kind)[0]) / (2 * h)
            want = cot[idx].real if unit == 1.0 else cot[idx].imag
            assert fd == pytest.approx(want, rel=1e-6, abs=1e-9)


def test_self_loss_vanishes_with_full_dc():
    x, y, mask, p = recovery_case((32, 1, 1), 6, 4, seed=0)
    rec = reconstruct(y, mask, p, FP)
    loss, _ = loss_eval(rec.solution, y, mask)
    assert loss == 0.0


def test_adam_zero_gradient():
    p = init_sspgd((2, 2), 1, 2)
    st0 = adam_init(p)
    st1 = adam_update(st0, np.zeros(p.size), TrainConfig())
    np.testing.assert_array_equal(st1.params.vector(), p.vector())
    assert st1.t == 1


def test_adam_first_step():
    p = init_sspgd((1, 1), 1, 1)
    g = np.zeros(p.size)
    g[0] = 1.0
    st1 = adam_update(adam_init(p), g, TrainConfig(lr=1e-4, adam_eps=1e-8))
    delta = st1.params.vector() - p.vector()
    assert delta[0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)
    assert not delta[1:].any()


def test_adam_rejects_nan():
    p = init_sspgd((1, 1), 1, 1)
    with pytest.raises(TrainingError):
        adam_update(adam_init(p), np.full(p.size, np.nan), TrainConfig())
    with pytest.raises(ValueError):
        adam_update(adam_init(p), np.zeros(p.size + 1), TrainConfig())


def test_adam_renormalizes_on_cadence():
    p = init_sspgd((3, 3), 2, 4, seed=0)
    g = -np.abs(p.vector()) * 1e3 * np.sign(p.vector())
    cfg = TrainConfig(lr=0.5, spec_norm=SN, check_every=1)
    st1 = adam_update(adam_init(p), g, cfg, shape=(16, 16, 2))
    assert lipschitz_bound(st1.params, (16, 16)) <= 1 + 1e-12


def _small_ensemble():
    return Ensemble(seed=1, pert=0.02, n_train=4, n_test=4)


def test_zero_epochs_returns_start():
    ens = _small_ensemble()
    state = train(ens.samples(), TrainConfig(epochs=0), ens.fp, ens.p0)
    assert state.params is ens.p0 and state.t == 0


def test_smoke_descent_and_log():
    ens = Ensemble(seed=2, pert=0.05, n_train=1, n_test=1)
    buf = io.StringIO()
    cfg = TrainConfig(epochs=50, lr=1e-4)
    state = train(ens.samples(), cfg, ens.fp, ens.p0, log_stream=buf)
    losses = state.losses()
    assert state.t == 50
    assert losses[-1] < losses[0]
    lines = buf.getvalue().splitlines()
    assert lines[0].split("\t") == list(LOG_HEADER)
    assert len(lines) == 51
    assert float(lines[1].split("\t")[3]) == losses[0]


def test_training_deterministic():
    ens = _small_ensemble()
    cfg = TrainConfig(epochs=1, check_every=1)
    a = train(ens.samples(), cfg, ens.fp, ens.p0)
    b = train(ens.samples(), cfg, ens.fp, ens.p0)
    np.testing.assert_array_equal(a.params.vector(), b.params.vector())
    np.testing.assert_array_equal(a.losses(), b.losses())
    np.testing.assert_array_equal(a.m, b.m)


@pytest.mark.parametrize("mode", ["self", "supervised"])
def test_both_modes_improve_heldout(mode):
    # ordering between the modes is only meaningful at ensemble scale (acceptance suite)
    ens = _small_ensemble()
    state = train(ens.samples(), TrainConfig(epochs=10, mode=mode), ens.fp, ens.p0)
    assert state.t == 40
    assert ens.heldout_nmse(state.params) < 0.2 * ens.heldout_nmse(ens.p0)


def test_supervised_needs_reference():
    ens = _small_ensemble()
    s = [make_pair(yn, ens.mask, 0.5) for _, yn in ens.train_items[:1]]
    with pytest.raises(ValueError):
        train(s, TrainConfig(mode="supervised"), ens.fp, ens.p0)


def test_nonconverged_policy():
    ens = _small_ensemble()
    tight = FixedPointConfig(tol=1e-12, max_iters=2)
    state = train(ens.samples(), TrainConfig(epochs=1), tight, ens.p0)
    assert state.t == 0
    with pytest.raises(TrainingError):
        train(ens.samples(), TrainConfig(on_nonconverged="abort"), tight, ens.p0)


def test_minibatch_steps():
    ens = _small_ensemble()
    state = train(ens.samples(), TrainConfig(epochs=2, batch_size=3), ens.fp, ens.p0)
    assert state.t == 4
    capped = train(ens.samples(), TrainConfig(epochs=5, max_steps=3), ens.fp, ens.p0)
    assert capped.t == 3


def test_sample_pair_validation():
    ens = _small_ensemble()
    s = ens.samples()[0]
    with pytest.raises(ValueError):
        SamplePair(s.y_omega, s.mask_omega, SamplingMask(~s.mask_omega.keep))
    with pytest.raises(ValueError):
        SamplePair(s.y_omega + 1, s.mask_omega, s.mask_lambda)


def test_init_params_policy():
    x, y, mask, _ = recovery_case((32, 32, 1), (4, 4), 8, seed=0)
    cal = init_params("sspgd", y, mask, (3, 3), r=6)
    assert cal.bank.r == 6
    # calibrated filters annihilate the signal far better than random ones
    from kdeq.hankel import apply_filterbank
    rnd = init_params("sspgd", y, SamplingMask(mask.keep), (3, 3), r=6, seed=1)
    e_cal = np.linalg.norm(apply_filterbank(x, cal.bank)) / np.linalg.norm(cal.bank.filters)
    e_rnd = np.linalg.norm(apply_filterbank(x, rnd.bank)) / np.linalg.norm(rnd.bank.filters)
    assert e_cal < 1e-3 * e_rnd
    for p in (cal, rnd, init_params("ksspgd", y, mask, hidden=4)):
        assert lipschitz_bound(p, (32, 32)) <= 1 + 1e-12


def test_reconstruct_full_sampling():
    rng = np.random.default_rng(3)
    y = crandn(rng, (8, 8, 2))
    full = SamplingMask(np.ones((8, 8), bool))
    rec = reconstruct(y, full, init_sspgd((3, 3), 2, 4), FP)
    assert rec.report.iters == 1
    np.testing.assert_array_equal(rec.solution, y)


def test_reconstruct_zero_step():
    x, y, mask, p = recovery_case((32, 1, 1), 6, 4, seed=1)
    rec = reconstruct(y, mask, replace(p, eta=0.0), FP)
    np.testing.assert_array_equal(rec.solution, zero_filled(y, mask))


@pytest.mark.parametrize("seed", range(3))
def test_reconstruct_oracle_exact(seed):
    x, y, mask, p = recovery_case((32, 32, 1), (4, 4), 8, seed)
    rec = reconstruct(y, mask, p, FixedPointConfig(tol=1e-10, max_iters=5000, solver="anderson"), ref=x)
    assert missing_entry_nmse(rec.solution, x, mask) <= 1e-8
    assert np.array_equal(rec.solution[mask.keep], y[mask.keep])
    assert rec.metrics.nmse <= 1e-8
