import numpy as np
import pytest

from conftest import crandn
from problems import SN, ksspgd, measure_memory, self_supervised_problem, sspgd
from kdeq.deq import (Problem, adjoint_solve, forward_solve, gradient_check, param_gradient,
                      unrolled_gradient)
from kdeq.fixed_point import FixedPointConfig, SamplingMask
from kdeq.hankel import FilterBank
from kdeq.networks import init_sspgd, input_vjp, lipschitz_normalize
from kdeq.train import loss_eval

CFG = FixedPointConfig(tol=1e-12, max_iters=5000)


def _delta(eta, act="identity"):
    return init_sspgd(FilterBank(np.ones((1, 1, 1, 1))), eta=eta, activation=act)


def test_adjoint_identity_system():
    rng = np.random.default_rng(0)
    g = crandn(rng, (6, 5, 1))
    full = SamplingMask(np.ones((6, 5), bool))
    rep = adjoint_solve(crandn(rng, g.shape), _delta(0.0), full, g, CFG)
    assert rep.iters == 1 and rep.converged
    np.testing.assert_array_equal(rep.v, g)


def test_adjoint_scalar_half():
    # delta filter with eta = 0.5 gives J_G = 0.5 I; g vanishes on Omega
    keep = np.zeros((6, 1), bool)
    keep[2] = True
    mask = SamplingMask(keep)
    rng = np.random.default_rng(1)
    g = np.where(keep[:, :, None], 0, crandn(rng, (6, 1, 1)))
    rep = adjoint_solve(np.zeros((6, 1, 1), complex), _delta(0.5), mask, g, CFG)
    np.testing.assert_allclose(rep.v, 2 * g, rtol=1e-11, atol=1e-14)


def test_adjoint_zero_cotangent():
    rep = adjoint_solve(np.ones((4, 4, 1), complex), _delta(0.5), SamplingMask(np.eye(4, dtype=bool)),
                        np.zeros((4, 4, 1), complex), CFG)
    assert rep.converged and not rep.v.any()


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("act", ["identity", "relu"])
def test_adjoint_residual_resubstituted(seed, act):
    pr = self_supervised_problem(seed, n=12)
    p = sspgd(seed, (3, 3), 8, (12, 12), act)
    xinf = forward_solve(p, pr.y, pr.mask, pr.fp_cfg).solution
    g = crandn(np.random.default_rng(seed), xinf.shape)
    tol = 1e-10
    rep = adjoint_solve(xinf, p, pr.mask, g, FixedPointConfig(tol=tol, max_iters=5000))
    off = ~pr.mask.keep[:, :, None]
    res = rep.v - input_vjp(xinf, p)(rep.v * off) - g
    assert rep.converged
    assert np.linalg.norm(res) / np.linalg.norm(g) <= tol


def test_adjoint_reports_non_convergence():
    pr = self_supervised_problem(0, n=12)
    p = sspgd(0, (3, 3), 8, (12, 12))
    xinf = forward_solve(p, pr.y, pr.mask, pr.fp_cfg).solution
    rep = adjoint_solve(xinf, p, pr.mask, np.ones_like(xinf), FixedPointConfig(tol=1e-14, max_iters=3))
    assert not rep.converged and rep.iters == 3


def test_full_sampling_kills_gradient():
    rng = np.random.default_rng(2)
    y = crandn(rng, (8, 8, 2))
    full = SamplingMask(np.ones((8, 8), bool))
    p = sspgd(2, (3, 3), 4, (8, 8))
    xinf = forward_solve(p, y, full, CFG).solution
    np.testing.assert_array_equal(xinf, y)
    grad, _ = param_gradient(xinf, p, full, crandn(rng, y.shape), CFG)
    assert not grad.any()


def test_zero_cotangent_zero_gradient():
    pr = self_supervised_problem(3, n=8)
    p = sspgd(3, (3, 3), 4, (8, 8))
    grad, _ = param_gradient(pr.y, p, pr.mask, np.zeros_like(pr.y), CFG)
    assert grad.shape == (p.size,) and not grad.any()


def _tiny(seed):
    """Linear SSPGD on an 8x1 single-coil grid with a length-2 filter."""
    rng = np.random.default_rng(seed)
    x = crandn(rng, (8, 1, 1))
    keep = np.zeros((8, 1), bool)
    keep[[0, 3, 5]] = True
    p = lipschitz_normalize(init_sspgd((2, 1), 1, 1, seed=seed, activation="identity"), SN, (8, 1))
    y = np.where(keep[:, :, None], x, 0)
    return Problem(y, SamplingMask(keep), lambda z: loss_eval(z, x, None)), p


@pytest.mark.parametrize("seed", range(4))
def test_tiny_linear_gradient(seed):
    problem, p = _tiny(seed)
    rep = gradient_check(problem, p, h=1e-5)
    assert rep.n_checked == p.size
    assert not rep.kinks
    assert rep.max_rel_err <= 1e-8


@pytest.mark.parametrize("seed", range(2))
def test_step_size_sweep_plateau(seed):
    problem, p = _tiny(seed)
    errs = [gradient_check(problem, p, h=h).max_rel_err for h in (1e-4, 1e-5, 1e-6)]
    assert max(errs) <= 1e-6
    # truncation error dominates the large step
    assert errs[1] < errs[0]


def test_corrupted_coordinate_flagged():
    problem, p = _tiny(0)
    xinf = forward_solve(p, problem.y, problem.mask, problem.fp_cfg).solution
    _, g = problem.loss_fn(xinf)
    grad, _ = param_gradient(xinf, p, problem.mask, g, problem.fp_cfg)
    i = int(np.argmax(np.abs(grad)))
    bad = grad.copy()
    bad[i] *= 2
    rep = gradient_check(problem, p, grad=bad)
    assert rep.worst == i
    row = next(r for r in rep.table if r[0] == i)
    assert row[3] >= 0.5


@pytest.mark.parametrize("seed", range(2))
def test_unroll_converges_to_implicit(seed):
    pr = self_supervised_problem(seed, n=12)
    p = sspgd(seed, (3, 3), 8, (12, 12), "identity")
    xinf = forward_solve(p, pr.y, pr.mask, pr.fp_cfg).solution
    _, g = pr.loss_fn(xinf)
    gi, _ = param_gradient(xinf, p, pr.mask, g, pr.fp_cfg)
    dists = [np.linalg.norm(unrolled_gradient(p, pr.y, pr.mask, pr.loss_fn, k) - gi)
             / np.linalg.norm(gi) for k in (10, 50, 200)]
    assert dists[0] > dists[1] > dists[2]
    assert dists[2] <= 1e-6


def test_memory_independent_of_iterations():
    short, long = measure_memory()
    assert long <= 8 and short <= 8
    assert abs(long - short) <= 0.5


def test_ksspgd_gradient_smoke():
    pr = self_supervised_problem(0, n=8)
    p = ksspgd(0, (8, 8), hidden=4)
    rep = gradient_check(pr, p, n_sample=16)
    assert rep.max_rel_err <= 1e-4


def test_anderson_adjoint_matches_neumann():
    pr = self_supervised_problem(1)
    p = sspgd(1, (3, 3), 16, (16, 16))
    xinf = forward_solve(p, pr.y, pr.mask, pr.fp_cfg).solution
    _, g = pr.loss_fn(xinf)
    plain = adjoint_solve(xinf, p, pr.mask, g, FixedPointConfig(tol=1e-13, max_iters=20000))
    acc = adjoint_solve(xinf, p, pr.mask, g,
                        FixedPointConfig(tol=1e-13, max_iters=20000, solver="anderson"))
    assert plain.converged and acc.converged
    assert acc.iters < plain.iters
    assert np.linalg.norm(acc.v - plain.v) <= 1e-10 * np.linalg.norm(plain.v)


def test_anderson_adjoint_memory_constant():
    short, long = measure_memory(solver="anderson")
    assert abs(long - short) <= 0.5
