"""Seeded problem builders shared by the unit and acceptance tests."""

import tracemalloc

import numpy as np

from kdeq.deq import Problem, forward_solve, param_gradient
from kdeq.fixed_point import FixedPointConfig, SamplingMask, pgd_map, zero_filled
from kdeq.hankel import FilterBank, SpecNormConfig, calibrate_filters
from kdeq.networks import init_generalized, init_sspgd, lipschitz_normalize, residual
from kdeq.synth import (HarmonicSpec, MaskSpec, add_noise, gen_harmonics, gen_mask,
                        oracle_filters, random_modes)
from kdeq.train import make_pair

SN = SpecNormConfig(epsilon=0.1)


def crandn(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def self_supervised_problem(seed, n=16, nc=2, tol=1e-12):
    """Random k-space with DC on a subset Lambda and the loss on Omega."""
    rng = np.random.default_rng(seed)
    x = crandn(rng, (n, n, nc))
    c = n // 2
    om = rng.random((n, n)) < 0.5
    om[c - 2:c + 2, c - 2:c + 2] = True
    lam = om & (rng.random((n, n)) < 0.5)
    lam[c - 2:c + 2, c - 2:c + 2] = True
    y = np.where(om[:, :, None], x, 0)
    den = float(np.sum(np.abs(y) ** 2))

    def loss(xi):
        d = np.where(om[:, :, None], xi - y, 0)
        return float(np.sum(np.abs(d) ** 2)) / den, 2 * d / den

    cfg = FixedPointConfig(tol=tol, max_iters=5000, solver="anderson")
    return Problem(np.where(lam[:, :, None], x, 0), SamplingMask(lam), loss, cfg)


def sspgd(seed, window, r, shape, act="relu", nc=2):
    return lipschitz_normalize(init_sspgd(window, nc, r, seed=seed, activation=act), SN, shape)


def ksspgd(seed, shape, nc=2, hidden=64):
    return lipschitz_normalize(init_generalized("ksspgd", nc, hidden=hidden, seed=seed), SN, shape)


def random_solve_problem(seed, n=32, r=16, act="identity", frac=0.25):
    """Normalized SSPGD with random data on a random mask plus a centered block."""
    rng = np.random.default_rng(seed)
    shape = (n, n, 2)
    p = sspgd(seed, (3, 3), r, shape[:2], act)
    keep = rng.random((n, n)) < frac
    c = n // 2
    keep[c - 4:c + 4, c - 4:c + 4] = True
    mask = SamplingMask(keep)
    y = zero_filled(crandn(rng, shape), mask)
    return p, mask, y, (lambda x: pgd_map(x, lambda z: residual(z, p), mask, y))


def recovery_case(dims, window, acs, seed, sigma=0.0, oracle=True):
    """Two-harmonic signal, 25% random sampling with a centered ACS block.

    Returns ``(truth, measurements on Omega, mask, normalized linear SSPGD)``.
    Calibration uses all but two columns of the lifted ACS matrix.
    """
    rng = np.random.default_rng(seed)
    modes = random_modes(2, dims, rng)
    x = gen_harmonics(HarmonicSpec(dims, modes, seed=seed))
    kind = "1d-random" if dims[1] == 1 else "2d-random"
    mask = gen_mask(MaskSpec(kind, 4, acs, seed=seed), dims[:2])
    y = add_noise(x, sigma, seed + 100) if sigma else x
    y = np.where(mask.keep[:, :, None], y, 0)
    if oracle:
        bank = oracle_filters(modes, dims, window)
    else:
        r0, r1, c0, c1 = mask.acs
        d1, d2 = (window, 1) if np.isscalar(window) else window
        bank = calibrate_filters(y[r0:r1, c0:c1], (d1, d2), d1 * d2 * dims[2] - 2).bank
    p = lipschitz_normalize(init_sspgd(bank, activation="identity"), SN, dims[:2])
    return x, y, mask, p


def peak_buffers(p, problem, iters, solver="plain"):
    """Peak traced allocation of ``param_gradient`` in units of one grid."""
    xinf = forward_solve(p, problem.y, problem.mask,
                         FixedPointConfig(tol=1e-30, max_iters=iters)).solution
    _, g = problem.loss_fn(xinf)
    cfg = FixedPointConfig(tol=1e-30, max_iters=iters, solver=solver)
    tracemalloc.start()
    base = tracemalloc.get_traced_memory()[0]
    _, rep = param_gradient(xinf, p, problem.mask, g, cfg)
    peak = tracemalloc.get_traced_memory()[1] - base
    tracemalloc.stop()
    assert rep.iters == iters
    return peak / xinf.nbytes


def measure_memory(seed=0, solver="plain"):
    """Peak grid buffers at 50 and 500 adjoint iterations on a 64x64x2 problem."""
    pr = self_supervised_problem(seed, n=64)
    p = sspgd(seed, (3, 3), 2, (64, 64))
    peak_buffers(p, pr, 5, solver)  # warm the FFT plan cache
    return peak_buffers(p, pr, 50, solver), peak_buffers(p, pr, 500, solver)


class Ensemble:
    """Signals sharing two harmonics (hence one annihilating subspace).

    32 noisy training signals and 8 held-out ones on 64x1x2 grids, a fixed
    1-D mask at R=4 with 8 ACS lines, oracle filters of length 6 and a
    starting bank perturbed from them by ``pert`` per entry.
    """

    def __init__(self, seed=0, pert=0.02, n_train=32, n_test=8, sigma=1e-3):
        dims = (64, 1, 2)
        rng = np.random.default_rng(seed)
        self.modes = random_modes(2, dims, rng)
        self.mask = gen_mask(MaskSpec("1d-random", 4, 8, seed=seed), dims[:2])

        def item(i):
            x = gen_harmonics(HarmonicSpec(dims, self.modes, seed=1000 * seed + i))
            return x, add_noise(x, sigma, seed=5000 + 1000 * seed + i)

        self.train_items = [item(i) for i in range(n_train)]
        self.test_items = [item(100 + i) for i in range(n_test)]
        orc = oracle_filters(self.modes, dims, 6)
        self.oracle = lipschitz_normalize(init_sspgd(orc, activation="identity"), SN, dims[:2])
        f = orc.filters
        prng = np.random.default_rng(7)
        noise = (prng.standard_normal(f.shape) + 1j * prng.standard_normal(f.shape)) / np.sqrt(2)
        self.p0 = lipschitz_normalize(
            init_sspgd(FilterBank(f + pert * noise), activation="identity"), SN, dims[:2])
        self.fp = FixedPointConfig(tol=1e-8, max_iters=5000, solver="anderson")

    def samples(self):
        # fully sampled noisy data serve as the supervised reference
        return [make_pair(yn, self.mask, 0.5, seed=i, ref=yn)
                for i, (_, yn) in enumerate(self.train_items)]

    def heldout_nmse(self, p):
        from kdeq.synth import missing_entry_nmse
        from kdeq.train import reconstruct
        return float(np.mean([missing_entry_nmse(reconstruct(yn, self.mask, p, self.fp).solution,
                                                 x, self.mask) for x, yn in self.test_items]))
