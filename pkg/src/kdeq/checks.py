"""Fast seeded invariant suites run by ``kdeq check``.

Each suite is a list of ``(name, callable)``; a callable returns a bool or
raises. These are quick self-checks for an installed build, not a
substitute for the test suite.
"""

from __future__ import annotations

import numpy as np

__all__ = ["SUITES", "run_suite"]


def _rand(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


# -- grid -----------------------------------------------------------------------

def _grid_checks():
    from kdeq.grid import coil_combine_rss, fft_centered, ifft_centered, metrics

    rng = np.random.default_rng(0)
    x = _rand(rng, (16, 12, 3))

    def unitary():
        return abs(np.linalg.norm(fft_centered(x)) - np.linalg.norm(x)) <= 1e-12 * np.linalg.norm(x)

    def roundtrip():
        return _rel(ifft_centered(fft_centered(x)), x) <= 1e-12

    def rss_phase():
        ph = np.exp(1j * rng.uniform(0, 2 * np.pi, 3))
        return _rel(coil_combine_rss(x * ph), coil_combine_rss(x)) <= 1e-12

    def perfect():
        ref = np.abs(x[:, :, 0])
        m = metrics(ref, ref)
        return m.nmse == 0.0 and m.psnr == np.inf and abs(m.ssim - 1.0) < 1e-12

    return [("fft unitary", unitary), ("fft roundtrip", roundtrip),
            ("rss phase invariance", rss_phase), ("metrics identity", perfect)]


# -- hankel ---------------------------------------------------------------------

def _hankel_checks():
    from kdeq.hankel import FilterBank, SpecNormConfig, apply_filterbank, composite_lambda_max
    from kdeq.hankel import hankel_lift, hankel_lift_adjoint, spectral_normalize

    rng = np.random.default_rng(1)

    def equivalence():
        worst = 0.0
        for _ in range(10):
            n1, n2, nc = rng.integers(4, 17), rng.integers(4, 17), rng.integers(1, 4)
            d1, d2 = rng.integers(1, min(n1, 5) + 1), rng.integers(1, min(n2, 5) + 1)
            x = _rand(rng, (n1, n2, nc))
            s = FilterBank(_rand(rng, (2, d1, d2, nc)))
            via_conv = apply_filterbank(x, s).reshape(n1 * n2, 2)
            worst = max(worst, _rel(via_conv, hankel_lift(x, (d1, d2)) @ s.columns()))
        return worst <= 1e-12

    def lift_adjoint():
        x = _rand(rng, (9, 7, 2))
        m = _rand(rng, (63, 3 * 2 * 2))
        lhs = np.vdot(hankel_lift(x, (3, 2)), m)
        rhs = np.vdot(x, hankel_lift_adjoint(m, x.shape, (3, 2)))
        return abs(lhs - rhs) <= 1e-12 * abs(lhs)

    def conv_adjoint():
        s = FilterBank(_rand(rng, (3, 3, 3, 2)))
        x, u = _rand(rng, (10, 11, 2)), _rand(rng, (10, 11, 3))
        lhs = np.vdot(apply_filterbank(x, s), u)
        rhs = np.vdot(x, apply_filterbank(u, s, "adjoint"))
        return abs(lhs - rhs) <= 1e-12 * abs(lhs)

    def normalization():
        s = FilterBank(_rand(rng, (4, 3, 3, 2)))
        out = spectral_normalize(s, SpecNormConfig(epsilon=0.1), (16, 16))
        return composite_lambda_max(out, (16, 16)) <= 0.9 * (1 + 1e-6)

    def harmonic():
        x = np.exp(2j * np.pi * np.arange(8) / 8)[:, None, None]
        s = FilterBank(np.array([1.0, -np.exp(1j * np.pi / 4)])[None, :, None, None])
        return np.max(np.abs(apply_filterbank(x, s))) <= 1e-12

    return [("conv/hankel equivalence", equivalence), ("lift adjoint", lift_adjoint),
            ("conv adjoint", conv_adjoint), ("spectral normalization", normalization),
            ("harmonic annihilation", harmonic)]


# -- fixed point ------------------------------------------------------------------

def _fixed_point_checks():
    from kdeq.fixed_point import FixedPointConfig, SamplingMask, project_dc, solve_fixed_point

    rng = np.random.default_rng(2)

    def scalar_plain():
        rep = solve_fixed_point(np.zeros((1, 1, 1)), lambda v: 0.5 * v + 1,
                                FixedPointConfig(tol=1e-10, max_iters=40))
        return rep.converged and abs(rep.solution.item() - 2) < 1e-9

    def scalar_anderson():
        rep = solve_fixed_point(np.zeros((1, 1, 1)), lambda v: 0.5 * v + 1,
                                FixedPointConfig(tol=1e-14, max_iters=4, solver="anderson",
                                                 anderson_memory=1, anderson_reg=0.0))
        return abs(rep.solution.item() - 2) <= 1e-14

    def dc_exact():
        mask = SamplingMask(rng.random((8, 8)) < 0.4)
        r, y = _rand(rng, (8, 8, 2)), _rand(rng, (8, 8, 2))
        out = project_dc(r, mask, y)
        k = mask.keep
        return (np.array_equal(out[k], y[k]) and np.array_equal(out[~k], r[~k])
                and np.array_equal(project_dc(out, mask, y), out))

    def expansive():
        rep = solve_fixed_point(np.ones((1, 1, 1)), lambda v: 1.1 * v,
                                FixedPointConfig(tol=1e-8, max_iters=50))
        return not rep.converged

    return [("scalar plain", scalar_plain), ("scalar anderson", scalar_anderson),
            ("projection exactness", dc_exact), ("expansive map reported", expansive)]


# -- networks ---------------------------------------------------------------------

def _networks_checks():
    from kdeq.hankel import SpecNormConfig
    from kdeq.networks import init_generalized, init_sspgd, lipschitz_bound, lipschitz_normalize
    from kdeq.networks import residual, residual_vjp

    rng = np.random.default_rng(3)
    shape = (8, 8, 2)

    def fd(p):
        x, seed = _rand(rng, shape), _rand(rng, shape)
        g = residual_vjp(x, p, seed).wrt_params
        v = p.vector()
        worst = 0.0
        for i in rng.choice(p.size, 6, replace=False):
            e = np.zeros_like(v)
            e[i] = 1e-5
            f = lambda q: float(np.real(np.vdot(seed, residual(x, p.with_vector(q)))))
            num = (f(v + e) - f(v - e)) / 2e-5
            worst = max(worst, abs(num - g[i]) / max(abs(num), 1e-3 * np.abs(g).max()))
        return worst <= 1e-5

    def vjp_sspgd():
        return fd(init_sspgd((3, 3), 2, 3, seed=0, activation="identity"))

    def vjp_ksspgd():
        return fd(init_generalized("ksspgd", 2, hidden=8, seed=0))

    def budget():
        cfg = SpecNormConfig(epsilon=0.1)
        ok = True
        for p in (init_sspgd((3, 3), 2, 4, seed=1), init_generalized("hsspgd", 2, hidden=8, seed=1)):
            ok &= lipschitz_bound(lipschitz_normalize(p, cfg, shape), shape) <= 1 + 1e-9
        return ok

    def hybrid_reduces():
        p = init_generalized("hsspgd", 2, hidden=8, seed=2, eta1=0.7, eta2=0.0)
        from dataclasses import replace
        k = replace(p, variant="ksspgd", i_layers=(), eta=0.7)
        x = _rand(rng, shape)
        return np.max(np.abs(residual(x, p) - residual(x, k))) <= 1e-14

    return [("sspgd vjp", vjp_sspgd), ("ksspgd vjp", vjp_ksspgd),
            ("lipschitz budget", budget), ("hybrid reduces", hybrid_reduces)]


# -- deq --------------------------------------------------------------------------

def _deq_checks():
    from kdeq.deq import Problem, adjoint_solve, gradient_check
    from kdeq.fixed_point import FixedPointConfig, SamplingMask
    from kdeq.hankel import SpecNormConfig
    from kdeq.networks import init_sspgd, input_vjp, lipschitz_normalize
    from kdeq.train import loss_eval

    rng = np.random.default_rng(4)
    shape = (8, 6, 2)
    keep = rng.random(shape[:2]) < 0.5
    mask = SamplingMask(keep)
    x = _rand(rng, shape)
    y = np.where(keep[:, :, None], x, 0)
    p = lipschitz_normalize(init_sspgd((3, 3), 2, 4, seed=0, activation="identity"),
                            SpecNormConfig(), shape)

    def adjoint_residual():
        g = _rand(rng, shape)
        cfg = FixedPointConfig(tol=1e-10, max_iters=5000)
        rep = adjoint_solve(x, p, mask, g, cfg)
        jt = input_vjp(x, p)
        res = rep.v - jt(rep.v * ~keep[:, :, None]) - g
        return rep.converged and np.linalg.norm(res) / np.linalg.norm(g) <= 1e-10

    def gradcheck():
        prob = Problem(y, mask, lambda z: loss_eval(z, x, None))
        return gradient_check(prob, p, coords=range(0, p.size, 17)).max_rel_err <= 1e-4

    return [("adjoint residual", adjoint_residual), ("implicit gradient", gradcheck)]


# -- synth ------------------------------------------------------------------------

def _synth_checks():
    from kdeq.hankel import calibrate_filters
    from kdeq.synth import MASK_KINDS, HarmonicSpec, MaskSpec, gen_harmonics, gen_mask, hankel_rank

    def rank():
        ok = True
        for r in range(1, 5):
            x = gen_harmonics(HarmonicSpec((16, 16, 2), [(k, 2 * k + 1) for k in range(r)], seed=r))
            ok &= hankel_rank(x, (3, 3)) == r
        return ok

    def annihilation():
        x = gen_harmonics(HarmonicSpec((32, 1, 1), [3, 11], seed=0))
        return calibrate_filters(x, 4, 2).residual <= 1e-8

    def cardinality():
        ok = True
        for kind in MASK_KINDS:
            for seed in range(3):
                m = gen_mask(MaskSpec(kind, 4, 4, seed=seed), (32, 32))
                unit = 32 if kind.startswith("1d") else 1
                ok &= abs(m.count / unit - (32 if unit == 32 else 1024) / 4) <= 1
        return ok

    return [("rank oracle", rank), ("annihilation oracle", annihilation),
            ("mask cardinality", cardinality)]


# -- io ---------------------------------------------------------------------------

def _io_checks():
    from kdeq.fixed_point import SamplingMask
    from kdeq.hankel import FilterBank
    from kdeq.io import (BadMagicError, TruncatedError, decode_filters, decode_grid,
                         decode_mask, encode_filters, encode_grid, encode_mask)

    rng = np.random.default_rng(5)

    def grid():
        x = _rand(rng, (8, 8, 2))
        return np.array_equal(decode_grid(encode_grid(x)).view(np.uint64), x.view(np.uint64))

    def mask():
        m = SamplingMask(rng.random((7, 9)) < 0.5, role="gamma")
        out = decode_mask(encode_mask(m))
        return np.array_equal(out.keep, m.keep) and out.role == "gamma"

    def filters():
        f = FilterBank(_rand(rng, (2, 3, 3, 2)))
        return np.array_equal(decode_filters(encode_filters(f)).filters, f.filters)

    def errors():
        buf = encode_grid(_rand(rng, (8, 8, 2)))
        try:
            decode_grid(b"XXXX" + buf[4:])
            return False
        except BadMagicError:
            pass
        try:
            decode_grid(buf[:-8])
            return False
        except TruncatedError:
            return True

    return [("grid roundtrip", grid), ("mask roundtrip", mask),
            ("filter roundtrip", filters), ("format errors", errors)]


SUITES = {
    "grid": _grid_checks,
    "hankel": _hankel_checks,
    "fixed-point": _fixed_point_checks,
    "networks": _networks_checks,
    "deq": _deq_checks,
    "synth": _synth_checks,
    "io": _io_checks,
}


def run_suite(name: str):
    """Run one suite; returns ``[(check name, passed, error message)]``."""
    results = []
    for check, fn in SUITES[name]():
        try:
            ok, err = bool(fn()), ""
        except Exception as exc:  # a crashing check is a failed check
            ok, err = False, f"{type(exc).__name__}: {exc}"
        results.append((check, ok, err))
    return results
