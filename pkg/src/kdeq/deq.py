"""Implicit differentiation at the fixed point of ``F = P o G``.

The loss gradient w.r.t. the network parameters is

    dl/dp = (dF/dp)^T (I - dF/dx)^{-T} dl/dx

evaluated at the converged ``x_inf`` only. The transposed linear system is
solved by the Neumann recursion ``v <- J^T v + g`` with
``J^T u = J_G(x_inf)^T (I - M) u``; no iterate history is kept.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from kdeq.fixed_point import (
    FixedPointConfig,
    FixedPointReport,
    SamplingMask,
    pgd_map,
    solve_fixed_point,
    zero_filled,
)
from kdeq.networks import (
    NetworkParams,
    activation_pattern,
    input_vjp,
    residual,
    residual_vjp,
)

log = logging.getLogger(__name__)

__all__ = [
    "AdjointSolveReport",
    "Problem",
    "GradCheckReport",
    "forward_solve",
    "adjoint_solve",
    "param_gradient",
    "unrolled_gradient",
    "gradient_check",
]


@dataclass(frozen=True)
class AdjointSolveReport:
    v: np.ndarray
    residuals: np.ndarray
    iters: int
    converged: bool


@dataclass(frozen=True)
class Problem:
    """A single DEQ sample: DC data ``y`` on ``mask`` and a loss on the
    fixed point returning ``(loss, dloss/dx)``."""

    y: np.ndarray
    mask: SamplingMask
    loss_fn: Callable[[np.ndarray], tuple]
    fp_cfg: FixedPointConfig = FixedPointConfig(tol=1e-12, max_iters=5000, solver="anderson")


def forward_solve(p: NetworkParams, y: np.ndarray, mask: SamplingMask,
                  cfg: FixedPointConfig, x0: np.ndarray | None = None) -> FixedPointReport:
    """Fixed point of ``x -> P(G(x))`` starting from the zero-filled data."""
    start = zero_filled(y, mask) if x0 is None else x0
    return solve_fixed_point(start, lambda x: pgd_map(x, lambda z: residual(z, p), mask, y), cfg)


def adjoint_solve(xinf: np.ndarray, p: NetworkParams, mask: SamplingMask, g: np.ndarray,
                  cfg: FixedPointConfig) -> AdjointSolveReport:
    """Solve ``(I - J^T) v = g`` by fixed-point iteration from ``v = g``.

    ``J^T u = J_G(x_inf)^T (I - M) u`` with the network linearized once at
    ``x_inf``. Residuals ``||v - J^T v - g|| / ||g||`` follow the forward
    solver's tol/cap semantics; the returned ``v`` is the last iterate whose
    residual was evaluated. The plain solver is an in-place Neumann
    recursion keeping three grid buffers; ``solver="anderson"`` mixes the
    same map and additionally holds ``2 * anderson_memory`` history grids.
    Either way memory does not grow with the iteration count.
    """
    g = np.asarray(g, dtype=np.complex128)
    gnorm = float(np.linalg.norm(g))
    if gnorm == 0.0:
        return AdjointSolveReport(np.zeros_like(g), np.zeros(1), 1, True)
    jt = input_vjp(xinf, p)
    off = ~mask.keep[:, :, None]
    if cfg.solver == "anderson":
        rep = solve_fixed_point(g.copy(), lambda u: jt(u * off) + g, cfg, scale=gnorm)
        if not rep.converged:
            log.warning("adjoint solve did not converge: residual %.3e after %d iterations",
                        rep.residuals[-1], rep.iters)
        return AdjointSolveReport(rep.solution, rep.residuals, rep.iters, rep.converged)
    v = g.copy()
    buf = np.empty_like(g)
    residuals = []
    converged = False
    for k in range(cfg.max_iters):
        np.multiply(v, off, out=buf)
        w = jt(buf)
        w += g
        np.subtract(w, v, out=buf)
        res = float(np.linalg.norm(buf)) / gnorm
        residuals.append(res)
        if not np.isfinite(res):
            break
        if res <= cfg.tol:
            converged = True
            break
        if k == cfg.max_iters - 1:
            break
        v, w = w, None
    if not converged:
        log.warning("adjoint solve did not converge: residual %.3e after %d iterations",
                    residuals[-1], len(residuals))
    return AdjointSolveReport(v, np.asarray(residuals), len(residuals), converged)


def param_gradient(xinf: np.ndarray, p: NetworkParams, mask: SamplingMask, g: np.ndarray,
                   cfg: FixedPointConfig):
    """Implicit parameter gradient at ``xinf``; returns ``(grad, AdjointSolveReport)``.

    The projection has zero Jacobian on the sampled set, so the adjoint
    solution is masked with ``I - M`` before the parameter VJP.
    """
    rep = adjoint_solve(xinf, p, mask, g, cfg)
    seed = rep.v * ~mask.keep[:, :, None]
    grad = residual_vjp(xinf, p, seed, want_params=True, want_input=False).wrt_params
    return grad, rep


def unrolled_gradient(p: NetworkParams, y: np.ndarray, mask: SamplingMask,
                      loss_fn: Callable, n_steps: int) -> np.ndarray:
    """Gradient of ``loss(F^K(x0))`` by backpropagating through ``K`` stored
    iterates (reference path for the implicit gradient; memory grows with K)."""
    keep = mask.keep[:, :, None]
    xs = [zero_filled(y, mask)]
    for _ in range(n_steps):
        xs.append(pgd_map(xs[-1], lambda z: residual(z, p), mask, y))
    _, v = loss_fn(xs[-1])
    grad = np.zeros(p.size)
    for k in range(n_steps - 1, -1, -1):
        ct = residual_vjp(xs[k], p, np.where(keep, 0.0, v))
        grad += ct.wrt_params
        v = ct.wrt_input
    return grad


@dataclass(frozen=True)
class GradCheckReport:
    """Finite-difference comparison of the implicit gradient.

    ``table`` rows are ``(coord, analytic, finite_diff, rel_err, kink)``.
    ``max_rel_err`` and ``worst`` ignore kink rows, which are listed in
    ``kinks``.
    """

    max_rel_err: float
    worst: int
    table: list
    kinks: tuple
    n_checked: int

    @property
    def kink_fraction(self) -> float:
        return len(self.kinks) / max(self.n_checked, 1)


def _loss_at(problem, p, x0, probe_tol):
    cfg = replace(problem.fp_cfg, tol=min(probe_tol, problem.fp_cfg.tol))
    rep = forward_solve(p, problem.y, problem.mask, cfg, x0=x0)
    # the tighter probe tolerance may sit below the attainable floor
    if rep.final_residual > problem.fp_cfg.tol:
        raise RuntimeError(
            f"fixed point did not converge while probing (residual {rep.final_residual:.2e})")
    loss, _ = problem.loss_fn(rep.solution)
    return loss, rep.solution


def gradient_check(problem: Problem, p: NetworkParams, h: float = 1e-5,
                   coords=None, n_sample: int = 48, seed: int = 0,
                   grad: np.ndarray | None = None, floor: float = 1e-3,
                   probe_tol: float = 1e-14) -> GradCheckReport:
    """Compare :func:`param_gradient` with central differences of the full
    solve-then-loss pipeline.

    All coordinates are probed for models with at most 512 parameters,
    otherwise ``n_sample`` seeded ones. The relative error of coordinate
    ``i`` is ``|a_i - f_i| / max(|f_i|, floor * max|f|)``: coordinates far
    below the largest one are held to an absolute tolerance instead, since
    their central differences sit at the round-off level ``eps |l| / h``.
    A coordinate is a kink when a probe changes the on/off state of any ReLU
    at the fixed point. Probe solves are warm-started at ``x_inf`` and run
    to ``probe_tol`` (tighter than the problem tolerance; the loss error of
    a solve stopped at ``tol`` is amplified by ``1 / (2 h)``). ``grad``
    overrides the analytic gradient (detector tests).
    """
    base = forward_solve(p, problem.y, problem.mask, problem.fp_cfg)
    if not base.converged:
        raise RuntimeError("fixed point did not converge at the base parameters")
    xinf = base.solution
    if grad is None:
        _, g = problem.loss_fn(xinf)
        grad, _ = param_gradient(xinf, p, problem.mask, g, problem.fp_cfg)
    v = p.vector()
    if coords is None:
        if p.size <= 512:
            coords = np.arange(p.size)
        else:
            coords = np.sort(np.random.default_rng(seed).choice(p.size, n_sample, replace=False))
    pattern = activation_pattern(xinf, p)
    fds, kinks = [], []
    for i in coords:
        e = np.zeros_like(v)
        e[i] = h
        pp, pm = p.with_vector(v + e), p.with_vector(v - e)
        lp, xp = _loss_at(problem, pp, xinf, probe_tol)
        lm, xm = _loss_at(problem, pm, xinf, probe_tol)
        fds.append((lp - lm) / (2 * h))
        flip = (np.any(activation_pattern(xp, pp) != pattern)
                or np.any(activation_pattern(xm, pm) != pattern))
        kinks.append(bool(flip))
    fds = np.asarray(fds)
    scale = floor * max(float(np.max(np.abs(fds))), 1e-300)
    table, worst, max_err = [], -1, 0.0
    for i, fd, kink in zip(coords, fds, kinks):
        err = abs(grad[i] - fd) / max(abs(fd), scale)
        table.append((int(i), float(grad[i]), float(fd), float(err), kink))
        if not kink and err > max_err:
            max_err, worst = err, int(i)
    return GradCheckReport(
        max_rel_err=max_err,
        worst=worst,
        table=table,
        kinks=tuple(int(i) for i, k in zip(coords, kinks) if k),
        n_checked=len(coords),
    )
