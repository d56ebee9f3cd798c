"""Self-supervised training by implicit differentiation, the supervised
variant, and inference.

Self-supervised mode splits each sampled set ``Omega`` into ``Lambda`` (fed
to the network as data consistency) and ``Gamma = Omega \\ Lambda``; the loss
compares the fixed point with the measurements on all of ``Omega``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import IO, Sequence

import numpy as np

from kdeq.deq import forward_solve, param_gradient
from kdeq.fixed_point import FixedPointConfig, FixedPointReport, SamplingMask, project_dc
from kdeq.grid import MetricsTriple, coil_combine_rss, ifft_centered, metrics
from kdeq.hankel import SpecNormConfig, calibrate_filters
from kdeq.networks import NetworkParams, init_generalized, init_sspgd, lipschitz_bound
from kdeq.networks import lipschitz_normalize

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainState",
    "SamplePair",
    "StepRecord",
    "TrainingError",
    "LOG_HEADER",
    "split_mask",
    "make_pair",
    "loss_eval",
    "adam_init",
    "init_params",
    "adam_update",
    "train",
    "Reconstruction",
    "reconstruct",
]

LOG_HEADER = ("epoch", "sample", "step", "loss", "fwd_iters", "bwd_iters", "grad_norm")


class TrainingError(RuntimeError):
    """Raised for non-finite gradients or, under ``on_nonconverged="abort"``,
    for solves that miss their tolerance."""


@dataclass(frozen=True)
class TrainConfig:
    """``epochs`` is the number of passes ``P``; ``max_steps`` optionally
    caps the total number of ADAM steps. ``normalize_every`` re-applies the
    Lipschitz budget every that many steps (0 disables it);
    ``check_every`` > 0 additionally asserts the budget holds."""

    epochs: int = 1
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    rho: float = 0.5
    seed: int = 0
    loss: str = "mse"
    mode: str = "self"
    batch_size: int = 1
    max_steps: int | None = None
    normalize_every: int = 1
    check_every: int = 0
    on_nonconverged: str = "skip"
    backward_tol: float | None = None
    spec_norm: SpecNormConfig = field(default_factory=SpecNormConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if self.loss not in ("mse", "l1l2"):
            raise ValueError(f"unknown loss kind {self.loss!r}")
        if self.mode not in ("self", "supervised"):
            raise ValueError(f"mode must be 'self' or 'supervised', got {self.mode!r}")
        if self.on_nonconverged not in ("skip", "abort"):
            raise ValueError("on_nonconverged must be 'skip' or 'abort'")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class StepRecord:
    epoch: int
    sample: int
    step: int
    loss: float
    fwd_iters: int
    bwd_iters: int
    grad_norm: float

    def line(self, sep: str = "\t") -> str:
        return sep.join([str(self.epoch), str(self.sample), str(self.step), repr(self.loss),
                         str(self.fwd_iters), str(self.bwd_iters), repr(self.grad_norm)])


@dataclass(frozen=True)
class TrainState:
    params: NetworkParams
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    history: tuple = ()

    def losses(self) -> np.ndarray:
        return np.array([rec.loss for rec in self.history])


@dataclass(frozen=True)
class SamplePair:
    """One training item: ``y_omega`` on ``mask_omega``, its ``Lambda``
    subset, and an optional fully sampled reference for supervised mode."""

    y_omega: np.ndarray
    mask_omega: SamplingMask
    mask_lambda: SamplingMask
    ref: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y_omega, dtype=np.complex128)
        if y.shape[:2] != self.mask_omega.shape or self.mask_lambda.shape != self.mask_omega.shape:
            raise ValueError("data and masks disagree in shape")
        if np.any(self.mask_lambda.keep & ~self.mask_omega.keep):
            raise ValueError("Lambda is not a subset of Omega")
        if np.any(self.mask_omega.acs_mask() & ~self.mask_lambda.keep):
            raise ValueError("ACS region must lie inside Lambda")
        if np.any(y[~self.mask_omega.keep] != 0):
            raise ValueError("y_omega has entries outside Omega")
        if self.ref is not None and np.shape(self.ref) != y.shape:
            raise ValueError("reference shape does not match the data")
        object.__setattr__(self, "y_omega", y)

    @property
    def y_lambda(self) -> np.ndarray:
        return np.where(self.mask_lambda.keep[:, :, None], self.y_omega, 0.0 + 0.0j)


def split_mask(mask: SamplingMask, rho: float, seed: int = 0):
    """Split ``Omega`` into ``(Lambda, Gamma)``.

    The ACS region always goes to ``Lambda``; of the remaining sampled
    locations ``round(rho * count)`` are drawn without replacement.
    """
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    acs = mask.acs_mask()
    if np.any(acs & ~mask.keep):
        raise ValueError("ACS region is not inside Omega")
    cand = np.flatnonzero(mask.keep & ~acs)
    n = int(round(rho * cand.size))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(cand, size=n, replace=False) if n < cand.size else cand
    lam = acs.copy().ravel()
    lam[chosen] = True
    lam = lam.reshape(mask.shape)
    gamma = mask.keep & ~lam
    return (SamplingMask(lam, acs=mask.acs, accel=mask.accel, role="lambda"),
            SamplingMask(gamma, accel=mask.accel, role="gamma"))


def make_pair(y: np.ndarray, mask: SamplingMask, rho: float, seed: int = 0,
              ref: np.ndarray | None = None) -> SamplePair:
    """Mask ``y`` to ``Omega`` and draw its ``Lambda`` split."""
    lam, _ = split_mask(mask, rho, seed)
    y_om = np.where(mask.keep[:, :, None], np.asarray(y, dtype=np.complex128), 0.0 + 0.0j)
    return SamplePair(y_om, mask, lam, ref)


def loss_eval(xinf: np.ndarray, target: np.ndarray, mask_eval: SamplingMask | None,
              kind: str = "mse"):
    """Normalized loss on ``mask_eval`` (``None`` means every entry) and its
    cotangent ``dl/dRe + i dl/dIm``.

    ``mse``: ``||M(x - t)||^2 / ||M t||^2``.
    ``l1l2``: ``||M(x - t)||_1 / ||M t||_1 + ||M(x - t)||_2 / ||M t||_2``
    (entrywise complex moduli; the subgradient at a zero residual is 0).
    """
    xinf = np.asarray(xinf, dtype=np.complex128)
    target = np.asarray(target, dtype=np.complex128)
    if xinf.shape != target.shape:
        raise ValueError(f"dimension mismatch: {xinf.shape} vs {target.shape}")
    if mask_eval is None:
        diff = xinf - target
        tm = target
    else:
        keep = mask_eval.keep[:, :, None]
        diff = np.where(keep, xinf - target, 0.0)
        tm = np.where(keep, target, 0.0)
    if kind == "mse":
        den = float(np.sum(np.abs(tm) ** 2))
        if den == 0.0:
            raise ValueError("target has zero norm on the loss mask")
        return float(np.sum(np.abs(diff) ** 2)) / den, (2.0 / den) * diff
    if kind == "l1l2":
        mag = np.abs(diff)
        d1 = float(np.sum(np.abs(tm)))
        d2 = float(np.linalg.norm(tm))
        if d1 == 0.0:
            raise ValueError("target has zero norm on the loss mask")
        n2 = float(np.linalg.norm(diff))
        unit = np.divide(diff, mag, out=np.zeros_like(diff), where=mag > 0)
        cot = unit / d1 + (diff / (n2 * d2) if n2 > 0 else 0.0)
        return float(np.sum(mag)) / d1 + n2 / d2, cot
    raise ValueError(f"unknown loss kind {kind!r}")


def init_params(variant: str, y: np.ndarray, mask: SamplingMask, window=(3, 3),
                r: int | None = None, seed: int = 0, activation: str = "relu",
                hidden: int = 64, spec_norm: SpecNormConfig = SpecNormConfig()) -> NetworkParams:
    """Starting parameters, normalized to the Lipschitz budget on ``y``'s grid.

    SSPGD filters are calibrated from the ACS block of ``y`` when the mask
    has one that holds enough windows, otherwise drawn as a seeded complex
    Gaussian. ``r`` defaults to half the filter length ``d1 d2 Nc``.
    """
    y = np.asarray(y, dtype=np.complex128)
    nc = y.shape[2]
    if variant != "sspgd":
        p = init_generalized(variant, nc, hidden=hidden, seed=seed)
        return lipschitz_normalize(p, spec_norm, y.shape[:2])
    d1, d2 = (window, 1) if np.isscalar(window) else tuple(int(v) for v in window)
    r = max(1, d1 * d2 * nc // 2) if r is None else r
    p = None
    if mask.acs is not None:
        r0, r1, c0, c1 = mask.acs
        try:
            bank = calibrate_filters(y[r0:r1, c0:c1], (d1, d2), r).bank
            p = init_sspgd(bank, activation=activation)
        except ValueError as exc:
            log.info("calibration skipped (%s); using random filters", exc)
    if p is None:
        p = init_sspgd((d1, d2), nc, r, seed=seed, activation=activation)
    return lipschitz_normalize(p, spec_norm, y.shape[:2])


def adam_init(p: NetworkParams) -> TrainState:
    return TrainState(params=p, m=np.zeros(p.size), v=np.zeros(p.size))


def adam_update(state: TrainState, grad: np.ndarray, cfg: TrainConfig, shape=None) -> TrainState:
    """One bias-corrected ADAM step, then re-normalization on cadence.

    ``shape`` is the ``(N1, N2)`` grid the Lipschitz budget is enforced on;
    without it no normalization happens.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.m.shape:
        raise ValueError(f"gradient has shape {grad.shape}, expected {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise TrainingError(
            f"non-finite gradient at step {state.t + 1}: {bad.size} bad entries, first at {bad[0]}")
    t = state.t + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    mhat = m / (1.0 - cfg.beta1 ** t)
    vhat = v / (1.0 - cfg.beta2 ** t)
    theta = state.params.vector() - cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    p = state.params.with_vector(theta)
    if shape is not None and cfg.normalize_every and t % cfg.normalize_every == 0:
        p = lipschitz_normalize(p, cfg.spec_norm, tuple(shape[:2]))
    if shape is not None and cfg.check_every and t % cfg.check_every == 0:
        bound = lipschitz_bound(p, tuple(shape[:2]))
        if bound > 1.0 + 1e-9:
            raise TrainingError(f"Lipschitz budget violated after step {t}: bound {bound:.6f}")
    return replace(state, params=p, m=m, v=v, t=t)


def _sample_terms(s: SamplePair, cfg: TrainConfig):
    """Network DC data/mask and loss target/mask for one sample."""
    if cfg.mode == "self":
        return s.y_lambda, s.mask_lambda, s.y_omega, s.mask_omega
    if s.ref is None:
        raise ValueError("supervised mode needs a reference on every sample")
    return s.y_omega, s.mask_omega, np.asarray(s.ref, dtype=np.complex128), None


def _sample_gradient(s, p, cfg, fp_cfg, bw_cfg):
    y_in, dc_mask, target, loss_mask = _sample_terms(s, cfg)
    if cfg.mode == "self":
        # network input sees Lambda only, the loss sees all of Omega
        assert dc_mask is s.mask_lambda and loss_mask is s.mask_omega
    fw = forward_solve(p, y_in, dc_mask, fp_cfg)
    loss, g = loss_eval(fw.solution, target, loss_mask, cfg.loss)
    if not fw.converged:
        return loss, None, fw.iters, 0, "forward"
    grad, bw = param_gradient(fw.solution, p, dc_mask, g, bw_cfg)
    if not bw.converged:
        return loss, None, fw.iters, bw.iters, "backward"
    return loss, grad, fw.iters, bw.iters, None


def train(samples: Sequence[SamplePair], cfg: TrainConfig, fp_cfg: FixedPointConfig,
          p0: NetworkParams, log_stream: IO[str] | None = None) -> TrainState:
    """Per-sample ADAM over ``cfg.epochs`` passes (mini-batches when
    ``batch_size`` > 1, gradients averaged in sample order).

    Every step appends a :class:`StepRecord` to the state history and, if
    ``log_stream`` is given, writes it as a tab-separated line.
    """
    if not samples and cfg.epochs > 0:
        raise ValueError("no training samples")
    state = adam_init(p0)
    if cfg.epochs == 0:
        return state
    shape = samples[0].y_omega.shape
    bw_cfg = fp_cfg if cfg.backward_tol is None else replace(fp_cfg, tol=cfg.backward_tol)
    if log_stream is not None:
        log_stream.write("\t".join(LOG_HEADER) + "\n")
    history = []
    for epoch in range(cfg.epochs):
        for start in range(0, len(samples), cfg.batch_size):
            if cfg.max_steps is not None and state.t >= cfg.max_steps:
                return replace(state, history=tuple(history))
            batch = range(start, min(start + cfg.batch_size, len(samples)))
            grads, losses, fwi, bwi = [], [], 0, 0
            for i in batch:
                loss, grad, fi, bi, failed = _sample_gradient(samples[i], state.params, cfg,
                                                              fp_cfg, bw_cfg)
                fwi, bwi = fwi + fi, bwi + bi
                if failed is not None:
                    msg = f"{failed} solve did not converge (epoch {epoch}, sample {i})"
                    if cfg.on_nonconverged == "abort":
                        raise TrainingError(msg)
                    log.warning("%s; sample skipped", msg)
                    continue
                grads.append(grad)
                losses.append(loss)
            if not grads:
                continue
            grad = grads[0] if len(grads) == 1 else np.mean(np.stack(grads), axis=0)
            state = adam_update(state, grad, cfg, shape)
            rec = StepRecord(epoch, batch[0], state.t, float(np.mean(losses)), fwi, bwi,
                             float(np.linalg.norm(grad)))
            history.append(rec)
            log.debug("step %d loss %.6e", rec.step, rec.loss)
            if log_stream is not None:
                log_stream.write(rec.line() + "\n")
    return replace(state, history=tuple(history))


@dataclass(frozen=True)
class Reconstruction:
    report: FixedPointReport
    metrics: MetricsTriple | None = None

    @property
    def solution(self) -> np.ndarray:
        return self.report.solution


def reconstruct(y: np.ndarray, mask: SamplingMask, p: NetworkParams, fp_cfg: FixedPointConfig,
                ref: np.ndarray | None = None) -> Reconstruction:
    """Fixed point with data consistency on all of ``Omega``.

    The returned solution carries the measurements on ``Omega`` exactly.
    With ``ref`` (fully sampled k-space) the root-sum-of-squares images are
    compared by :func:`kdeq.grid.metrics`.
    """
    y = np.where(mask.keep[:, :, None], np.asarray(y, dtype=np.complex128), 0.0 + 0.0j)
    rep = forward_solve(p, y, mask, fp_cfg)
    if not rep.converged:
        log.warning("reconstruction did not converge: residual %.3e after %d iterations",
                    rep.final_residual, rep.iters)
    # a damped Anderson mix may round entries on Omega; restore them
    rep = replace(rep, solution=project_dc(rep.solution, mask, y))
    mt = None
    if ref is not None:
        mt = metrics(coil_combine_rss(ifft_centered(ref)), coil_combine_rss(ifft_centered(rep.solution)))
    return Reconstruction(rep, mt)
