"""Command-line interface: ``kdeq <subcommand> [flags]``.

Exit status is 0 on success, 2 on usage errors and 1 on runtime failures.
``--config FILE`` reads ``key = value`` lines (``#`` starts a comment);
keys are flag names without the leading dashes and explicit flags win over
the file. ``KDEQ_LOG`` selects ``quiet`` (default), ``info`` or ``debug``
logging on stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from kdeq import io
from kdeq.checks import SUITES, run_suite
from kdeq.fixed_point import FixedPointConfig, SamplingMask
from kdeq.grid import coil_combine_rss, ifft_centered
from kdeq.hankel import SpecNormConfig, calibrate_filters
from kdeq.networks import VARIANTS, init_sspgd, lipschitz_normalize
from kdeq.report import eval_report
from kdeq.synth import MASK_KINDS, HarmonicSpec, MaskSpec, add_noise, gen_harmonics, gen_mask
from kdeq.synth import random_modes

log = logging.getLogger("kdeq")

_LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    """Bad invocation detected after argparse (exit 2)."""


# -- helpers --------------------------------------------------------------------

def _load(path, magic):
    return io.load(path, expect=magic)


def _fp_config(a) -> FixedPointConfig:
    return FixedPointConfig(tol=a.tol, max_iters=a.max_iters, solver=a.solver,
                            anderson_memory=a.anderson_memory)


def _window(values):
    if len(values) == 1:
        return (values[0], 1)
    if len(values) == 2:
        return tuple(values)
    raise UsageError(f"--window takes one or two sizes, got {len(values)}")


# -- subcommands ------------------------------------------------------------------

def cmd_gen(a):
    dims = tuple(a.dims)
    rng = np.random.default_rng(a.modes_seed if a.modes_seed is not None else a.seed)
    modes = random_modes(a.rank, dims, rng)
    x = gen_harmonics(HarmonicSpec(dims, modes, seed=a.seed))
    if a.truth_out:
        io.save(x, a.truth_out, a.dtype)
    y = add_noise(x, a.noise, seed=a.seed + 1) if a.noise > 0 else x
    io.save(y, a.out, a.dtype)
    print("modes\t" + " ".join(f"{k1},{k2}" for k1, k2 in modes))
    return 0


def cmd_mask(a):
    acs = a.acs[0] if len(a.acs) == 1 else tuple(a.acs)
    m = gen_mask(MaskSpec(a.kind, a.accel, acs, seed=a.seed, density=a.density), tuple(a.dims))
    io.save(m, a.out)
    print(f"sampled\t{m.count}\t{m.count / m.keep.size:.6f}")
    return 0


def cmd_calibrate(a):
    y = _load(a.input, "CKS1")
    m = _load(a.mask, "MSK1")
    if m.acs is None:
        raise UsageError("mask has no ACS region to calibrate from")
    r0, r1, c0, c1 = m.acs
    res = calibrate_filters(y[r0:r1, c0:c1], _window(a.window), a.filters)
    io.save(res.bank, a.out)
    if a.params_out:
        p = init_sspgd(res.bank, eta=a.eta, activation=a.activation)
        io.save(lipschitz_normalize(p, SpecNormConfig(epsilon=a.epsilon), y.shape[:2]), a.params_out)
    print(f"residual\t{res.residual:.6e}")
    print(f"suggested_r\t{res.suggested_r}")
    print("singular_values\t" + " ".join(f"{s:.6e}" for s in res.singular_values))
    if res.flagged:
        print("flagged\t" + " ".join(str(k) for k in res.flagged))
    return 0


def cmd_train(a):
    from kdeq.train import TrainConfig, init_params, make_pair, train

    mask = _load(a.mask, "MSK1")
    grids = [_load(path, "CKS1") for path in a.data]
    samples = [make_pair(g, mask, a.rho, seed=a.seed + i, ref=g if a.mode == "supervised" else None)
               for i, g in enumerate(grids)]
    sn = SpecNormConfig(epsilon=a.epsilon)
    if a.init:
        p0 = _load(a.init, "PRM1")
    else:
        first = samples[0]
        p0 = init_params(a.variant, first.y_omega, mask, _window(a.window), a.filters,
                         seed=a.seed, activation=a.activation, hidden=a.hidden, spec_norm=sn)
    cfg = TrainConfig(epochs=a.epochs, lr=a.lr, rho=a.rho, seed=a.seed, loss=a.loss, mode=a.mode,
                      batch_size=a.batch_size, max_steps=a.max_steps,
                      on_nonconverged=a.on_nonconverged, spec_norm=sn)
    if a.log:
        with open(a.log, "w") as fh:
            state = train(samples, cfg, _fp_config(a), p0, log_stream=fh)
    else:
        state = train(samples, cfg, _fp_config(a), p0)
    io.save(state.params, a.out)
    losses = state.losses()
    if losses.size:
        print(f"steps\t{state.t}\tloss0\t{losses[0]:.6e}\tfinal\t{losses[-1]:.6e}")
    else:
        print("steps\t0")
    return 0


def cmd_recon(a):
    from kdeq.train import reconstruct

    y = _load(a.input, "CKS1")
    mask = _load(a.mask, "MSK1")
    p = _load(a.params, "PRM1")
    ref = _load(a.ref, "CKS1") if a.ref else None
    rec = reconstruct(y, mask, p, _fp_config(a), ref=ref)
    io.save(rec.solution, a.out, a.dtype)
    rep = rec.report
    line = f"iters\t{rep.iters}\tconverged\t{int(rep.converged)}\tresidual\t{rep.final_residual:.6e}"
    if rec.metrics is not None:
        m = rec.metrics
        line += f"\tnmse\t{m.nmse:.6e}\tpsnr\t{m.psnr:.4f}\tssim\t{m.ssim:.6f}"
    print(line)
    return 0 if rep.converged else 1


def cmd_eval(a):
    if len(a.ref) != len(a.rec):
        raise UsageError(f"{len(a.ref)} references but {len(a.rec)} reconstructions")
    pairs = []
    for rp, xp in zip(a.ref, a.rec):
        ref, rec = _load(rp, "CKS1"), _load(xp, "CKS1")
        pairs.append((coil_combine_rss(ifft_centered(ref)), coil_combine_rss(ifft_centered(rec))))
    sep = "," if a.format == "csv" else "\t"
    if a.out:
        with open(a.out, "w") as fh:
            eval_report(pairs, fh, sep)
    else:
        eval_report(pairs, sys.stdout, sep)
    return 0


def cmd_check(a):
    names = list(SUITES) if a.suite == "all" else [a.suite]
    failed = 0
    for name in names:
        results = run_suite(name)
        n_ok = sum(ok for _, ok, _ in results)
        for check, ok, err in results:
            if not ok or a.verbose:
                print(f"{'PASS' if ok else 'FAIL'}\t{name}\t{check}" + (f"\t{err}" if err else ""))
        print(f"suite {name}: {n_ok}/{len(results)} passed")
        failed += len(results) - n_ok
    return 0 if failed == 0 else 1


def cmd_gradcheck(a):
    from kdeq.deq import Problem, gradient_check
    from kdeq.networks import init_generalized
    from kdeq.train import loss_eval

    dims = tuple(a.dims)
    rng = np.random.default_rng(a.seed)
    x = gen_harmonics(HarmonicSpec(dims, random_modes(a.rank, dims, rng), seed=a.seed))
    x = add_noise(x, 0.05, seed=a.seed + 1)
    mask = gen_mask(MaskSpec("2d-random", 2.0, 4, seed=a.seed), dims[:2])
    y = np.where(mask.keep[:, :, None], x, 0)
    sn = SpecNormConfig(epsilon=a.epsilon)
    if a.variant == "sspgd":
        p = init_sspgd(_window(a.window), dims[2], a.filters, seed=a.seed, activation=a.activation)
    else:
        p = init_generalized(a.variant, dims[2], hidden=a.hidden, seed=a.seed)
    p = lipschitz_normalize(p, sn, dims[:2])
    fp = FixedPointConfig(tol=a.tol, max_iters=a.max_iters, solver="anderson")
    problem = Problem(y, mask, lambda z: loss_eval(z, x, None), fp)
    rep = gradient_check(problem, p, h=a.h, n_sample=a.coords, seed=a.seed)
    print("coord\tanalytic\tfinite_diff\trel_err\tkink")
    for i, an, fd, err, kink in rep.table:
        print(f"{i}\t{an:.10e}\t{fd:.10e}\t{err:.3e}\t{int(kink)}")
    print(f"max_rel_err\t{rep.max_rel_err:.3e}\tkinks\t{len(rep.kinks)}/{rep.n_checked}")
    return 0 if rep.max_rel_err <= a.threshold else 1


# -- parser -----------------------------------------------------------------------

def _solver_flags(p, tol=1e-8, max_iters=1000):
    p.add_argument("--solver", choices=("plain", "anderson"), default="anderson")
    p.add_argument("--tol", type=float, default=tol)
    p.add_argument("--max-iters", type=int, default=max_iters)
    p.add_argument("--anderson-memory", type=int, default=5)


def _net_flags(p):
    p.add_argument("--variant", choices=VARIANTS, default="sspgd")
    p.add_argument("--window", type=int, nargs="+", default=[3, 3])
    p.add_argument("--filters", type=int, default=None, help="number of null-space filters r")
    p.add_argument("--activation", choices=("relu", "identity"), default="relu")
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--epsilon", type=float, default=0.1)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", metavar="FILE", help="key = value defaults for this command")

    parser = argparse.ArgumentParser(prog="kdeq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("gen", parents=[common], help="synthetic harmonic k-space")
    p.add_argument("--dims", type=int, nargs=3, required=True, metavar=("N1", "N2", "NC"))
    p.add_argument("--rank", type=int, default=2)
    p.add_argument("--modes-seed", type=int, default=None,
                   help="seed for the shared modes (defaults to --seed)")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.add_argument("--truth-out")
    p.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("mask", parents=[common], help="Cartesian sampling mask")
    p.add_argument("--dims", type=int, nargs=2, required=True, metavar=("N1", "N2"))
    p.add_argument("--kind", choices=MASK_KINDS, default="2d-random")
    p.add_argument("--accel", type=float, default=4.0)
    p.add_argument("--acs", type=int, nargs="+", default=[0])
    p.add_argument("--density", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("calibrate", parents=[common], help="null-space filters from the ACS block")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--window", type=int, nargs="+", default=[3, 3])
    p.add_argument("--filters", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--params-out")
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--activation", choices=("relu", "identity"), default="relu")
    p.add_argument("--epsilon", type=float, default=0.1)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train", parents=[common], help="train network parameters")
    p.add_argument("--data", nargs="+", required=True, help="k-space grid files")
    p.add_argument("--mask", required=True)
    p.add_argument("--init", help="starting parameter file")
    _net_flags(p)
    p.add_argument("--mode", choices=("self", "supervised"), default="self")
    p.add_argument("--loss", choices=("mse", "l1l2"), default="mse")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--on-nonconverged", choices=("skip", "abort"), default="skip")
    _solver_flags(p)
    p.add_argument("--log", help="tab-separated training log")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("recon", parents=[common], help="reconstruct undersampled k-space")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ref")
    p.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    _solver_flags(p)
    p.set_defaults(func=cmd_recon)

    p = sub.add_parser("eval", parents=[common], help="NMSE/PSNR/SSIM table")
    p.add_argument("--ref", nargs="+", required=True)
    p.add_argument("--rec", nargs="+", required=True)
    p.add_argument("--format", choices=("tsv", "csv"), default="tsv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", parents=[common], help="built-in invariant suites")
    p.add_argument("--suite", choices=list(SUITES) + ["all"], default="all")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--dims", type=int, nargs=3, default=[16, 16, 2], metavar=("N1", "N2", "NC"))
    p.add_argument("--rank", type=int, default=2)
    _net_flags(p)
    p.set_defaults(filters=8, hidden=8)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--coords", type=int, default=48, help="coordinates sampled for large models")
    p.add_argument("--threshold", type=float, default=1e-4)
    _solver_flags(p, tol=1e-12, max_iters=5000)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _config_tokens(path: str, sub: argparse.ArgumentParser) -> list[str]:
    """Turn ``key = value`` lines into flag tokens for ``sub``."""
    by_dest = {}
    for action in sub._actions:
        for opt in action.option_strings:
            if opt.startswith("--"):
                by_dest[opt[2:]] = action
    tokens = []
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("_", "-")
        action = by_dest.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        if action.nargs == 0:
            if value.lower() in ("1", "true", "yes", "on"):
                tokens.append(f"--{key}")
            elif value.lower() not in ("0", "false", "no", "off"):
                raise UsageError(f"{path}:{n}: {key} expects a boolean")
            continue
        tokens.append(f"--{key}")
        tokens.extend(value.replace(",", " ").split() if action.nargs else [value])
    return tokens


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _parse(argv):
    parser = build_parser()
    choices = parser._subparsers._group_actions[0].choices
    path = _config_path(argv[1:])
    if path is None or not argv or argv[0] not in choices:
        return parser.parse_args(argv)
    try:
        tokens = _config_tokens(path, choices[argv[0]])
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from exc
    # file values first so that explicit flags override them; the file may
    # also supply required flags
    return parser.parse_args([argv[0]] + tokens + list(argv[1:]))


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    level = os.environ.get("KDEQ_LOG", "quiet").lower()
    logging.basicConfig(level=_LOG_LEVELS.get(level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        args = _parse(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    except UsageError as exc:
        print(f"kdeq: error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"kdeq {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"kdeq {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
