"""Command line interface: ``darcytopo optimize|analyze|tune-kappa|check-gradient``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .config import ConfigError, load_config
from .materials import TuningInputs, tune_fluid_permeability
from .problem import CAVITY_KAPPA_F, SpecError

log = logging.getLogger("darcytopo")


def _spec(args):
    spec = load_config(args.config)
    over = {}
    if getattr(args, "resolution", None):
        over["resolution"] = tuple(args.resolution)
    if getattr(args, "iterations", None) is not None:
        over["iterations"] = args.iterations
    if getattr(args, "alpha", None) is not None:
        over["alpha"] = args.alpha
    if getattr(args, "kappa_f", None) is not None:
        over["kappa_f"] = args.kappa_f
    return spec.replace(**over) if over else spec


def cmd_optimize(args):
    from .app import run_optimize

    spec = _spec(args)
    art = run_optimize(spec, args.out, snapshot_every=args.snapshot_every, resume=args.resume,
                       workers=args.threads)
    if not art.ok:
        print(f"error: {art.error}", file=sys.stderr)
        return 1
    res = art.result
    print(f"f = {res.f:.8g}  g = {res.g:+.3e}  iterations = {res.iteration}")
    if args.threshold is not None:
        from .optimizer import threshold_export
        _, frac = threshold_export(res.gamma, args.threshold)
        print(f"solid fraction at threshold {args.threshold}: {frac:.4f}")
    return 0


def cmd_analyze(args):
    from .app import run_analyze

    spec = _spec(args)
    summary, _, _ = run_analyze(spec, args.design, args.out, threshold=args.threshold,
                                workers=args.threads)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_tune_kappa(args):
    if args.table:
        print("alpha      delta_T   kappa_f(computed)  kappa_f(tabulated)")
        for alpha, (kf, dT) in CAVITY_KAPPA_F.items():
            k = tune_fluid_permeability(TuningInputs(H=1.0, L=0.5, delta_T=dT, alpha=alpha))
            print(f"{alpha:<10.0e} {dT:<9g} {k:<18.6g} {kf:g}")
        return 0
    inputs = TuningInputs(H=args.H, L=args.L, delta_T=args.delta_T, alpha=args.alpha_t,
                          g=args.g, nu=args.nu, beta_m=args.beta_m, Pr=args.Pr)
    print(f"{tune_fluid_permeability(inputs):.6g}")
    return 0


def cmd_check_gradient(args):
    from .materials import continuation_schedule
    from .optimizer import Workspace

    spec = _spec(args)
    ws = Workspace(spec, args.threads)
    rng = np.random.default_rng(args.seed if args.seed is not None else spec.seed)
    n = ws.design_index.size
    if n == 0:
        print("no design variables", file=sys.stderr)
        return 2
    gamma = rng.uniform(0.1, 0.9, n)
    it = min(args.at_iteration, max(spec.iterations - 1, 0))
    cont = continuation_schedule(it, max(spec.iterations, 1), spec.stage_length, spec.schedule)
    ev = ws.evaluate(ws.design_field(gamma).full(), cont)
    worst = 0.0
    print(f"{'element':>8} {'adjoint':>16} {'central FD':>16} {'rel. error':>10}")
    for i in rng.choice(n, min(args.samples, n), replace=False):
        fs = []
        for sgn in (1, -1):
            gp = gamma.copy()
            gp[i] += sgn * args.step
            fs.append(ws.evaluate(ws.design_field(gp).full(), cont, ev.state, gradient=False).f)
        fd = (fs[0] - fs[1]) / (2 * args.step)
        err = abs(fd - ev.gradient[i]) / max(abs(fd), 1e-300)
        worst = max(worst, err)
        print(f"{i:>8d} {ev.gradient[i]:>16.9e} {fd:>16.9e} {err:>10.2e}")
    ok = worst < args.tolerance
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAILED'})")
    return 0 if ok else 1


def build_parser():
    p = argparse.ArgumentParser(prog="darcytopo", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", required=True, help="INI file or preset name")
        sp.add_argument("--threads", type=int, default=1, help="assembly worker threads")
        sp.add_argument("--resolution", type=int, nargs=3, metavar=("NX", "NY", "NZ"))
        sp.add_argument("--alpha", type=float, help="override the expansion coefficient")
        sp.add_argument("--kappa-f", type=float, dest="kappa_f")
        if out:
            sp.add_argument("--out", help="output directory")

    o = sub.add_parser("optimize", help="run the topology optimization")
    common(o)
    o.add_argument("--snapshot-every", type=int, default=0, metavar="K")
    o.add_argument("--resume", help="checkpoint to continue from")
    o.add_argument("--threshold", type=float, help="report the solid fraction at this level")
    o.add_argument("--iterations", type=int)
    o.set_defaults(func=cmd_optimize)

    a = sub.add_parser("analyze", help="solve the state for a fixed design")
    common(a)
    a.add_argument("--design", required=True, help=".npy design or checkpoint .npz")
    a.add_argument("--threshold", type=float, help="binarize the design at this level")
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("tune-kappa", help="fictitious fluid permeability")
    t.add_argument("--table", action="store_true", help="recompute the cavity table")
    t.add_argument("--H", type=float, default=1.0)
    t.add_argument("--L", type=float, default=0.5)
    t.add_argument("--delta-T", type=float, dest="delta_T", default=1.0)
    t.add_argument("--alpha", type=float, dest="alpha_t", default=1e3)
    t.add_argument("--g", type=float, default=1.0)
    t.add_argument("--nu", type=float, default=1.0)
    t.add_argument("--beta-m", type=float, dest="beta_m", default=1.0)
    t.add_argument("--Pr", type=float, default=1.0)
    t.set_defaults(func=cmd_tune_kappa)

    c = sub.add_parser("check-gradient", help="adjoint vs central finite differences")
    common(c, out=False)
    c.add_argument("--samples", type=int, default=10)
    c.add_argument("--step", type=float, default=1e-6)
    c.add_argument("--seed", type=int)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--at-iteration", type=int, default=0, dest="at_iteration")
    c.set_defaults(func=cmd_check_gradient)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s: %(message)s")
    if args.command == "optimize" and not args.out:
        print("error: optimize needs --out", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, SpecError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
