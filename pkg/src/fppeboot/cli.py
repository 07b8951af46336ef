"""Command-line entry point.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .errors import NumericalError, ValidationError
from .market import GeneratorSpec, generate_market, load_market

SPEC_HELP = """\
market files : CSV (first line 'budgets,b_1,...,b_n', then one row of values per item)
               or JSON {"n", "t", "budgets": [...], "values": [[...], ...]}
generator    : JSON {"n", "t", "value_dist": {"kind": "uniform", "lo": 0, "hi": 1},
               "paced_fraction": 0.375 | "budgets": [...], "seed": 0}
experiment   : JSON {"generator": {...}, "mode", "method", "d", "B", "R",
               "alpha_nominal", "target", "t_ref", "eta_exponent", "delta_scale", "seed"}
               any of d / generator.t / generator.n / generator.paced_fraction may be lists
"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n\n{SPEC_HELP}")
        sys.exit(2)


def _write(obj, path):
    text = json.dumps(obj, indent=2)
    if path in (None, "-"):
        print(text)
    else:
        with open(path, "w") as fh:
            fh.write(text + "\n")


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
    except OSError as e:
        raise ValidationError(f"{path}: {e.strerror}") from None


def _market(args):
    if args.market:
        return load_market(args.market)
    if args.gen:
        return generate_market(GeneratorSpec.from_dict(_read_json(args.gen)))
    raise ValidationError("give --market or --gen")


def _add_market(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--market", help="market file (.csv or .json)")
    g.add_argument("--gen", help="generator spec JSON")
    p.add_argument("--mode", choices=("lfm", "fppe"), default="fppe")


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="-", help="output JSON path ('-' for stdout)")


def _experiment(args):
    if getattr(args, "spec", None):
        d = _read_json(args.spec)
    else:
        if not args.gen:
            raise ValidationError("give --spec or --gen")
        d = {"generator": _read_json(args.gen)}
    for key, attr in (("mode", "mode"), ("method", "method"), ("d", "d"), ("B", "B"), ("R", "R"),
                      ("t_ref", "t_ref"), ("eta_exponent", "eta_exponent"),
                      ("delta_scale", "delta_scale"), ("seed", "seed"), ("workers", "workers")):
        v = getattr(args, attr, None)
        if v is not None:
            d[key] = v
    return d


def cmd_solve(args):
    from .solver import solve

    res = solve(_market(args), args.mode)
    _write(res.to_dict(), args.out)


def _hist(matrix, prefix, bins):
    if prefix:
        from .harness import write_histograms

        write_histograms(matrix, prefix, bins)


def cmd_bootstrap(args):
    from .harness import ExperimentConfig, bootstrap_instance

    market = _market(args)
    cfg = ExperimentConfig(
        GeneratorSpec(n=market.n, t=market.t, budgets=tuple(market.budgets)),
        mode=args.mode, method=args.method, d=args.d, B=args.B, R=1,
        eta_exponent=args.eta_exponent, delta_scale=args.delta_scale, seed=args.seed,
        workers=args.workers,
    )
    run, res = bootstrap_instance(market, cfg)
    _hist(run.samples, args.hist_prefix, args.bins)
    _write({"equilibrium": res.to_dict(), "bootstrap": run.to_dict()}, args.out)


def cmd_limit_dist(args):
    from .asymptotics import sample_limit_distribution
    from .harness import limit_model_for
    from .resampling import LIMIT, rng_stream
    from .solver import solve

    market = _market(args)
    res = solve(market, args.mode)
    model = limit_model_for(market, res, args.eta_exponent, args.delta_scale)
    draws = sample_limit_distribution(model, args.m, rng_stream(args.seed, LIMIT), args.mode)
    _hist(draws, args.hist_prefix, args.bins)
    _write({"model": model.to_dict(), "samples": draws.tolist()}, args.out)


def cmd_region(args):
    from .asymptotics import capped_eta, estimate_hessian
    from .bootstrap_lfm import default_eps
    from .region import RegionConfig, region_quantile, statistic_T_gamma
    from .solver import solve_fppe

    market = _market(args)
    res = solve_fppe(market)
    cfg = RegionConfig(kappa=args.kappa, alpha=args.alpha, eps=default_eps(market.t, args.d),
                       B=args.B)
    H = estimate_hessian(market, res.beta, capped_eta(market.t, res.beta, args.eta_exponent))
    c = region_quantile(market, res.beta, H, cfg, args.seed)
    if args.query:
        queries = _read_json(args.query)
        if isinstance(queries, dict):
            queries = [queries]
    else:
        queries = [{"beta": res.beta.tolist(), "delta": res.delta.tolist()}]
    kappa = cfg.radius(market.n)
    out = []
    for q in queries:
        beta = np.asarray(q["beta"], dtype=float)
        delta = np.asarray(q["delta"], dtype=float)
        feasible = bool(np.all((beta > 0) & (beta <= 1)) and np.all((delta >= 0) & (delta <= market.budgets)))
        T = statistic_T_gamma(market, beta, delta, kappa) if np.all(beta > 0) else None
        out.append({"beta": beta.tolist(), "delta": delta.tolist(), "T_gamma": T,
                    "member": bool(feasible and T is not None and T <= c)})
    _write({"c_quantile": c, "kappa": kappa, "queries": out}, args.out)


def _grid(d):
    """Expand list-valued grid keys into one experiment dict per cell."""
    import itertools

    g = d["generator"]
    axes = {
        "d": d.get("d", 0.3), "t": g.get("t"), "n": g.get("n"),
        "paced_fraction": g.get("paced_fraction"),
    }
    keys = [k for k, v in axes.items() if isinstance(v, list)]
    combos = itertools.product(*[axes[k] for k in keys]) if keys else [()]
    for combo in combos:
        cell = json.loads(json.dumps(d))
        for k, v in zip(keys, combo):
            if k == "d":
                cell["d"] = v
            else:
                cell["generator"][k] = v
        yield cell


def cmd_coverage(args):
    from .harness import CoverageReport, ExperimentConfig, run_coverage_experiment

    base = _experiment(args)
    if args.alpha is not None:
        base["alpha_nominal"] = args.alpha
    report = CoverageReport()
    for cell in _grid(base):
        report.cells.append(run_coverage_experiment(ExperimentConfig.from_dict(cell)))
    if args.csv:
        report.write_table(args.csv)
    _write(report.to_dict(), args.out)


def cmd_truth(args):
    from .harness import ExperimentConfig, run_true_resampling

    cfg = ExperimentConfig.from_dict(_experiment(args))
    tr = run_true_resampling(cfg)
    _hist(tr.deviations, args.hist_prefix, args.bins)
    _write(tr.to_dict(), args.out)


def cmd_demo_failure(args):
    from .bootstrap_fppe import multinomial_failure_demo

    rep = multinomial_failure_demo(args.t, args.seed, args.B)
    _write(rep.to_dict(), args.out)


def build_parser():
    p = _Parser(prog="fppeboot", description=__doc__.splitlines()[0],
                epilog=SPEC_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("solve", help="solve a market")
    _add_market(s)
    _add_common(s)
    s.set_defaults(func=cmd_solve)

    def stepsizes(q):
        q.add_argument("--d", type=float, default=0.3, help="eps = t^-d")
        q.add_argument("--eta-exponent", type=float, default=1 / 6, help="Hessian step t^-x")
        q.add_argument("--delta-scale", type=float, default=1.0, help="active-set threshold c/sqrt(t)")

    def hist(q):
        q.add_argument("--hist-prefix", help="write per-coordinate histogram CSVs")
        q.add_argument("--bins", type=int, default=30)

    s = sub.add_parser("bootstrap", help="bootstrap the pacing multipliers of a market")
    _add_market(s)
    _add_common(s)
    stepsizes(s)
    hist(s)
    s.add_argument("--method", default="constrained_proximal",
                   choices=("exchangeable", "numerical", "proximal", "constrained_proximal"))
    s.add_argument("--B", type=int, default=200)
    s.set_defaults(func=cmd_bootstrap)

    s = sub.add_parser("limit-dist", help="estimate the limit model and sample it")
    _add_market(s)
    _add_common(s)
    stepsizes(s)
    hist(s)
    s.add_argument("--m", type=int, default=1000, help="number of draws")
    s.set_defaults(func=cmd_limit_dist)

    s = sub.add_parser("region", help="confidence-region quantile and membership queries")
    _add_market(s)
    _add_common(s)
    stepsizes(s)
    s.add_argument("--kappa", type=float, default=None)
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--B", type=int, default=200)
    s.add_argument("--query", help="JSON list of {beta, delta} points")
    s.set_defaults(func=cmd_region)

    s = sub.add_parser("coverage", help="coverage experiment (grid)")
    s.add_argument("--spec", help="experiment JSON")
    s.add_argument("--gen", help="generator spec JSON (when no --spec)")
    s.add_argument("--mode", choices=("lfm", "fppe"))
    s.add_argument("--method", choices=("exchangeable", "numerical", "proximal", "constrained_proximal"))
    s.add_argument("--d", type=float)
    s.add_argument("--B", type=int)
    s.add_argument("--R", type=int)
    s.add_argument("--t-ref", dest="t_ref", type=int)
    s.add_argument("--eta-exponent", type=float)
    s.add_argument("--delta-scale", type=float)
    s.add_argument("--alpha", type=float, help="nominal miscoverage")
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--csv", help="table CSV path")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_coverage)

    s = sub.add_parser("truth", help="true-resampling reference distribution")
    s.add_argument("--spec", help="experiment JSON")
    s.add_argument("--gen", help="generator spec JSON")
    s.add_argument("--mode", choices=("lfm", "fppe"))
    s.add_argument("--R", type=int)
    s.add_argument("--t-ref", dest="t_ref", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)
    hist(s)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_truth)

    s = sub.add_parser("demo-failure", help="multinomial bootstrap failure, one buyer")
    s.add_argument("--t", type=int, default=10_000)
    s.add_argument("--B", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_demo_failure)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ValidationError as e:
        sys.stderr.write(f"error: {e}\n")
        return 2
    except OSError as e:
        sys.stderr.write(f"error: {e.filename}: {e.strerror}\n")
        return 2
    except NumericalError as e:
        sys.stderr.write(f"numerical failure: {e}\n")
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
