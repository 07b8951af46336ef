"""Simulation protocols: reference equilibria, true resampling, bootstrap runs
on generated instances and coverage tables."""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .asymptotics import build_limit_model, capped_eta, estimate_hessian
from .bootstrap_fppe import (
    constrained_proximal_bootstrap,
    numerical_bootstrap_fppe,
    proximal_bootstrap_fppe,
)
from .bootstrap_lfm import (
    default_eps,
    exchangeable_bootstrap,
    numerical_bootstrap_lfm,
    proximal_bootstrap_lfm,
)
from .errors import NumericalError, ValidationError
from .market import GeneratorSpec, MarketInstance, calibrate_budgets
from .resampling import GENERATOR, TRUTH, WeightScheme, rng_stream
from .solver import classify_buyers, default_delta_t, solve

METHODS = ("exchangeable", "numerical", "proximal", "constrained_proximal")


@dataclass
class ExperimentConfig:
    generator: GeneratorSpec
    mode: str = "fppe"
    method: str = "constrained_proximal"
    d: float = 0.3
    B: int = 100
    R: int = 100
    alpha_nominal: float = 0.05
    target: str = "sum_beta"
    t_ref: int = 100_000
    eta_exponent: float = 1 / 6
    delta_scale: float = 1.0
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.generator, dict):
            self.generator = GeneratorSpec.from_dict(self.generator)
        if self.R < 1 or self.B < 1:
            raise ValidationError("R and B must be at least 1")
        if not 0 < self.d < 0.5:
            raise ValidationError("d must lie in (0, 0.5)")
        if self.mode not in ("lfm", "fppe"):
            raise ValidationError("mode must be 'lfm' or 'fppe'")
        if self.method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}")
        if self.target not in ("sum_beta", "per_coordinate"):
            raise ValidationError("target must be 'sum_beta' or 'per_coordinate'")
        if not 0 < self.alpha_nominal < 1:
            raise ValidationError("alpha_nominal must lie in (0, 1)")
        if self.t_ref < 1:
            raise ValidationError("t_ref must be positive")

    def to_dict(self):
        return {
            "generator": self.generator.to_dict(), "mode": self.mode, "method": self.method,
            "d": self.d, "B": self.B, "R": self.R, "alpha_nominal": self.alpha_nominal,
            "target": self.target, "t_ref": self.t_ref, "eta_exponent": self.eta_exponent,
            "delta_scale": self.delta_scale, "seed": self.seed, "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Reference:
    """Large-sample stand-in for the limit market."""

    budgets: np.ndarray
    beta_star: np.ndarray
    delta_star: np.ndarray
    t_ref: int

    def to_dict(self):
        return {"budgets": self.budgets.tolist(), "beta_star": self.beta_star.tolist(),
                "delta_star": self.delta_star.tolist(), "t_ref": self.t_ref}


def _map(fn, items, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


def reference_values(config: ExperimentConfig):
    g = config.generator
    return np.asarray(g.value_dist.sample(rng_stream(g.seed, TRUTH), (config.t_ref, g.n)), float)


def build_reference(config: ExperimentConfig) -> Reference:
    """Solve one ``t_ref``-item market.  With a ``paced_fraction`` rule the
    budgets are calibrated on this sample and then held fixed."""
    g = config.generator
    values = reference_values(config)
    if g.budgets is not None:
        budgets = np.array(g.budgets, dtype=float)
    else:
        budgets = calibrate_budgets(values, g.paced_fraction, rng_stream(g.seed, GENERATOR, 0))
    res = solve(MarketInstance(budgets, values), config.mode)
    return Reference(budgets, res.beta, res.delta, config.t_ref)


def draw_instance(config: ExperimentConfig, budgets, r) -> MarketInstance:
    """Repetition ``r``: fresh ``t``-item sample with the reference budgets."""
    g = config.generator
    values = g.value_dist.sample(rng_stream(g.seed, GENERATOR, r + 1), (g.t, g.n))
    return MarketInstance(budgets, np.asarray(values, dtype=float))


@dataclass
class TruthResult:
    beta_star: np.ndarray
    deviations: np.ndarray
    reference: Reference

    def to_dict(self):
        return {"beta_star": self.beta_star.tolist(), "deviations": self.deviations.tolist(),
                "reference": self.reference.to_dict()}


def run_true_resampling(config: ExperimentConfig, reference: Reference | None = None) -> TruthResult:
    """Rows ``sqrt(t)(beta_gamma - beta*)`` over ``R`` independent instances."""
    ref = reference or build_reference(config)
    t = config.generator.t

    def one(r):
        try:
            beta = solve(draw_instance(config, ref.budgets, r), config.mode).beta
        except NumericalError as e:
            raise type(e)(f"repetition {r}: {e}") from None
        return math.sqrt(t) * (beta - ref.beta_star)

    dev = np.array(_map(one, range(config.R), config.workers))
    return TruthResult(ref.beta_star, dev, ref)


def bootstrap_instance(market: MarketInstance, config: ExperimentConfig, seed=None, result=None):
    """Solve ``market`` and run the configured bootstrap on it."""
    seed = config.seed if seed is None else seed
    res = result or solve(market, config.mode)
    eps = default_eps(market.t, config.d)
    beta = res.beta
    needs_h = config.method in ("proximal", "constrained_proximal")
    H = None
    if needs_h:
        H = estimate_hessian(market, beta, capped_eta(market.t, beta, config.eta_exponent))
    delta_t = default_delta_t(market.t, config.delta_scale)
    if config.mode == "lfm":
        if config.method == "exchangeable":
            return exchangeable_bootstrap(market, beta, WeightScheme.multinomial(), config.B, seed,
                                          workers=config.workers), res
        if config.method == "numerical":
            return numerical_bootstrap_lfm(market, beta, eps, config.B, seed,
                                           workers=config.workers), res
        if config.method == "proximal":
            return proximal_bootstrap_lfm(market, beta, H, eps, config.B, seed), res
        raise ValidationError("constrained_proximal applies to FPPE only")
    if config.method == "exchangeable":
        return exchangeable_bootstrap(market, beta, WeightScheme.multinomial(), config.B, seed,
                                      mode="fppe", workers=config.workers), res
    if config.method == "numerical":
        return numerical_bootstrap_fppe(market, beta, eps, config.B, seed,
                                        workers=config.workers, delta_t=delta_t), res
    if config.method == "proximal":
        return proximal_bootstrap_fppe(market, beta, H, eps, config.B, seed, delta_t=delta_t), res
    return constrained_proximal_bootstrap(market, beta, H, eps, delta_t, config.B, seed), res


def limit_model_for(market, result, eta_exponent=1 / 6, delta_scale=1.0):
    active = classify_buyers(result, default_delta_t(market.t, delta_scale), market.budgets)
    eta = capped_eta(market.t, result.beta, eta_exponent)
    return build_limit_model(market, result.beta, active, eta)


# --------------------------------------------------------------------------
# coverage


@dataclass
class CoverageCell:
    t: int
    n: int
    d: float
    paced_fraction: float | None
    coverage: float
    mean_width: float
    covered: int
    R: int
    runtime: float = 0.0
    per_coordinate: list | None = None

    def to_dict(self, with_runtime=True):
        out = {"t": self.t, "n": self.n, "d": self.d, "paced_fraction": self.paced_fraction,
               "coverage": self.coverage, "mean_width": self.mean_width,
               "covered": self.covered, "R": self.R}
        if self.per_coordinate is not None:
            out["per_coordinate"] = self.per_coordinate
        if with_runtime:
            out["runtime"] = self.runtime
        return out


@dataclass
class CoverageReport:
    cells: list = field(default_factory=list)

    def to_dict(self, with_runtime=True):
        return {"cells": [c.to_dict(with_runtime) for c in self.cells]}

    def write_table(self, path):
        """Rows ``(d, t)``, columns ``(paced_fraction, n)``; entries ``coverage (width)``."""
        cols = sorted({(c.paced_fraction if c.paced_fraction is not None else -1.0, c.n)
                       for c in self.cells})
        rows = sorted({(c.d, c.t) for c in self.cells}, key=lambda r: (-r[0], r[1]))
        lookup = {(c.d, c.t, c.paced_fraction if c.paced_fraction is not None else -1.0, c.n): c
                  for c in self.cells}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["d", "t"] + [f"paced_fraction={a:g} n={n}" for a, n in cols])
            for d, t in rows:
                line = [f"{d:g}", t]
                for a, n in cols:
                    c = lookup.get((d, t, a, n))
                    line.append("" if c is None else f"{c.coverage:.2f} ({c.mean_width:.2f})")
                w.writerow(line)


def percentile_interval(samples, level=0.95):
    lo = 100 * (1 - level) / 2
    return np.percentile(samples, [lo, 100 - lo], axis=0)


def run_coverage_experiment(config: ExperimentConfig, reference: Reference | None = None) -> CoverageCell:
    """``R`` repetitions of: draw an instance, bootstrap it, form the
    percentile interval of the bootstrap multipliers and check whether it
    covers the reference value."""
    start = time.perf_counter()
    ref = reference or build_reference(config)
    level = 1 - config.alpha_nominal

    def one(r):
        market = draw_instance(config, ref.budgets, r)
        run, _ = bootstrap_instance(market, config, seed=config.seed * 100_003 + r)
        raw = run.raw()
        if config.target == "sum_beta":
            lo, hi = percentile_interval(raw.sum(axis=1), level)
            truth = ref.beta_star.sum()
            return np.array([lo <= truth <= hi]), np.array([hi - lo])
        lo, hi = percentile_interval(raw, level)
        return (lo <= ref.beta_star) & (ref.beta_star <= hi), hi - lo

    out = _map(one, range(config.R), config.workers)
    hits = np.array([o[0] for o in out])
    widths = np.array([o[1] for o in out])
    g = config.generator
    per = None
    if config.target == "per_coordinate":
        per = hits.mean(axis=0).tolist()
    covered = int(hits.all(axis=1).sum())
    return CoverageCell(
        t=g.t, n=g.n, d=config.d, paced_fraction=g.paced_fraction,
        coverage=covered / config.R, mean_width=float(widths.mean()), covered=covered, R=config.R,
        runtime=time.perf_counter() - start, per_coordinate=per,
    )


def run_coverage_grid(configs) -> CoverageReport:
    return CoverageReport([run_coverage_experiment(c) for c in configs])


# --------------------------------------------------------------------------
# histogram output


def histogram_rows(samples, bins=30):
    samples = np.asarray(samples, dtype=float)
    lo, hi = float(samples.min()), float(samples.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(samples, bins=bins, range=(lo, hi))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]


def write_histogram_csv(samples, path, bins=30):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "count"])
        for row in histogram_rows(samples, bins):
            w.writerow([format(row[0], ".17g"), format(row[1], ".17g"), row[2]])


def write_histograms(matrix, prefix, bins=30):
    """One CSV per coordinate: ``{prefix}_coord{i}.csv``."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    paths = []
    for i in range(matrix.shape[1]):
        p = f"{prefix}_coord{i}.csv"
        write_histogram_csv(matrix[:, i], p, bins)
        paths.append(p)
    return paths
