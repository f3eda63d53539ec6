"""Outer fixed-point loops for the randomized and classical impulse problems.

Both loops alternate a nonlocal step (best post-jump value) with a stopping
solve against that obstacle, starting from the never-intervene cost.
"""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .exceptions import InsufficientData, NoConvergence, RandImpulseError
from .grid_fd import (
    GridFn,
    Grid1D,
    discretize_generator,
    linear_residual,
    solve_feynman_kac,
    solve_obstacle_classical,
    solve_semilinear_stopping,
)
from .model import LambdaPair, ModelSpec
from .nonlocal_op import QuadratureRule, classical_M, jump_gibbs, randomized_M, JumpSearchConfig

logger = logging.getLogger(__name__)

_EXP_CAP = 300.0
COMPARE_WINDOW = (-4.0, 4.0)


def default_grid() -> Grid1D:
    return Grid1D(-8.0, 8.0, 1601)


@dataclass(frozen=True)
class OuterConfig:
    tol_outer: float = 1e-8
    max_outer: int = 200
    tol_newton: float = 1e-10

    def __post_init__(self):
        if not (self.tol_outer > 0 and self.tol_newton > 0 and self.max_outer >= 1):
            raise ValueError("tolerances and max_outer must be positive")


class ContractionFit(NamedTuple):
    q_hat: float
    r_squared: float

    @property
    def flagged(self) -> bool:
        """True when the sequence shows no geometric decay."""
        return not self.q_hat < 1.0


@dataclass
class SolveResult:
    """Converged value function and the diagnostics of the outer loop.

    ``iterates[k]`` is ``sup|psi^{k+1} - psi^k|``; ``increases[k]`` is the largest
    nodewise increase ``max(psi^{k+1} - psi^k)`` over the same step.
    ``pi_star`` is the intervention intensity (randomized) or the indicator of
    the action region (classical).
    """

    psi: GridFn
    m_psi: GridFn
    pi_star: GridFn
    iterates: list
    outer_iters: int
    q_hat: float
    r_squared: float
    residual: float
    psi0: GridFn
    increases: list = field(default_factory=list)
    spec: ModelSpec | None = None
    lambdas: LambdaPair | None = None
    rule: QuadratureRule | None = None
    elapsed_s: float = 0.0

    @property
    def grid(self) -> Grid1D:
        return self.psi.grid

    def jump_law(self, x: float, **kw):
        """Gibbs jump law at ``x`` built from the converged value (randomized solves only)."""
        if self.lambdas is None:
            raise RandImpulseError("jump laws exist only for randomized solutions")
        return jump_gibbs(self.psi, x, self.lambdas.lambda2, self.spec, self.rule, **kw)

    @property
    def continuation(self) -> np.ndarray:
        """Boolean mask of grid nodes where the classical controller waits."""
        return self.pi_star.values == 0.0


def estimate_contraction(iterates) -> ContractionFit:
    """Least-squares geometric rate of successive differences.

    ``iterates[k]`` is taken as ``d_{k+1}``; the fit uses ``d_n`` for ``n >= 2``.

    Raises:
        InsufficientData: fewer than four differences, or a non-positive one.
    """
    d = np.asarray(iterates, dtype=float)
    if d.size < 4:
        raise InsufficientData(f"need at least 4 successive differences, got {d.size}")
    d = d[1:]
    if np.any(~(d > 0)):
        raise InsufficientData("successive differences must be positive to fit a rate")
    n = np.arange(2, d.size + 2, dtype=float)
    y = np.log(d)
    slope, intercept = np.polyfit(n, y, 1)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        warnings.warn("successive differences are constant: no contraction", RuntimeWarning, stacklevel=2)
        return ContractionFit(1.0, float("nan"))
    ss_res = float(np.sum((y - (slope * n + intercept)) ** 2))
    return ContractionFit(float(math.exp(slope)), 1.0 - ss_res / ss_tot)


def intensity(psi: GridFn, m_psi: GridFn, lambda1: float) -> GridFn:
    """Feedback intervention rate ``exp(-(M psi - psi)/lambda1)``."""
    expo = np.minimum(-(m_psi.values - psi.values) / lambda1, _EXP_CAP)
    return psi.with_values(np.exp(expo))


def hjb_residual(psi: GridFn, m_psi: GridFn, spec: ModelSpec, lambda1: float, gen=None) -> float:
    """Sup over interior nodes of ``|(L - r) psi + f - lambda1 exp(-(M psi - psi)/lambda1)|``."""
    if psi.grid != m_psi.grid:
        raise ValueError("psi and m_psi must live on the same grid")
    gen = gen or discretize_generator(spec, psi.grid)
    v = np.asarray(psi.values, dtype=float)
    e = np.exp(np.minimum((v - m_psi.values) / lambda1, _EXP_CAP))
    res = linear_residual(gen, spec, v) - lambda1 * e
    return float(np.max(np.abs(res[1:-1])))


def randomized_step(psi: GridFn, spec: ModelSpec, lambdas: LambdaPair, gen, cfg: OuterConfig,
                    rule: QuadratureRule | None = None):
    """One application of the compound operator; returns ``(new psi, M^lambda2 psi)``."""
    m = psi.with_values(randomized_M(psi, psi.grid.nodes, lambdas.lambda2, spec, rule))
    new = solve_semilinear_stopping(gen, spec, m, lambdas.lambda1, psi, tol=cfg.tol_newton)
    return new, m


def classical_step(psi: GridFn, spec: ModelSpec, gen, cfg: OuterConfig, search: JumpSearchConfig | None = None):
    m_vals, _ = classical_M(psi, psi.grid.nodes, spec, search)
    m = psi.with_values(m_vals)
    new, stop = solve_obstacle_classical(gen, spec, m, tol=cfg.tol_newton, return_policy=True)
    return new, m, stop


def _fit(iterates):
    try:
        return estimate_contraction(iterates)
    except InsufficientData:
        return ContractionFit(float("nan"), float("nan"))


def solve_randomized(spec: ModelSpec, lambdas: LambdaPair, grid: Grid1D | None = None,
                     cfg: OuterConfig | None = None, rule: QuadratureRule | None = None,
                     keep_iterates: list | None = None) -> SolveResult:
    """Fixed point of the randomized wait-then-jump operator by outer iteration.

    Args:
        keep_iterates: if a list is given, every outer iterate ``GridFn`` is appended.

    Raises:
        NoConvergence: ``max_outer`` reached; the history holds the differences.
    """
    grid = grid or default_grid()
    cfg = cfg or OuterConfig()
    start = time.perf_counter()
    gen = discretize_generator(spec, grid)
    psi0 = solve_feynman_kac(gen, spec, grid)
    psi = psi0
    if keep_iterates is not None:
        keep_iterates.append(psi0)
    diffs, ups = [], []
    for n in range(cfg.max_outer):
        new, m = randomized_step(psi, spec, lambdas, gen, cfg, rule)
        delta = new.values - psi.values
        diffs.append(float(np.max(np.abs(delta))))
        ups.append(float(np.max(delta)))
        psi = new
        if keep_iterates is not None:
            keep_iterates.append(new)
        logger.debug("outer %d: d=%.3e", n, diffs[-1])
        if diffs[-1] < cfg.tol_outer:
            break
    else:
        raise NoConvergence(f"outer loop did not reach {cfg.tol_outer:g} in {cfg.max_outer} steps", diffs)
    m = psi.with_values(randomized_M(psi, grid.nodes, lambdas.lambda2, spec, rule))
    fit = _fit(diffs)
    return SolveResult(
        psi=psi,
        m_psi=m,
        pi_star=intensity(psi, m, lambdas.lambda1),
        iterates=diffs,
        outer_iters=len(diffs),
        q_hat=fit.q_hat,
        r_squared=fit.r_squared,
        residual=hjb_residual(psi, m, spec, lambdas.lambda1, gen),
        psi0=psi0,
        increases=ups,
        spec=spec,
        lambdas=lambdas,
        rule=rule,
        elapsed_s=time.perf_counter() - start,
    )


def solve_classical(spec: ModelSpec, grid: Grid1D | None = None, cfg: OuterConfig | None = None,
                    search: JumpSearchConfig | None = None) -> SolveResult:
    """Classical impulse value by alternating the jump infimum and the obstacle solve.

    ``pi_star`` holds 1.0 on the action region and 0.0 on the continuation region.
    ``residual`` is the interior sup of ``|min{(L - r) psi + f, M psi - psi}|``.
    """
    grid = grid or default_grid()
    cfg = cfg or OuterConfig()
    start = time.perf_counter()
    gen = discretize_generator(spec, grid)
    psi0 = solve_feynman_kac(gen, spec, grid)
    psi = psi0
    diffs, ups = [], []
    stop = np.zeros(grid.n, dtype=bool)
    for _ in range(cfg.max_outer):
        new, m, stop = classical_step(psi, spec, gen, cfg, search)
        delta = new.values - psi.values
        diffs.append(float(np.max(np.abs(delta))))
        ups.append(float(np.max(delta)))
        psi = new
        if diffs[-1] < cfg.tol_outer:
            break
    else:
        raise NoConvergence(f"outer loop did not reach {cfg.tol_outer:g} in {cfg.max_outer} steps", diffs)
    m_vals, _ = classical_M(psi, grid.nodes, spec, search)
    m = psi.with_values(m_vals)
    res = np.minimum(linear_residual(gen, spec, psi.values), m.values - psi.values)
    fit = _fit(diffs)
    return SolveResult(
        psi=psi,
        m_psi=m,
        pi_star=psi.with_values(stop.astype(float)),
        iterates=diffs,
        outer_iters=len(diffs),
        q_hat=fit.q_hat,
        r_squared=fit.r_squared,
        residual=float(np.max(np.abs(res[1:-1]))),
        psi0=psi0,
        increases=ups,
        spec=spec,
        elapsed_s=time.perf_counter() - start,
    )


def _trapezoid(y, x):
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)))


def rel_l2_error(approx, reference: GridFn, window=COMPARE_WINDOW) -> float:
    """``||approx - reference||_2 / ||reference||_2`` on the reference nodes inside ``window``.

    ``approx`` may be a ``GridFn`` or any vectorized callable.
    """
    mask = reference.grid.window(*window)
    x = reference.grid.nodes[mask]
    ref = reference.values[mask]
    diff = np.asarray(approx(x), dtype=float) - ref
    return math.sqrt(_trapezoid(diff ** 2, x) / _trapezoid(ref ** 2, x))


def flat_region_width(pi_star: GridFn, frac: float = 0.05, window=COMPARE_WINDOW) -> float:
    """Total length of ``{x : pi*(x) < frac * max pi*}`` inside ``window``.

    Counted as node spacing times the number of qualifying nodes.
    """
    mask = pi_star.grid.window(*window)
    vals = pi_star.values[mask]
    return float(np.count_nonzero(vals < frac * vals.max()) * pi_star.grid.h)


@dataclass
class SweepEntry:
    lambda1: float
    lambda2: float
    rel_l2_error: float = float("nan")
    sup_error: float = float("nan")
    outer_iters: int = 0
    q_hat: float = float("nan")
    lower_bound_margin: float = float("nan")
    error: str | None = None
    result: SolveResult | None = field(default=None, repr=False)

    @property
    def lower_bound_ok(self) -> bool:
        return self.lower_bound_margin >= -1e-6


@dataclass
class SweepReport:
    classical: SolveResult
    entries: list

    CSV_FIELDS = ("lambda1", "lambda2", "rel_l2_error", "sup_error", "outer_iters", "q_hat", "lower_bound_margin")

    def __len__(self):
        return len(self.entries)

    @property
    def rel_errors(self) -> list:
        return [e.rel_l2_error for e in self.entries]

    def rows(self):
        for e in self.entries:
            yield [e.lambda1, e.lambda2, e.rel_l2_error, e.sup_error, e.outer_iters, e.q_hat, e.lower_bound_margin]

    def write_csv(self, fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(self.CSV_FIELDS)
        for row in self.rows():
            w.writerow([v if isinstance(v, int) else format(v, ".17g") for v in row])


def lambda_sweep(spec: ModelSpec, lambdas, grid: Grid1D | None = None, cfg: OuterConfig | None = None,
                 rule: QuadratureRule | None = None, classical: SolveResult | None = None) -> SweepReport:
    """Randomized solves across ``lambdas`` compared with one classical solve.

    ``lower_bound_margin`` is ``min(psi^lambda - psi + lambda1/r)`` over all nodes.
    A failing entry keeps its exception text in ``error`` and the sweep goes on.
    """
    lambdas = list(lambdas)
    if not lambdas:
        raise ValueError("lambda list is empty")
    grid = grid or default_grid()
    classical = classical or solve_classical(spec, grid, cfg)
    ref = classical.psi
    win = grid.window(*COMPARE_WINDOW)
    entries = []
    for lam in lambdas:
        lam = lam if isinstance(lam, LambdaPair) else LambdaPair(*lam)
        entry = SweepEntry(lam.lambda1, lam.lambda2)
        try:
            res = solve_randomized(spec, lam, grid, cfg, rule)
        except RandImpulseError as exc:
            entry.error = f"{type(exc).__name__}: {exc}"
            logger.warning("sweep entry %s failed: %s", lam, exc)
        else:
            entry.result = res
            entry.rel_l2_error = rel_l2_error(res.psi, ref)
            entry.sup_error = float(np.max(np.abs(res.psi.values - ref.values)[win]))
            entry.outer_iters = res.outer_iters
            entry.q_hat = res.q_hat
            entry.lower_bound_margin = float(np.min(res.psi.values - ref.values + lam.lambda1 / spec.discount))
        entries.append(entry)
    return SweepReport(classical, entries)
