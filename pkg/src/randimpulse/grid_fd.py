"""Uniform-grid discretization of the generator and the three elementary solves.

The generator ``L v = b v' + sigma^2/2 v''`` is discretized with upwind first
differences and central second differences, so every assembled system
``(L - r - diag(c)) v = rhs`` with ``c >= 0`` is a (negated) M-matrix.

Boundary rows drop the second derivative.  When the drift points into the
domain the one-sided upwind difference is used; when it points outward the
slope is frozen at the never-intervene asymptotic slope ``f'/r`` clamped to
``+-L_f/(r-G)``, which enters as a constant term.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import solve_banded

from .exceptions import InvalidSpec, NoConvergence, SingularSystem
from .model import ModelSpec, eval_b, eval_f, eval_sigma

logger = logging.getLogger(__name__)

__all__ = [
    "Grid1D",
    "GridFn",
    "DiscreteGenerator",
    "discretize_generator",
    "solve_feynman_kac",
    "solve_semilinear_stopping",
    "solve_obstacle_classical",
]

# exp() argument cap; keeps Newton iterates finite far from the solution
_EXP_CAP = 300.0


@dataclass(frozen=True)
class Grid1D:
    x_min: float
    x_max: float
    n: int

    def __post_init__(self):
        if not (math.isfinite(self.x_min) and math.isfinite(self.x_max)) or self.x_max <= self.x_min:
            raise InvalidSpec(f"need x_min < x_max, got [{self.x_min}, {self.x_max}]")
        if int(self.n) < 3:
            raise InvalidSpec(f"need at least 3 nodes, got {self.n}")
        object.__setattr__(self, "n", int(self.n))

    @property
    def h(self) -> float:
        return (self.x_max - self.x_min) / (self.n - 1)

    @cached_property
    def nodes(self) -> np.ndarray:
        x = np.linspace(self.x_min, self.x_max, self.n)
        x.flags.writeable = False
        return x

    def window(self, lo: float, hi: float) -> np.ndarray:
        """Boolean mask of nodes inside ``[lo, hi]`` (with a half-ulp of slack)."""
        x = self.nodes
        eps = 1e-9 * self.h
        return (x >= lo - eps) & (x <= hi + eps)


@dataclass
class GridFn:
    """Values on a :class:`Grid1D` with a linear interpolation/extrapolation contract.

    Between nodes the function is the piecewise-linear interpolant.  Beyond the
    grid it continues linearly with the one-sided boundary slope, clamped to
    ``+-slope_clamp`` when a clamp is given.
    """

    grid: Grid1D
    values: np.ndarray
    slope_clamp: float | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n,):
            raise InvalidSpec(f"expected {self.grid.n} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidSpec("GridFn values must be finite")
        self.values = v

    def boundary_slopes(self):
        v, h = self.values, self.grid.h
        left = (v[1] - v[0]) / h
        right = (v[-1] - v[-2]) / h
        if self.slope_clamp is not None:
            c = self.slope_clamp
            left, right = float(np.clip(left, -c, c)), float(np.clip(right, -c, c))
        return left, right

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        g, v = self.grid, self.values
        out = np.interp(x, g.nodes, v)
        if x.size and (x.min() < g.x_min or x.max() > g.x_max):
            sl, sr = self.boundary_slopes()
            out = np.where(x < g.x_min, v[0] + sl * (x - g.x_min), out)
            out = np.where(x > g.x_max, v[-1] + sr * (x - g.x_max), out)
        return out if out.ndim else float(out)

    def with_values(self, values) -> "GridFn":
        return GridFn(self.grid, values, self.slope_clamp)

    def sup_diff(self, other: "GridFn", window=None) -> float:
        d = np.abs(self.values - other.values)
        if window is not None:
            d = d[self.grid.window(*window)]
        return float(d.max())

    def to_csv(self, path, name="value"):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", name])
            for x, v in zip(self.grid.nodes, self.values):
                w.writerow([f"{x:.17g}", f"{v:.17g}"])

    @classmethod
    def from_csv(cls, path, slope_clamp=None) -> "GridFn":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        x, v = data[:, 0], data[:, 1]
        grid = Grid1D(float(x[0]), float(x[-1]), len(x))
        if not np.allclose(grid.nodes, x, rtol=0, atol=1e-9 * max(1.0, abs(grid.h))):
            raise InvalidSpec(f"{path}: abscissae are not a uniform grid")
        return cls(grid, v, slope_clamp)


@dataclass(frozen=True)
class DiscreteGenerator:
    """Tridiagonal realization ``(L v)_i = sub_i v_{i-1} + diag_i v_i + sup_i v_{i+1} + const_i``.

    ``sub[0]`` and ``sup[-1]`` are unused and kept at zero.
    """

    grid: Grid1D
    sub: np.ndarray
    diag: np.ndarray
    sup: np.ndarray
    const: np.ndarray

    def apply(self, v):
        v = np.asarray(v, dtype=float)
        out = self.diag * v + self.const
        out[1:] += self.sub[1:] * v[:-1]
        out[:-1] += self.sup[:-1] * v[1:]
        return out

    def banded(self, shift=0.0):
        """Banded storage of ``L - diag(shift)`` (without ``const``) for ``solve_banded``."""
        n = self.grid.n
        ab = np.zeros((3, n))
        ab[0, 1:] = self.sup[:-1]
        ab[1] = self.diag - shift
        ab[2, :-1] = self.sub[1:]
        return ab

    def abs_apply(self, v):
        """``|L| |v|`` without the constant, used to scale residual tolerances."""
        v = np.abs(np.asarray(v, dtype=float))
        out = np.abs(self.diag) * v
        out[1:] += np.abs(self.sub[1:]) * v[:-1]
        out[:-1] += np.abs(self.sup[:-1]) * v[1:]
        return out


def _boundary_slope(spec: ModelSpec, x: float, side: int) -> float:
    cap = spec.value_slope_bound
    r = spec.discount
    raw = spec.running_cost.derivative(x, side) / r if r > 0 else 0.0
    return float(np.clip(raw, -cap, cap)) if math.isfinite(cap) else raw


def discretize_generator(spec: ModelSpec, grid: Grid1D) -> DiscreteGenerator:
    x, h = grid.nodes, grid.h
    b = np.broadcast_to(np.asarray(eval_b(spec, x), dtype=float), x.shape)
    s2 = np.broadcast_to(np.asarray(eval_sigma(spec, x), dtype=float) ** 2, x.shape)
    bp, bm = np.maximum(b, 0.0), np.maximum(-b, 0.0)
    sub = s2 / (2 * h * h) + bm / h
    sup = s2 / (2 * h * h) + bp / h
    diag = -(sub + sup)
    const = np.zeros_like(x)

    sub[0] = sup[0] = 0.0
    if b[0] > 0:
        sup[0] = b[0] / h
    else:
        const[0] = b[0] * _boundary_slope(spec, x[0], -1)
    diag[0] = -sup[0]

    sub[-1] = sup[-1] = 0.0
    if b[-1] < 0:
        sub[-1] = -b[-1] / h
    else:
        const[-1] = b[-1] * _boundary_slope(spec, x[-1], +1)
    diag[-1] = -sub[-1]
    return DiscreteGenerator(grid, sub, diag, sup, const)


def _slope_clamp(spec):
    c = spec.value_slope_bound
    return c if math.isfinite(c) else None


def _solve(ab, rhs):
    try:
        v = solve_banded((1, 1), ab, rhs, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularSystem(str(exc)) from exc
    if not np.all(np.isfinite(v)):
        raise SingularSystem("non-finite solution of banded system")
    return v


def linear_residual(gen: DiscreteGenerator, spec: ModelSpec, v) -> np.ndarray:
    """``(L - r) v + f`` on every node."""
    f = np.broadcast_to(eval_f(spec, gen.grid.nodes), v.shape)
    return gen.apply(v) - spec.discount * v + f


def solve_feynman_kac(gen: DiscreteGenerator, spec: ModelSpec, grid: Grid1D | None = None) -> GridFn:
    """Never-intervene cost: solve ``(L - r) v + f = 0``.

    The residual is checked relative to ``|L - r||v| + |f|`` at ``1e-12``;
    an absolute ``1e-12`` is below round-off for values of order ``1/r``.
    """
    grid = grid or gen.grid
    r = spec.discount
    if not r > 0:
        raise SingularSystem(f"discount must be positive, got {r}")
    f = np.broadcast_to(np.asarray(eval_f(spec, grid.nodes), dtype=float), (grid.n,))
    v = _solve(gen.banded(r), -(f + gen.const))
    res = linear_residual(gen, spec, v)
    scale = gen.abs_apply(v) + r * np.abs(v) + np.abs(f) + np.abs(gen.const)
    rel = float(np.max(np.abs(res) / np.maximum(scale, 1e-300)))
    if rel >= 1e-12:
        raise SingularSystem(f"Feynman-Kac residual {rel:.3g} above 1e-12")
    return GridFn(grid, v, _slope_clamp(spec))


def semilinear_residual(gen, spec, g, v, lambda1):
    """``(L - r) v + f - lambda1 exp(-(g - v)/lambda1)`` on every node."""
    e = np.exp(np.minimum((v - g) / lambda1, _EXP_CAP))
    return linear_residual(gen, spec, v) - lambda1 * e


def solve_semilinear_stopping(
    gen: DiscreteGenerator,
    spec: ModelSpec,
    g: GridFn,
    lambda1: float,
    init: GridFn,
    tol: float = 1e-10,
    max_newton: int = 100,
    history: list | None = None,
) -> GridFn:
    """Randomized stopping against obstacle ``g``: damped Newton on the semilinear equation.

    Each Newton step solves ``(L - r - diag(e)) w = -f - const + lambda1 e - e v``
    with ``e = exp((v - g)/lambda1)``, an M-matrix system.  The step is halved
    (at most 30 times) until the sup-residual decreases; if no halving helps the
    full step is kept, since the Newton map here is also a policy-iteration step
    and converges monotonically.  The initial guess is capped at
    ``g + lambda1 log(1 + max|f|/lambda1)``.

    Args:
        history: if given, receives the sup-residual after every iterate.
    """
    if not lambda1 > 0:
        raise InvalidSpec(f"lambda1 must be positive, got {lambda1}")
    gv = np.asarray(g.values, dtype=float)
    f = np.asarray(eval_f(spec, gen.grid.nodes), dtype=float) * np.ones(gen.grid.n)
    # Far above the obstacle Newton only gains lambda1 per step, so start at or
    # below the a-priori cap g + lambda1 log(1 + |f|/lambda1).
    cap = gv + lambda1 * math.log1p(float(np.max(np.abs(f))) / lambda1)
    v = np.minimum(np.asarray(init.values, dtype=float), cap)
    r = spec.discount
    res = semilinear_residual(gen, spec, gv, v, lambda1)
    norm = float(np.max(np.abs(res)))
    hist = [norm]
    for _ in range(max_newton):
        if norm < tol:
            break
        e = np.exp(np.minimum((v - gv) / lambda1, _EXP_CAP))
        rhs = -f - gen.const + lambda1 * e - e * v
        w = _solve(gen.banded(r + e), rhs)
        step = w - v
        t = 1.0
        for _ in range(31):
            cand = v + t * step
            cres = semilinear_residual(gen, spec, gv, cand, lambda1)
            cnorm = float(np.max(np.abs(cres)))
            if np.isfinite(cnorm) and cnorm < norm:
                break
            t *= 0.5
        else:
            cand = w
            cres = semilinear_residual(gen, spec, gv, cand, lambda1)
            cnorm = float(np.max(np.abs(cres)))
        v, res, norm = cand, cres, cnorm
        hist.append(norm)
    if history is not None:
        history.extend(hist)
    if not norm < tol:
        raise NoConvergence(f"Newton stopped at residual {norm:.3g} after {max_newton} steps", hist)
    return GridFn(gen.grid, v, _slope_clamp(spec))


def obstacle_residual(gen, spec, g, v):
    return np.minimum(linear_residual(gen, spec, v), np.asarray(g) - v)


def solve_obstacle_classical(
    gen: DiscreteGenerator,
    spec: ModelSpec,
    g: GridFn,
    tol: float = 1e-10,
    max_iter: int | None = None,
    return_policy: bool = False,
):
    """Classical stopping against obstacle ``g``: Howard iteration on ``min{(L-r)v+f, g-v} = 0``.

    Stop rows are identity rows ``v_i = g_i``; continuation rows are rows of
    ``L - r``.  Terminates when the stop set is unchanged.

    Returns:
        The solution ``GridFn``; with ``return_policy`` also the boolean stop mask.
    """
    n = gen.grid.n
    max_iter = 10 * n if max_iter is None else max_iter
    gv = np.asarray(g.values, dtype=float)
    f = np.asarray(eval_f(spec, gen.grid.nodes), dtype=float) * np.ones(n)
    r = spec.discount
    base = gen.banded(r)
    stop = np.zeros(n, dtype=bool)
    seen = 0
    while True:
        ab = base.copy()
        rhs = -(f + gen.const)
        idx = np.flatnonzero(stop)
        ab[1, idx] = 1.0
        rhs[idx] = gv[idx]
        # zero the off-diagonals of stop rows (upper band holds A[i, i+1] at [0, i+1])
        ab[0, idx[idx + 1 < n] + 1] = 0.0
        ab[2, idx[idx >= 1] - 1] = 0.0
        v = _solve(ab, rhs)
        cont = linear_residual(gen, spec, v)
        new_stop = (gv - v) < cont
        # keep ties in their current state so the iteration terminates
        tie = np.isclose(gv - v, cont, rtol=0, atol=1e-14 * (1 + np.abs(v)))
        new_stop = np.where(tie, stop, new_stop)
        seen += 1
        if np.array_equal(new_stop, stop):
            break
        if seen >= max_iter:
            raise NoConvergence(f"policy iteration did not settle in {max_iter} sweeps")
        stop = new_stop
    res = float(np.max(np.abs(obstacle_residual(gen, spec, gv, v))))
    scale = float(np.max(gen.abs_apply(v) + r * np.abs(v) + np.abs(f) + np.abs(gv)))
    if res >= max(tol, 1e-13 * scale):
        raise NoConvergence(f"obstacle residual {res:.3g} above tolerance {tol:.3g}", [res])
    out = GridFn(gen.grid, v, _slope_clamp(spec))
    return (out, stop) if return_policy else out
