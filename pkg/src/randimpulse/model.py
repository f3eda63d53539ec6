"""Problem data for 1-D impulse control: coefficients, costs, assumption checks.

Every coefficient is a piecewise-affine descriptor (constant, affine, or
piecewise linear with finitely many kinks).  Lipschitz constants, infima and
one-sided slopes are therefore computed exactly from the pieces instead of
being sampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .exceptions import InvalidSpec

__all__ = [
    "Constant",
    "Affine",
    "PiecewiseLinear",
    "TwoSidedLinear",
    "ModelSpec",
    "LambdaPair",
    "Check",
    "ValidationReport",
    "benchmark_default",
    "validate_assumptions",
    "eval_b",
    "eval_sigma",
    "eval_f",
    "eval_l",
]

_SUBADD_TOL = 1e-12


def _finite(name, value):
    try:
        v = float(value)
    except (TypeError, ValueError) as exc:
        raise InvalidSpec(f"{name} must be a real number, got {value!r}") from exc
    if not math.isfinite(v):
        raise InvalidSpec(f"{name} must be finite, got {v}")
    return v


class _PiecewiseAffine:
    """Shared machinery for descriptors made of affine pieces.

    Subclasses implement ``pieces()`` returning ``(lo, hi, a, s)`` tuples with
    value ``a + s * x`` on ``[lo, hi)``; pieces are ordered and tile the line.
    """

    def pieces(self):
        raise NotImplementedError

    @cached_property
    def _tables(self):
        pcs = self.pieces()
        breaks = np.array([p[1] for p in pcs[:-1]], dtype=float)
        a = np.array([p[2] for p in pcs], dtype=float)
        s = np.array([p[3] for p in pcs], dtype=float)
        return breaks, a, s

    def __call__(self, x):
        breaks, a, s = self._tables
        x = np.asarray(x, dtype=float)
        if breaks.size == 0:
            out = a[0] + s[0] * x if s[0] else np.full(x.shape, a[0])
        else:
            idx = np.searchsorted(breaks, x, side="right")
            out = a[idx] + s[idx] * x
        return out if out.ndim else float(out)

    @property
    def continuous(self) -> bool:
        pcs = self.pieces()
        for (_, hi, a0, s0), (_, _, a1, s1) in zip(pcs[:-1], pcs[1:]):
            if abs((a0 + s0 * hi) - (a1 + s1 * hi)) > 1e-12 * max(1.0, abs(a0 + s0 * hi)):
                return False
        return True

    @property
    def lipschitz(self) -> float:
        if not self.continuous:
            return math.inf
        return max(abs(p[3]) for p in self.pieces())

    def derivative(self, x: float, side: int = 1) -> float:
        """One-sided slope at ``x``: ``side=+1`` from the right, ``-1`` from the left."""
        pcs = self.pieces()
        for lo, hi, _, s in pcs:
            if side > 0 and lo <= x < hi:
                return s
            if side <= 0 and lo < x <= hi:
                return s
        return pcs[-1][3] if x > 0 else pcs[0][3]

    def _piece_extrema(self):
        for lo, hi, a, s in self.pieces():
            ends = []
            for e in (lo, hi):
                if math.isfinite(e):
                    ends.append(a + s * e)
                elif s == 0.0:
                    ends.append(a)
                else:
                    ends.append(math.copysign(math.inf, s * e))
            yield lo, hi, a, s, ends

    @property
    def infimum(self) -> float:
        return min(min(ends) for *_, ends in self._piece_extrema())

    @property
    def supremum(self) -> float:
        return max(max(ends) for *_, ends in self._piece_extrema())

    @property
    def abs_infimum(self) -> float:
        """inf over the real line of ``|d(x)|``."""
        best = math.inf
        for lo, hi, a, s, ends in self._piece_extrema():
            if s != 0.0 and lo <= -a / s <= hi:
                return 0.0
            best = min(best, min(abs(e) for e in ends))
        return best

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.infimum) and math.isfinite(self.supremum)


@dataclass(frozen=True)
class Constant(_PiecewiseAffine):
    value: float

    def __post_init__(self):
        object.__setattr__(self, "value", _finite("Constant.value", self.value))

    def pieces(self):
        return ((-math.inf, math.inf, self.value, 0.0),)


@dataclass(frozen=True)
class Affine(_PiecewiseAffine):
    """``intercept + slope * x``."""

    intercept: float
    slope: float

    def __post_init__(self):
        object.__setattr__(self, "intercept", _finite("Affine.intercept", self.intercept))
        object.__setattr__(self, "slope", _finite("Affine.slope", self.slope))

    def pieces(self):
        return ((-math.inf, math.inf, self.intercept, self.slope),)


@dataclass(frozen=True)
class PiecewiseLinear(_PiecewiseAffine):
    """Continuous interpolant through ``(knots, values)`` with linear tails."""

    knots: tuple
    values: tuple
    left_slope: float = 0.0
    right_slope: float = 0.0

    def __post_init__(self):
        knots = tuple(_finite("PiecewiseLinear.knots", k) for k in self.knots)
        values = tuple(_finite("PiecewiseLinear.values", v) for v in self.values)
        if not knots or len(knots) != len(values):
            raise InvalidSpec("PiecewiseLinear needs matching, nonempty knots and values")
        if any(b <= a for a, b in zip(knots[:-1], knots[1:])):
            raise InvalidSpec("PiecewiseLinear knots must be strictly increasing")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "left_slope", _finite("left_slope", self.left_slope))
        object.__setattr__(self, "right_slope", _finite("right_slope", self.right_slope))

    def pieces(self):
        k, v = self.knots, self.values
        out = [(-math.inf, k[0], v[0] - self.left_slope * k[0], self.left_slope)]
        for i in range(len(k) - 1):
            s = (v[i + 1] - v[i]) / (k[i + 1] - k[i])
            out.append((k[i], k[i + 1], v[i] - s * k[i], s))
        out.append((k[-1], math.inf, v[-1] - self.right_slope * k[-1], self.right_slope))
        return tuple(out)


@dataclass(frozen=True)
class TwoSidedLinear(_PiecewiseAffine):
    """``level_plus + slope_plus*x`` for ``x >= 0``, ``level_minus - slope_minus*x`` below.

    With zero levels this is the running cost ``h x^+ + p x^-``; with positive
    levels it is the fixed-plus-proportional intervention cost.
    """

    level_plus: float
    slope_plus: float
    level_minus: float
    slope_minus: float

    def __post_init__(self):
        for name in ("level_plus", "slope_plus", "level_minus", "slope_minus"):
            object.__setattr__(self, name, _finite(f"TwoSidedLinear.{name}", getattr(self, name)))

    def pieces(self):
        return (
            (-math.inf, 0.0, self.level_minus, -self.slope_minus),
            (0.0, math.inf, self.level_plus, self.slope_plus),
        )


def _as_descriptor(name, d):
    if isinstance(d, _PiecewiseAffine):
        return d
    if isinstance(d, (int, float, np.floating, np.integer)) and not isinstance(d, bool):
        return Constant(float(d))
    raise InvalidSpec(f"{name} must be a coefficient descriptor, got {type(d).__name__}")


@dataclass(frozen=True)
class ModelSpec:
    """Immutable problem datum ``(b, sigma, r, f, l)``.

    Plain numbers passed for ``drift`` or ``volatility`` are wrapped in
    :class:`Constant`.  Lipschitz constants come from the descriptors.
    """

    drift: _PiecewiseAffine
    volatility: _PiecewiseAffine
    discount: float
    running_cost: _PiecewiseAffine
    intervention_cost: _PiecewiseAffine

    def __post_init__(self):
        object.__setattr__(self, "drift", _as_descriptor("drift", self.drift))
        object.__setattr__(self, "volatility", _as_descriptor("volatility", self.volatility))
        object.__setattr__(self, "running_cost", _as_descriptor("running_cost", self.running_cost))
        object.__setattr__(
            self, "intervention_cost", _as_descriptor("intervention_cost", self.intervention_cost)
        )
        object.__setattr__(self, "discount", _finite("discount", self.discount))

    @property
    def lip_b_sigma(self) -> float:
        return self.drift.lipschitz + self.volatility.lipschitz

    @property
    def lip_f(self) -> float:
        return self.running_cost.lipschitz

    @property
    def lip_l(self) -> float:
        return self.intervention_cost.lipschitz

    @property
    def G(self) -> float:
        L = self.lip_b_sigma
        return L + 0.5 * L * L

    @property
    def sigma0(self) -> float:
        return self.volatility.abs_infimum

    @property
    def K(self) -> float:
        """Fixed intervention cost ``l(0)``."""
        return float(self.intervention_cost(0.0))

    @property
    def value_slope_bound(self) -> float:
        """``L_f / (r - G)``, the Lipschitz bound shared by all value iterates."""
        gap = self.discount - self.G
        return self.lip_f / gap if gap > 0 else math.inf

    def replace(self, **changes) -> "ModelSpec":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True)
class LambdaPair:
    """Randomization strengths: ``lambda1`` for timing, ``lambda2`` for jump size."""

    lambda1: float
    lambda2: float

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = _finite(name, getattr(self, name))
            if v <= 0:
                raise InvalidSpec(f"{name} must be strictly positive, got {v}")
            object.__setattr__(self, name, v)

    def __iter__(self):
        yield self.lambda1
        yield self.lambda2

    @property
    def sup(self) -> float:
        return max(self.lambda1, self.lambda2)


def eval_b(spec: ModelSpec, x):
    return spec.drift(x)


def eval_sigma(spec: ModelSpec, x):
    return spec.volatility(x)


def eval_f(spec: ModelSpec, x):
    return spec.running_cost(x)


def eval_l(spec: ModelSpec, xi):
    return spec.intervention_cost(xi)


def benchmark_default(
    mu=0.03, sigma=0.2, r=0.1, h=1.0, p=1.0, K_plus=2.0, K_minus=2.0, k_plus=0.5, k_minus=0.5
) -> ModelSpec:
    """Constant-coefficient linear benchmark: ``f(x)=|x|``, ``l(xi)=2+0.5|xi|``."""
    return ModelSpec(
        drift=Constant(mu),
        volatility=Constant(sigma),
        discount=r,
        running_cost=TwoSidedLinear(0.0, h, 0.0, p),
        intervention_cost=TwoSidedLinear(K_plus, k_plus, K_minus, k_minus),
    )


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    margin: float
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple
    warnings: tuple = field(default_factory=tuple)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self):
        return [c for c in self.checks if not c.passed]

    def __getitem__(self, name) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def __str__(self):
        lines = []
        for c in self.checks:
            tag = "PASS" if c.passed else "FAIL"
            lines.append(f"[{tag}] {c.name}: margin={c.margin:.6g} {c.detail}".rstrip())
        lines.extend(f"[WARN] {w}" for w in self.warnings)
        return "\n".join(lines)


def _pair_grid(n=100, half_width=10.0):
    t = np.linspace(-half_width, half_width, n)
    return np.meshgrid(t, t, indexing="ij")


def validate_assumptions(spec: ModelSpec) -> ValidationReport:
    """Check the standing assumptions on ``spec`` and report margins.

    Failures are reported, never raised.  For the two-sided linear benchmark
    costs the nontriviality conditions ``h - r k_- > 0`` and ``p - r k_+ > 0``
    are appended.
    """
    checks = []
    warnings = []
    f, l, r = spec.running_cost, spec.intervention_cost, spec.discount

    sig0 = spec.sigma0
    checks.append(Check("uniform ellipticity sigma >= sigma0 > 0", sig0 > 0, sig0))

    L = spec.lip_b_sigma
    checks.append(Check("(b, sigma) Lipschitz", math.isfinite(L), -L if math.isfinite(L) else -math.inf,
                        f"L={L:.6g}"))

    f0 = float(f(0.0))
    checks.append(Check("f(0) = 0", f0 == 0.0, -abs(f0)))
    finf = f.infimum
    checks.append(Check("f >= 0", finf >= 0.0, finf))
    Lf = spec.lip_f
    checks.append(Check("f Lipschitz, L_f > 0", math.isfinite(Lf) and Lf > 0, Lf))

    K = spec.K
    checks.append(Check("K = l(0) > 0", K > 0, K))
    linf = l.infimum
    checks.append(Check("l(0) = inf l", linf >= K - _SUBADD_TOL, linf - K))
    X, Y = _pair_grid()
    gap = float(np.min(l(X) + l(Y) - l(X + Y) - K))
    checks.append(Check("l(x) + l(y) >= l(x + y) + K", gap >= -_SUBADD_TOL, gap, "on 100x100 grid over [-10,10]^2"))
    pcs = l.pieces()
    coercive = pcs[0][3] < 0 and pcs[-1][3] > 0
    checks.append(Check("l coercive", coercive, min(-pcs[0][3], pcs[-1][3])))
    Ll = spec.lip_l
    checks.append(Check("l Lipschitz, L_l > 0", math.isfinite(Ll) and Ll > 0, Ll if math.isfinite(Ll) else -math.inf))

    gap_r = r - spec.G
    upper = Lf / Ll if (math.isfinite(Ll) and Ll > 0) else -math.inf
    margin = min(gap_r, upper - gap_r)
    checks.append(Check("r - G in (0, L_f/L_l)", margin > 0, margin, f"r-G={gap_r:.6g}, L_f/L_l={upper:.6g}"))

    if isinstance(f, TwoSidedLinear) and isinstance(l, TwoSidedLinear):
        h, p = f.slope_plus, f.slope_minus
        m1 = h - r * l.slope_minus
        m2 = p - r * l.slope_plus
        checks.append(Check("h - r k_- > 0", m1 > 0, m1))
        checks.append(Check("p - r k_+ > 0", m2 > 0, m2))

    if not f.bounded:
        warnings.append("running cost f is unbounded; the bounded-f condition used for small-lambda "
                        "convergence is not enforced")
    return ValidationReport(tuple(checks), tuple(warnings))
