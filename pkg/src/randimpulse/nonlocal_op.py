"""Classical and entropy-regularized nonlocal (jump) operators.

Under the reference law ``N(-x, 1)`` for the jump at ``x`` the post-jump state
``x + zeta`` is standard normal whatever ``x`` is.  The randomized operator is
therefore a soft-min over a fixed set of post-jump states ``z_i``:

    M^lam phi(x) = -lam * log sum_i w_i exp(-(phi(z_i) + l(z_i - x)) / lam)

computed with the nodewise minimum subtracted before exponentiating.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from .exceptions import InvalidSpec, NonFinite, WindowTooSmall
from .model import ModelSpec, eval_l

__all__ = [
    "QuadratureRule",
    "JumpSearchConfig",
    "JumpGibbs",
    "GibbsJumpSampler",
    "classical_M",
    "randomized_M",
    "jump_gibbs",
    "gibbs_density",
    "sample_jump",
    "jump_cost_term",
]

_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and positive weights for expectations under ``N(0, 1)``."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.nodes, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if z.shape != w.shape or z.ndim != 1 or z.size == 0:
            raise InvalidSpec("quadrature nodes and weights must be 1-D arrays of equal length")
        if np.any(w <= 0):
            raise InvalidSpec("quadrature weights must be positive")
        object.__setattr__(self, "nodes", z)
        object.__setattr__(self, "weights", w / w.sum())

    @property
    def order(self) -> int:
        return self.nodes.size

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(self.weights)

    @classmethod
    def gauss_hermite(cls, order: int = 64) -> "QuadratureRule":
        z, w = np.polynomial.hermite_e.hermegauss(order)
        return cls(z, w)

    @classmethod
    def uniform(cls, half_width: float = 8.0, order: int = 1601) -> "QuadratureRule":
        """Trapezoid rule on ``[-half_width, half_width]`` against the normal density."""
        z = np.linspace(-half_width, half_width, order)
        w = np.exp(-0.5 * z * z)
        w[[0, -1]] *= 0.5
        return cls(z, w)

    def expect(self, values) -> float:
        return float(np.dot(self.weights, values))


DEFAULT_RULE = QuadratureRule.uniform(8.0, 4001)


@dataclass(frozen=True)
class JumpSearchConfig:
    """Window and resolution for the classical jump search.

    The window is ``[-|x| - pad, |x| + pad]`` scanned at ``n_scan`` points and
    refined by golden section to ``tol``.
    """

    pad: float = 10.0
    n_scan: int = 2001
    tol: float = 1e-8


def _as_array(x):
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    return arr, np.ndim(x) == 0


def classical_M(phi, x, spec: ModelSpec, search: JumpSearchConfig | None = None):
    """``inf_xi phi(x + xi) + l(xi)`` by coarse scan plus golden-section refinement.

    Returns:
        ``(value, argmin)``; scalars for scalar ``x``, arrays otherwise.

    Raises:
        WindowTooSmall: the coarse minimizer sits on the edge of the window.
    """
    search = search or JumpSearchConfig()
    xs, scalar = _as_array(x)
    values = np.empty_like(xs)
    argmins = np.empty_like(xs)
    chunk = max(1, 2_000_000 // search.n_scan)
    for start in range(0, xs.size, chunk):
        xc = xs[start:start + chunk]
        half = np.abs(xc) + search.pad
        t = np.linspace(-1.0, 1.0, search.n_scan)
        xi = half[:, None] * t[None, :]
        obj = phi(xc[:, None] + xi) + eval_l(spec, xi)
        k = np.argmin(obj, axis=1)
        if np.any(k == 0) or np.any(k == search.n_scan - 1):
            bad = xc[(k == 0) | (k == search.n_scan - 1)][0]
            raise WindowTooSmall(f"jump minimizer at x={bad:.6g} sits on the search window edge")
        step = half * (t[1] - t[0])
        centre = xi[np.arange(xc.size), k]
        lo, hi = centre - step, centre + step
        best_xi, best_val = centre.copy(), obj[np.arange(xc.size), k]

        def F(e):
            return phi(xc + e) + eval_l(spec, e)

        ratio = (math.sqrt(5) - 1) / 2
        c = hi - ratio * (hi - lo)
        d = lo + ratio * (hi - lo)
        fc, fd = F(c), F(d)
        iters = int(math.ceil(math.log(max(2 * step.max(), search.tol) / search.tol) / -math.log(ratio))) + 1
        for _ in range(iters):
            left = fc < fd
            hi = np.where(left, d, hi)
            lo = np.where(left, lo, c)
            # both probes are re-evaluated; cheap next to the coarse scan
            c = hi - ratio * (hi - lo)
            d = lo + ratio * (hi - lo)
            fc, fd = F(c), F(d)
        for cand in (c, d, 0.5 * (lo + hi), np.zeros_like(c)):
            fv = F(cand)
            better = fv < best_val
            best_val = np.where(better, fv, best_val)
            best_xi = np.where(better, cand, best_xi)
        values[start:start + chunk] = best_val
        argmins[start:start + chunk] = best_xi
    if scalar:
        return float(values[0]), float(argmins[0])
    return values, argmins


def _soft_min_terms(phi, xs, spec, rule):
    z = rule.nodes
    g = phi(z)[None, :] + eval_l(spec, z[None, :] - xs[:, None])
    return g


def randomized_M(phi, x, lambda2: float, spec: ModelSpec, rule: QuadratureRule | None = None):
    """KL-regularized nonlocal operator by stabilized log-sum-exp quadrature.

    Raises:
        NonFinite: a node evaluation of ``phi + l`` is not finite.
    """
    if not lambda2 > 0:
        raise InvalidSpec(f"lambda2 must be positive, got {lambda2}")
    rule = rule or DEFAULT_RULE
    xs, scalar = _as_array(x)
    g = _soft_min_terms(phi, xs, spec, rule)
    if not np.all(np.isfinite(g)):
        raise NonFinite("phi(x + zeta) + l(zeta) is not finite on the quadrature support")
    m = g.min(axis=1)
    s = np.exp(-(g - m[:, None]) / lambda2) @ rule.weights
    out = m - lambda2 * np.log(s)
    return float(out[0]) if scalar else out


def jump_cost_term(phi, x, lambda2: float, spec: ModelSpec, rule: QuadratureRule | None = None):
    """``E_{xi ~ mu*_x}[l(xi) + lambda2 log rho*_x(xi)]`` under the quadrature rule.

    This is the expected cost of one randomized jump, entropy penalty included.
    """
    rule = rule or DEFAULT_RULE
    xs, scalar = _as_array(x)
    g = _soft_min_terms(phi, xs, spec, rule)
    m = g.min(axis=1, keepdims=True)
    a = np.exp(-(g - m) / lambda2) * rule.weights
    s = a.sum(axis=1, keepdims=True)
    rho_w = a / s
    mval = m - lambda2 * np.log(s)
    lz = eval_l(spec, rule.nodes[None, :] - xs[:, None])
    log_rho = -(g - mval) / lambda2
    out = np.sum(rho_w * (lz + lambda2 * log_rho), axis=1)
    return float(out[0]) if scalar else out


@dataclass
class JumpGibbs:
    """Optimal randomized jump law at one anchor ``x``.

    ``log_normalizer`` is ``log E_{Phi_x}[exp(-(phi(x+zeta)+l(zeta))/lambda2)]``;
    the density w.r.t. ``Phi_x`` is ``exp(-(phi(x+xi)+l(xi))/lambda2 - log_normalizer)``.
    """

    anchor: float
    lambda2: float
    log_normalizer: float
    value_fn: object
    spec: ModelSpec
    n_knots: int = 4096
    half_width: float = 8.0

    @property
    def nonlocal_value(self) -> float:
        return -self.lambda2 * self.log_normalizer

    @cached_property
    def table(self):
        """``(xi knots, normalized CDF)`` of the jump law over ``[-x-8, -x+8]``."""
        x = self.anchor
        xi = np.linspace(-x - self.half_width, -x + self.half_width, self.n_knots)
        y = x + xi
        logd = -(self.value_fn(y) + eval_l(self.spec, xi)) / self.lambda2 - 0.5 * y * y
        dens = np.exp(logd - logd.max())
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(xi))])
        return xi, cdf / cdf[-1]

    def moments(self):
        """Mean and variance of the jump law from the dense table."""
        xi, cdf = self.table
        p = np.diff(cdf)
        mid = 0.5 * (xi[1:] + xi[:-1])
        w = np.diff(xi)
        mean = float(np.sum(p * mid))
        # cell variance of a piecewise-uniform law adds w^2/12
        var = float(np.sum(p * ((mid - mean) ** 2 + w * w / 12)))
        return mean, var


def jump_gibbs(phi, x: float, lambda2: float, spec: ModelSpec, rule: QuadratureRule | None = None,
               **kw) -> JumpGibbs:
    mval = randomized_M(phi, float(x), lambda2, spec, rule)
    return JumpGibbs(float(x), float(lambda2), -mval / lambda2, phi, spec, **kw)


def gibbs_density(g: JumpGibbs, xi):
    """Density of the optimal jump law w.r.t. the reference ``N(-x, 1)``."""
    xi = np.asarray(xi, dtype=float)
    expo = -(g.value_fn(g.anchor + xi) + eval_l(g.spec, xi) - g.nonlocal_value) / g.lambda2
    out = np.exp(expo)
    return out if out.ndim else float(out)


def sample_jump(g: JumpGibbs, rng, size=None):
    """Inverse-CDF draw(s) from the tabulated jump law."""
    xi, cdf = g.table
    u = rng.random(size)
    out = np.interp(u, cdf, xi)
    return out if np.ndim(out) else float(out)


class GibbsJumpSampler:
    """Batched sampler for the optimal jump laws at arbitrary anchors.

    Works in post-jump coordinates ``y = x + xi`` on ``[-half_width, half_width]``.
    On each affine piece ``a + s xi`` of ``l`` the unnormalized density is
    ``exp(-(a - s x)/lam) * q(y) exp(-s y / lam)`` with ``q`` anchor-free, so one
    cumulative table per piece slope serves every anchor.  CDFs are linear between
    the ``n_knots`` table knots.
    """

    def __init__(self, phi, lambda2: float, spec: ModelSpec, n_knots: int = 4096, half_width: float = 8.0):
        if not lambda2 > 0:
            raise InvalidSpec(f"lambda2 must be positive, got {lambda2}")
        self.phi, self.lambda2, self.spec = phi, float(lambda2), spec
        self.y = np.linspace(-half_width, half_width, n_knots)
        base = -np.asarray(phi(self.y), dtype=float) / lambda2 - 0.5 * self.y ** 2 - _LOG_SQRT_2PI
        self.pieces = spec.intervention_cost.pieces()
        self._shift, self._cum = [], []
        dy = np.diff(self.y)
        for _, _, _, s in self.pieces:
            h = base - s * self.y / lambda2
            c = h.max()
            e = np.exp(h - c)
            self._shift.append(c)
            self._cum.append(np.concatenate([[0.0], np.cumsum(0.5 * (e[1:] + e[:-1]) * dy)]))

    def _piece_logmass(self, x):
        """Per piece: log mass, and the cumulative table values at the piece ends."""
        lam = self.lambda2
        lms, cas, cbs = [], [], []
        for (lo, hi, a, s), c, cum in zip(self.pieces, self._shift, self._cum):
            ya = np.clip(x + lo, self.y[0], self.y[-1])
            yb = np.clip(x + hi, self.y[0], self.y[-1])
            ca, cb = np.interp(ya, self.y, cum), np.interp(yb, self.y, cum)
            with np.errstate(divide="ignore"):
                lms.append(c - (a - s * x) / lam + np.log(np.maximum(cb - ca, 0.0)))
            cas.append(ca)
            cbs.append(cb)
        return np.stack(lms), cas, cbs

    @staticmethod
    def _lse(lms):
        top = lms.max(axis=0)
        return top + np.log(np.exp(lms - top).sum(axis=0))

    def log_normalizer(self, x):
        """Table estimate of ``log E_{Phi_x}[exp(-(phi(x+zeta)+l(zeta))/lambda2)]``."""
        return self._lse(self._piece_logmass(np.asarray(x, dtype=float))[0])

    def log_density(self, x, xi):
        """``log rho*_x(xi)`` consistent with this sampler's normalization."""
        x, xi = np.asarray(x, dtype=float), np.asarray(xi, dtype=float)
        return -(self.phi(x + xi) + eval_l(self.spec, xi)) / self.lambda2 - self.log_normalizer(x)

    def sample(self, x, u, return_log_density: bool = False):
        """Jumps at anchors ``x`` driven by uniforms ``u`` (same shape).

        With ``return_log_density`` also returns ``log rho*_x(xi)`` for each draw.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        u = np.atleast_1d(np.asarray(u, dtype=float))
        lms, cas, cbs = self._piece_logmass(x)
        total = self._lse(lms)
        probs = np.exp(lms - total)
        cum = np.cumsum(probs, axis=0)
        cum[-1] = 1.0
        j = np.minimum((u[None, :] >= cum).sum(axis=0), len(self.pieces) - 1)
        cols = np.arange(x.size)
        prev = np.where(j > 0, cum[np.maximum(j - 1, 0), cols], 0.0)
        pj = probs[j, cols]
        v = np.clip((u - prev) / np.where(pj > 0, pj, 1.0), 0.0, 1.0)
        y = np.empty_like(x)
        for k in range(len(self.pieces)):
            sel = j == k
            if np.any(sel):
                target = cas[k][sel] + v[sel] * (cbs[k][sel] - cas[k][sel])
                y[sel] = np.interp(target, self._cum[k], self.y)
        xi = y - x
        if not return_log_density:
            return xi
        logd = -(self.phi(y) + eval_l(self.spec, xi)) / self.lambda2 - total
        return xi, logd
