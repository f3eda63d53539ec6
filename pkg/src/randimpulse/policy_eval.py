"""Monte Carlo execution and cost estimation of randomized impulse policies.

A policy fires interventions by thinning: at step ``i`` from pre-jump state
``X_i`` it fires with probability ``min(pi(X_i) dt, 1)``, draws a jump from the
Gibbs law at ``X_i``, and the post-jump state then diffuses for one Euler step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import NegativeIntensity
from .grid_fd import GridFn
from .model import LambdaPair, ModelSpec, eval_f, eval_l
from .nonlocal_op import GibbsJumpSampler, QuadratureRule, jump_cost_term
from .sde_sim import SimConfig, draw_path_randomness, euler_step

__all__ = [
    "RandomizedPolicy",
    "ControlledBatch",
    "CostEstimate",
    "entropy_R",
    "execute_policy",
    "estimate_cost",
    "evaluate_policy",
    "write_evaluation_csv",
]


def entropy_R(pi):
    """``R(pi) = pi - pi log pi`` with ``R(0) = 0``.

    Raises:
        NegativeIntensity: for negative input.
    """
    p = np.asarray(pi, dtype=float)
    if np.any(p < 0):
        raise NegativeIntensity(f"entropy_R needs pi >= 0, got {p.min():.3g}")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(p > 0, p - p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return out if out.ndim else float(out)


@dataclass
class RandomizedPolicy:
    """Intensity field plus jump law.

    Attributes:
        pi_fn: vectorized intervention intensity.
        sampler: draws jumps and their log-densities; unused when ``pi_fn`` is 0.
        jump_cost: vectorized ``E_{mu*_x}[l + lambda2 log rho*]``, the expected
            cost of one jump from ``x``.
    """

    pi_fn: object
    sampler: GibbsJumpSampler | None = None
    jump_cost: object = None

    @classmethod
    def from_solution(cls, result, rule: QuadratureRule | None = None, n_knots: int = 4096) -> "RandomizedPolicy":
        """Feedback policy of a converged randomized solve."""
        psi, spec, lam2 = result.psi, result.spec, result.lambdas.lambda2
        cost = psi.with_values(jump_cost_term(psi, psi.grid.nodes, lam2, spec, rule or result.rule))
        return cls(result.pi_star, GibbsJumpSampler(psi, lam2, spec, n_knots=n_knots), cost)

    @classmethod
    def never(cls) -> "RandomizedPolicy":
        return cls(lambda x: np.zeros(np.shape(x)))


@dataclass
class ControlledBatch:
    """Recorded controlled trajectories.

    ``states_pre[:, i]`` is ``X_{t_i-}``; ``states_post[:, i] = states_pre[:, i] + xi[:, i]``
    when ``fired[:, i]`` and equals ``states_pre[:, i]`` otherwise.  ``xi`` and
    ``log_rho`` are NaN at steps without a jump.
    """

    states_pre: np.ndarray
    states_post: np.ndarray
    pi: np.ndarray
    fired: np.ndarray
    xi: np.ndarray
    log_rho: np.ndarray
    jump_cost: np.ndarray
    dt: float
    path_ids: np.ndarray

    @property
    def jump_counts(self) -> np.ndarray:
        return self.fired.sum(axis=1)


@dataclass
class CostEstimate:
    mean: float
    stderr: float
    n: int
    tail_bound: float = float("nan")
    estimator: str = "intensity"
    horizon: float = float("nan")
    samples: np.ndarray | None = field(default=None, repr=False)

    def ci(self, z: float = 1.96):
        return self.mean - z * self.stderr, self.mean + z * self.stderr

    def contains(self, value: float, z: float = 1.96) -> bool:
        lo, hi = self.ci(z)
        return lo <= value <= hi

    @classmethod
    def from_samples(cls, samples, **kw) -> "CostEstimate":
        s = np.asarray(samples, dtype=float)
        se = float(s.std(ddof=1) / math.sqrt(s.size)) if s.size > 1 else float("nan")
        return cls(float(s.mean()), se, int(s.size), samples=s, **kw)


def _controlled_run(spec, policy, cfg, path_ids, lambdas, record):
    m, dt, r = cfg.steps, cfg.dt, spec.discount
    x0, normals, thin, jump_u = draw_path_randomness(cfg, path_ids, controlled=True)
    n = len(path_ids)
    x = x0.copy()
    cost_int = np.zeros(n)
    cost_real = np.zeros(n)
    lam1 = lambdas.lambda1 if lambdas is not None else 0.0
    lam2 = lambdas.lambda2 if lambdas is not None else 0.0
    if record:
        rec = {k: np.full((n, m), np.nan) for k in ("pre", "post", "pi", "xi", "log_rho", "jc")}
        rec["fired"] = np.zeros((n, m), dtype=bool)
        last = np.empty(n)
    for i in range(m):
        pi = np.asarray(policy.pi_fn(x), dtype=float) * np.ones(n)
        if np.any(pi < 0):
            raise NegativeIntensity(f"intensity {pi.min():.3g} < 0 at a visited state")
        disc = math.exp(-r * i * dt)
        running = eval_f(spec, x) - lam1 * entropy_R(pi)
        jc = np.asarray(policy.jump_cost(x), dtype=float) if policy.jump_cost is not None else np.zeros(n)
        active = pi > 0
        cost_int += disc * dt * (running + np.where(active, pi * jc, 0.0))
        cost_real += disc * dt * running
        fired = thin[:, i] < np.minimum(pi * dt, 1.0)
        post = x
        if np.any(fired):
            idx = np.flatnonzero(fired)
            xs = x[idx]
            xi, lr = policy.sampler.sample(xs, jump_u[idx, i], return_log_density=True)
            cost_real[idx] += disc * (eval_l(spec, xi) + lam2 * lr)
            post = x.copy()
            post[idx] = xs + xi
        if record:
            rec["pre"][:, i], rec["post"][:, i], rec["pi"][:, i], rec["jc"][:, i] = x, post, pi, jc
            rec["fired"][:, i] = fired
            if np.any(fired):
                rec["xi"][idx, i], rec["log_rho"][idx, i] = xi, lr
        x = euler_step(spec, post, dt, normals[:, i])
    batch = None
    if record:
        pre = np.concatenate([rec["pre"], x[:, None]], axis=1)
        batch = ControlledBatch(pre, rec["post"], rec["pi"], rec["fired"], rec["xi"], rec["log_rho"],
                                rec["jc"], dt, np.asarray(path_ids))
    return cost_int, cost_real, x, batch


def execute_policy(spec: ModelSpec, policy: RandomizedPolicy, cfg: SimConfig, path_ids=None,
                   lambdas: LambdaPair | None = None) -> ControlledBatch:
    """Simulate and record ``cfg.batch`` controlled paths.

    With a zero intensity the pre-jump states equal ``simulate_uncontrolled``
    under the same configuration, bit for bit.
    """
    path_ids = np.arange(cfg.batch) if path_ids is None else np.asarray(path_ids, dtype=np.int64)
    return _controlled_run(spec, policy, cfg, path_ids, lambdas, record=True)[3]


def _per_path_costs(batch: ControlledBatch, spec: ModelSpec, lambdas: LambdaPair, estimator: str):
    n, m = batch.pi.shape
    disc = np.exp(-spec.discount * batch.dt * np.arange(m))
    x = batch.states_pre[:, :-1]
    running = eval_f(spec, x) - lambdas.lambda1 * entropy_R(batch.pi)
    if estimator == "intensity":
        jc = np.where(batch.pi > 0, batch.pi * batch.jump_cost, 0.0)
        return (running + jc) @ disc * batch.dt
    if estimator == "realized":
        jump = np.where(batch.fired, eval_l(spec, np.nan_to_num(batch.xi)) + lambdas.lambda2 * np.nan_to_num(batch.log_rho), 0.0)
        return running @ disc * batch.dt + jump @ disc
    raise ValueError(f"unknown estimator {estimator!r}")


def estimate_cost(batch: ControlledBatch, spec: ModelSpec, lambdas: LambdaPair, estimator: str = "intensity",
                  value_bound: float | None = None) -> CostEstimate:
    """Discounted entropy-regularized cost of recorded trajectories.

    ``estimator="intensity"`` charges ``pi(x) * E[l + lambda2 log rho*]`` every step;
    ``"realized"`` charges ``l(xi) + lambda2 log rho*(xi)`` at fired jumps only.
    ``value_bound`` (a bound on ``|psi|``) sets ``tail_bound = exp(-rT) * value_bound``.
    """
    costs = _per_path_costs(batch, spec, lambdas, estimator)
    horizon = batch.pi.shape[1] * batch.dt
    tail = math.exp(-spec.discount * horizon) * value_bound if value_bound is not None else float("nan")
    return CostEstimate.from_samples(costs, tail_bound=tail, estimator=estimator, horizon=horizon)


def evaluate_policy(spec: ModelSpec, policy: RandomizedPolicy, lambdas: LambdaPair, cfg: SimConfig,
                    n_paths: int, chunk: int = 1000, value_bound: float | None = None) -> dict:
    """Streamed evaluation of ``n_paths`` paths without storing trajectories.

    Returns:
        ``{"intensity": CostEstimate, "realized": CostEstimate}``.
    """
    ci, cr = [], []
    for start in range(0, n_paths, chunk):
        ids = np.arange(start, min(start + chunk, n_paths))
        a, b, _, _ = _controlled_run(spec, policy, cfg, ids, lambdas, record=False)
        ci.append(a)
        cr.append(b)
    tail = math.exp(-spec.discount * cfg.horizon) * value_bound if value_bound is not None else float("nan")
    return {
        name: CostEstimate.from_samples(np.concatenate(c), tail_bound=tail, estimator=name, horizon=cfg.horizon)
        for name, c in (("intensity", ci), ("realized", cr))
    }


EVAL_FIELDS = ("x0", "estimate", "stderr", "n_paths", "fd_value", "inside_ci")


def write_evaluation_csv(rows, fh):
    """Rows are ``(x0, CostEstimate, fd_value)`` triples."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(EVAL_FIELDS)
    for x0, est, fd in rows:
        w.writerow([format(x0, ".17g"), format(est.mean, ".17g"), format(est.stderr, ".17g"), est.n,
                    format(fd, ".17g"), int(est.contains(fd))])
