"""scikit-learn style wrappers around the solvers.

The "training data" of an impulse-control problem is the model itself, so
``fit`` ignores ``X`` and ``y`` and solves for the value function; ``predict``
evaluates the fitted value at states ``X``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .fixed_point import OuterConfig, solve_classical, solve_randomized
from .grid_fd import Grid1D
from .model import LambdaPair, benchmark_default
from .td_learn import TrainConfig, net_forward, train

__all__ = ["RandomizedImpulseSolver", "ClassicalImpulseSolver", "TDImpulseRegressor"]


def _states(X) -> np.ndarray:
    X = check_array(X, ensure_2d=False, dtype=float)
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise ValueError(f"states must be one-dimensional, got {X.shape[1]} features")
        X = X[:, 0]
    return X


class _GridSolverMixin:
    def _grid(self):
        return Grid1D(self.x_min, self.x_max, self.n_nodes)

    def _outer(self):
        return OuterConfig(tol_outer=self.tol_outer, max_outer=self.max_outer)

    def predict(self, X):
        """Value function at the states in ``X`` (shape ``(n,)`` or ``(n, 1)``)."""
        check_is_fitted(self, "result_")
        return np.asarray(self.result_.psi(_states(X)))


class RandomizedImpulseSolver(_GridSolverMixin, RegressorMixin, BaseEstimator):
    """Grid solution of the entropy-regularized problem.

    Attributes:
        result_: the :class:`SolveResult`.
        n_iter_: outer iterations used.
    """

    def __init__(self, spec=None, lambda1=0.5, lambda2=0.5, x_min=-8.0, x_max=8.0, n_nodes=1601,
                 tol_outer=1e-8, max_outer=200):
        self.spec = spec
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.x_min = x_min
        self.x_max = x_max
        self.n_nodes = n_nodes
        self.tol_outer = tol_outer
        self.max_outer = max_outer

    def fit(self, X=None, y=None):
        spec = self.spec if self.spec is not None else benchmark_default()
        self.result_ = solve_randomized(spec, LambdaPair(self.lambda1, self.lambda2), self._grid(), self._outer())
        self.n_iter_ = self.result_.outer_iters
        return self

    def intensity(self, X):
        """Optimal intervention intensity at ``X``."""
        check_is_fitted(self, "result_")
        return np.asarray(self.result_.pi_star(_states(X)))


class ClassicalImpulseSolver(_GridSolverMixin, RegressorMixin, BaseEstimator):
    """Grid solution of the unregularized impulse control problem."""

    def __init__(self, spec=None, x_min=-8.0, x_max=8.0, n_nodes=1601, tol_outer=1e-8, max_outer=200):
        self.spec = spec
        self.x_min = x_min
        self.x_max = x_max
        self.n_nodes = n_nodes
        self.tol_outer = tol_outer
        self.max_outer = max_outer

    def fit(self, X=None, y=None):
        spec = self.spec if self.spec is not None else benchmark_default()
        self.result_ = solve_classical(spec, self._grid(), self._outer())
        self.n_iter_ = self.result_.outer_iters
        return self

    def in_continuation(self, X):
        """True where waiting is optimal (nearest grid node)."""
        check_is_fitted(self, "result_")
        g = self.result_.grid
        idx = np.clip(np.rint((_states(X) - g.x_min) / g.h).astype(int), 0, g.n - 1)
        return self.result_.continuation[idx]


class TDImpulseRegressor(RegressorMixin, BaseEstimator):
    """Value network trained by the model-free TD fixed-point loop.

    Attributes:
        net_: trained :class:`ValueNet`.
        history_: :class:`TrainHistory`.
    """

    def __init__(self, spec=None, lambda1=0.5, lambda2=0.5, n_outer=30, n_inner=400, batch=64, lr=1e-3,
                 weight_decay=1e-4, mc_jump_samples=512, random_state=0):
        self.spec = spec
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.n_outer = n_outer
        self.n_inner = n_inner
        self.batch = batch
        self.lr = lr
        self.weight_decay = weight_decay
        self.mc_jump_samples = mc_jump_samples
        self.random_state = random_state

    def fit(self, X=None, y=None, reference=None):
        """Train; ``reference`` (a callable value) is tracked in ``history_.rel_l2``."""
        spec = self.spec if self.spec is not None else benchmark_default()
        cfg = TrainConfig(n_outer=self.n_outer, n_inner=self.n_inner, batch=self.batch, lr=self.lr,
                          weight_decay=self.weight_decay, mc_jump_samples=self.mc_jump_samples)
        seed = 0 if self.random_state is None else int(self.random_state)
        self.net_, self.history_ = train(spec, LambdaPair(self.lambda1, self.lambda2), cfg, seed=seed,
                                         reference=reference)
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        return net_forward(self.net_, _states(X))
