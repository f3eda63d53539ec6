"""Euler-Maruyama paths, survival weights, and per-path random streams.

Every path owns a Philox stream keyed by ``(seed, stream id)``, so any row of a
batch can be regenerated on its own and results do not depend on batching.
Each path stream is consumed in a fixed order: one uniform for the initial
state, then ``M`` normals for the diffusion, then (for controlled runs) ``M``
thinning uniforms and ``M`` jump uniforms.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidSpec, NegativeIntensity
from .model import ModelSpec, eval_b, eval_sigma

logger = logging.getLogger(__name__)

__all__ = [
    "PointMass",
    "UniformInit",
    "SimConfig",
    "RngStream",
    "PathBatch",
    "simulate_uncontrolled",
    "survival_weights",
    "write_paths_csv",
]


class RngStream:
    """Counter-based generator keyed by ``(seed, stream_id)``.

    ``stream_id`` may be an int or a tuple of ints; distinct ids give
    independent streams and the same key replays the same sequence.
    """

    def __init__(self, seed: int, stream_id=0):
        ids = stream_id if isinstance(stream_id, tuple) else (stream_id,)
        self.seed, self.stream_id = int(seed), tuple(int(i) for i in ids)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream_id)
        key = ss.generate_state(2, dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def random(self, size=None):
        return self.generator.random(size)

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


@dataclass(frozen=True)
class PointMass:
    x: float = 0.0

    def from_uniform(self, u):
        return np.full(np.shape(u), float(self.x))


@dataclass(frozen=True)
class UniformInit:
    lo: float = -4.0
    hi: float = 4.0

    def __post_init__(self):
        if not self.hi > self.lo:
            raise InvalidSpec("uniform initial law needs hi > lo")

    def from_uniform(self, u):
        return self.lo + (self.hi - self.lo) * np.asarray(u, dtype=float)


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.01
    horizon: float = 20.0
    batch: int = 64
    seed: int = 0
    x0: PointMass | UniformInit = UniformInit()

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidSpec(f"dt must be positive, got {self.dt}")
        if self.batch < 1:
            raise InvalidSpec(f"batch must be at least 1, got {self.batch}")
        m = round(self.horizon / self.dt)
        if m < 1 or not math.isclose(m * self.dt, self.horizon, rel_tol=1e-9, abs_tol=1e-12):
            raise InvalidSpec(f"horizon {self.horizon} is not a whole number of steps of {self.dt}")

    @property
    def steps(self) -> int:
        return round(self.horizon / self.dt)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.steps + 1)

    def replace(self, **changes) -> "SimConfig":
        from dataclasses import replace
        return replace(self, **changes)


@dataclass
class PathBatch:
    """Uncontrolled Euler-Maruyama paths; row ``b`` came from stream ``(seed, path_ids[b])``."""

    states: np.ndarray
    dt: float
    seed: int
    path_ids: np.ndarray
    increments_consumed: int

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.states.shape[1])


def path_stream(seed: int, path_id: int, domain: int = 0) -> RngStream:
    return RngStream(seed, (domain, path_id))


def draw_path_randomness(cfg: SimConfig, path_ids, controlled: bool = False, domain: int = 0):
    """Initial states and per-step variates for the given paths, in stream order."""
    m = cfg.steps
    n = len(path_ids)
    x0 = np.empty(n)
    normals = np.empty((n, m))
    thin = np.empty((n, m)) if controlled else None
    jump = np.empty((n, m)) if controlled else None
    for row, pid in enumerate(path_ids):
        s = path_stream(cfg.seed, int(pid), domain)
        x0[row] = cfg.x0.from_uniform(s.random())
        normals[row] = s.normal(m)
        if controlled:
            thin[row] = s.random(m)
            jump[row] = s.random(m)
    return x0, normals, thin, jump


def euler_step(spec: ModelSpec, x, dt: float, z):
    return x + eval_b(spec, x) * dt + eval_sigma(spec, x) * math.sqrt(dt) * z


def simulate_uncontrolled(spec: ModelSpec, cfg: SimConfig, path_ids=None, domain: int = 0) -> PathBatch:
    """Batched ``X_{i+1} = X_i + b(X_i) dt + sigma(X_i) sqrt(dt) Z_i``."""
    path_ids = np.arange(cfg.batch) if path_ids is None else np.asarray(path_ids, dtype=np.int64)
    x0, normals, _, _ = draw_path_randomness(cfg, path_ids, domain=domain)
    m = cfg.steps
    states = np.empty((len(path_ids), m + 1))
    states[:, 0] = x0
    for i in range(m):
        states[:, i + 1] = euler_step(spec, states[:, i], cfg.dt, normals[:, i])
    return PathBatch(states, cfg.dt, cfg.seed, path_ids, normals.size)


def survival_weights(paths: PathBatch, pi_field, dt: float | None = None) -> np.ndarray:
    """``p_0 = 1``, ``p_{i+1} = (1 - pi(X_i) dt) p_i`` with the factor floored at zero.

    Raises:
        NegativeIntensity: ``pi_field`` is negative at a visited state.
    """
    dt = paths.dt if dt is None else dt
    pi = np.asarray(pi_field(paths.states[:, :-1]), dtype=float)
    if np.any(pi < 0):
        raise NegativeIntensity(f"intensity {pi.min():.3g} < 0 at a visited state")
    factor = 1.0 - pi * dt
    floored = factor < 0
    if np.any(floored):
        warnings.warn(f"{int(floored.sum())} steps with pi*dt > 1; survival factor floored at 0",
                      RuntimeWarning, stacklevel=2)
        factor = np.maximum(factor, 0.0)
    out = np.ones_like(paths.states)
    np.cumprod(factor, axis=1, out=out[:, 1:])
    return out


def write_paths_csv(batch: PathBatch, fh):
    """Debug dump with columns ``path_id, t, x``."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["path_id", "t", "x"])
    t = batch.times
    for pid, row in zip(batch.path_ids, batch.states):
        for ti, xi in zip(t, row):
            w.writerow([int(pid), format(ti, ".17g"), format(xi, ".17g")])
