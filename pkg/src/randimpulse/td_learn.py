"""Model-free TD training of the randomized impulse value.

A small tanh network with hand-written backprop is trained by AdamW on the
squared one-step TD error along simulated uncontrolled paths.  Each outer
iteration freezes a snapshot of the network, estimates the nonlocal target
``M^lambda2 psi^n`` by Monte Carlo at every visited state, and then takes
``n_inner`` gradient steps.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .exceptions import Diverged, InvalidSpec
from .fixed_point import rel_l2_error
from .grid_fd import GridFn, Grid1D, discretize_generator, solve_feynman_kac
from .model import LambdaPair, ModelSpec, eval_f, eval_l
from .policy_eval import entropy_R
from .sde_sim import RngStream, SimConfig, UniformInit, simulate_uncontrolled

logger = logging.getLogger(__name__)

# stream domains; path streams use domain 1 + outer index
_INIT_DOMAIN = 10_000_001
_TARGET_DOMAIN = 10_000_002
_BATCH_DOMAIN = 10_000_003

_CKPT_MAGIC = b"RIVN"
_CKPT_VERSION = 2


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class ValueNet:
    """Fully connected ``1 -> hidden... -> 1`` tanh network with a nonnegative output.

    ``value(x) = output_scale * softness * softplus(net(x / input_scale) / softness)``.
    A softness above one widens the near-linear part of the output map, so an
    overshoot below zero does not immediately land where the map's gradient
    vanishes.  Parameters live in one flat vector, layer by layer, each layer as
    row-major ``W`` (out x in) then ``b``.
    """

    sizes: tuple = (1, 64, 64, 64, 1)
    params: np.ndarray = None
    input_scale: float = 4.0
    output_scale: float = 1.0
    softness: float = 1.0

    def __post_init__(self):
        if not self.softness > 0:
            raise InvalidSpec("softness must be positive")
        self.sizes = tuple(int(s) for s in self.sizes)
        if self.sizes[0] != 1 or self.sizes[-1] != 1 or len(self.sizes) < 2:
            raise InvalidSpec(f"network must map 1 -> ... -> 1, got {self.sizes}")
        n = self.n_params
        if self.params is None:
            self.params = np.zeros(n)
        self.params = np.asarray(self.params, dtype=float)
        if self.params.shape != (n,):
            raise InvalidSpec(f"expected {n} parameters, got {self.params.shape}")

    @property
    def n_params(self) -> int:
        return sum(o * i + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))

    def layers(self, params=None):
        """``[(W, b), ...]`` views into the flat parameter vector."""
        p = self.params if params is None else params
        out, k = [], 0
        for i, o in zip(self.sizes[:-1], self.sizes[1:]):
            W = p[k:k + o * i].reshape(o, i)
            k += o * i
            out.append((W, p[k:k + o]))
            k += o
        return out

    @classmethod
    def initialized(cls, rng: RngStream, sizes=(1, 64, 64, 64, 1), **kw) -> "ValueNet":
        """Glorot-uniform weights, zero biases."""
        net = cls(sizes, **kw)
        for W, b in net.layers():
            fan_out, fan_in = W.shape
            a = math.sqrt(6.0 / (fan_in + fan_out))
            W[...] = a * (2.0 * rng.random(W.shape) - 1.0)
            b[...] = 0.0
        return net

    def copy(self) -> "ValueNet":
        return replace(self, params=self.params.copy())

    def __call__(self, x):
        return net_forward(self, x)


def _forward(net: ValueNet, x, params=None):
    x = np.asarray(x, dtype=float)
    a = x.reshape(-1, 1) / net.input_scale
    acts = [a]
    layers = net.layers(params)
    for W, b in layers[:-1]:
        a = np.tanh(a @ W.T + b)
        acts.append(a)
    W, b = layers[-1]
    z = (a @ W.T + b)[:, 0]
    return net.output_scale * net.softness * _softplus(z / net.softness), (acts, z, layers)


def _backward(net: ValueNet, cache, upstream):
    acts, z, layers = cache
    g = (np.asarray(upstream, dtype=float).reshape(-1) * net.output_scale * _sigmoid(z / net.softness))[:, None]
    grads = []
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        a = acts[k]
        grads.append((g.T @ a, g.sum(axis=0)))
        if k > 0:
            g = (g @ W) * (1.0 - a * a)
    out = []
    for gW, gb in reversed(grads):
        out.append(gW.ravel())
        out.append(gb)
    return np.concatenate(out)


def net_forward(net: ValueNet, x):
    """Network value at ``x`` (scalar in, float out; array in, array out)."""
    v, _ = _forward(net, x)
    return float(v[0]) if np.ndim(x) == 0 else v.reshape(np.shape(x))


def net_backward(net: ValueNet, x, upstream):
    """``sum_j upstream_j * d value(x_j) / d params`` by reverse accumulation."""
    _, cache = _forward(net, x)
    return _backward(net, cache, np.broadcast_to(upstream, np.shape(np.atleast_1d(x))))


def lipschitz_bound(net: ValueNet) -> float:
    """Product of layer spectral norms times the input/output scalings."""
    norms = [np.linalg.norm(W, 2) for W, _ in net.layers()]
    return net.output_scale / net.input_scale * float(np.prod(norms))


@dataclass
class AdamWState:
    """Adam with decoupled weight decay (decay applied as ``p -= lr * wd * p``)."""

    n: int
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.n)
        if self.v is None:
            self.v = np.zeros(self.n)

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        """Update ``params`` in place."""
        self.step_count += 1
        t = self.step_count
        params *= 1.0 - self.lr * self.weight_decay
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** t)
        vhat = self.v / (1 - self.beta2 ** t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _log_mean_exp_min(g, lam):
    m = g.min(axis=-1)
    return m - lam * np.log(np.mean(np.exp(-(g - m[..., None]) / lam), axis=-1))


def mc_nonlocal_target(psi, x: float, lambda2: float, n_samples: int, rng: RngStream, spec: ModelSpec) -> float:
    """Monte Carlo soft-min ``M^lambda2 psi(x)`` from ``n_samples`` draws of ``zeta ~ N(-x, 1)``."""
    if n_samples < 2:
        raise InvalidSpec("need at least two Monte Carlo samples")
    zeta = rng.normal(n_samples) - x
    g = np.asarray(psi(x + zeta), dtype=float) + eval_l(spec, zeta)
    return float(_log_mean_exp_min(g, lambda2))


def mc_nonlocal_targets(psi, xs, lambda2: float, n_samples: int, rng: RngStream, spec: ModelSpec,
                        chunk: int = 4096) -> np.ndarray:
    """Monte Carlo targets at many states sharing one set of post-jump draws.

    The post-jump states ``z = x + zeta`` are standard normal for every ``x``, so one
    draw ``z_1..z_n`` serves all states and ``psi`` is evaluated only ``n`` times.
    """
    z = rng.normal(n_samples)
    pz = np.asarray(psi(z), dtype=float)
    xs = np.asarray(xs, dtype=float)
    flat = xs.reshape(-1)
    out = np.empty_like(flat)
    for s in range(0, flat.size, chunk):
        xc = flat[s:s + chunk]
        g = pz[None, :] + eval_l(spec, z[None, :] - xc[:, None])
        out[s:s + chunk] = _log_mean_exp_min(g, lambda2)
    return out.reshape(xs.shape)


def intensity_from_values(m_target, psi_x, lambda1: float, pi_max: float):
    """``clamp(exp(-(m - psi(x))/lambda1), 0, pi_max)`` and the clamp mask."""
    expo = np.minimum(-(m_target - psi_x) / lambda1, math.log(pi_max) + 1.0)
    raw = np.exp(expo)
    clamped = raw >= pi_max
    return np.where(clamped, pi_max, raw), clamped


def td_residual(net, x_i, x_next, pi_i, m_target, spec: ModelSpec, lambda1: float, dt: float):
    """One-step TD error ``psi(x_i) - e^{-r dt}(1 - pi dt) psi(x') - [f + pi m - lambda1 R(pi)] dt``.

    ``net`` may be any vectorized callable, e.g. a ``GridFn``.
    """
    a = np.asarray(net(x_i), dtype=float)
    b = np.asarray(net(x_next), dtype=float)
    pi_i = np.asarray(pi_i, dtype=float)
    src = eval_f(spec, x_i) + pi_i * m_target - lambda1 * entropy_R(pi_i)
    out = a - math.exp(-spec.discount * dt) * (1.0 - pi_i * dt) * b - src * dt
    return out if np.ndim(out) else float(out)


def _td_terms(a, b, f_i, m_target, lambda1, dt, disc, pi_max, gradient):
    """Loss and its derivatives w.r.t. ``psi(x_i)`` and ``psi(x')``."""
    n = a.size
    pi, clamped = intensity_from_values(m_target, a, lambda1, pi_max)
    src = f_i + pi * m_target - lambda1 * entropy_R(pi)
    delta = a - disc * (1.0 - pi * dt) * b - src * dt
    loss = float(np.mean(delta * delta))
    up = 2.0 * delta / n
    if gradient == "semi":
        return loss, up, None, float(np.mean(clamped))
    if gradient == "full":
        with np.errstate(divide="ignore"):
            ddelta_dpi = dt * (disc * b - m_target - lambda1 * np.log(np.where(pi > 0, pi, 1.0)))
        dpi_da = np.where(clamped, 0.0, pi / lambda1)
        return loss, up * (1.0 + ddelta_dpi * dpi_da), up * (-disc * (1.0 - pi * dt)), float(np.mean(clamped))
    raise ValueError(f"unknown gradient mode {gradient!r}")


def td_loss_and_grad(net: ValueNet, x_i, x_next, m_target, spec: ModelSpec, lambda1: float, dt: float,
                     pi_max: float, gradient: str = "semi", params=None):
    """Mean squared TD error over a batch of transitions and its parameter gradient.

    The intensity is recomputed from the current network at ``x_i``.  With
    ``gradient="full"`` the exact derivative of the loss is returned, including
    the paths through ``psi(x')`` and through the intensity.  With ``"semi"`` the
    bootstrap value ``psi(x')`` and the intensity are held fixed (TD(0)).

    Returns:
        ``(loss, grad, clamp_fraction)``.
    """
    n = len(x_i)
    v, cache = _forward(net, np.concatenate([x_i, x_next]), params)
    disc = math.exp(-spec.discount * dt)
    loss, ua, ub, clamp = _td_terms(v[:n], v[n:], eval_f(spec, x_i), m_target, lambda1, dt, disc, pi_max, gradient)
    upstream = np.concatenate([ua, np.zeros(n) if ub is None else ub])
    return loss, _backward(net, cache, upstream), clamp


class NodeInterpolation:
    """Linear interpolation from a uniform node grid to a fixed set of states.

    The nodes cover ``[min(x), max(x)]`` at ``spacing``.  Network values at the
    states are interpolated from values at the nodes, and state-level
    derivatives are scattered back to the nodes with the same weights, so the
    gradient is exact for the interpolated network.
    """

    def __init__(self, x, spacing: float = 0.01):
        x = np.asarray(x, dtype=float)
        lo, hi = float(x.min()), float(x.max())
        n = max(2, int(math.ceil((hi - lo) / spacing)) + 1)
        self.nodes = lo + spacing * np.arange(n)
        u = (x - lo) / spacing
        self.idx = np.minimum(np.floor(u).astype(np.int64), n - 2)
        self.w = u - self.idx

    def values(self, node_values):
        return node_values[self.idx] * (1.0 - self.w) + node_values[self.idx + 1] * self.w

    def scatter(self, upstream):
        n = self.nodes.size
        return (np.bincount(self.idx, (1.0 - self.w) * upstream, minlength=n)
                + np.bincount(self.idx + 1, self.w * upstream, minlength=n))


def td_loss_and_grad_interpolated(net: ValueNet, interp_i: NodeInterpolation, interp_next: NodeInterpolation,
                                  f_i, m_target, lambda1: float, dt: float, disc: float, pi_max: float,
                                  gradient: str = "semi"):
    """As :func:`td_loss_and_grad` with network values interpolated from node grids."""
    nodes = np.concatenate([interp_i.nodes, interp_next.nodes])
    v, cache = _forward(net, nodes)
    k = interp_i.nodes.size
    a, b = interp_i.values(v[:k]), interp_next.values(v[k:])
    loss, ua, ub, clamp = _td_terms(a, b, f_i, m_target, lambda1, dt, disc, pi_max, gradient)
    up_next = np.zeros(nodes.size - k) if ub is None else interp_next.scatter(ub)
    upstream = np.concatenate([interp_i.scatter(ua), up_next])
    return loss, _backward(net, cache, upstream), clamp


@dataclass(frozen=True)
class TrainConfig:
    n_outer: int = 30
    n_inner: int = 400
    batch: int = 64
    pi_max: float | None = None
    mc_jump_samples: int = 512
    sim: SimConfig = SimConfig(dt=0.01, horizon=20.0, batch=64, x0=UniformInit(-4.0, 4.0))
    lr: float = 1e-3
    weight_decay: float = 1e-4
    minibatch: int | None = None
    interp_spacing: float = 0.01
    gradient: str = "semi"
    hidden: tuple = (64, 64, 64)
    input_scale: float = 4.0
    output_scale: float = 1.0
    softness: float = 10.0
    prefit_window: tuple = (-6.0, 6.0)
    prefit_tol: float = 1e-3
    eval_window: tuple = (-3.0, 3.0)
    record_wallclock: bool = False

    def __post_init__(self):
        for name in ("n_outer", "n_inner", "batch", "mc_jump_samples"):
            if getattr(self, name) < 1:
                raise InvalidSpec(f"{name} must be positive")
        if self.minibatch is not None and self.minibatch < 1:
            raise InvalidSpec("minibatch must be positive or None for full batches")
        if not self.interp_spacing > 0:
            raise InvalidSpec("interp_spacing must be positive")
        if not self.softness > 0:
            raise InvalidSpec("softness must be positive")
        if self.mc_jump_samples < 2:
            raise InvalidSpec("mc_jump_samples must be at least 2")
        if not (self.lr > 0 and self.weight_decay >= 0):
            raise InvalidSpec("learning rate must be positive and weight decay nonnegative")
        if not self.effective_pi_max * self.sim.dt < 1:
            raise InvalidSpec("pi_max * dt must be below 1")
        if self.gradient not in ("semi", "full"):
            raise InvalidSpec(f"gradient must be 'semi' or 'full', got {self.gradient!r}")

    @property
    def effective_pi_max(self) -> float:
        return 0.5 / self.sim.dt if self.pi_max is None else float(self.pi_max)

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass
class TrainHistory:
    outer_iter: list = field(default_factory=list)
    mean_loss: list = field(default_factory=list)
    rel_l2: list = field(default_factory=list)
    clamp_fraction: list = field(default_factory=list)
    wallclock_s: list = field(default_factory=list)
    prefit_rel_l2: float = float("nan")

    def write_csv(self, fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["outer_iter", "mean_loss", "rel_l2_vs_reference", "wallclock_s"])
        for row in zip(self.outer_iter, self.mean_loss, self.rel_l2, self.wallclock_s):
            w.writerow([row[0]] + [format(v, ".17g") for v in row[1:]])


def prefit(net: ValueNet, target: GridFn, window=(-6.0, 6.0), tol: float = 1e-3, n_points: int = 601,
           max_iter: int = 5000) -> float:
    """Least-squares fit of ``net`` to ``target`` on ``window`` by L-BFGS; returns the rel-L2 error."""
    x = np.linspace(*window, n_points)
    y = np.asarray(target(x), dtype=float)
    scale = float(np.mean(y * y))

    def fun(p):
        v, cache = _forward(net, x, p)
        r = v - y
        return float(np.mean(r * r)) / scale, _backward(net, cache, 2.0 * r / (x.size * scale))

    goal = (tol / 4) ** 2

    def stop_early(intermediate_result):
        if intermediate_result.fun < goal:
            raise StopIteration

    res = minimize(fun, net.params.copy(), jac=True, method="L-BFGS-B", callback=stop_early,
                   options={"maxiter": max_iter, "ftol": 1e-16, "gtol": 1e-12})
    net.params[...] = res.x
    err = math.sqrt(_trap((net_forward(net, x) - y) ** 2, x) / _trap(y * y, x))
    if err >= tol:
        logger.warning("pre-fit reached rel-L2 %.3g, above %.3g", err, tol)
    return err


def _trap(y, x):
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)))


def feynman_kac_reference(spec: ModelSpec, grid: Grid1D | None = None) -> GridFn:
    grid = grid or Grid1D(-8.0, 8.0, 1601)
    return solve_feynman_kac(discretize_generator(spec, grid), spec, grid)


def train(spec: ModelSpec, lambdas: LambdaPair, cfg: TrainConfig | None = None, seed: int = 0,
          reference: GridFn | None = None, init_value: GridFn | None = None, callback=None):
    """Outer fixed-point loop with inner TD gradient steps.

    Args:
        reference: value compared against after every outer iteration (rel-L2 on
            ``cfg.eval_window``).
        init_value: function the network is pre-fit to; the never-intervene cost
            by default.
        callback: called as ``callback(n, net, history)`` after each outer iteration.

    Returns:
        ``(net, history)``.

    Raises:
        Diverged: loss above 1e6 or non-finite parameters.
    """
    cfg = cfg or TrainConfig()
    sim = cfg.sim.replace(batch=cfg.batch, seed=seed)
    start = time.perf_counter()
    sizes = (1, *cfg.hidden, 1)
    net = ValueNet.initialized(RngStream(seed, _INIT_DOMAIN), sizes, input_scale=cfg.input_scale,
                               output_scale=cfg.output_scale, softness=cfg.softness)
    hist = TrainHistory()
    hist.prefit_rel_l2 = prefit(net, init_value or feynman_kac_reference(spec), cfg.prefit_window, cfg.prefit_tol)
    opt = AdamWState(net.n_params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    pi_max = cfg.effective_pi_max
    dt = sim.dt
    eval_x = np.linspace(*cfg.eval_window, 601)
    for n in range(cfg.n_outer):
        snapshot = net.copy()
        paths = simulate_uncontrolled(spec, sim, domain=1 + n).states
        x_i = paths[:, :-1].reshape(-1)
        x_next = paths[:, 1:].reshape(-1)
        m = mc_nonlocal_targets(snapshot, x_i, lambdas.lambda2, cfg.mc_jump_samples,
                                RngStream(seed, (_TARGET_DOMAIN, n)), spec)
        losses, clamps = [], []
        if cfg.minibatch is None:
            interp_i = NodeInterpolation(x_i, cfg.interp_spacing)
            interp_next = NodeInterpolation(x_next, cfg.interp_spacing)
            f_i = eval_f(spec, x_i)
            disc = math.exp(-spec.discount * dt)
        else:
            pick = RngStream(seed, (_BATCH_DOMAIN, n))
            mb = min(cfg.minibatch, x_i.size)
        for _ in range(cfg.n_inner):
            if cfg.minibatch is None:
                loss, grad, clamp = td_loss_and_grad_interpolated(
                    net, interp_i, interp_next, f_i, m, lambdas.lambda1, dt, disc, pi_max, cfg.gradient)
            else:
                idx = pick.generator.integers(0, x_i.size, mb)
                loss, grad, clamp = td_loss_and_grad(net, x_i[idx], x_next[idx], m[idx], spec,
                                                     lambdas.lambda1, dt, pi_max, cfg.gradient)
            if not math.isfinite(loss) or loss > 1e6:
                raise Diverged(f"TD loss {loss:.3g} at outer iteration {n}")
            opt.step(net.params, grad)
            losses.append(loss)
            clamps.append(clamp)
        if not np.all(np.isfinite(net.params)):
            raise Diverged(f"non-finite parameters after outer iteration {n}")
        hist.outer_iter.append(n)
        hist.mean_loss.append(float(np.mean(losses)))
        hist.clamp_fraction.append(float(np.mean(clamps)))
        if reference is not None:
            hist.rel_l2.append(_rel_l2_on(net, reference, eval_x))
        else:
            hist.rel_l2.append(float("nan"))
        hist.wallclock_s.append(time.perf_counter() - start if cfg.record_wallclock else 0.0)
        logger.info("outer %d loss %.3e rel_l2 %.4f", n, hist.mean_loss[-1], hist.rel_l2[-1])
        if callback is not None:
            callback(n, net, hist)
    return net, hist


def _rel_l2_on(net, reference, x):
    ref = np.asarray(reference(x), dtype=float)
    d = net_forward(net, x) - ref
    return math.sqrt(_trap(d * d, x) / _trap(ref * ref, x))


def relative_error(net: ValueNet, reference: GridFn, window=(-3.0, 3.0)) -> float:
    return rel_l2_error(lambda x: net_forward(net, x), reference, window)


def save_checkpoint(net: ValueNet, path) -> None:
    """Binary checkpoint: magic, version, layer sizes, scales, little-endian float64 parameters."""
    with open(path, "wb") as fh:
        fh.write(write_checkpoint_bytes(net))


def write_checkpoint_bytes(net: ValueNet) -> bytes:
    head = _CKPT_MAGIC + struct.pack("<II", _CKPT_VERSION, len(net.sizes))
    head += struct.pack(f"<{len(net.sizes)}I", *net.sizes)
    head += struct.pack("<ddd", net.input_scale, net.output_scale, net.softness)
    return head + net.params.astype("<f8").tobytes()


def load_checkpoint(path) -> ValueNet:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _CKPT_MAGIC:
        raise InvalidSpec("not a value-network checkpoint")
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != _CKPT_VERSION:
        raise InvalidSpec(f"unsupported checkpoint version {version}")
    off = 12
    sizes = struct.unpack_from(f"<{n_layers}I", data, off)
    off += 4 * n_layers
    s_in, s_out, soft = struct.unpack_from("<ddd", data, off)
    off += 24
    params = np.frombuffer(data, dtype="<f8", offset=off).astype(float)
    return ValueNet(sizes, params, s_in, s_out, soft)
