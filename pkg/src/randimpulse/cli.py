"""Command-line entry point: ``randimpulse <subcommand> [--config PATH] ...``.

Configuration is a flat INI file.  Every section is optional; absent values
fall back to the benchmark model and the module defaults.  Unknown sections or
keys are rejected.  Exit codes: 0 success, 2 validation or convergence failure,
3 usage or parse error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import math
import os
import re
import sys
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .exceptions import InvalidSpec, NoConvergence, ParseError, RandImpulseError
from .fixed_point import (
    OuterConfig,
    flat_region_width,
    lambda_sweep,
    solve_classical,
    solve_randomized,
)
from .grid_fd import Grid1D, discretize_generator, solve_feynman_kac
from .model import (
    Affine,
    Constant,
    LambdaPair,
    ModelSpec,
    PiecewiseLinear,
    TwoSidedLinear,
    benchmark_default,
    validate_assumptions,
)
from .nonlocal_op import QuadratureRule, gibbs_density
from .policy_eval import RandomizedPolicy, evaluate_policy, write_evaluation_csv
from .sde_sim import PointMass, SimConfig, UniformInit
from .td_learn import TrainConfig, net_forward, train, write_checkpoint_bytes

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 2, 3

_SCHEMA = {
    "model": ("drift", "volatility", "discount", "running_cost", "intervention_cost",
              "h", "p", "K_plus", "K_minus", "k_plus", "k_minus"),
    "lambda": ("lambda1", "lambda2"),
    "grid": ("x_min", "x_max", "n_nodes"),
    "solver": ("tol_outer", "max_outer", "tol_newton", "quad_half_width", "quad_nodes"),
    "sim": ("dt", "horizon", "batch", "x0_lo", "x0_hi"),
    "train": ("n_outer", "n_inner", "batch", "mc_jump_samples", "lr", "weight_decay", "pi_max",
              "gradient", "hidden", "minibatch", "interp_spacing", "softness", "record_wallclock"),
    "eval": ("x0", "n_paths", "horizon", "dt", "chunk", "policy"),
    "sweep": ("lambdas", "sigmas"),
    "run": ("seed", "out_dir"),
}

_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"


def _float(section, key, text) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"[{section}] {key}: not a number: {text!r}") from None
    if not math.isfinite(v):
        raise ParseError(f"[{section}] {key}: must be finite")
    return v


def _int(section, key, text) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"[{section}] {key}: not an integer: {text!r}") from None


def _floats(section, key, text, sep=",") -> list:
    parts = [t for t in (s.strip() for s in text.split(sep)) if t]
    return [_float(section, key, t) for t in parts]


def parse_descriptor(text: str, key: str = "descriptor"):
    """Coefficient descriptor from a string.

    Accepted forms: a bare number, ``constant(c)``, ``affine(a, s)``,
    ``two_sided(level_plus, slope_plus, level_minus, slope_minus)`` and
    ``piecewise(k1 k2 ..., v1 v2 ..., left_slope, right_slope)``.
    """
    s = text.strip()
    if re.fullmatch(_NUM, s):
        return Constant(float(s))
    m = re.fullmatch(r"([a-z_]+)\s*\((.*)\)", s)
    if not m:
        raise ParseError(f"[model] {key}: cannot parse descriptor {text!r}")
    name, args = m.group(1), [a.strip() for a in m.group(2).split(",")]
    try:
        if name == "constant" and len(args) == 1:
            return Constant(_float("model", key, args[0]))
        if name == "affine" and len(args) == 2:
            return Affine(*(_float("model", key, a) for a in args))
        if name == "two_sided" and len(args) == 4:
            return TwoSidedLinear(*(_float("model", key, a) for a in args))
        if name == "piecewise" and len(args) in (2, 4):
            knots = _floats("model", key, args[0], sep=" ")
            values = _floats("model", key, args[1], sep=" ")
            slopes = [_float("model", key, a) for a in args[2:]] or [0.0, 0.0]
            return PiecewiseLinear(tuple(knots), tuple(values), *slopes)
    except InvalidSpec as exc:
        raise ParseError(f"[model] {key}: {exc}") from None
    raise ParseError(f"[model] {key}: unknown descriptor form {name}(...) with {len(args)} arguments")


def _descriptor_text(d) -> str:
    if isinstance(d, Constant):
        return repr(d.value)
    if isinstance(d, Affine):
        return f"affine({d.intercept!r}, {d.slope!r})"
    if isinstance(d, TwoSidedLinear):
        return f"two_sided({d.level_plus!r}, {d.slope_plus!r}, {d.level_minus!r}, {d.slope_minus!r})"
    if isinstance(d, PiecewiseLinear):
        k = " ".join(repr(v) for v in d.knots)
        v = " ".join(repr(v) for v in d.values)
        return f"piecewise({k}, {v}, {d.left_slope!r}, {d.right_slope!r})"
    raise TypeError(type(d).__name__)


@dataclass
class RunConfig:
    """Resolved configuration for one command."""

    spec: ModelSpec = field(default_factory=benchmark_default)
    lambdas: tuple = (0.5, 0.5)
    grid: Grid1D = field(default_factory=lambda: Grid1D(-8.0, 8.0, 1601))
    solver: OuterConfig = field(default_factory=OuterConfig)
    rule: QuadratureRule | None = None
    quad: tuple = (8.0, 4001)
    sim: SimConfig = field(default_factory=SimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_x0: tuple = (-2.0, 0.0, 2.0)
    eval_n_paths: int = 10_000
    eval_horizon: float = 80.0
    eval_dt: float = 0.01
    eval_chunk: int = 1000
    eval_policy: str = "optimal"
    sweep_lambdas: tuple = ((1.0, 1.0), (0.5, 0.5), (0.1, 0.1), (0.05, 0.05))
    sweep_sigmas: tuple = (0.1, 0.2, 0.3, 0.4)
    seed: int = 0
    out_dir: str = "out"

    def lambda_pair(self) -> LambdaPair:
        return LambdaPair(*self.lambdas)

    def to_ini(self) -> str:
        """Fully resolved configuration in the input format."""
        s, t = self.spec, self.train
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["model"] = {
            "drift": _descriptor_text(s.drift),
            "volatility": _descriptor_text(s.volatility),
            "discount": repr(s.discount),
            "running_cost": _descriptor_text(s.running_cost),
            "intervention_cost": _descriptor_text(s.intervention_cost),
        }
        cp["lambda"] = {"lambda1": repr(self.lambdas[0]), "lambda2": repr(self.lambdas[1])}
        cp["grid"] = {"x_min": repr(self.grid.x_min), "x_max": repr(self.grid.x_max), "n_nodes": str(self.grid.n)}
        cp["solver"] = {"tol_outer": repr(self.solver.tol_outer), "max_outer": str(self.solver.max_outer),
                        "tol_newton": repr(self.solver.tol_newton), "quad_half_width": repr(self.quad[0]),
                        "quad_nodes": str(self.quad[1])}
        x0 = self.sim.x0
        cp["sim"] = {"dt": repr(self.sim.dt), "horizon": repr(self.sim.horizon), "batch": str(self.sim.batch),
                     "x0_lo": repr(x0.lo), "x0_hi": repr(x0.hi)}
        cp["train"] = {"n_outer": str(t.n_outer), "n_inner": str(t.n_inner), "batch": str(t.batch),
                       "mc_jump_samples": str(t.mc_jump_samples), "lr": repr(t.lr),
                       "weight_decay": repr(t.weight_decay), "pi_max": repr(t.effective_pi_max),
                       "gradient": t.gradient, "hidden": " ".join(str(h) for h in t.hidden),
                       "minibatch": "full" if t.minibatch is None else str(t.minibatch),
                       "interp_spacing": repr(t.interp_spacing), "softness": repr(t.softness),
                       "record_wallclock": str(t.record_wallclock).lower()}
        cp["eval"] = {"x0": ", ".join(repr(v) for v in self.eval_x0), "n_paths": str(self.eval_n_paths),
                      "horizon": repr(self.eval_horizon), "dt": repr(self.eval_dt), "chunk": str(self.eval_chunk),
                      "policy": self.eval_policy}
        cp["sweep"] = {"lambdas": ", ".join(f"{a!r}:{b!r}" for a, b in self.sweep_lambdas),
                       "sigmas": ", ".join(repr(v) for v in self.sweep_sigmas)}
        cp["run"] = {"seed": str(self.seed), "out_dir": self.out_dir}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _model_from_section(sec) -> ModelSpec:
    for key in ("drift", "volatility", "discount"):
        if key not in sec:
            raise ParseError(f"[model] missing key {key!r}")
    bench = ("h", "p")
    if "running_cost" in sec:
        if any(k in sec for k in bench):
            raise ParseError("[model] give either running_cost or h/p, not both")
        running = parse_descriptor(sec["running_cost"], "running_cost")
    else:
        missing = [k for k in bench if k not in sec]
        if missing:
            raise ParseError(f"[model] missing key(s) {missing} (or give running_cost)")
        running = TwoSidedLinear(0.0, _float("model", "h", sec["h"]), 0.0, _float("model", "p", sec["p"]))
    fixed = ("K_plus", "k_plus", "K_minus", "k_minus")
    if "intervention_cost" in sec:
        if any(k in sec for k in fixed):
            raise ParseError("[model] give either intervention_cost or K_plus/K_minus/k_plus/k_minus, not both")
        jump = parse_descriptor(sec["intervention_cost"], "intervention_cost")
    else:
        missing = [k for k in fixed if k not in sec]
        if missing:
            raise ParseError(f"[model] missing key(s) {missing} (or give intervention_cost)")
        jump = TwoSidedLinear(*(_float("model", k, sec[k]) for k in fixed))
    return ModelSpec(
        drift=parse_descriptor(sec["drift"], "drift"),
        volatility=parse_descriptor(sec["volatility"], "volatility"),
        discount=_float("model", "discount", sec["discount"]),
        running_cost=running,
        intervention_cost=jump,
    )


def _bool(section, key, text) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ParseError(f"[{section}] {key}: not a boolean: {text!r}")


def parse_lambda_list(text: str) -> tuple:
    """``"1:1, 0.5:0.5"`` to ``((1.0, 1.0), (0.5, 0.5))``."""
    out = []
    for item in (s.strip() for s in text.split(",")):
        if not item:
            continue
        parts = item.split(":")
        if len(parts) != 2:
            raise ParseError(f"lambda list entry {item!r} is not of the form l1:l2")
        out.append((_float("sweep", "lambdas", parts[0]), _float("sweep", "lambdas", parts[1])))
    return tuple(out)


def load_config(path: str | None = None, text: str | None = None) -> RunConfig:
    """Parse an INI configuration into a :class:`RunConfig`.

    Raises:
        ParseError: unreadable file, malformed value, unknown section or key.
    """
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        if path is not None:
            with open(path) as fh:
                cp.read_file(fh)
        elif text is not None:
            cp.read_string(text)
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise ParseError(f"malformed config: {exc}") from None
    for name in cp.sections():
        if name not in _SCHEMA:
            raise ParseError(f"unknown section [{name}]")
        unknown = sorted(set(cp[name]) - set(_SCHEMA[name]))
        if unknown:
            raise ParseError(f"[{name}] unknown key(s): {', '.join(unknown)}")
    rc = RunConfig()
    try:
        _fill(rc, cp)
    except InvalidSpec as exc:
        raise ParseError(str(exc)) from None
    return rc


def _fill(rc: RunConfig, cp):
    if cp.has_section("model"):
        try:
            rc.spec = _model_from_section(cp["model"])
        except InvalidSpec as exc:
            raise ParseError(f"[model] {exc}") from None
    if cp.has_section("lambda"):
        sec = cp["lambda"]
        rc.lambdas = tuple(_float("lambda", k, sec.get(k, repr(d))) for k, d in zip(("lambda1", "lambda2"), rc.lambdas))
    if cp.has_section("grid"):
        sec, g = cp["grid"], rc.grid
        rc.grid = Grid1D(_float("grid", "x_min", sec.get("x_min", repr(g.x_min))),
                         _float("grid", "x_max", sec.get("x_max", repr(g.x_max))),
                         _int("grid", "n_nodes", sec.get("n_nodes", str(g.n))))
    if cp.has_section("solver"):
        sec, o = cp["solver"], rc.solver
        rc.solver = OuterConfig(
            tol_outer=_float("solver", "tol_outer", sec.get("tol_outer", repr(o.tol_outer))),
            max_outer=_int("solver", "max_outer", sec.get("max_outer", str(o.max_outer))),
            tol_newton=_float("solver", "tol_newton", sec.get("tol_newton", repr(o.tol_newton))),
        )
        rc.quad = (_float("solver", "quad_half_width", sec.get("quad_half_width", repr(rc.quad[0]))),
                   _int("solver", "quad_nodes", sec.get("quad_nodes", str(rc.quad[1]))))
    if rc.quad != (8.0, 4001):
        rc.rule = QuadratureRule.uniform(*rc.quad)
    if cp.has_section("run"):
        sec = cp["run"]
        rc.seed = _int("run", "seed", sec.get("seed", "0"))
        rc.out_dir = sec.get("out_dir", rc.out_dir)
    if cp.has_section("sim"):
        sec, s = cp["sim"], rc.sim
        rc.sim = SimConfig(
            dt=_float("sim", "dt", sec.get("dt", repr(s.dt))),
            horizon=_float("sim", "horizon", sec.get("horizon", repr(s.horizon))),
            batch=_int("sim", "batch", sec.get("batch", str(s.batch))),
            x0=UniformInit(_float("sim", "x0_lo", sec.get("x0_lo", repr(s.x0.lo))),
                           _float("sim", "x0_hi", sec.get("x0_hi", repr(s.x0.hi)))),
        )
    kw = {"sim": rc.sim}
    if cp.has_section("train"):
        sec = cp["train"]
        for key in ("n_outer", "n_inner", "batch", "mc_jump_samples"):
            if key in sec:
                kw[key] = _int("train", key, sec[key])
        for key in ("lr", "weight_decay", "pi_max", "interp_spacing", "softness"):
            if key in sec:
                kw[key] = _float("train", key, sec[key])
        if "gradient" in sec:
            kw["gradient"] = sec["gradient"].strip()
        if "hidden" in sec:
            kw["hidden"] = tuple(_int("train", "hidden", h) for h in sec["hidden"].replace(",", " ").split())
        if "minibatch" in sec:
            mb = sec["minibatch"].strip().lower()
            kw["minibatch"] = None if mb in ("full", "none", "") else _int("train", "minibatch", mb)
        if "record_wallclock" in sec:
            kw["record_wallclock"] = _bool("train", "record_wallclock", sec["record_wallclock"])
    rc.train = TrainConfig(**kw)
    if cp.has_section("eval"):
        sec = cp["eval"]
        if "x0" in sec:
            rc.eval_x0 = tuple(_floats("eval", "x0", sec["x0"]))
        rc.eval_n_paths = _int("eval", "n_paths", sec.get("n_paths", str(rc.eval_n_paths)))
        rc.eval_horizon = _float("eval", "horizon", sec.get("horizon", repr(rc.eval_horizon)))
        rc.eval_dt = _float("eval", "dt", sec.get("dt", repr(rc.eval_dt)))
        rc.eval_chunk = _int("eval", "chunk", sec.get("chunk", str(rc.eval_chunk)))
        rc.eval_policy = sec.get("policy", rc.eval_policy).strip()
        if rc.eval_policy not in ("optimal", "never"):
            raise ParseError(f"[eval] policy must be 'optimal' or 'never', got {rc.eval_policy!r}")
    if cp.has_section("sweep"):
        sec = cp["sweep"]
        if "lambdas" in sec:
            rc.sweep_lambdas = parse_lambda_list(sec["lambdas"])
        if "sigmas" in sec:
            rc.sweep_sigmas = tuple(_floats("sweep", "sigmas", sec["sigmas"]))


# --- output helpers -------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def atomic_write(path: str, writer, binary: bool = False) -> None:
    """Write through a temporary file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb" if binary else "w", **({} if binary else {"newline": ""})) as fh:
            writer(fh)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_table(path: str, header, rows) -> None:
    def go(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])

    atomic_write(path, go)


# --- commands -------------------------------------------------------------------------


def cmd_validate(rc: RunConfig, args) -> int:
    report = validate_assumptions(rc.spec)
    print(report)
    return EXIT_OK if report.passed else EXIT_FAILURE


# Conditions that only constrain a nonzero running cost.  With f identically
# zero the value is zero and these are vacuous, provided r exceeds G.
_ZERO_COST_VACUOUS = frozenset({"f Lipschitz, L_f > 0", "r - G in (0, L_f/L_l)", "h - r k_- > 0", "p - r k_+ > 0"})


def _require_valid(rc: RunConfig) -> None:
    spec = rc.spec
    failed = validate_assumptions(spec).failed()
    if spec.lip_f == 0 and float(spec.running_cost(0.0)) == 0 and spec.discount > spec.G:
        failed = [c for c in failed if c.name not in _ZERO_COST_VACUOUS]
    if failed:
        raise InvalidSpec("model fails standing assumptions: " + ", ".join(c.name for c in failed))


def _solve(rc: RunConfig):
    _require_valid(rc)
    return solve_randomized(rc.spec, rc.lambda_pair(), rc.grid, rc.solver, rc.rule)


def cmd_solve_fd(rc: RunConfig, args) -> int:
    res = _solve(rc)
    x = res.grid.nodes
    write_table(os.path.join(rc.out_dir, "psi_lambda.csv"), ("x", "psi", "m_psi", "pi_star", "psi0"),
                zip(x, res.psi.values, res.m_psi.values, res.pi_star.values, res.psi0.values))
    write_table(os.path.join(rc.out_dir, "diagnostics.csv"), ("n", "d_n"),
                ((k + 1, d) for k, d in enumerate(res.iterates)))
    print(f"outer_iters={res.outer_iters} q_hat={res.q_hat:.6g} r_squared={res.r_squared:.6g} "
          f"residual={res.residual:.3e}")
    return EXIT_OK


def cmd_solve_classical(rc: RunConfig, args) -> int:
    _require_valid(rc)
    res = solve_classical(rc.spec, rc.grid, rc.solver)
    write_table(os.path.join(rc.out_dir, "psi_classical.csv"), ("x", "psi", "in_continuation"),
                zip(res.grid.nodes, res.psi.values, res.continuation))
    cont = res.grid.nodes[res.continuation]
    region = f"[{cont.min():.4g}, {cont.max():.4g}]" if cont.size else "empty"
    print(f"outer_iters={res.outer_iters} residual={res.residual:.3e} continuation={region}")
    return EXIT_OK


def cmd_train(rc: RunConfig, args) -> int:
    rc.lambda_pair()
    if args.dry_run:
        sys.stdout.write(rc.to_ini())
        return EXIT_OK
    ref = _solve(rc)
    net, hist = train(rc.spec, rc.lambda_pair(), rc.train, seed=rc.seed, reference=ref.psi)
    atomic_write(os.path.join(rc.out_dir, "training_log.csv"), hist.write_csv)
    ckpt = write_checkpoint_bytes(net)
    atomic_write(os.path.join(rc.out_dir, "checkpoint.bin"), lambda fh: fh.write(ckpt), binary=True)
    x = rc.grid.nodes
    write_table(os.path.join(rc.out_dir, "psi_theta.csv"), ("x", "psi_theta", "psi_fd"),
                zip(x, net_forward(net, x), ref.psi.values))
    print(f"final rel_l2={hist.rel_l2[-1]:.6g} prefit rel_l2={hist.prefit_rel_l2:.3g}")
    return EXIT_OK


def cmd_evaluate(rc: RunConfig, args) -> int:
    if not rc.eval_x0:
        raise ParseError("evaluation needs at least one initial state")
    lambdas = rc.lambda_pair()
    if rc.eval_policy == "never":
        _require_valid(rc)
        fd = solve_feynman_kac(discretize_generator(rc.spec, rc.grid), rc.spec, rc.grid)
        policy = RandomizedPolicy.never()
        bound = float(np.abs(fd.values).max())
    else:
        res = _solve(rc)
        fd, policy = res.psi, RandomizedPolicy.from_solution(res)
        bound = float(np.abs(res.psi.values).max())
    rows = []
    for x0 in rc.eval_x0:
        sim = SimConfig(dt=rc.eval_dt, horizon=rc.eval_horizon, batch=1, seed=rc.seed, x0=PointMass(x0))
        est = evaluate_policy(rc.spec, policy, lambdas, sim, rc.eval_n_paths, chunk=rc.eval_chunk,
                              value_bound=bound)["intensity"]
        rows.append((x0, est, float(fd(x0))))
        print(f"x0={x0:g} estimate={est.mean:.6g} stderr={est.stderr:.3g} fd={float(fd(x0)):.6g} "
              f"inside_ci={est.contains(float(fd(x0)))}")
    atomic_write(os.path.join(rc.out_dir, "evaluation.csv"), lambda fh: write_evaluation_csv(rows, fh))
    return EXIT_OK


def cmd_sweep_lambda(rc: RunConfig, args) -> int:
    _require_valid(rc)
    lams = [LambdaPair(*p) for p in rc.sweep_lambdas]
    report = lambda_sweep(rc.spec, lams, rc.grid, rc.solver, rc.rule)
    atomic_write(os.path.join(rc.out_dir, "sweep.csv"), report.write_csv)
    for e in report.entries:
        status = "ok" if e.error is None else f"failed: {e.error}"
        print(f"lambda=({e.lambda1:g},{e.lambda2:g}) rel_l2={e.rel_l2_error:.6g} "
              f"lower_bound_ok={e.lower_bound_ok} {status}")
    return EXIT_FAILURE if any(e.error is not None for e in report.entries) else EXIT_OK


def sigma_tag(sigma: float) -> str:
    return format(sigma, "g")


def cmd_sweep_sigma(rc: RunConfig, args) -> int:
    lambdas = rc.lambda_pair()
    summary = []
    for sigma in rc.sweep_sigmas:
        spec = rc.spec.replace(volatility=Constant(sigma))
        report = validate_assumptions(spec)
        if not report.passed:
            raise InvalidSpec(f"sigma={sigma:g} fails standing assumptions")
        res = solve_randomized(spec, lambdas, rc.grid, rc.solver, rc.rule)
        tag = sigma_tag(sigma)
        write_table(os.path.join(rc.out_dir, f"psi_sigma_{tag}.csv"), ("x", "psi", "pi_star"),
                    zip(res.grid.nodes, res.psi.values, res.pi_star.values))
        law = res.jump_law(2.0)
        xi = law.table[0]
        density = gibbs_density(law, xi) * norm.pdf(xi, loc=-2.0)
        write_table(os.path.join(rc.out_dir, f"jump_density_sigma_{tag}.csv"), ("xi", "density"),
                    zip(xi, density))
        width = flat_region_width(res.pi_star)
        var = law.moments()[1]
        summary.append((sigma, float(res.psi(0.0)), width, var))
        print(f"sigma={sigma:g} psi(0)={summary[-1][1]:.6g} flat_width={width:.6g} jump_var_at_2={var:.6g}")
    write_table(os.path.join(rc.out_dir, "sigma_summary.csv"),
                ("sigma", "psi_at_0", "flat_width", "jump_var_at_2"), summary)
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "solve-fd": cmd_solve_fd,
    "solve-classical": cmd_solve_classical,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep-lambda": cmd_sweep_lambda,
    "sweep-sigma": cmd_sweep_sigma,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags(default) -> argparse.ArgumentParser:
    # Subcommands repeat the global flags with suppressed defaults so that a
    # flag given before the subcommand is not reset by the subparser.
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", metavar="PATH", default=default, help="INI configuration file")
    g.add_argument("--seed", type=int, default=default, help="override [run] seed")
    g.add_argument("--out-dir", metavar="PATH", default=default, help="override [run] out_dir")
    g.add_argument("--lambda1", type=float, default=default, help="override [lambda] lambda1")
    g.add_argument("--lambda2", type=float, default=default, help="override [lambda] lambda2")
    g.add_argument("-v", "--verbose", action="store_true", default=default or False,
                   help="log progress to stderr")
    return g


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="randimpulse", description="Entropy-regularized impulse control solvers.",
                parents=[_global_flags(None)])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _global_flags(argparse.SUPPRESS)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "train":
            sp.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
        if name == "evaluate":
            sp.add_argument("--x0", help="comma-separated initial states")
            sp.add_argument("--never", action="store_true", help="evaluate the never-intervene policy")
            sp.add_argument("--n-paths", type=int)
        if name == "sweep-lambda":
            sp.add_argument("--lambdas", help='list such as "1:1,0.5:0.5"')
        if name == "sweep-sigma":
            sp.add_argument("--sigmas", help="comma-separated volatilities")
    return p


def _apply_overrides(rc: RunConfig, args) -> None:
    if args.seed is not None:
        rc.seed = args.seed
    if args.out_dir is not None:
        rc.out_dir = args.out_dir
    l1 = rc.lambdas[0] if args.lambda1 is None else args.lambda1
    l2 = rc.lambdas[1] if args.lambda2 is None else args.lambda2
    rc.lambdas = (l1, l2)
    if getattr(args, "x0", None) is not None:
        rc.eval_x0 = tuple(_floats("eval", "x0", args.x0))
    if getattr(args, "never", False):
        rc.eval_policy = "never"
    if getattr(args, "n_paths", None) is not None:
        rc.eval_n_paths = args.n_paths
    if getattr(args, "lambdas", None) is not None:
        rc.sweep_lambdas = parse_lambda_list(args.lambdas)
    if getattr(args, "sigmas", None) is not None:
        rc.sweep_sigmas = tuple(_floats("sweep", "sigmas", args.sigmas))


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = load_config(args.config)
        _apply_overrides(rc, args)
        return COMMANDS[args.command](rc, args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidSpec, NoConvergence, RandImpulseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
