"""``solenoid-ab``: reproducible experiments with JSON/CSV reports.

Exit codes: 0 positive verdict, 1 usage or configuration error,
2 negative verdict (or a solver failure on a valid configuration).
"""

from __future__ import annotations

import argparse
import hashlib
import math
import sys
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .beltrami import (
    BeltramiField,
    ContractivityViolated,
    IterationBudgetExceeded,
    beltrami_residual,
    radial_stretch_mu,
    radial_stretch_solution,
    solve_normal,
)
from .config import NEEDS_SEED, SECTIONS, ConfigError, parse_config
from .counterexamples import (
    MU_BOUND,
    mu_sup_sample,
    residual_field,
    tail_sup_profile,
    verify_beltrami_identity,
    diophantine_increment_sups,
)
from .diophantine import (
    RESONANCE_TOL,
    CertificateFailure,
    NonzeroAverage,
    ResonantMode,
    certify_diophantine,
    convergence_profile,
    derivative_residual,
    factorial_cosine_series,
    solve_cohomological,
)
from .io import atomic_write_text, csv_text, dumps, grid_csv, grid_to_bytes, atomic_write_bytes
from .series import DivisibilityChain, PontryaginSeries, as_mode, s_norm, strip_norm
from .tower import (
    LeafGridSpec,
    LevelSolveError,
    PlaneGridSpec,
    affine_renormalize,
    bump,
    build_periodic_approximants,
    cauchy_diagnostics,
    constant_increment_family,
    counterexample_coefficient,
    default_sample_points,
    geometric_family,
    mobius_support_split,
    mu_s_norm,
    stationary_family,
    tower_solve,
    zero_family,
)

EXIT_OK, EXIT_USAGE, EXIT_NEGATIVE = 0, 1, 2


class Outcome:
    """What a command produced: report body, verdict, exit code, extra files."""

    def __init__(self, result, verdict, code, csv=None, blobs=None):
        self.result = result
        self.verdict = verdict
        self.code = code
        self.csv = csv or {}
        self.blobs = blobs or {}


class CommandFailure(Exception):
    def __init__(self, code, kind, message, details=None):
        super().__init__(message)
        self.code = code
        self.kind = kind
        self.details = details or {}


# -- shared builders ----------------------------------------------------------

def _series(spec) -> PontryaginSeries:
    if spec.kind == "factorial":
        return factorial_cosine_series(spec.levels, spec.dimension)
    terms = {}
    for t in spec.terms:
        try:
            q = as_mode(t.mode)
        except (ValueError, ZeroDivisionError) as exc:
            raise CommandFailure(EXIT_USAGE, "ConfigError", f"bad mode {t.mode}: {exc}")
        terms[q] = terms.get(q, 0) + complex(t.re, t.im)
    return PontryaginSeries(spec.dimension, terms)


def _chain(cfg, g: PontryaginSeries = None) -> DivisibilityChain:
    try:
        if cfg.chain is not None:
            return DivisibilityChain(tuple(cfg.chain))
        if cfg.factorial_chain is not None:
            return DivisibilityChain.factorial(cfg.factorial_chain)
    except ValueError as exc:
        raise CommandFailure(EXIT_USAGE, "ConfigError", str(exc))
    L = g.level if g is not None else 1
    return DivisibilityChain((1,) if L == 1 else (1, L))


def _rng(seed):
    return np.random.default_rng(seed)


# -- commands -------------------------------------------------------------------

def cmd_solve_diophantine(cfg, seed) -> Outcome:
    g = _series(cfg.series)
    omega = np.asarray(cfg.omega, dtype=float)
    if cfg.normalize:
        omega = omega / np.linalg.norm(omega)
    exponent = cfg.exponent or cfg.series.dimension
    for q in g.terms:
        d = float(sum(w * float(x) for w, x in zip(omega, q)))
        if abs(d) <= RESONANCE_TOL:
            raise ResonantMode(q, d)
    fv = certify_diophantine(omega, cfg.gamma, exponent, cfg.K)
    S = _chain(cfg, g)
    f, ledger = solve_cohomological(g, fv)
    period = g.level
    n = g.dimension
    rng = _rng(seed)
    pts = rng.uniform(0, period, (cfg.residual_points, n)) + 1j * rng.uniform(
        -(cfg.rho - cfg.delta), cfg.rho - cfg.delta, (cfg.residual_points, n))
    residual = derivative_residual(f, fv, g, pts)
    profile = convergence_profile(g, fv, S, cfg.rho, cfg.delta, cfg.threshold)
    ok = residual < cfg.residual_tol and profile.verdict == "CONVERGENT"
    result = {
        "omega": list(fv.entries),
        "gamma": fv.gamma,
        "exponent": fv.exponent,
        "K": fv.checked_radius,
        "certificate_minimum": fv.minimum,
        "chain": list(S.entries),
        "levels": [
            {"n_i": r.level, "increment": r.increment, "bound_term": r.bound_term}
            for r in profile.rows
        ],
        "verdict": profile.verdict,
        "residual": residual,
        "residual_ok": residual < cfg.residual_tol,
        "smallest_divisor": ledger.smallest,
        "solution": f.to_json_dict(),
    }
    rows = [(r.level, r.increment, r.bound_term) for r in profile.rows]
    csv = {"levels": csv_text(("n_i", "increment", "bound_term"), rows)}
    return Outcome(result, profile.verdict, EXIT_OK if ok else EXIT_NEGATIVE, csv)


def cmd_s_norm(cfg, seed) -> Outcome:
    g = _series(cfg.series)
    S = _chain(cfg, g)
    est = strip_norm(g, cfg.rho, cfg.samples_per_period)
    value = s_norm(g, S, cfg.rho)
    dominated = est.majorant_upper <= value * (1 + 1e-12) + 1e-300
    result = {
        "chain": list(S.entries),
        "rho": cfg.rho,
        "level": g.level,
        "strip_sampled_lower": est.sampled_lower,
        "strip_majorant": est.majorant_upper,
        "s_norm": value,
        "dominated": bool(dominated),
    }
    verdict = "DOMINATED" if dominated else "VIOLATED"
    csv = {"s_norm": csv_text(("rho", "sampled_lower", "majorant", "s_norm"),
                              [(cfg.rho, est.sampled_lower, est.majorant_upper, value)])}
    return Outcome(result, verdict, EXIT_OK if dominated else EXIT_NEGATIVE, csv)


def _beltrami_field(cfg):
    if cfg.field == "radial_stretch":
        fn = radial_stretch_mu(cfg.c, cfg.radius)
    else:
        def fn(z):
            r = np.abs(z)
            out = np.zeros_like(z)
            nz = r > 0
            out[nz] = cfg.c * bump(r[nz] / cfg.radius) * (z[nz] / r[nz]) ** 2
            return out
    return BeltramiField.from_function(fn, 0.0, cfg.half_width, cfg.N, k=abs(cfg.c))


def cmd_solve_beltrami(cfg, seed) -> Outcome:
    mu = _beltrami_field(cfg)
    f = solve_normal(mu, cfg.tol, cfg.max_iter)
    res = beltrami_residual(f, mu)
    factor = max(f.contraction) if f.contraction else 0.0
    checks = {"contraction": factor <= abs(cfg.c) + cfg.k_slack}
    result = {
        "field": cfg.field,
        "N": cfg.N,
        "half_width": cfg.half_width,
        "k": abs(cfg.c),
        "iterations": f.iterations,
        "last_update": f.residual,
        "contraction_factor": factor,
        "beltrami_residual": res.max_residual,
        "dilatation_violations": res.dilatation_violations,
    }
    if cfg.field == "radial_stretch":
        ref = radial_stretch_solution(cfg.c, cfg.radius)(f.values.z)
        err = float(np.max(np.abs(f.values.samples - ref)))
        result["reference_error"] = err
        checks["reference"] = err < cfg.max_error
    result["checks"] = checks
    ok = all(checks.values())
    blobs = {"f.grid": grid_to_bytes(f.values)}
    csv = {"f": grid_csv(f.values)}
    return Outcome(result, "SOLVED" if ok else "INACCURATE", EXIT_OK if ok else EXIT_NEGATIVE, csv, blobs)


def _tower_family(cfg):
    if cfg.family == "counterexample":
        S = DivisibilityChain(tuple(cfg.chain)) if cfg.chain else DivisibilityChain.factorial(cfg.terms)
        return build_periodic_approximants(counterexample_coefficient(cfg.terms), S,
                                           samples_per_2pi=cfg.samples_per_2pi)
    chain = tuple(cfg.chain) if cfg.chain else (1, 2, 4, 8, 16)
    if cfg.family == "geometric":
        return geometric_family(chain, cfg.base, cfg.weights)
    if cfg.family == "constant":
        return constant_increment_family(chain, cfg.base, cfg.c)
    if cfg.family == "stationary":
        return stationary_family(chain, cfg.base)
    return zero_family(chain)


def cmd_tower(cfg, seed) -> Outcome:
    try:
        fam = _tower_family(cfg)
    except ValueError as exc:
        raise CommandFailure(EXIT_USAGE, "ConfigError", str(exc))
    S = fam.chain
    if cfg.J >= len(S) - 1:
        raise CommandFailure(EXIT_USAGE, "ConfigError", "J must leave at least two levels")
    nI = S.last
    heights = cfg.heights if cfg.heights is not None else list(np.linspace(-nI, nI, 9))
    pts = default_sample_points(nI, heights=tuple(heights), per_2pi=cfg.points_per_2pi)
    snorm = mu_s_norm(fam)
    try:
        run = tower_solve(fam, cfg.J, pts, backend=cfg.backend, tol=cfg.tol, max_iter=cfg.max_iter,
                          leaf_grid=LeafGridSpec(cfg.samples_per_2pi, cfg.dy), plane_grid=PlaneGridSpec(cfg.N))
    except LevelSolveError as exc:
        raise CommandFailure(EXIT_NEGATIVE, type(exc.cause).__name__, str(exc), {"level": exc.level})
    rep = cauchy_diagnostics(run, fam, cfg.decay_ratio)
    aff = affine_renormalize(run)
    finite = [r for r in rep.ratios if math.isfinite(r)]
    doc = run.to_json_dict({"A_prime_ML": max(finite) if finite else None, "M_L": rep.growth})
    doc.update({
        "family": cfg.family,
        "J": cfg.J,
        "increments": list(fam.increments),
        "weighted_increments": fam.weighted_increments(),
        "s_norm": snorm,
        "s_norm_within_threshold": snorm <= cfg.s_norm_threshold,
        "iterations": list(run.iterations),
        "diagnostics": {
            "ratios": list(rep.ratios),
            "ratio_spread": rep.ratio_spread,
            "growth": rep.growth,
            "reverse": rep.reverse,
            "rate": rep.rate,
            "verdict": rep.verdict,
            "limit_growth": rep.limit_growth,
        },
        "affine": {
            "a": list(aff.a),
            "b": list(aff.b),
            "a_limit": aff.a_limit,
            "b_limit": aff.b_limit,
            "degenerate_levels": list(aff.degenerate),
            "stable": aff.stable,
        },
    })
    w = fam.weighted_increments()[cfg.J:]
    rows = [(i + cfg.J, S[i + cfg.J + 1], d, w[i], rep.ratios[i]) for i, d in enumerate(run.diffs)]
    csv = {"diffs": csv_text(("i", "n_next", "diff", "weighted_increment", "ratio"), rows)}
    code = EXIT_OK if rep.verdict == "CAUCHY" else EXIT_NEGATIVE
    return Outcome(doc, rep.verdict, code, csv)


def cmd_counterexample(cfg, seed) -> Outcome:
    checks = []
    xr, yr = tuple(cfg.x_range), tuple(cfg.y_range)
    ident = verify_beltrami_identity(cfg.N, xr, yr, cfg.nodes, cfg.h)
    checks.append({"name": "identity", "value": ident, "threshold": cfg.identity_tol,
                   "passed": ident < cfg.identity_tol})
    sup = mu_sup_sample(cfg.samples, seed, cfg.N, xr, yr)
    checks.append({"name": "norm_bound", "value": sup, "threshold": MU_BOUND - cfg.bound_margin,
                   "passed": sup <= MU_BOUND - cfg.bound_margin})
    rows = tail_sup_profile("BELTRAMI", cfg.tail_from, cfg.tail_to)
    fixed = [r.fixed_tail_sup for r in rows]
    mono = all(b <= a for a, b in zip(fixed, fixed[1:]))
    checks.append({"name": "tail_fixed", "value": fixed[-1], "threshold": cfg.fixed_tol,
                   "passed": bool(mono and fixed[-1] < cfg.fixed_tol)})
    moving = min(r.moving_tail_sup for r in rows if r.N <= cfg.moving_upto)
    checks.append({"name": "tail_moving", "value": moving, "threshold": cfg.moving_floor,
                   "passed": moving >= cfg.moving_floor})
    dio = []
    if cfg.diophantine_levels:
        omega = certify_diophantine(np.array([1.0, math.sqrt(2)]) / math.sqrt(3), 0.1, 2, 50)
        dio = diophantine_increment_sups(omega, cfg.diophantine_levels)
        target = 1 / (2 * math.pi * abs(sum(omega.entries)))
        dev = max(abs(v - target) for v in dio) / target
        checks.append({"name": "diophantine_increments", "value": dev, "threshold": 1e-9,
                       "passed": dev < 1e-9})
    ok = all(c["passed"] for c in checks)
    result = {
        "N": cfg.N,
        "h": cfg.h,
        "checks": checks,
        "failed": [c["name"] for c in checks if not c["passed"]],
        "tail_profile": [
            {"N": r.N, "fixed_tail_sup": r.fixed_tail_sup, "moving_tail_sup": r.moving_tail_sup,
             "single_term_sup": r.single_term_sup} for r in rows],
        "diophantine_increments": dio,
    }
    z, res = residual_field(cfg.N, xr, yr, cfg.nodes, cfg.h)
    csv = {
        "tails": csv_text(("N", "fixed_tail_sup", "moving_tail_sup"),
                          [(r.N, r.fixed_tail_sup, r.moving_tail_sup) for r in rows]),
        "residual": csv_text(("x", "y", "residual"), zip(z.real.ravel(), z.imag.ravel(), res.ravel())),
    }
    return Outcome(result, "PASS" if ok else "FAIL", EXIT_OK if ok else EXIT_NEGATIVE, csv)


def _split_problem(cfg):
    c, R = cfg.c, cfg.R
    a = 2 * c / (1 - c)

    def stretch(z):
        z = np.asarray(z, complex)
        out = np.zeros_like(z)
        nz = z != 0
        out[nz] = c * z[nz] / np.conj(z[nz])
        return out

    if cfg.field == "global_stretch":
        return stretch, lambda z: z * np.abs(z) ** a, [0.0]
    if cfg.field == "inner_stretch":
        r = R / 2
        ref = radial_stretch_solution(c, r)
        scale = complex(ref(np.array([1.0 + 0j]))[0])
        return (lambda z: np.where(np.abs(z) < r, stretch(z), 0),
                lambda z: ref(np.asarray(z, complex)) / scale, [0.0, r])

    def outer_ref(z):
        z = np.asarray(z, complex)
        return np.where(np.abs(z) >= R, z * (np.abs(z) / R) ** a, z)
    scale = complex(outer_ref(np.array([1.0 + 0j]))[0])
    return (lambda z: np.where(np.abs(z) >= R, stretch(z), 0),
            lambda z: outer_ref(z) / scale, [0.0, R])


def cmd_split_solve(cfg, seed) -> Outcome:
    mu, ref, kinks = _split_problem(cfg)
    sp = mobius_support_split(mu, cfg.R, abs(cfg.c), cfg.N, tol=cfg.tol, max_iter=cfg.max_iter)
    rng = _rng(seed)
    pts = []
    while len(pts) < cfg.residual_points:
        r = rng.uniform(0.05, 2.0 * cfg.R)
        if min(abs(r - k) for k in kinks) < 0.05:
            continue
        pts.append(r * np.exp(1j * rng.uniform(0, 2 * np.pi)))
    pts = np.array(pts)
    h = cfg.residual_h
    fx = (sp(pts + h) - sp(pts - h)) / (2 * h)
    fy = (sp(pts + 1j * h) - sp(pts - 1j * h)) / (2 * h)
    fz, fzb = 0.5 * (fx - 1j * fy), 0.5 * (fx + 1j * fy)
    residual = float(np.max(np.abs(fzb - mu(pts) * fz)))
    vals = sp(pts)
    rel = float(np.max(np.abs(vals - ref(pts)) / np.abs(ref(pts))))
    fixed = sp(np.array([0.0, 1.0], complex))
    checks = {"residual": residual < cfg.residual_tol, "reference": rel < cfg.reference_tol}
    ok = all(checks.values())
    result = {
        "field": cfg.field,
        "R": cfg.R,
        "N": cfg.N,
        "mu1_nonzero": bool(np.any(sp.mu1.samples)),
        "mu2_nonzero": bool(np.any(sp.mu2.samples)),
        "composed_residual": residual,
        "reference_relative_error": rel,
        "f_at_0": complex(fixed[0]),
        "f_at_1": complex(fixed[1]),
        "checks": checks,
    }
    csv = {"samples": csv_text(("x", "y", "re", "im"), zip(pts.real, pts.imag, vals.real, vals.imag))}
    return Outcome(result, "SOLVED" if ok else "INACCURATE", EXIT_OK if ok else EXIT_NEGATIVE, csv)


COMMANDS = {
    "solve-diophantine": cmd_solve_diophantine,
    "s-norm": cmd_s_norm,
    "solve-beltrami": cmd_solve_beltrami,
    "tower": cmd_tower,
    "counterexample": cmd_counterexample,
    "split-solve": cmd_split_solve,
}

# exceptions that signal a bad problem statement rather than a failed computation
_USAGE_ERRORS = (ResonantMode, CertificateFailure, NonzeroAverage)
_RUN_ERRORS = (IterationBudgetExceeded, ContractivityViolated)


# -- plumbing -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="TOML run configuration")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--seed", type=_seed, help="overrides the config seed")
    common.add_argument("--grid", type=int, help="overrides the grid size N (nodes for counterexample)")
    common.add_argument("--tol", type=float, help="overrides the solver tolerance")
    common.add_argument("--json", action="store_true", help="write the JSON report (default)")
    common.add_argument("--csv", action="store_true", help="write CSV tables")
    p = _Parser(prog="solenoid-ab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def _apply_overrides(cfg, args):
    upd = {}
    fields = type(cfg).model_fields
    if args.grid is not None:
        key = "nodes" if "nodes" in fields else "N"
        if key in fields:
            upd[key] = args.grid
    if args.tol is not None and "tol" in fields:
        upd["tol"] = args.tol
    if not upd:
        return cfg
    data = cfg.model_dump()
    data.update(upd)
    from pydantic import ValidationError
    try:
        return type(cfg).model_validate(data)
    except ValidationError as exc:
        raise ConfigError([(None, ".".join(map(str, e["loc"])), e["msg"]) for e in exc.errors()], "<flags>")


def _envelope(command, seed, cfg_doc, digest, outcome=None, error=None):
    doc = {
        "tool": "solenoid-ab",
        "version": __version__,
        "command": command,
        "generated_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "seed": seed,
        "config": cfg_doc,
        "config_sha256": digest,
    }
    if outcome is not None:
        doc.update(status="ok", verdict=outcome.verdict, exit_code=outcome.code, result=outcome.result, error=None)
    else:
        doc.update(status="error", verdict=None, exit_code=error.code, result=None,
                   error={"type": error.kind, "message": str(error), "details": error.details})
    return doc


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    command = args.command
    want_json = args.json or not args.csv
    out = args.out
    name = command.replace("-", "_")
    try:
        text = args.config.read_text()
    except OSError as exc:
        print(f"solenoid-ab: cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    digest = hashlib.sha256(text.encode()).hexdigest()
    seed, cfg, cfg_doc = None, None, {}
    try:
        seed, cfg, raw = parse_config(text, command, str(args.config))
        if args.seed is not None:
            seed = args.seed
        if command in NEEDS_SEED and seed is None:
            raise ConfigError([(None, "seed", "required for this command (config or --seed)")], str(args.config))
        cfg = _apply_overrides(cfg, args)
        cfg_doc = cfg.model_dump()
        outcome = COMMANDS[command](cfg, seed)
        err = None
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        outcome, err = None, CommandFailure(EXIT_USAGE, "ConfigError", str(exc),
                                            {"diagnostics": [list(d) for d in exc.diagnostics]})
    except CommandFailure as exc:
        outcome, err = None, exc
    except _USAGE_ERRORS as exc:
        details = {}
        if isinstance(exc, ResonantMode):
            details = {"mode": [str(Fraction(x)) for x in exc.mode], "divisor": exc.divisor}
        elif isinstance(exc, CertificateFailure):
            details = {"k": list(exc.k), "value": exc.value}
        outcome, err = None, CommandFailure(EXIT_USAGE, type(exc).__name__, str(exc), details)
    except _RUN_ERRORS as exc:
        outcome, err = None, CommandFailure(EXIT_NEGATIVE, type(exc).__name__, str(exc))
    doc = _envelope(command, seed, cfg_doc, digest, outcome, err)
    if err is not None and not isinstance(err, CommandFailure):
        raise err
    if want_json:
        atomic_write_text(out / f"{name}.json", dumps(doc))
    if outcome is not None:
        if args.csv:
            for key, body in outcome.csv.items():
                atomic_write_text(out / f"{name}_{key}.csv", body)
        for key, blob in outcome.blobs.items():
            atomic_write_bytes(out / f"{name}_{key}", blob)
    code = doc["exit_code"]
    label = doc["verdict"] or (err.kind if err else "")
    print(f"{command}: {label} (exit {code})")
    return code


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
