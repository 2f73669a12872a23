"""Closed forms for the two factorial counterexamples.

* the diophantine one: ``g = sum 1/i! cos(2 pi (z_1+...+z_n)/i!)`` whose
  solution ``sum sin(...)/(2 pi omega.1)`` converges only locally uniformly;
* the Beltrami one: the coefficient ``mu`` solved by
  ``w(z) = z + 1/(2e) sum sin(x/n!) exp(-y^2/n!^2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diophantine import FrequencyVector, factorial_cosine_series, solve_cohomological
from .series import level_project

DEFAULT_TERMS = 20
#: ``(e-1)/(e+1)``, the sup bound on the counterexample coefficient
MU_BOUND = (math.e - 1) / (math.e + 1)
_INF_TERMS = 40  # stands in for the infinite tail; 1/40! is far below double precision


@dataclass(frozen=True)
class FactorialSeriesSpec:
    terms: int = DEFAULT_TERMS
    dimension: int = 1

    def __post_init__(self):
        if self.terms < 1:
            raise ValueError("term count must be at least 1")


def _factorials(N):
    return np.array([float(math.factorial(n)) for n in range(1, N + 1)])


def _sums(z, N):
    z = np.asarray(z, dtype=complex)
    x = z.real[..., None]
    y = z.imag[..., None]
    nf = _factorials(N)
    s = np.sin(x / nf)
    c = np.cos(x / nf)
    g = np.exp(-(y / nf) ** 2)
    return x, y, nf, s, c, g


def eval_mu_counterexample(z, N: int = DEFAULT_TERMS):
    """The coefficient ``w_zbar / w_z`` with both sums truncated at ``N``."""
    x, y, nf, s, c, g = _sums(z, N)
    k = 1 / (2 * math.e)
    num = k * np.sum((c - 2j * y / nf * s) * g / (2 * nf), axis=-1)
    den = 1 + k * np.sum((c + 2j * y / nf * s) * g / (2 * nf), axis=-1)
    return num / den


def eval_w_mu(z, N: int = DEFAULT_TERMS):
    """``z + 1/(2e) sum_{n<=N} sin(x/n!) exp(-y^2/n!^2)``."""
    z = np.asarray(z, dtype=complex)
    _, _, _, s, _, g = _sums(z, N)
    return z + np.sum(s * g, axis=-1) / (2 * math.e)


def fd_derivatives(fn, z, h):
    """Central differences ``(f_z, f_zbar)`` of ``fn`` at ``z``."""
    fx = (fn(z + h) - fn(z - h)) / (2 * h)
    fy = (fn(z + 1j * h) - fn(z - 1j * h)) / (2 * h)
    return 0.5 * (fx - 1j * fy), 0.5 * (fx + 1j * fy)


def counterexample_grid(x_range=(-10 * math.pi, 10 * math.pi), y_range=(-5.0, 5.0), nodes=256):
    """Interior nodes of a ``nodes x nodes`` grid over the box (closed ranges)."""
    xs = np.linspace(x_range[0], x_range[1], nodes)
    ys = np.linspace(y_range[0], y_range[1], nodes)
    return xs[None, :] + 1j * ys[:, None]


def verify_beltrami_identity(N: int = DEFAULT_TERMS, x_range=(-10 * math.pi, 10 * math.pi),
                             y_range=(-5.0, 5.0), nodes: int = 256, h: float = 1e-5,
                             use_mu: bool = True) -> float:
    """``max |w_zbar - mu w_z|`` over interior nodes by central differences.

    ``use_mu=False`` replaces ``mu`` by 0 (a negative control).
    """
    if not 1e-6 <= h <= 1e-1:
        raise ValueError("finite-difference step out of range")
    z = counterexample_grid(x_range, y_range, nodes)[1:-1, 1:-1]
    wz, wzb = fd_derivatives(lambda p: eval_w_mu(p, N), z, h)
    mu = eval_mu_counterexample(z, N) if use_mu else 0
    return float(np.max(np.abs(wzb - mu * wz)))


def residual_field(N: int = DEFAULT_TERMS, x_range=(-10 * math.pi, 10 * math.pi),
                   y_range=(-5.0, 5.0), nodes: int = 256, h: float = 1e-5):
    """``(z, |w_zbar - mu w_z|)`` on the interior nodes, for CSV export."""
    z = counterexample_grid(x_range, y_range, nodes)[1:-1, 1:-1]
    wz, wzb = fd_derivatives(lambda p: eval_w_mu(p, N), z, h)
    return z, np.abs(wzb - eval_mu_counterexample(z, N) * wz)


def mu_sup_sample(count: int = 100_000, seed: int = 0, N: int = DEFAULT_TERMS,
                  x_range=(-10 * math.pi, 10 * math.pi), y_range=(-5.0, 5.0)) -> float:
    rng = np.random.default_rng(seed)
    z = rng.uniform(*x_range, count) + 1j * rng.uniform(*y_range, count)
    return float(np.max(np.abs(eval_mu_counterexample(z, N))))


@dataclass(frozen=True)
class TailRow:
    N: int
    fixed_tail_sup: float
    moving_tail_sup: float
    single_term_sup: float


def _beltrami_tail(x, N):
    n = np.arange(N + 1, _INF_TERMS + 1)
    nf = np.array([float(math.factorial(int(k))) for k in n])
    return np.sum(np.sin(np.asarray(x, dtype=float)[..., None] / nf), axis=-1) / (2 * math.e)


def tail_sup_profile(kind: str, N_from: int, N_to: int, x_fixed: float = 1.0, samples: int = 4096,
                     omega: FrequencyVector = None):
    """Tail sups of the factorial series at a fixed point and over a moving window.

    For ``BELTRAMI`` the tail is ``1/(2e) sum_{n>N} sin(x/n!)`` (on ``y = 0``).
    For ``DIOPHANTINE`` it is the tail of the solved series ``f`` on the line
    ``z = (t, 0, ..., 0)``, built from :func:`solve_cohomological`.  The
    moving window is ``|x| <= pi (N+1)!/2`` (Beltrami) or ``|t| <= (N+1)!/4``
    (diophantine), i.e. just wide enough for the first tail term to peak.
    """
    if N_from >= N_to:
        raise ValueError("need N_from < N_to")
    kind = kind.upper()
    rows = []
    if kind == "BELTRAMI":
        for N in range(N_from, N_to + 1):
            fixed = abs(float(_beltrami_tail(x_fixed, N)))
            X = math.pi * math.factorial(N + 1) / 2
            xs = np.linspace(0.0, X, samples)
            moving = float(np.max(np.abs(_beltrami_tail(xs, N))))
            rows.append(TailRow(N, fixed, moving, 1 / (2 * math.e)))
        return rows
    if kind != "DIOPHANTINE":
        raise ValueError(f"unknown kind {kind!r}")
    if omega is None:
        raise ValueError("DIOPHANTINE profile needs a certified frequency vector")
    n = omega.dimension
    top = min(N_to + 6, 18)
    g = factorial_cosine_series(top, n)
    f, _ = solve_cohomological(g, omega)
    single = 1 / (2 * math.pi * abs(sum(omega.entries)))
    for N in range(N_from, N_to + 1):
        tail = f - level_project(f, math.factorial(N))
        pt = np.zeros(n, dtype=complex)
        pt[0] = x_fixed
        fixed = float(abs(tail(pt[None, :])[0]))
        T = math.factorial(N + 1) / 4
        ts = np.linspace(0.0, T, samples)
        pts = np.zeros((samples, n), dtype=complex)
        pts[:, 0] = ts
        moving = float(np.max(np.abs(tail(pts))))
        rows.append(TailRow(N, fixed, moving, single))
    return rows


def diophantine_increment_sups(omega: FrequencyVector, levels: int, samples_per_period: int = 64):
    """Real-line sup of each chain increment ``f_{i!} - f_{(i-1)!}`` of the solved
    factorial series; each equals ``1/(2 pi |omega.1|)``."""
    n = omega.dimension
    g = factorial_cosine_series(levels, n)
    f, _ = solve_cohomological(g, omega)
    out = []
    prev = level_project(f, 1).scale(0)
    for i in range(1, levels + 1):
        cur = level_project(f, math.factorial(i))
        inc = cur - prev
        period = math.factorial(i)
        ts = np.arange(samples_per_period) * (period / samples_per_period)
        pts = np.zeros((samples_per_period, n), dtype=complex)
        pts[:, 0] = ts
        out.append(float(np.max(np.abs(inc(pts)))))
        prev = cur
    return out
