"""Small-divisor solver for ``D f(omega) = g`` on Pontryagin series."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .series import (
    DivisibilityChain,
    PontryaginSeries,
    level_project,
    resolves,
    strip_majorant,
)

RESONANCE_TOL = 1e-14


class CertificateFailure(ValueError):
    def __init__(self, k, value):
        self.k = tuple(int(x) for x in k)
        self.value = float(value)
        super().__init__(f"diophantine bound violated at k={self.k} (|w.k|*|k|^e = {self.value:.3e})")


class NonzeroAverage(ValueError):
    pass


class ResonantMode(ValueError):
    def __init__(self, mode, divisor):
        self.mode = mode
        self.divisor = divisor
        super().__init__(f"resonant mode {tuple(str(x) for x in mode)}: omega.q = {divisor:.3e}")


@dataclass(frozen=True)
class FrequencyVector:
    """A frequency vector with a finite-range diophantine certificate.

    ``|omega.k| > gamma/|k|^exponent`` has been checked for all integer
    ``0 < |k|_2 <= checked_radius`` and nowhere else.
    """

    entries: tuple
    gamma: float
    exponent: int
    checked_radius: int
    minimum: float = float("nan")  # min of |omega.k|*|k|^exponent over the scanned ball

    @property
    def omega(self) -> np.ndarray:
        return np.asarray(self.entries, dtype=float)

    @property
    def dimension(self) -> int:
        return len(self.entries)

    def dot(self, q) -> float:
        return float(sum(w * float(x) for w, x in zip(self.entries, q)))

    def scaled(self, c: float) -> "FrequencyVector":
        """``c*omega`` with certificate constant ``|c|*gamma`` (same lattice range)."""
        c = float(c)
        return FrequencyVector(
            tuple(c * w for w in self.entries), abs(c) * self.gamma, self.exponent,
            self.checked_radius, abs(c) * self.minimum,
        )


def _half_lattice_ball(n: int, K: int) -> np.ndarray:
    """Nonzero integer vectors with ``|k|_2 <= K`` and first nonzero entry positive.

    Sorted by norm, then lexicographically, so argmin picks the shortest
    minimizer.
    """
    r = np.arange(-K, K + 1)
    grids = np.meshgrid(*([r] * n), indexing="ij")
    k = np.stack([g.ravel() for g in grids], axis=-1)
    k = k[(k * k).sum(axis=1) <= K * K]
    nz = k != 0
    first = np.argmax(nz, axis=1)
    lead = k[np.arange(len(k)), first]
    k = k[nz.any(axis=1) & (lead > 0)]
    norm2 = (k * k).sum(axis=1)
    order = np.lexsort(tuple(k[:, j] for j in reversed(range(n))) + (norm2,))
    return k[order]


def diophantine_scan(omega, exponent: int, K: int):
    """Return ``(min value, minimizing k)`` of ``|omega.k| * |k|_2^exponent``."""
    omega = np.asarray(omega, dtype=float)
    k = _half_lattice_ball(len(omega), K)
    vals = np.abs(k @ omega) * np.sqrt((k * k).sum(axis=1)) ** exponent
    i = int(np.argmin(vals))
    return float(vals[i]), tuple(int(x) for x in k[i])


def certify_diophantine(omega, gamma: float, exponent: int, K: int) -> FrequencyVector:
    omega = tuple(float(w) for w in omega)
    if not any(omega):
        raise ValueError("omega must be nonzero")
    if gamma <= 0 or exponent < 1 or K < 1:
        raise ValueError("gamma, exponent and K must be positive")
    vmin, kmin = diophantine_scan(omega, exponent, K)
    if not vmin > gamma:
        raise CertificateFailure(kmin, vmin)
    return FrequencyVector(omega, float(gamma), int(exponent), int(K), vmin)


@dataclass(frozen=True)
class DivisorRecord:
    mode: tuple
    divisor: float
    bound: float  # certified lower bound gamma/|q|^exponent, for integer q only


@dataclass(frozen=True)
class SmallDivisorLedger:
    records: tuple = field(default_factory=tuple)

    def __len__(self):
        return len(self.records)

    @property
    def smallest(self) -> float:
        return min((abs(r.divisor) for r in self.records), default=math.inf)


def _check_compatible(g: PontryaginSeries, omega: FrequencyVector):
    if g.dimension != omega.dimension:
        raise ValueError("series and frequency dimensions differ")


def solve_cohomological(g: PontryaginSeries, omega: FrequencyVector):
    """Mode-wise solution ``f_q = g_q / (2*pi*i*(omega.q))``.

    Returns ``(f, ledger)``.
    """
    _check_compatible(g, omega)
    if g.average != 0:
        raise NonzeroAverage(f"zero mode coefficient is {g.average}")
    terms = {}
    records = []
    for q, c in g.terms.items():
        d = omega.dot(q)
        if abs(d) <= RESONANCE_TOL:
            raise ResonantMode(q, d)
        terms[q] = c / (2j * math.pi * d)
        if all(x.denominator == 1 for x in q):
            norm = math.sqrt(sum(float(x) ** 2 for x in q))
            bound = omega.gamma / norm ** omega.exponent
        else:
            bound = float("nan")
        records.append(DivisorRecord(q, d, bound))
    return PontryaginSeries(g.dimension, terms), SmallDivisorLedger(tuple(records))


def directional_derivative(f: PontryaginSeries, omega: FrequencyVector) -> PontryaginSeries:
    """``sum_j omega_j d/dz_j f`` computed exactly on coefficients."""
    return f.map_coefficients(lambda q, c: 2j * math.pi * omega.dot(q) * c)


def derivative_residual(f, omega, g, sample_points) -> float:
    """``max |D f(omega) - g|`` over the sample points."""
    pts = np.asarray(sample_points, dtype=complex)
    if pts.size == 0:
        return 0.0
    diff = directional_derivative(f, omega) - g
    return float(np.max(np.abs(diff(pts)))) if not diff.is_zero else 0.0


@dataclass(frozen=True)
class ProfileRow:
    level: int
    increment: float
    bound_term: float


@dataclass(frozen=True)
class ConvergenceProfile:
    rows: tuple
    verdict: str
    threshold: float

    @property
    def increments(self):
        return [r.increment for r in self.rows]

    def ratios(self):
        """increment / bound_term per level (nan where the bound term vanishes)."""
        return [r.increment / r.bound_term if r.bound_term > 0 else float("nan") for r in self.rows]


def convergence_profile(g, omega, S: DivisibilityChain, rho: float, delta: float,
                        threshold: float = 1e-3) -> ConvergenceProfile:
    """Increment norms of the chain partial sums ``f_{n_i}`` against the bound shape.

    The run is CONVERGENT when the last increment is at most ``threshold``
    times the largest one (or all vanish, or there is only one level),
    DIVERGENT otherwise.
    """
    if not 0 < delta < rho:
        raise ValueError("need 0 < delta < rho")
    _check_compatible(g, omega)
    if not resolves(S, g):
        raise ValueError(f"chain {S.entries} does not resolve a series of level {g.level}")
    n = g.dimension
    scale = 1.0 / (omega.gamma * delta ** (2 * n))
    rows = []
    g_prev = PontryaginSeries.zero(n)
    f_prev = PontryaginSeries.zero(n)
    for ni in S:
        g_cur = level_project(g, ni)
        f_cur, _ = solve_cohomological(g_cur, omega)
        inc = strip_majorant(f_cur - f_prev, rho - delta)
        bound = float(ni) ** (2 * n + 1) * strip_majorant(g_cur - g_prev, rho) * scale
        rows.append(ProfileRow(ni, inc, bound))
        g_prev, f_prev = g_cur, f_cur
    incs = [r.increment for r in rows]
    top = max(incs)
    # a single level is a finite sum and has nothing left to diverge
    settled = len(incs) == 1 or top == 0 or incs[-1] <= threshold * top
    verdict = "CONVERGENT" if settled else "DIVERGENT"
    return ConvergenceProfile(tuple(rows), verdict, threshold)


def factorial_cosine_series(N: int, dimension: int = 1, weight=None) -> PontryaginSeries:
    """``sum_{i<=N} a_i cos(2*pi*(z_1+...+z_n)/i!)`` with ``a_i = weight(i)`` (default ``1/i!``)."""
    if N < 1:
        raise ValueError("N must be at least 1")
    terms = {}
    for i in range(1, N + 1):
        fi = math.factorial(i)
        a = 1.0 / fi if weight is None else weight(i)
        q = tuple(Fraction(1, fi) for _ in range(dimension))
        mq = tuple(-x for x in q)
        terms[q] = terms.get(q, 0) + a / 2
        terms[mq] = terms.get(mq, 0) + a / 2
    return PontryaginSeries(dimension, terms)
