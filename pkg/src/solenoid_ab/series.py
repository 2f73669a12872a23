"""Pontryagin series with exact rational modes.

A series is a finite sum ``g(z) = sum_q g_q exp(2*pi*i q.z)`` over modes
``q`` in ``Q^n``.  Modes are tuples of :class:`fractions.Fraction` so that
level membership (``L*q`` integral) is decided exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import reduce
from typing import Iterable, Mapping, Sequence

import numpy as np

Mode = tuple  # tuple[Fraction, ...]


def as_mode(entries: Iterable) -> Mode:
    """Coerce ints, strings ("3/4") or Fractions into a reduced mode tuple."""
    out = []
    for e in entries:
        if isinstance(e, float):
            raise TypeError("modes must be exact rationals, got float %r" % e)
        if isinstance(e, (tuple, list)):
            e = Fraction(int(e[0]), int(e[1]))
        out.append(Fraction(e))
    return tuple(out)


def mode_level(q: Mode) -> int:
    """lcm of the denominators of ``q`` (1 for the zero mode)."""
    return reduce(math.lcm, (x.denominator for x in q), 1)


def _lcm(values: Iterable[int]) -> int:
    return reduce(math.lcm, values, 1)


@dataclass(frozen=True)
class DivisibilityChain:
    entries: tuple

    def __post_init__(self):
        ent = tuple(int(n) for n in self.entries)
        if not ent:
            raise ValueError("a divisibility chain needs at least one entry")
        if ent[0] < 1:
            raise ValueError("chain entries must be positive")
        for a, b in zip(ent, ent[1:]):
            if b <= a or b % a:
                raise ValueError(f"chain must be strictly increasing under divisibility: {a} -> {b}")
        object.__setattr__(self, "entries", ent)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    @property
    def last(self) -> int:
        return self.entries[-1]

    @classmethod
    def factorial(cls, count: int) -> "DivisibilityChain":
        """The chain (1!, 2!, ..., count!) with the duplicate 1 = 1! removed."""
        vals = []
        for i in range(1, count + 1):
            v = math.factorial(i)
            if not vals or v != vals[-1]:
                vals.append(v)
        return cls(tuple(vals))


@dataclass(frozen=True)
class StripNormEstimate:
    rho: float
    sampled_lower: float
    majorant_upper: float


@dataclass(frozen=True)
class PontryaginSeries:
    """Immutable finite Pontryagin series in ``dimension`` complex variables."""

    dimension: int
    terms: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be positive")
        clean = {}
        for q, c in dict(self.terms).items():
            q = as_mode(q)
            if len(q) != self.dimension:
                raise ValueError(f"mode {q} has wrong dimension (expected {self.dimension})")
            c = complex(c)
            if c != 0:
                clean[q] = clean.get(q, 0) + c
                if clean[q] == 0:
                    del clean[q]
        object.__setattr__(self, "terms", dict(sorted(clean.items())))

    # -- construction -----------------------------------------------------

    @classmethod
    def zero(cls, dimension: int) -> "PontryaginSeries":
        return cls(dimension, {})

    @classmethod
    def monomial(cls, mode: Sequence, coeff: complex = 1.0) -> "PontryaginSeries":
        q = as_mode(mode)
        return cls(len(q), {q: coeff})

    # -- basic queries ----------------------------------------------------

    def __len__(self):
        return len(self.terms)

    def __iter__(self):
        return iter(self.terms.items())

    def coefficient(self, mode: Sequence) -> complex:
        return self.terms.get(as_mode(mode), 0j)

    @property
    def modes(self) -> list:
        return list(self.terms)

    @property
    def level(self) -> int:
        return _lcm(mode_level(q) for q in self.terms)

    @property
    def is_zero(self) -> bool:
        return not self.terms

    @property
    def average(self) -> complex:
        return self.terms.get(tuple(Fraction(0) for _ in range(self.dimension)), 0j)

    # -- arithmetic -------------------------------------------------------

    def _check(self, other: "PontryaginSeries"):
        if not isinstance(other, PontryaginSeries):
            return NotImplemented
        if other.dimension != self.dimension:
            raise ValueError("dimension mismatch")

    def __add__(self, other):
        self._check(other)
        terms = dict(self.terms)
        for q, c in other.terms.items():
            terms[q] = terms.get(q, 0) + c
        return PontryaginSeries(self.dimension, terms)

    def __neg__(self):
        return PontryaginSeries(self.dimension, {q: -c for q, c in self.terms.items()})

    def __sub__(self, other):
        self._check(other)
        return self + (-other)

    def scale(self, alpha: complex) -> "PontryaginSeries":
        return PontryaginSeries(self.dimension, {q: alpha * c for q, c in self.terms.items()})

    __rmul__ = scale

    def __mul__(self, alpha):
        return self.scale(alpha)

    def map_coefficients(self, fn) -> "PontryaginSeries":
        """Apply ``fn(mode, coeff) -> coeff`` term by term."""
        return PontryaginSeries(self.dimension, {q: fn(q, c) for q, c in self.terms.items()})

    def partial(self, j: int) -> "PontryaginSeries":
        """Exact derivative in ``z_j`` (each mode picks up ``2*pi*i*q_j``)."""
        return self.map_coefficients(lambda q, c: 2j * math.pi * float(q[j]) * c)

    # -- evaluation -------------------------------------------------------

    def mode_array(self) -> np.ndarray:
        if not self.terms:
            return np.zeros((0, self.dimension))
        return np.array([[float(x) for x in q] for q in self.terms], dtype=float)

    def coefficient_array(self) -> np.ndarray:
        return np.array(list(self.terms.values()), dtype=complex)

    def __call__(self, z) -> np.ndarray:
        """Evaluate at points ``z`` of shape ``(..., n)`` (complex)."""
        z = np.asarray(z, dtype=complex)
        if z.shape[-1] != self.dimension:
            if self.dimension == 1:
                z = z[..., None]
            else:
                raise ValueError("last axis of z must have length n")
        if not self.terms:
            return np.zeros(z.shape[:-1], dtype=complex)
        Q = self.mode_array()
        c = self.coefficient_array()
        pts = z.reshape(-1, self.dimension)
        out = np.empty(len(pts), dtype=complex)
        step = max(1, 200_000 // max(1, len(c)))
        for s in range(0, len(pts), step):
            phase = pts[s:s + step] @ Q.T
            out[s:s + step] = np.exp(2j * np.pi * phase) @ c
        return out.reshape(z.shape[:-1])

    # -- serialization ----------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "dimension": self.dimension,
            "terms": [
                {
                    "mode": [[str(x.numerator), str(x.denominator)] for x in q],
                    "re": repr(c.real),
                    "im": repr(c.imag),
                }
                for q, c in self.terms.items()
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    @classmethod
    def from_json_dict(cls, doc: Mapping) -> "PontryaginSeries":
        n = int(doc["dimension"])
        terms = {}
        for t in doc.get("terms", []):
            q = tuple(Fraction(int(num), int(den)) for num, den in t["mode"])
            c = complex(float(t.get("re", 0)), float(t.get("im", 0)))
            terms[q] = terms.get(q, 0) + c
        return cls(n, terms)

    @classmethod
    def from_json(cls, text: str) -> "PontryaginSeries":
        return cls.from_json_dict(json.loads(text))


def level_project(g: PontryaginSeries, L: int) -> PontryaginSeries:
    """Keep exactly the modes with ``L*q`` integral, i.e. ``q`` in ``L^-1 Z^n``."""
    if L < 1:
        raise ValueError("level must be a positive integer")
    return PontryaginSeries(
        g.dimension,
        {q: c for q, c in g.terms.items() if all((L * x).denominator == 1 for x in q)},
    )


def strip_majorant(g: PontryaginSeries, rho: float) -> float:
    """``sum_q |g_q| exp(2*pi*rho*|q|_1)``, an upper bound for the strip sup norm."""
    if not g.terms:
        return 0.0
    w = np.abs(g.mode_array()).sum(axis=1)
    return float(np.sum(np.abs(g.coefficient_array()) * np.exp(2 * np.pi * rho * w)))


def strip_norm(g: PontryaginSeries, rho: float, samples_per_period: int = 32) -> StripNormEstimate:
    """Bracket the sup norm of ``g`` on the strip ``max_j |Im z_j| < rho``.

    The lower bound samples the distinguished boundary ``Im z_j = +-rho'``
    (``rho' = rho*(1-1e-9)``) over one fundamental period of the series.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    if samples_per_period < 1:
        raise ValueError("samples_per_period must be positive")
    upper = strip_majorant(g, rho)
    if not g.terms:
        return StripNormEstimate(rho, 0.0, 0.0)
    n = g.dimension
    period = g.level
    rp = rho * (1 - 1e-9)
    xs = np.arange(samples_per_period) * (period / samples_per_period)
    grids = np.meshgrid(*([xs] * n), indexing="ij")
    x = np.stack([gr.ravel() for gr in grids], axis=-1)
    lower = 0.0
    for signs in np.ndindex(*([2] * n)):
        y = rp * (2 * np.array(signs) - 1)
        vals = g(x + 1j * y)
        lower = max(lower, float(np.max(np.abs(vals))))
    # sampled values cannot exceed the majorant except through rounding
    lower = min(lower, upper)
    return StripNormEstimate(rho, lower, upper)


def resolves(S: DivisibilityChain, g: PontryaginSeries) -> bool:
    return S.last % g.level == 0


def s_norm(g: PontryaginSeries, S: DivisibilityChain, rho: float) -> float:
    """Chain-weighted norm with weights ``n_i^(2n+1)`` on level increments."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    if not resolves(S, g):
        raise ValueError(f"chain {S.entries} does not resolve a series of level {g.level}")
    n = g.dimension
    total = 0.0
    prev = PontryaginSeries.zero(n)
    for ni in S:
        cur = level_project(g, ni)
        total += float(ni) ** (2 * n + 1) * strip_majorant(cur - prev, rho)
        prev = cur
    return total


def homothety_conjugate(g: PontryaginSeries, a) -> PontryaginSeries:
    """Return ``g o h_a`` with ``h_a(z) = a*z``: every mode ``q`` becomes ``a*q``."""
    a = Fraction(a)
    if a == 0:
        raise ValueError("homothety factor must be nonzero")
    return PontryaginSeries(g.dimension, {tuple(a * x for x in q): c for q, c in g.terms.items()})
