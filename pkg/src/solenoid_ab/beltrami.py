"""Normal solutions of the planar Beltrami equation ``f_zbar = mu f_z``.

The solver is the classical Neumann scheme: iterate ``h <- mu*(S h) + mu``
and set ``f = z + C h``, where ``S`` (Beurling) and ``C`` (Cauchy) are FFT
multipliers on a zero-padded square grid.  The grid is periodic, so inputs
must vanish outside the central half of their box.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

SUPPORT_MARGIN = 0.5  # support must lie within this fraction of the half-width


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("SOLENOID_AB_THREADS", "1")))
    except ValueError:
        return 1


class SupportError(ValueError):
    pass


class IterationBudgetExceeded(RuntimeError):
    def __init__(self, iterations, residual):
        self.iterations = iterations
        self.residual = residual
        super().__init__(f"no convergence after {iterations} iterations (last step {residual:.3e})")


class ContractivityViolated(RuntimeError):
    pass


class DegenerateNormalization(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ComplexGrid:
    """Complex samples on the square box ``center + [-a, a)^2``.

    Node ``(iy, ix)`` sits at ``center + ((ix - N/2) + 1j*(iy - N/2)) * dx``
    with ``dx = 2a/N``; each sample stands for the cell of side ``dx``
    around its node.
    """

    center: complex
    half_width: float
    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=complex)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise ValueError("samples must be a square N x N array")
        n = s.shape[0]
        if n < 4 or n & (n - 1):
            raise ValueError(f"resolution must be a power of two, got {n}")
        if not self.half_width > 0:
            raise ValueError("half_width must be positive")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "center", complex(self.center))
        object.__setattr__(self, "half_width", float(self.half_width))

    @classmethod
    def from_function(cls, fn, center=0.0, half_width=1.0, N=256) -> "ComplexGrid":
        g = cls(center, half_width, np.zeros((N, N), dtype=complex))
        return g.with_samples(fn(g.z))

    def with_samples(self, samples) -> "ComplexGrid":
        samples = np.broadcast_to(np.asarray(samples, dtype=complex), self.samples.shape).copy()
        return ComplexGrid(self.center, self.half_width, samples)

    @property
    def N(self) -> int:
        return self.samples.shape[0]

    @property
    def dx(self) -> float:
        return 2 * self.half_width / self.N

    @property
    def axis(self) -> np.ndarray:
        return (np.arange(self.N) - self.N // 2) * self.dx

    @property
    def x(self) -> np.ndarray:
        return self.center.real + self.axis

    @property
    def y(self) -> np.ndarray:
        return self.center.imag + self.axis

    @property
    def z(self) -> np.ndarray:
        return self.x[None, :] + 1j * self.y[:, None]

    def support_box_mask(self, margin: float = SUPPORT_MARGIN) -> np.ndarray:
        a = np.abs(self.axis) <= margin * self.half_width + 1e-12 * self.half_width
        return a[:, None] & a[None, :]

    def check_support(self, margin: float = SUPPORT_MARGIN):
        outside = (self.samples != 0) & ~self.support_box_mask(margin)
        if outside.any():
            raise SupportError(
                "nonzero samples inside the zero-padding margin; enlarge the box "
                f"({int(outside.sum())} offending nodes)"
            )

    def padded(self, factor: int) -> "ComplexGrid":
        """Embed into a box ``factor`` times wider with the same spacing."""
        if factor == 1:
            return self
        N = self.N
        M = N * factor
        out = np.zeros((M, M), dtype=complex)
        o = M // 2 - N // 2
        out[o:o + N, o:o + N] = self.samples
        return ComplexGrid(self.center, self.half_width * factor, out)

    def cropped(self, N: int) -> "ComplexGrid":
        M = self.N
        o = M // 2 - N // 2
        return ComplexGrid(self.center, self.half_width * N / M, self.samples[o:o + N, o:o + N].copy())

    def l2(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.samples) ** 2)))

    def sup(self) -> float:
        return float(np.max(np.abs(self.samples)))

    def contains(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=complex) - self.center
        lo = -self.N // 2 * self.dx
        hi = (self.N // 2 - 1) * self.dx
        return (z.real >= lo) & (z.real <= hi) & (z.imag >= lo) & (z.imag <= hi)


def _frequencies(grid: ComplexGrid) -> np.ndarray:
    """``zeta = xi + i*eta`` for every FFT bin (axis 0 is y, axis 1 is x)."""
    k = 2 * np.pi * sfft.fftfreq(grid.N, d=grid.dx)
    return k[None, :] + 1j * k[:, None]


def _beurling_multiplier(grid):
    zeta = _frequencies(grid)
    m = np.zeros_like(zeta)
    nz = zeta != 0
    m[nz] = np.conj(zeta[nz]) / zeta[nz]
    return m


def _cauchy_multiplier(grid):
    zeta = _frequencies(grid)
    m = np.zeros_like(zeta)
    nz = zeta != 0
    m[nz] = -2j / zeta[nz]
    return m


def _fft(a):
    return sfft.fft2(a, workers=_workers())


def _ifft(a):
    return sfft.ifft2(a, workers=_workers())


def beurling_transform(h: ComplexGrid, pad: int = 1) -> ComplexGrid:
    """Beurling transform ``S h`` as the multiplier ``conj(zeta)/zeta``.

    With ``pad=1`` this is an exact isometry on zero-mean grids.
    """
    h.check_support()
    work = h.padded(pad)
    out = ComplexGrid(work.center, work.half_width, _ifft(_fft(work.samples) * _beurling_multiplier(work)))
    return out.cropped(h.N) if pad > 1 else out


class _SpectralCauchy:
    """Periodic Cauchy transform on a padded grid plus the linear correction
    that turns the periodic kernel back into ``1/(pi z)`` near the support."""

    def __init__(self, work: ComplexGrid):
        self.grid = work
        hat = _fft(work.samples)
        self.hat = hat * _cauchy_multiplier(work)
        dA = work.dx ** 2
        area = (work.N * work.dx) ** 2
        z = work.z
        self.mass = complex(np.sum(work.samples) * dA)
        self.moment = complex(np.sum(work.samples * np.conj(z)) * dA)
        self.area = area
        self.values = _ifft(self.hat) + (self.mass * np.conj(z) - self.moment) / area
        self._support = work.samples != 0

    def at(self, pts) -> np.ndarray:
        """Trigonometric interpolant of the corrected transform at arbitrary points."""
        pts = np.asarray(pts, dtype=complex).ravel()
        g = self.grid
        k = 2 * np.pi * sfft.fftfreq(g.N, d=g.dx)
        x0 = g.x[0]
        y0 = g.y[0]
        out = np.empty(len(pts), dtype=complex)
        step = 256
        for s in range(0, len(pts), step):
            p = pts[s:s + step]
            ex = np.exp(1j * np.outer(k, p.real - x0))  # (N, P)
            ey = np.exp(1j * np.outer(k, p.imag - y0))
            t = self.hat @ ex  # (Ny, P)
            out[s:s + step] = np.sum(ey * t, axis=0) / (g.N * g.N)
        return out + (self.mass * np.conj(pts) - self.moment) / self.area

    def far(self, pts) -> np.ndarray:
        """Direct midpoint quadrature of ``(1/pi) sum h(w)/(z-w) dA``."""
        pts = np.asarray(pts, dtype=complex).ravel()
        g = self.grid
        w = g.z[self._support]
        hv = g.samples[self._support] * g.dx ** 2 / np.pi
        out = np.empty(len(pts), dtype=complex)
        step = max(1, 2_000_000 // max(1, len(w)))
        for s in range(0, len(pts), step):
            d = pts[s:s + step, None] - w[None, :]
            out[s:s + step] = (hv[None, :] / d).sum(axis=1)
        return out


def cauchy_transform(h: ComplexGrid, pad: int = 2, gauge: bool = True) -> ComplexGrid:
    """Cauchy transform ``C h`` with ``d_zbar C h = h`` and ``d_z C h = S h``.

    The gauge fixes ``(C h)(0) = 0``.
    """
    h.check_support()
    sc = _SpectralCauchy(h.padded(pad))
    vals = ComplexGrid(sc.grid.center, sc.grid.half_width, sc.values).cropped(h.N)
    if gauge:
        vals = vals.with_samples(vals.samples - sc.at([0.0])[0])
    return vals


@dataclass(frozen=True, eq=False)
class BeltramiField:
    """A compactly supported Beltrami coefficient sampled on a grid."""

    grid: ComplexGrid
    k: float = None

    def __post_init__(self):
        sup = self.grid.sup()
        k = sup if self.k is None else float(self.k)
        if not k < 1:
            raise ValueError(f"Beltrami coefficient must have sup < 1 (got {k})")
        if sup > k + 1e-12:
            raise ValueError(f"sampled sup {sup} exceeds declared bound {k}")
        object.__setattr__(self, "k", k)

    @classmethod
    def from_function(cls, fn, center=0.0, half_width=2.0, N=256, k=None) -> "BeltramiField":
        return cls(ComplexGrid.from_function(fn, center, half_width, N), k)

    @property
    def samples(self) -> np.ndarray:
        return self.grid.samples

    def sup(self) -> float:
        return self.grid.sup()

    def support_area(self) -> float:
        return float(np.count_nonzero(self.grid.samples)) * self.grid.dx ** 2


@dataclass(frozen=True, eq=False)
class NormalSolutionField:
    """``f = z + C h`` for the density ``h`` produced by :func:`solve_normal`."""

    h: ComplexGrid
    values: ComplexGrid  # f at the grid nodes
    iterations: int
    residual: float  # sup of the last successive difference
    contraction: tuple = ()  # l2 ratios of successive differences
    sup_contraction: tuple = ()
    _cauchy: object = field(default=None, repr=False)
    _gauge: complex = 0j

    @property
    def grid(self) -> ComplexGrid:
        return self.values

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        flat = z.ravel()
        out = flat.astype(complex).copy()
        if self._cauchy is None:
            return out.reshape(z.shape)
        inside = self.values.contains(flat)
        if inside.any():
            out[inside] += self._cauchy.at(flat[inside]) - self._gauge
        if (~inside).any():
            out[~inside] += self._cauchy.far(flat[~inside]) - self._gauge
        return out.reshape(z.shape)

    @classmethod
    def identity(cls, grid: ComplexGrid) -> "NormalSolutionField":
        zero = grid.with_samples(0)
        return cls(zero, grid.with_samples(grid.z), 1, 0.0)

    @property
    def is_identity(self) -> bool:
        return self._cauchy is None

    def derivatives(self):
        """Spectral ``(f_z, f_zbar) = (1 + S h, h)`` on the grid nodes."""
        if self._cauchy is None:
            one = np.ones_like(self.values.samples)
            return one, np.zeros_like(one)
        work = self._cauchy.grid
        sh = ComplexGrid(work.center, work.half_width,
                         _ifft(_fft(work.samples) * _beurling_multiplier(work))).cropped(self.values.N)
        return 1 + sh.samples, self.h.samples


def solve_normal(mu: BeltramiField, tol: float = 1e-10, max_iter: int = 200, pad: int = 2) -> NormalSolutionField:
    """Normal solution (``f(0)=0``, ``f_z - 1`` decaying) of ``f_zbar = mu f_z``."""
    grid = mu.grid
    grid.check_support()
    if not np.any(grid.samples):
        return NormalSolutionField.identity(grid)
    work_mu = grid.padded(pad)
    m = work_mu.samples
    mult = _beurling_multiplier(work_mu)
    h = np.zeros_like(m)
    ratios, sup_ratios = [], []
    prev_l2 = prev_sup = None
    it = 0
    last = np.inf
    while True:
        if it >= max_iter:
            raise IterationBudgetExceeded(it, last)
        sh = _ifft(_fft(h) * mult)
        new = m * sh + m
        d = new - h
        it += 1
        h = new
        dsup = float(np.max(np.abs(d)))
        dl2 = float(np.sqrt(np.sum(np.abs(d) ** 2)))
        if prev_l2:
            r = dl2 / prev_l2
            if r > 1 + 1e-9:
                raise ContractivityViolated(f"successive-difference ratio {r:.4f} > 1 at iteration {it}")
            ratios.append(r)
            sup_ratios.append(dsup / prev_sup)
        prev_l2, prev_sup = dl2, dsup
        last = dsup
        if dsup < tol or dl2 == 0:
            break
    hg = ComplexGrid(work_mu.center, work_mu.half_width, h)
    sc = _SpectralCauchy(hg)
    gauge = complex(sc.at([0.0])[0])
    fvals = ComplexGrid(hg.center, hg.half_width, hg.z + sc.values - gauge).cropped(grid.N)
    return NormalSolutionField(
        hg.cropped(grid.N), fvals, it, last, tuple(ratios), tuple(sup_ratios), sc, gauge
    )


@dataclass(frozen=True)
class BeltramiResidual:
    max_residual: float
    dilatation_violations: int

    def __float__(self):
        return self.max_residual


def grid_derivatives(values: np.ndarray, dx: float):
    """Central-difference ``(f_z, f_zbar)`` at interior nodes (boundary ring dropped)."""
    fx = (values[1:-1, 2:] - values[1:-1, :-2]) / (2 * dx)
    fy = (values[2:, 1:-1] - values[:-2, 1:-1]) / (2 * dx)
    return 0.5 * (fx - 1j * fy), 0.5 * (fx + 1j * fy)


def beltrami_residual(f, mu: BeltramiField, slack: float = 1e-12) -> BeltramiResidual:
    """``max |f_zbar - mu f_z|`` over interior nodes, plus the count of nodes
    where ``|f_zbar| > k |f_z|``."""
    values = f.values.samples if isinstance(f, NormalSolutionField) else (
        f.samples if isinstance(f, ComplexGrid) else np.asarray(f))
    fz, fzb = grid_derivatives(values, mu.grid.dx)
    m = mu.samples[1:-1, 1:-1]
    res = float(np.max(np.abs(fzb - m * fz)))
    viol = int(np.count_nonzero(np.abs(fzb) > mu.k * np.abs(fz) + slack))
    return BeltramiResidual(res, viol)


def normalize_013(f):
    """``z -> f(z)/f(1)``: fixes 0 and 1 (and infinity for compact support)."""
    f1 = complex(np.asarray(f(np.array([1.0 + 0j])), dtype=complex).ravel()[0])
    if abs(f1) < 1e-12:
        raise DegenerateNormalization(f"|f(1)| = {abs(f1):.3e}")

    def normalized(z):
        return np.asarray(f(np.asarray(z, dtype=complex)), dtype=complex) / f1

    normalized.scale = f1
    return normalized


@dataclass(frozen=True)
class DistortionReport:
    A_emp: float
    B_emp: float
    p: float


def distortion_report(f: NormalSolutionField, mu: BeltramiField, p: float = 4.0) -> DistortionReport:
    """Empirical constants in ``|f(z)-z| <= A |mu| |z|^(1-2/p)`` and the reverse bound."""
    if not p > 2:
        raise ValueError("p must exceed 2")
    norm = mu.sup()
    if norm == 0:
        return DistortionReport(0.0, 0.0, p)
    z = f.values.z.ravel()
    fz = f.values.samples.ravel()
    e = 1 - 2 / p
    keep = z != 0
    A = np.max(np.abs(fz[keep] - z[keep]) / (norm * np.abs(z[keep]) ** e))
    keep = np.abs(fz) > 0
    B = np.max((np.abs(z[keep]) - np.abs(fz[keep])) / (norm * np.abs(fz[keep]) ** e))
    return DistortionReport(float(A), float(max(B, 0.0)), p)


# -- closed-form reference: radial stretch -----------------------------------

def radial_stretch_mu(c: float = 1 / 3, radius: float = 1.0):
    """``mu = c z/zbar`` on ``|z| < radius``."""
    def mu(z):
        z = np.asarray(z, dtype=complex)
        out = np.zeros_like(z)
        inside = (np.abs(z) < radius) & (z != 0)
        out[inside] = c * z[inside] / np.conj(z[inside])
        return out
    return mu


def radial_stretch_solution(c: float = 1 / 3, radius: float = 1.0):
    """``z (|z|/R)^a`` inside the disk, ``z`` outside, with ``a = 2c/(1-c)``."""
    a = 2 * c / (1 - c)

    def f(z):
        z = np.asarray(z, dtype=complex)
        r = np.abs(z) / radius
        return np.where(r < 1, z * r ** a, z)
    return f
