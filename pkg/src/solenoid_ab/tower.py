"""Periodic approximants, finite solutions and the solenoidal tower.

Coordinates: a baseleaf point ``z = x + iy`` projects to level ``n`` as
``w = pi_n(z) = exp(i z / n)``, so ``pi_m = pi_n ** (n/m)`` whenever
``m | n`` and translation by ``2*pi*n`` is invisible at level ``n``.
All cross-level maps are integer powers.

Finite solutions can be computed in two ways:

* ``backend="plane"``: push the coefficient to the level-``n`` plane with
  :func:`cylinder_to_plane` and call :func:`~solenoid_ab.beltrami.solve_normal`;
* ``backend="leaf"``: solve the conjugated equation directly on the
  baseleaf cylinder ``C / 2 pi n Z`` (:func:`solve_leaf`).  Both give the
  same map ``f_n``; the leaf solver keeps a level-independent resolution.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.fft as sfft
from scipy.interpolate import LinearNDInterpolator, RectBivariateSpline, RegularGridInterpolator

from .beltrami import (
    BeltramiField,
    ComplexGrid,
    ContractivityViolated,
    IterationBudgetExceeded,
    NormalSolutionField,
    _workers,
    normalize_013,
    solve_normal,
)
from .series import DivisibilityChain

EPS_SUPP = 1e-8


class LevelSolveError(RuntimeError):
    def __init__(self, level, cause):
        self.level = level
        self.cause = cause
        super().__init__(f"level {level}: {cause}")


class DenominatorNearZero(ValueError):
    pass


# -- coefficients on the baseleaf -------------------------------------------

@dataclass(frozen=True, eq=False)
class CylinderCoefficient:
    """A Beltrami coefficient in baseleaf coordinates.

    ``period`` is ``p`` for an x-period of ``2*pi*p``; ``None`` marks a
    limit-periodic coefficient.  ``decay`` is a height ``Y`` beyond which
    ``|mu| < EPS_SUPP``.
    """

    evaluator: Callable
    k: float
    period: int = None
    decay: float = 5.0

    def __post_init__(self):
        if not 0 <= self.k < 1:
            raise ValueError("sup bound k must lie in [0, 1)")
        if self.period is not None and int(self.period) < 1:
            raise ValueError("period multiple must be a positive integer")

    def __call__(self, x, y):
        return np.asarray(self.evaluator(np.asarray(x, float), np.asarray(y, float)), dtype=complex)

    @property
    def is_periodic(self) -> bool:
        return self.period is not None

    def periodized(self, n: int) -> "CylinderCoefficient":
        """Equal to ``self`` on ``[0, 2 pi n) x R``, extended ``2 pi n``-periodically."""
        span = 2 * math.pi * n
        base = self.evaluator

        def ev(x, y):
            return base(np.mod(x, span), y)
        return CylinderCoefficient(ev, self.k, n, self.decay)

    def check(self, samples_per_2pi: int = 16, rows: int = 33, span: int = None):
        """Sampled sup and periodicity checks; raises ``ValueError`` on failure."""
        p = self.period if self.period is not None else (span or 8)
        x = np.arange(samples_per_2pi * p) * (2 * math.pi / samples_per_2pi)
        y = np.linspace(-self.decay, self.decay, rows)
        X, Y = np.meshgrid(x, y)
        v = self(X, Y)
        sup = float(np.max(np.abs(v)))
        if sup > self.k + 1e-12:
            raise ValueError(f"sampled sup {sup:.6f} exceeds k = {self.k}")
        if self.period is not None:
            shifted = self(X + 2 * math.pi * self.period, Y)
            err = float(np.max(np.abs(shifted - v)))
            if err > 1e-12:
                raise ValueError(f"declared period 2*pi*{self.period} violated by {err:.2e}")
        return sup


def scale_coefficient(profile: Callable, n: int, amplitude: float):
    """``amplitude * profile(x/n, y/n)``: a unit-shape profile stretched to level ``n``."""
    def ev(x, y):
        return amplitude * profile(x / n, y / n)
    return ev


def bump(t):
    """Smooth bump with ``bump(0) = 1`` supported on ``|t| < 1``."""
    t = np.asarray(t, float)
    out = np.zeros_like(t)
    m = np.abs(t) < 1
    out[m] = np.exp(1 - 1 / (1 - t[m] ** 2))
    return out


def unit_profile(x, y):
    """``exp(ix) * bump(y)``, modulus 1 along ``y = 0``."""
    return np.exp(1j * x) * bump(y)


@dataclass(frozen=True)
class ProfiniteAddress:
    """Residues ``r_i mod n_i`` with ``r_{i+1} = r_i (mod n_i)``."""

    chain: DivisibilityChain
    residues: tuple

    def __post_init__(self):
        if len(self.residues) != len(self.chain):
            raise ValueError("one residue per chain entry")
        res = tuple(int(r) % n for r, n in zip(self.residues, self.chain))
        for i in range(len(res) - 1):
            if (res[i + 1] - res[i]) % self.chain[i]:
                raise ValueError(f"residues incompatible at level {self.chain[i]}")
        object.__setattr__(self, "residues", res)

    @classmethod
    def from_integer(cls, a: int, chain: DivisibilityChain) -> "ProfiniteAddress":
        return cls(chain, tuple(a % n for n in chain))

    def level_coordinate(self, z, i: int):
        """``pi_{n_i}`` of the point ``(a, z)``: ``exp(i (z + 2 pi r_i) / n_i)``."""
        n = self.chain[i]
        return np.exp(1j * (np.asarray(z, complex) + 2 * math.pi * self.residues[i]) / n)


# -- leaf <-> plane -----------------------------------------------------------

@dataclass(frozen=True)
class PlaneGridSpec:
    N: int = 256
    half_width: float = None  # default: twice the outer support radius


def _plane_half_width(decay: float, n: int, spec: PlaneGridSpec) -> float:
    if spec.half_width is not None:
        return spec.half_width
    return 2.0 * math.exp(decay / n) * (1 + 1e-6)


def leaf_phase(w):
    """``-(w/|w|)^2``: the factor relating leaf and level-plane coefficients."""
    w = np.asarray(w, complex)
    out = np.zeros_like(w)
    nz = w != 0
    out[nz] = -(w[nz] / np.abs(w[nz])) ** 2
    return out


def cylinder_to_plane(mu: CylinderCoefficient, n: int, grid: PlaneGridSpec = PlaneGridSpec()) -> BeltramiField:
    """The level-``n`` plane coefficient ``mu_n(w) = -(w/|w|)^2 mu(n arg w, -n ln|w|)``."""
    if not mu.is_periodic:
        raise ValueError("cylinder_to_plane needs a periodic coefficient")
    if n % mu.period:
        raise ValueError(f"level {n} is not a multiple of the period 2*pi*{mu.period}")
    a = _plane_half_width(mu.decay, n, grid)
    g = ComplexGrid(0, a, np.zeros((grid.N, grid.N), complex))
    return BeltramiField(g.with_samples(plane_values(mu, n, g.z)), mu.k)


def plane_values(mu: CylinderCoefficient, n: int, w):
    w = np.asarray(w, complex)
    out = np.zeros_like(w)
    nz = w != 0
    ww = w[nz]
    x = n * np.angle(ww)
    y = -n * np.log(np.abs(ww))
    v = mu(x, y)
    v = np.where(np.abs(v) < EPS_SUPP, 0, v)
    out[nz] = leaf_phase(ww) * v
    return out


def _interp_field(field_: BeltramiField):
    g = field_.grid
    re = RegularGridInterpolator((g.y, g.x), g.samples.real, bounds_error=False, fill_value=0.0)
    im = RegularGridInterpolator((g.y, g.x), g.samples.imag, bounds_error=False, fill_value=0.0)

    def ev(z):
        z = np.asarray(z, complex)
        p = np.stack([z.imag.ravel(), z.real.ravel()], axis=-1)
        return (re(p) + 1j * im(p)).reshape(z.shape)
    return ev


def coefficient_pullback(mu_n: BeltramiField, n: int, L: int, evaluator=None,
                         grid: ComplexGrid = None) -> BeltramiField:
    """``mu_n^{up L}(z) = mu_n(z^m) (zbar/z)^(m-1)`` with ``m = L/n``.

    ``evaluator`` (exact values of ``mu_n`` at arbitrary points) is used when
    given; otherwise the grid is interpolated bilinearly.  The output lives on
    ``grid`` (default: a box around the ``m``-th root of the input support).
    """
    if L % n:
        raise ValueError(f"{L} is not a multiple of {n}")
    m = L // n
    if m == 1:
        return mu_n
    ev = evaluator or _interp_field(mu_n)
    if grid is None:
        src = mu_n.grid
        outer = max(src.half_width / 2, 1.0)  # support radius bound of the input
        grid = ComplexGrid(0, 2 * outer ** (1 / m) * (1 + 1e-9), np.zeros_like(src.samples))
    z = grid.z
    vals = np.zeros_like(z)
    nz = z != 0
    zz = z[nz]
    vals[nz] = ev(zz ** m) * (np.conj(zz) / zz) ** (m - 1)
    return BeltramiField(grid.with_samples(vals), mu_n.k)


def _push_forward(values: np.ndarray, f: NormalSolutionField, grid: ComplexGrid) -> np.ndarray:
    """Resample a field given at ``f(z_j)`` onto the nodes of ``grid``."""
    src = f.values.z
    img = f.values.samples
    mask = values != 0
    if not mask.any():
        return np.zeros_like(values)
    # one ring of zero nodes so interpolation falls off at the support edge
    ring = mask.copy()
    for ax in (0, 1):
        for s in (1, -1):
            ring |= np.roll(mask, s, axis=ax)
    pts = np.stack([img[ring].real, img[ring].imag], axis=-1)
    interp = LinearNDInterpolator(pts, values[ring], fill_value=0.0)
    z = grid.z
    return interp(z.real, z.imag)


def relative_coefficient(mu_hi: BeltramiField, mu_lo: BeltramiField, f_lo: NormalSolutionField) -> BeltramiField:
    """Coefficient of ``f_hi o f_lo^{-1}``: the right-hand side
    ``(mu_hi - mu_lo)/(1 - mu_hi conj(mu_lo))`` transported along ``f_lo``."""
    a = mu_hi.samples
    b = mu_lo.samples
    if a.shape != b.shape:
        raise ValueError("fields must share a grid")
    den = 1 - a * np.conj(b)
    if np.min(np.abs(den)) < 1e-9:
        raise DenominatorNearZero("|1 - mu_hi conj(mu_lo)| < 1e-9")
    rhs = (a - b) / den
    k = max(mu_hi.k, mu_lo.k)
    bound = float(np.max(np.abs(a - b))) / (1 - k * k) if k < 1 else math.inf
    if f_lo.is_identity:
        out = rhs
    else:
        fz, _ = f_lo.derivatives()
        out = _push_forward(rhs * fz / np.conj(fz), f_lo, mu_hi.grid)
    sup = float(np.max(np.abs(out)))
    return BeltramiField(mu_hi.grid.with_samples(out), max(min(bound, 0.999999), sup))


def composed_coefficient(mu1: BeltramiField, f1: NormalSolutionField, mu2: BeltramiField) -> BeltramiField:
    """Beltrami coefficient of ``f2 o f1`` on the grid of ``mu1``."""
    m1 = mu1.samples
    if f1.is_identity:
        m2 = mu2.samples
        theta = np.ones_like(m1)
    else:
        m2 = _interp_field(mu2)(f1.values.samples)
        fz, _ = f1.derivatives()
        theta = np.conj(fz) / fz
    num = m1 + m2 * theta
    den = 1 + np.conj(m1) * m2 * theta
    out = num / den
    return BeltramiField(mu1.grid.with_samples(out))


# -- finite solutions on the baseleaf ------------------------------------------

@dataclass(frozen=True)
class LeafGridSpec:
    samples_per_2pi: int = 32
    dy: float = 0.0625
    y_extent: float = None  # default: the coefficient's decay bound


def _leaf_weights(xi, dy):
    """Per-step weights for ``u' + xi u = s`` with ``s`` linear across a step
    (marching away from the side where ``u`` vanishes)."""
    a = np.abs(xi) * dy
    E = np.exp(-a)
    w_near = np.empty_like(a)
    w_far = np.empty_like(a)
    small = a < 1e-4
    aa = a[~small]
    Ee = E[~small]
    # weight for the sample behind the step and for the one ahead of it
    w_near[~small] = dy * (1 - Ee * (1 + aa)) / aa ** 2
    w_far[~small] = dy * (1 - Ee) / aa - w_near[~small]
    s = a[small]
    w_near[small] = dy * (0.5 - s / 3 + s * s / 8)
    w_far[small] = dy * (0.5 - s / 6 + s * s / 24)
    return E, w_near, w_far


class _LeafOperators:
    """Cauchy and Beurling transforms on ``[0, 2 pi n) x [y_0, y_1]``.

    Each x-mode ``e^{i xi x}`` solves ``u' + xi u = -2i h_xi`` exactly for
    ``h`` piecewise linear in ``y``, with the decaying boundary condition on
    each side; then ``S h = i xi u - h``.
    """

    def __init__(self, Mx: int, n: int, y: np.ndarray):
        self.n = n
        self.y = y
        self.dy = float(y[1] - y[0])
        self.dx = 2 * math.pi * n / Mx
        self.xi = 2 * math.pi * sfft.fftfreq(Mx, d=self.dx)
        self.pos = self.xi > 0
        self.neg = self.xi < 0
        self.zero = self.xi == 0
        self.E, self.wn, self.wf = _leaf_weights(self.xi, self.dy)

    def cauchy_hat(self, hhat: np.ndarray) -> np.ndarray:
        Ny = hhat.shape[0]
        u = np.zeros_like(hhat)
        E, wn, wf = self.E, self.wn, self.wf
        src = -2j * hhat
        p, q = self.pos, self.neg
        z0 = self.zero
        for k in range(Ny - 1):
            # forward sweep: xi > 0 decays upward, xi = 0 integrates from the bottom
            u[k + 1, p] = E[p] * u[k, p] + wf[p] * src[k, p] + wn[p] * src[k + 1, p]
            u[k + 1, z0] = u[k, z0] + 0.5 * self.dy * (src[k, z0] + src[k + 1, z0])
        for k in range(Ny - 1, 0, -1):
            # backward sweep for xi < 0; sign flips because we march downward
            u[k - 1, q] = E[q] * u[k, q] - wf[q] * src[k, q] - wn[q] * src[k - 1, q]
        return u

    def fft(self, a):
        return sfft.fft(a, axis=1, workers=_workers())

    def ifft(self, a):
        return sfft.ifft(a, axis=1, workers=_workers())

    def beurling(self, h):
        hh = self.fft(h)
        u = self.cauchy_hat(hh)
        return self.ifft(1j * self.xi[None, :] * u - hh)

    def cauchy(self, h):
        return self.ifft(self.cauchy_hat(self.fft(h)))


@dataclass(frozen=True, eq=False)
class LeafSolution:
    """The finite solution at level ``n`` as a baseleaf map ``z -> z + g(z)``."""

    n: int
    x: np.ndarray
    y: np.ndarray
    h: np.ndarray
    g_hat: np.ndarray  # x-Fourier coefficients of g on the y rows
    xi: np.ndarray
    iterations: int
    residual: float
    contraction: tuple = ()

    def g(self, z) -> np.ndarray:
        z = np.asarray(z, complex)
        flat = z.ravel()
        out = np.zeros(len(flat), complex)
        y = self.y
        M = len(self.xi)
        for s in range(0, len(flat), 512):
            p = flat[s:s + 512]
            ex = np.exp(1j * np.outer(self.xi, p.real)) / M  # (M, P)
            yy = p.imag
            res = np.zeros(len(p), complex)
            inside = (yy >= y[0]) & (yy <= y[-1])
            if inside.any():
                res[inside] = self._rows_at(yy[inside], ex[:, inside])
            above = yy > y[-1]
            if above.any():
                d = yy[above] - y[-1]
                coef = self.g_hat[-1][:, None] * np.where(self.xi[:, None] >= 0,
                                                          np.exp(-np.maximum(self.xi, 0)[:, None] * d[None, :]), 0)
                res[above] = np.sum(coef * ex[:, above], axis=0)
            below = yy < y[0]
            if below.any():
                d = yy[below] - y[0]
                coef = self.g_hat[0][:, None] * np.where(self.xi[:, None] < 0,
                                                         np.exp(-np.minimum(self.xi, 0)[:, None] * d[None, :]), 0)
                res[below] = np.sum(coef * ex[:, below], axis=0)
            out[s:s + 512] = res
        return out.reshape(z.shape)

    def _rows_at(self, yy, ex):
        """Cubic Lagrange interpolation in y of the spectrally evaluated rows."""
        y = self.y
        dy = y[1] - y[0]
        t = (yy - y[0]) / dy
        k = np.clip(np.floor(t).astype(int), 1, len(y) - 3)
        s = t - k
        out = np.zeros(len(yy), complex)
        for off, wfun in ((-1, lambda s: -s * (s - 1) * (s - 2) / 6),
                          (0, lambda s: (s + 1) * (s - 1) * (s - 2) / 2),
                          (1, lambda s: -(s + 1) * s * (s - 2) / 2),
                          (2, lambda s: (s + 1) * s * (s - 1) / 6)):
            rows = self.g_hat[k + off]  # (P, M)
            out += wfun(s) * np.sum(rows * ex.T, axis=1)
        return out

    def __call__(self, z):
        z = np.asarray(z, complex)
        return z + self.g(z)

    def plane(self, w):
        """The level-``n`` plane map ``f_n(w) = exp(i F(z)/n)`` with ``w = exp(iz/n)``."""
        w = np.asarray(w, complex)
        out = np.zeros_like(w)
        nz = w != 0
        z = -1j * self.n * np.log(w[nz])
        out[nz] = np.exp(1j * self(z) / self.n)
        return out

    def grid_values(self):
        """``z + g`` on the grid nodes, rows indexed by ``y``."""
        Z = self.x[None, :] + 1j * self.y[:, None]
        return Z + sfft.ifft(self.g_hat, axis=1)


def solve_leaf(mu: CylinderCoefficient, n: int, spec: LeafGridSpec = LeafGridSpec(),
               tol: float = 1e-10, max_iter: int = 200) -> LeafSolution:
    """Finite solution at level ``n`` computed on the baseleaf cylinder."""
    if not mu.is_periodic or n % mu.period:
        raise ValueError(f"coefficient is not 2*pi*{n}-periodic")
    Mx = spec.samples_per_2pi * n
    Y = spec.y_extent if spec.y_extent is not None else mu.decay
    K = int(math.ceil(Y / spec.dy - 1e-9))
    y = spec.dy * np.arange(-K, K + 1)  # nodes shared by every level
    x = np.arange(Mx) * (2 * math.pi * n / Mx)
    m = mu(x[None, :], y[:, None])
    m = np.where(np.abs(m) < EPS_SUPP, 0, m)
    ops = _LeafOperators(Mx, n, y)
    h = np.zeros_like(m)
    it = 0
    ratios = []
    prev = None
    last = math.inf
    if np.any(m):
        while True:
            if it >= max_iter:
                raise IterationBudgetExceeded(it, last)
            new = m * ops.beurling(h) + m
            d = new - h
            h = new
            it += 1
            dl2 = float(np.sqrt(np.sum(np.abs(d) ** 2)))
            last = float(np.max(np.abs(d)))
            if prev:
                r = dl2 / prev
                if r > 1 + 1e-9:
                    raise ContractivityViolated(f"ratio {r:.4f} at iteration {it}")
                ratios.append(r)
            prev = dl2
            if last < tol or dl2 == 0:
                break
    else:
        it, last = 1, 0.0
    g_hat = ops.cauchy_hat(ops.fft(h))
    return LeafSolution(n, x, y, h, g_hat, ops.xi, it, last, tuple(ratios))


def leaf_residual(sol: LeafSolution, mu: CylinderCoefficient) -> float:
    """``max |F_zbar - mu F_z|`` on interior leaf rows: spectral in x,
    central differences in y."""
    g = sfft.ifft(sol.g_hat, axis=1)
    gx = sfft.ifft(1j * sol.xi[None, :] * sol.g_hat, axis=1)[1:-1]
    gy = (g[2:] - g[:-2]) / (2 * (sol.y[1] - sol.y[0]))
    fz = 1 + 0.5 * (gx - 1j * gy)
    fzb = 0.5 * (gx + 1j * gy)
    m = mu(sol.x[None, :], sol.y[1:-1, None])
    return float(np.max(np.abs(fzb - m * fz)))


# -- families ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PeriodicBeltramiFamily:
    """Chain-indexed periodic coefficients ``mu_{n_i}`` with cached increments.

    ``coefficients[n]`` is the baseleaf coefficient at level ``n``;
    ``levels[n]`` the corresponding plane field when one was built.
    ``increments[i]`` is ``||mu_{n_{i+1}} - mu_{n_i}||_inf``, sampled on the
    finer level's leaf grid (equal to the plane value after pullback, since
    the leaf phase is the same at both levels).
    """

    chain: DivisibilityChain
    coefficients: dict
    increments: tuple
    sups: tuple
    levels: dict = field(default_factory=dict)
    label: str = ""

    @property
    def k(self) -> float:
        return max(c.k for c in self.coefficients.values())

    def coefficient(self, n: int) -> CylinderCoefficient:
        return self.coefficients[n]

    def plane_field(self, n: int, grid: PlaneGridSpec = PlaneGridSpec()) -> BeltramiField:
        if n in self.levels and self.levels[n].grid.N == grid.N and grid.half_width is None:
            return self.levels[n]
        return cylinder_to_plane(self.coefficients[n], n, grid)

    def weighted_increments(self):
        return [n * d for n, d in zip(self.chain.entries[1:], self.increments)]


def _leaf_sample_grid(n: int, decay: float, samples_per_2pi: int, rows: int):
    x = np.arange(samples_per_2pi * n) * (2 * math.pi / samples_per_2pi)
    y = np.linspace(-decay, decay, rows)
    return np.meshgrid(x, y)


def family_from_coefficients(chain: DivisibilityChain, coefficients: dict, samples_per_2pi: int = 32,
                             rows: int = 257, plane_grid: PlaneGridSpec = None, label: str = "") -> PeriodicBeltramiFamily:
    for n in chain:
        c = coefficients[n]
        if not c.is_periodic or n % c.period:
            raise ValueError(f"coefficient at level {n} is not 2*pi*{n}-periodic")
    decay = max(c.decay for c in coefficients.values())
    sups = []
    incs = []
    for i, n in enumerate(chain):
        X, Y = _leaf_sample_grid(n, decay, samples_per_2pi, rows)
        cur = coefficients[n](X, Y)
        sups.append(float(np.max(np.abs(cur))))
        if i:
            prev = coefficients[chain[i - 1]](X, Y)
            incs.append(float(np.max(np.abs(cur - prev))))
    levels = {}
    if plane_grid is not None:
        levels = {n: cylinder_to_plane(coefficients[n], n, plane_grid) for n in chain}
    return PeriodicBeltramiFamily(chain, dict(coefficients), tuple(incs), tuple(sups), levels, label)


def build_periodic_approximants(mu: CylinderCoefficient, S: DivisibilityChain, plane_grid: PlaneGridSpec = None,
                                samples_per_2pi: int = 32, rows: int = 257) -> PeriodicBeltramiFamily:
    """Cut ``mu`` to ``[0, 2 pi n_i) x R`` and extend periodically, for each chain level."""
    coeffs = {n: mu.periodized(n) for n in S}
    return family_from_coefficients(S, coeffs, samples_per_2pi, rows, plane_grid, label="approximants")


def mu_s_norm(family: PeriodicBeltramiFamily) -> float:
    """``n_1 ||mu_{n_1}|| + sum n_{i+1} ||mu_{n_{i+1}} - mu_{n_i}||``."""
    return family.chain[0] * family.sups[0] + sum(family.weighted_increments())


def geometric_family(chain=(1, 2, 4, 8, 16), base: float = 0.3, weighted=None, decay: float = None,
                     label: str = "geometric") -> PeriodicBeltramiFamily:
    """Base ``base * e^{ix} bump(y)`` plus increments ``eps_i e^{ix/n} bump(y/n)``
    at level ``n = n_{i+1}``, with ``n_{i+1} eps_i = weighted[i]``.

    Default weights ``0.1 * 2^-i`` (i = 1, 2, ...) make ``||mu||_S`` converge.
    """
    S = chain if isinstance(chain, DivisibilityChain) else DivisibilityChain(tuple(chain))
    if weighted is None:
        weighted = [0.1 * 2.0 ** -(i + 1) for i in range(len(S) - 1)]
    if len(weighted) != len(S) - 1:
        raise ValueError("one weight per chain step")
    parts = [(1, base)]
    for i, w in enumerate(weighted):
        n = S[i + 1]
        parts.append((n, w / n))
    coeffs = {}
    for j, n in enumerate(S):
        terms = parts[:j + 1]
        k = min(sum(a for _, a in terms), 0.999)

        def ev(x, y, terms=tuple(terms)):
            out = np.zeros(np.broadcast(x, y).shape, complex)
            for p, a in terms:
                out = out + scale_coefficient(unit_profile, p, a)(x, y)
            return out
        coeffs[n] = CylinderCoefficient(ev, k, n, decay if decay is not None else float(max(1, n)))
    return family_from_coefficients(S, coeffs, label=label)


def constant_increment_family(chain=(1, 2, 4, 8, 16), base: float = 0.3, c: float = 0.05) -> PeriodicBeltramiFamily:
    S = chain if isinstance(chain, DivisibilityChain) else DivisibilityChain(tuple(chain))
    return geometric_family(S, base, [c] * (len(S) - 1), label="constant")


def stationary_family(chain=(1, 2, 4), base: float = 0.3, decay: float = 2.0) -> PeriodicBeltramiFamily:
    S = chain if isinstance(chain, DivisibilityChain) else DivisibilityChain(tuple(chain))
    coeffs = {n: CylinderCoefficient(scale_coefficient(unit_profile, 1, base), base, 1, decay) for n in S}
    # every level is the same 2*pi-periodic coefficient
    coeffs = {n: CylinderCoefficient(c.evaluator, c.k, n, c.decay) for n, c in coeffs.items()}
    return family_from_coefficients(S, coeffs, label="stationary")


def zero_family(chain=(1, 2, 4), decay: float = 1.0) -> PeriodicBeltramiFamily:
    S = chain if isinstance(chain, DivisibilityChain) else DivisibilityChain(tuple(chain))

    def ev(x, y):
        return np.zeros(np.broadcast(x, y).shape, complex)
    coeffs = {n: CylinderCoefficient(ev, 0.0, n, decay) for n in S}
    return family_from_coefficients(S, coeffs, label="zero")


def counterexample_coefficient(N: int = 4) -> CylinderCoefficient:
    """The factorial counterexample as a (limit-periodic) baseleaf coefficient."""
    from .counterexamples import MU_BOUND, eval_mu_counterexample

    def ev(x, y):
        return eval_mu_counterexample(np.asarray(x) + 1j * np.asarray(y), N)
    decay = 4.3 * math.factorial(N)
    return CylinderCoefficient(ev, MU_BOUND, None, decay)


# -- the tower -------------------------------------------------------------------

@dataclass(frozen=True)
class TowerRun:
    chain: tuple
    J: int  # 0-based index of the target level L = chain[J]
    L: int
    points: np.ndarray  # deepest-level plane coordinates w
    table: np.ndarray  # (levels J..I, points): pi_L o f_{n_i} at each point
    diffs: tuple  # max |F[i+1] - F[i]| / max(1, |pi_L|) over the points
    raw_diffs: tuple  # the same without the weight
    leaf_values: tuple  # per level: (F(0), F(1)) on the baseleaf
    iterations: tuple
    backend: str

    @property
    def levels(self):
        return self.chain[self.J:]

    @property
    def base(self) -> np.ndarray:
        """``pi_L(x)`` for each sample point."""
        return self.points ** (self.chain[-1] // self.L)

    def to_json_dict(self, constants=None) -> dict:
        def c2(v):
            return [float(np.real(v)), float(np.imag(v))]
        return {
            "chain": list(self.chain),
            "L": self.L,
            "backend": self.backend,
            "points": [c2(p) for p in self.points],
            "table": [[c2(v) for v in row] for row in self.table],
            "diffs": [float(d) for d in self.diffs],
            "raw_diffs": [float(d) for d in self.raw_diffs],
            "constants": constants or {},
        }


def default_sample_points(n_deep: int, heights=(-1.0, 0.0), per_2pi: int = 8, x_periods: int = None):
    """Deepest-level plane coordinates of baseleaf points ``x + i y`` with ``x``
    spread over one full period ``[0, 2 pi n_deep)`` and ``y`` in ``heights``."""
    count = per_2pi * (x_periods or n_deep)
    x = np.arange(count) * (2 * math.pi * n_deep / count)
    z = (x[None, :] + 1j * np.asarray(heights, float)[:, None]).ravel()
    return np.exp(1j * z / n_deep)


def _leaf_from_plane(f: NormalSolutionField, n: int, z):
    """``-i n log f(exp(i z/n))`` with the branch continued from ``z = 0``."""
    z = np.asarray(z, complex)
    path = np.linspace(0, 1, 65)
    out = []
    for zz in z.ravel():
        w = np.exp(1j * (path * zz) / n)
        v = f(w)
        ang = np.unwrap(np.angle(v))
        ang -= 2 * math.pi * round(ang[0] / (2 * math.pi))
        out.append(n * ang[-1] - 1j * n * np.log(np.abs(v[-1])))
    return np.array(out).reshape(z.shape)


def tower_solve(family: PeriodicBeltramiFamily, J: int = 0, sample_points=None, backend: str = "leaf",
                tol: float = 1e-10, max_iter: int = 200, leaf_grid: LeafGridSpec = LeafGridSpec(),
                plane_grid: PlaneGridSpec = PlaneGridSpec()) -> TowerRun:
    """Evaluate ``pi_L o f_{n_i}`` for ``i = J..I`` at the sample points."""
    S = family.chain
    if not 0 <= J < len(S):
        raise ValueError("J out of range")
    L = S[J]
    nI = S.last
    w = np.asarray(default_sample_points(nI) if sample_points is None else sample_points, complex).ravel()
    rows, leaf_vals, iters = [], [], []
    for n in S.entries[J:]:
        try:
            if backend == "leaf":
                sol = solve_leaf(family.coefficient(n), n, leaf_grid, tol, max_iter)
                z = -1j * nI * np.log(w)
                row = np.exp(1j * sol(z) / L)
                lv = sol(np.array([0.0, 1.0], complex))
            elif backend == "plane":
                sol = solve_normal(family.plane_field(n, plane_grid), tol, max_iter)
                row = sol(w ** (nI // n)) ** (n // L)
                lv = _leaf_from_plane(sol, n, np.array([0.0, 1.0]))
            else:
                raise ValueError(f"unknown backend {backend!r}")
        except (IterationBudgetExceeded, ContractivityViolated) as exc:
            raise LevelSolveError(n, exc) from exc
        rows.append(row)
        leaf_vals.append((complex(lv[0]), complex(lv[1])))
        iters.append(sol.iterations)
    table = np.array(rows)
    step = np.abs(np.diff(table, axis=0))
    weight = np.maximum(1.0, np.abs(w ** (nI // L)))
    diffs = tuple(float(np.max(s / weight)) for s in step)
    raw = tuple(float(np.max(s)) for s in step)
    return TowerRun(S.entries, J, L, w, table, diffs, raw, tuple(leaf_vals), tuple(iters), backend)


@dataclass(frozen=True)
class CauchyReport:
    ratios: tuple  # empirical A' M_L per step (nan where the increment vanishes)
    growth: float  # empirical M_L
    reverse: float  # empirical reverse (B-side) constant
    rate: float  # geometric rate of the monotone envelope of the diffs
    verdict: str
    limit: np.ndarray = None  # extrapolated limit row
    limit_growth: float = float("nan")

    @property
    def ratio_spread(self) -> float:
        r = [x for x in self.ratios if np.isfinite(x)]
        if not r:
            return 0.0
        return (max(r) - min(r)) / max(r)


def cauchy_diagnostics(run: TowerRun, family: PeriodicBeltramiFamily, decay_ratio: float = 0.8,
                       atol: float = 1e-12) -> CauchyReport:
    """Empirical constants of the step and growth bounds, and a Cauchy verdict."""
    if len(run.table) < 2:
        raise ValueError("need at least two levels")
    L = run.L
    base = run.base
    scale = np.maximum(1.0, np.abs(base))
    steps = np.abs(np.diff(run.table, axis=0)) / scale[None, :]
    weighted = family.weighted_increments()[run.J:]
    ratios = []
    for i, s in enumerate(steps):
        wi = weighted[i] / L
        ratios.append(float(np.max(s)) / wi if wi > 0 else float("nan"))
    growth = float(np.max(np.abs(run.table) / scale[None, :]))
    reverse = float(np.max(np.abs(base)[None, :] / np.maximum(1.0, np.abs(run.table))))
    d = np.array(run.diffs)
    env = np.maximum.accumulate(d[::-1])[::-1]
    if env[0] <= atol:
        rate, verdict = 0.0, "CAUCHY"
    elif len(env) == 1:
        rate, verdict = float("nan"), "NOT-CAUCHY"
    else:
        rate = float((max(env[-1], 1e-300) / env[0]) ** (1 / (len(env) - 1)))
        verdict = "CAUCHY" if rate <= decay_ratio else "NOT-CAUCHY"
    limit, lg = None, float("nan")
    if verdict == "CAUCHY":
        tail = d[-1] * rate / (1 - rate) if rate < 1 else 0.0
        limit = run.table[-1]
        lg = float(np.max((np.abs(limit) + tail) / scale))
    return CauchyReport(tuple(ratios), growth, reverse, rate, verdict, limit, lg)


@dataclass(frozen=True)
class AffineReport:
    a: tuple
    b: tuple
    a_limit: complex
    b_limit: complex
    steps: tuple  # |(a_{i+1}, b_{i+1}) - (a_i, b_i)|
    degenerate: tuple  # levels where |a_i| < 1e-10
    stable: bool


def affine_renormalize(leaf_values, tol: float = 1e-10, stable_ratio: float = 0.8) -> AffineReport:
    """``a_i = F_i(1) - F_i(0)``, ``b_i = F_i(0)`` from baseleaf values at 0 and 1."""
    if isinstance(leaf_values, TowerRun):
        leaf_values = leaf_values.leaf_values
    a = tuple(complex(v1) - complex(v0) for v0, v1 in leaf_values)
    b = tuple(complex(v0) for v0, _ in leaf_values)
    steps = tuple(float(abs(a[i + 1] - a[i]) + abs(b[i + 1] - b[i])) for i in range(len(a) - 1))
    degenerate = tuple(i for i, ai in enumerate(a) if abs(ai) < tol)
    if not steps or max(steps) <= 1e-12:
        stable = True
    else:
        env = np.maximum.accumulate(np.array(steps)[::-1])[::-1]
        stable = len(env) > 1 and env[-1] <= stable_ratio ** (len(env) - 1) * env[0]
    return AffineReport(a, b, a[-1], b[-1], steps, degenerate, bool(stable and not degenerate))


# -- unbounded support: the Moebius split ------------------------------------------

@dataclass(frozen=True, eq=False)
class SplitSolution:
    mu1: BeltramiField  # inverted outer part, compactly supported
    mu2: BeltramiField  # coefficient left for the second stage
    f1: Callable
    f2: Callable
    R: float

    def __call__(self, z):
        return self.f2(self.f1(np.asarray(z, complex)))


def _conformal_eval(sol: NormalSolutionField, w):
    """``sol`` at points off the support of its density: the multipole
    expansion far away, bicubic interpolation of the node values nearby."""
    w = np.asarray(w, complex)
    flat = w.ravel()
    if sol.is_identity:
        return w.copy()
    sc = sol._cauchy
    c = sc.grid.center
    radius = float(np.max(np.abs(sc.grid.z[sc._support] - c)))
    out = np.empty(len(flat), complex)
    distant = np.abs(flat - c) >= 2 * radius
    if distant.any():
        out[distant] = flat[distant] + sc.far(flat[distant]) - sol._gauge
    near = ~distant
    if near.any():
        g = sol.values
        v = g.samples
        re = RectBivariateSpline(g.y, g.x, v.real)
        im = RectBivariateSpline(g.y, g.x, v.imag)
        p = flat[near]
        out[near] = re.ev(p.imag, p.real) + 1j * im.ev(p.imag, p.real)
    return out.reshape(w.shape)


def _identity(z):
    return np.asarray(z, complex)


def mobius_support_split(mu: Callable, R: float = 1.0, k: float = None, N: int = 256, half_width: float = None,
                         tol: float = 1e-10, max_iter: int = 200, outer_extent: float = None) -> SplitSolution:
    """Solve ``f_zbar = mu f_z`` for ``mu`` not compactly supported, fixing 0, 1, oo.

    The part of ``mu`` on ``|z| >= R`` is conjugated by ``1/z`` into a field
    supported in ``|z| <= 1/R``; its solution ``g`` gives ``f1 = 1/g(1/z)``.
    The rest is transported along ``f1`` and solved as ``f2``.
    """
    probe = ComplexGrid(0, half_width or 4.0 * R, np.zeros((N, N), complex))
    sample = np.asarray(mu(probe.z), complex)
    kk = float(np.max(np.abs(sample))) if k is None else float(k)
    if not kk < 1:
        raise ValueError("sup |mu| must be < 1")
    r_in = 1.0 / R
    # inverted outer part: nu(z) = mu(1/z) z^2/zbar^2 on |z| <= 1/R
    g_grid = ComplexGrid(0, 2.0 * r_in * (1 + 1e-6), np.zeros((N, N), complex))
    z = g_grid.z
    nu = np.zeros_like(z)
    m = (np.abs(z) <= r_in) & (z != 0)
    if outer_extent is not None:
        m &= np.abs(z) >= 1.0 / outer_extent
    zz = z[m]
    nu[m] = mu(1 / zz) * zz ** 2 / np.conj(zz) ** 2
    nu = np.where(np.abs(nu) < EPS_SUPP, 0, nu)
    mu1 = BeltramiField(g_grid.with_samples(nu), kk)
    if np.any(nu):
        gsol = solve_normal(mu1, tol, max_iter)
        gscale = normalize_013(gsol).scale

        def f1(zv):
            zv = np.asarray(zv, complex)
            out = np.zeros_like(zv)
            nz = zv != 0
            inner = nz & (np.abs(zv) < R)
            rest = nz & ~inner
            out[inner] = gscale / _conformal_eval(gsol, 1.0 / zv[inner])
            out[rest] = gscale / gsol(1.0 / zv[rest])
            return out
        f1_is_id = False
    else:
        f1 = _identity
        f1_is_id = True
    # inner part, transported along f1
    a = half_width or 2.0 * R * (1 + 1e-6)
    if f1_is_id:
        inner_grid = ComplexGrid(0, a, np.zeros((N, N), complex))
        zi = inner_grid.z
        rhs = np.where(np.abs(zi) < R, mu(zi), 0)
        mu2_vals = np.where(np.abs(rhs) < EPS_SUPP, 0, rhs)
    else:
        src = ComplexGrid(0, a, np.zeros((N, N), complex))
        zs = src.z
        inner = np.abs(zs) < R
        ring = inner.copy()
        for ax in (0, 1):
            for s in (1, -1):
                ring |= np.roll(inner, s, axis=ax)
        zr = zs[ring]
        # f1 is conformal on |z| < R, so (mu - mu1)/(1 - mu conj(mu1)) = mu there
        mv = np.where(np.abs(zr) < R, mu(zr), 0)
        img = f1(zr)
        h = 1e-6 * a
        fz = 0.5 * ((f1(zr + h) - f1(zr - h)) / (2 * h) - 1j * (f1(zr + 1j * h) - f1(zr - 1j * h)) / (2 * h))
        vals = mv * fz / np.conj(fz)
        outer_r = float(np.max(np.abs(img)))
        inner_grid = ComplexGrid(0, max(a, 2.0 * outer_r * (1 + 1e-6)), np.zeros((N, N), complex))
        interp = LinearNDInterpolator(np.stack([img.real, img.imag], -1), vals, fill_value=0.0)
        zi = inner_grid.z
        mu2_vals = interp(zi.real, zi.imag)
        mu2_vals = np.where(np.abs(mu2_vals) < EPS_SUPP, 0, mu2_vals)
    mu2 = BeltramiField(inner_grid.with_samples(mu2_vals), kk)
    f2 = normalize_013(solve_normal(mu2, tol, max_iter)) if np.any(mu2_vals) else _identity
    return SplitSolution(mu1, mu2, f1, f2, R)


def run_to_json(run: TowerRun, report: CauchyReport = None) -> str:
    consts = {}
    if report is not None:
        r = [x for x in report.ratios if np.isfinite(x)]
        consts = {"A_prime_ML": max(r) if r else 0.0, "M_L": report.growth}
    return json.dumps(run.to_json_dict(consts), sort_keys=True)
