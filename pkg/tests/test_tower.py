import json
import math

import numpy as np
import pytest

from solenoid_ab.beltrami import BeltramiField, ComplexGrid, radial_stretch_mu, solve_normal
from solenoid_ab.series import DivisibilityChain
from solenoid_ab.tower import (
    CylinderCoefficient,
    LeafGridSpec,
    LevelSolveError,
    PlaneGridSpec,
    ProfiniteAddress,
    affine_renormalize,
    bump,
    build_periodic_approximants,
    cauchy_diagnostics,
    coefficient_pullback,
    constant_increment_family,
    counterexample_coefficient,
    cylinder_to_plane,
    default_sample_points,
    geometric_family,
    leaf_phase,
    leaf_residual,
    mobius_support_split,
    mu_s_norm,
    plane_values,
    relative_coefficient,
    run_to_json,
    solve_leaf,
    stationary_family,
    tower_solve,
    unit_profile,
    zero_family,
)

E = math.e


def periodic(k=0.3, period=1, decay=2.0):
    return CylinderCoefficient(lambda x, y: k * unit_profile(x, y / decay), k, period, decay)


def smooth_field(rng, k, N=128, a=2.0):
    """Random smooth coefficient with sup exactly ``k``, supported in ``|z| < a/2``."""
    g = ComplexGrid(0, a, np.zeros((N, N), complex))
    z = g.z
    c = rng.normal(size=3) + 1j * rng.normal(size=3)
    v = (c[0] + c[1] * z + c[2] * np.conj(z) ** 2) * bump(np.abs(z) / (0.45 * a))
    v = k * v / np.max(np.abs(v))
    return BeltramiField(g.with_samples(v), k)


# -- coefficients and addresses --------------------------------------------------

def test_cylinder_coefficient_validation():
    with pytest.raises(ValueError):
        CylinderCoefficient(lambda x, y: 0 * x, 1.0)
    with pytest.raises(ValueError):
        CylinderCoefficient(lambda x, y: 0 * x, 0.1, period=0)
    assert periodic().check() == pytest.approx(0.3)
    bad = CylinderCoefficient(lambda x, y: 0.3 * np.exp(1j * x / 3) * bump(y), 0.3, 1, 1.0)
    with pytest.raises(ValueError):
        bad.check()
    loud = CylinderCoefficient(lambda x, y: 0.5 + 0 * x, 0.3, 1, 1.0)
    with pytest.raises(ValueError):
        loud.check()


def test_periodized_matches_on_fundamental_domain():
    mu = counterexample_coefficient(3)
    p = mu.periodized(2)
    x = np.linspace(0, 4 * math.pi, 50, endpoint=False)
    assert np.all(p(x, 0.3 + 0 * x) == mu(x, 0.3 + 0 * x))
    assert np.allclose(p(x + 4 * math.pi, 0.3 + 0 * x), p(x, 0.3 + 0 * x), atol=1e-12)
    assert p.period == 2


def test_profinite_address():
    S = DivisibilityChain((1, 2, 6, 24))
    a = ProfiniteAddress.from_integer(17, S)
    assert a.residues == (0, 1, 5, 17)
    with pytest.raises(ValueError):
        ProfiniteAddress(S, (0, 1, 4, 17))
    with pytest.raises(ValueError):
        ProfiniteAddress(S, (0, 1))
    z = np.array([0.3 + 0.2j, -1.0 - 0.5j])
    for i in range(1, len(S)):
        m = S[i] // S[i - 1]
        assert np.allclose(a.level_coordinate(z, i) ** m, a.level_coordinate(z, i - 1), atol=1e-13)


# -- leaf <-> plane ----------------------------------------------------------------

def test_leaf_phase_unimodular():
    rng = np.random.default_rng(0)
    w = rng.normal(size=200) + 1j * rng.normal(size=200)
    assert np.max(np.abs(np.abs(leaf_phase(w)) - 1)) < 1e-15
    assert leaf_phase(np.array([0j]))[0] == 0


def test_cylinder_to_plane_examples():
    mu = periodic()
    # w = i at level 1: phase -(i)^2 = 1, x = pi/2, y = 0
    assert plane_values(mu, 1, np.array([1j]))[0] == pytest.approx(complex(mu(math.pi / 2, 0.0)), abs=1e-15)
    f = cylinder_to_plane(mu, 2, PlaneGridSpec(64))
    w = f.grid.z
    nz = w != 0
    xy = mu(2 * np.angle(w[nz]), -2 * np.log(np.abs(w[nz])))
    xy = np.where(np.abs(xy) < 1e-8, 0, xy)
    assert np.max(np.abs(np.abs(f.samples[nz]) - np.abs(xy))) < 1e-15
    zero = CylinderCoefficient(lambda x, y: 0 * x + 0j, 0.0, 1, 1.0)
    assert not np.any(cylinder_to_plane(zero, 1, PlaneGridSpec(32)).samples)


def test_cylinder_to_plane_rejections():
    with pytest.raises(ValueError):
        cylinder_to_plane(counterexample_coefficient(3), 6)
    with pytest.raises(ValueError):
        cylinder_to_plane(periodic(period=2), 3)


def test_plane_support_inside_central_half():
    f = cylinder_to_plane(periodic(decay=2.0), 1, PlaneGridSpec(128))
    f.grid.check_support()


# -- pullback -----------------------------------------------------------------------

def test_pullback_identity_for_m1():
    f = cylinder_to_plane(periodic(), 1, PlaneGridSpec(32))
    assert coefficient_pullback(f, 1, 1) is f
    with pytest.raises(ValueError):
        coefficient_pullback(f, 2, 3)


def test_pullback_phase_at_i():
    mu = periodic()
    f = cylinder_to_plane(mu, 1, PlaneGridSpec(32))
    g = ComplexGrid(0, 2.0, np.zeros((4, 4), complex))
    # put a node at z = i: axis is (-1, 0, 1, 2) * 1.0 - node (iy=3, ix=2) is 0 + 1j
    up = coefficient_pullback(f, 1, 2, evaluator=lambda z: plane_values(mu, 1, z), grid=g)
    assert g.z[3, 2] == 1j
    assert up.samples[3, 2] == pytest.approx(-plane_values(mu, 1, np.array([-1.0 + 0j]))[0], abs=1e-15)


@pytest.mark.parametrize("n,L", [(1, 2), (2, 4), (1, 6)])
def test_pullback_modulus_invariance(n, L):
    mu = periodic(period=n, decay=2.0 * n)
    f = cylinder_to_plane(mu, n, PlaneGridSpec(128))
    ev = lambda z: plane_values(mu, n, z)  # noqa: E731
    up = coefficient_pullback(f, n, L, evaluator=ev)
    z = up.grid.z
    m = L // n
    err = np.max(np.abs(np.abs(up.samples) - np.abs(ev(z ** m))))
    assert err < 1e-12
    # pulling back from level n to L is the same as building level L directly
    direct = plane_values(mu, L, z)
    assert np.max(np.abs(up.samples - direct)) < 1e-12


def test_relative_coefficient_trivial_cases():
    rng = np.random.default_rng(1)
    a = smooth_field(rng, 0.3)
    f = solve_normal(a)
    assert not np.any(relative_coefficient(a, a, f).samples)
    zero = BeltramiField(a.grid.with_samples(0))
    same = relative_coefficient(a, zero, solve_normal(zero))
    assert np.array_equal(same.samples, a.samples)


@pytest.mark.parametrize("seed", range(10))
def test_relative_coefficient_bound(seed):
    rng = np.random.default_rng(100 + seed)
    hi, lo = smooth_field(rng, 0.3), smooth_field(rng, 0.3)
    rel = relative_coefficient(hi, lo, solve_normal(lo))
    bound = np.max(np.abs(hi.samples - lo.samples)) / (1 - 0.09)
    assert rel.sup() <= bound + 1e-10


def test_composition_through_relative_coefficient():
    # f_hi = g o f_lo where g solves the relative coefficient
    lo = BeltramiField.from_function(radial_stretch_mu(0.2, 0.5), half_width=2.0, N=256)
    hi = BeltramiField.from_function(
        lambda z: radial_stretch_mu(0.2, 0.5)(z) + 0.1 * bump(np.abs(z) / 0.8), half_width=2.0, N=256)
    flo, fhi = solve_normal(lo), solve_normal(hi)
    g = solve_normal(relative_coefficient(hi, lo, flo))
    assert np.max(np.abs(g(flo.values.samples) - fhi.values.samples)) < 5e-2


def test_commuting_diagram():
    mu = periodic(decay=2.0)
    f1 = solve_normal(cylinder_to_plane(mu, 1, PlaneGridSpec(256)))
    up = coefficient_pullback(cylinder_to_plane(mu, 1, PlaneGridSpec(256)), 1, 2,
                              evaluator=lambda z: plane_values(mu, 1, z))
    fup = solve_normal(up)
    w = 0.9 * np.exp(1j * np.linspace(0, 2 * np.pi, 13))
    assert np.max(np.abs(fup(w) ** 2 - f1(w ** 2))) < 5e-3


# -- leaf solver ---------------------------------------------------------------------

def test_leaf_solution_satisfies_equation():
    mu = periodic(decay=2.0)
    coarse = leaf_residual(solve_leaf(mu, 1, LeafGridSpec(dy=0.125)), mu)
    fine = leaf_residual(solve_leaf(mu, 1, LeafGridSpec(dy=0.0625)), mu)
    assert fine < 5e-3
    assert fine < coarse / 2  # second order in dy


def test_leaf_solution_is_periodic_and_matches_plane():
    mu = periodic(decay=2.0)
    sol = solve_leaf(mu, 1)
    z = np.array([0.4 + 0.3j, -2.0 - 1.0j, 1.0 + 5.0j])
    assert np.allclose(sol(z + 2 * math.pi) - sol(z), 2 * math.pi, atol=1e-12)
    plane = solve_normal(cylinder_to_plane(mu, 1, PlaneGridSpec(256)))
    w = np.exp(1j * z)
    assert np.max(np.abs(sol.plane(w) - plane(w))) < 5e-3


def test_zero_coefficient_leaf_is_identity():
    zero = zero_family((1,)).coefficient(1)
    sol = solve_leaf(zero, 1)
    z = np.array([1 + 1j, -3j])
    assert np.all(sol(z) == z)


# -- families ---------------------------------------------------------------------

def test_mu_s_norm_examples():
    assert mu_s_norm(zero_family()) == 0
    st = stationary_family((1, 2, 4))
    assert st.increments == (0.0, 0.0)
    assert mu_s_norm(st) == pytest.approx(st.sups[0])
    two = geometric_family((1, 2), base=0.2, weighted=[0.2])
    assert two.sups[0] == pytest.approx(0.2)
    assert two.increments[0] == pytest.approx(0.1)
    assert mu_s_norm(two) == pytest.approx(0.4)


def test_approximants_of_periodic_coefficient_are_stationary():
    fam = build_periodic_approximants(periodic(), DivisibilityChain((1, 2, 4)))
    assert max(fam.increments) < 1e-12  # x mod 2 pi n rounding only
    one = build_periodic_approximants(periodic(), DivisibilityChain((1,)))
    assert mu_s_norm(one) == pytest.approx(one.sups[0])


def test_approximants_of_counterexample_track_tail_amplitudes():
    N = 4
    fam = build_periodic_approximants(counterexample_coefficient(N), DivisibilityChain.factorial(N))
    for i, inc in enumerate(fam.increments, start=1):
        tail = sum(1 / math.factorial(j) for j in range(i + 1, N + 1)) / (2 * E)
        assert 0.3 * tail <= inc <= 3 * tail
    assert all(b < a for a, b in zip(fam.increments, fam.increments[1:]))


def test_geometric_family_weights():
    fam = geometric_family()
    assert fam.weighted_increments() == pytest.approx([0.05, 0.025, 0.0125, 0.00625])
    assert constant_increment_family().weighted_increments() == pytest.approx([0.05] * 4)


# -- tower ---------------------------------------------------------------------------

def test_zero_family_table_is_power_map():
    pts = default_sample_points(4, heights=(-0.5, 0.0, 0.5), per_2pi=4)
    run = tower_solve(zero_family((1, 2, 4)), 1, pts)
    assert np.max(np.abs(run.table - pts ** 2)) < 1e-14
    assert max(run.diffs) < 1e-14
    assert run.L == 2 and run.levels == (2, 4)


def test_stationary_family_is_cauchy():
    fam = stationary_family((1, 2, 4))
    run = tower_solve(fam, 0, default_sample_points(4, heights=(-0.5, 0.0), per_2pi=4))
    assert max(run.diffs) < 1e-12
    rep = cauchy_diagnostics(run, fam)
    assert rep.verdict == "CAUCHY"
    assert all(math.isnan(r) for r in rep.ratios)
    assert 0.5 < rep.growth < 2


def test_leaf_and_plane_backends_agree():
    fam = stationary_family((1, 2))
    pts = default_sample_points(2, heights=(-0.5, 0.0, 0.5), per_2pi=4)
    leaf = tower_solve(fam, 0, pts, "leaf")
    plane = tower_solve(fam, 0, pts, "plane")
    assert np.max(np.abs(leaf.table - plane.table)) < 5e-3
    with pytest.raises(ValueError):
        tower_solve(fam, 0, pts, "other")
    with pytest.raises(ValueError):
        tower_solve(fam, 5, pts)


def test_level_failure_is_tagged():
    fam = geometric_family((1, 2))
    with pytest.raises(LevelSolveError) as exc:
        tower_solve(fam, 0, max_iter=1, tol=1e-14)
    assert exc.value.level == 1


@pytest.fixture(scope="module")
def geometric_run():
    fam = geometric_family()
    pts = default_sample_points(16, heights=np.linspace(-16, 16, 9), per_2pi=4)
    return fam, tower_solve(fam, 0, pts)


def test_geometric_family_diffs_decay_with_stable_constant(geometric_run):
    fam, run = geometric_run
    d = run.diffs
    assert all(b < a for a, b in zip(d, d[1:]))
    rep = cauchy_diagnostics(run, fam)
    assert rep.verdict == "CAUCHY"
    assert rep.ratio_spread < 0.25
    assert rep.limit is not None and math.isfinite(rep.limit_growth)
    assert rep.limit_growth <= 1.1 * rep.growth


def test_two_level_step_bound_stable_under_refinement():
    fam = geometric_family((1, 2), weighted=[0.02])
    coarse = default_sample_points(2, heights=(-1.0, 0.0, 1.0), per_2pi=4)
    fine = default_sample_points(2, heights=np.linspace(-1, 1, 9), per_2pi=16)
    c1 = cauchy_diagnostics(tower_solve(fam, 0, coarse), fam).ratios[0]
    c2 = cauchy_diagnostics(tower_solve(fam, 0, fine), fam).ratios[0]
    assert abs(c1 - c2) <= 0.1 * c2


def test_constant_increment_family_is_not_cauchy():
    fam = constant_increment_family()
    pts = default_sample_points(16, heights=np.linspace(-16, 16, 9), per_2pi=4)
    rep = cauchy_diagnostics(tower_solve(fam, 0, pts), fam)
    assert rep.verdict == "NOT-CAUCHY"
    assert rep.limit is None


def test_affine_renormalize_examples(geometric_run):
    ident = affine_renormalize([(0, 1), (0, 1)])
    assert ident.a == (1, 1) and ident.b == (0, 0) and ident.stable
    aff = affine_renormalize([(3, 5)] * 3)
    assert aff.a_limit == 2 and aff.b_limit == 3
    assert affine_renormalize([(1, 1)]).degenerate == (0,)
    _, run = geometric_run
    rep = affine_renormalize(run)
    assert rep.stable and not rep.degenerate
    assert all(b < a for a, b in zip(rep.steps, rep.steps[1:]))


def test_run_serialization(geometric_run):
    fam, run = geometric_run
    doc = json.loads(run_to_json(run, cauchy_diagnostics(run, fam)))
    assert doc["chain"] == [1, 2, 4, 8, 16] and doc["L"] == 1
    assert len(doc["table"]) == 5 and len(doc["diffs"]) == 4
    assert set(doc["constants"]) == {"A_prime_ML", "M_L"}


# -- Moebius split -------------------------------------------------------------------

def stretch(c):
    def mu(z):
        z = np.asarray(z, complex)
        out = np.zeros_like(z)
        nz = z != 0
        out[nz] = c * z[nz] / np.conj(z[nz])
        return out
    return mu


def test_split_inner_support_is_noop():
    mu = lambda z: np.where(np.abs(z) < 0.5, stretch(0.3)(z), 0)  # noqa: E731
    sp = mobius_support_split(mu, 1.0, 0.3, N=128)
    assert not np.any(sp.mu1.samples) and np.any(sp.mu2.samples)
    z = np.array([0.3 + 0.1j, 2.0])
    assert np.all(sp.f1(z) == z)


def test_split_outer_support_leaves_nothing_for_second_stage():
    mu = lambda z: np.where(np.abs(z) >= 1.0, stretch(0.3)(z), 0)  # noqa: E731
    sp = mobius_support_split(mu, 1.0, 0.3, N=128)
    assert np.any(sp.mu1.samples) and not np.any(sp.mu2.samples)
    z = np.array([0.3 + 0.1j])
    assert sp.f2(z)[0] == z[0]


def test_split_global_stretch():
    c = 1 / 3
    a = 2 * c / (1 - c)
    sp = mobius_support_split(stretch(c), 1.0, c, N=256)
    rng = np.random.default_rng(5)
    r = rng.uniform(0.1, 2.0, 40)
    r = r[np.abs(r - 1) > 0.05]
    pts = r * np.exp(1j * rng.uniform(0, 2 * np.pi, len(r)))
    exact = pts * np.abs(pts) ** a
    assert np.max(np.abs(sp(pts) - exact) / np.abs(exact)) < 1e-2
    assert np.max(np.abs(sp(np.array([0.0, 1.0])) - np.array([0.0, 1.0]))) < 1e-6
    h = 1e-4
    fx = (sp(pts + h) - sp(pts - h)) / (2 * h)
    fy = (sp(pts + 1j * h) - sp(pts - 1j * h)) / (2 * h)
    res = np.abs(0.5 * (fx + 1j * fy) - stretch(c)(pts) * 0.5 * (fx - 1j * fy))
    assert np.max(res) < 5e-2


def test_split_rejects_large_coefficient():
    with pytest.raises(ValueError):
        mobius_support_split(lambda z: np.ones_like(z), 1.0, N=32)
