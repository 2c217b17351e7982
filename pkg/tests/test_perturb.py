"""Spectral backend, quadratic assembly, and the conformal fixed point."""
import numpy as np
import pytest
from numpy.testing import assert_allclose

from heatconf import (TruncationPolicy, analytic_spectrum, build_embedding,
                      compute_Lij, compute_r_terms, fixed_point_solve,
                      resolvent_apply, verify_conformal)
from heatconf import jets, perturb
from heatconf.errors import ConvergenceError, PreconditionError

TWO_PI = 2.0 * np.pi


@pytest.fixture(scope="module")
def sgrid(torus2):
    return perturb.SpectralGrid(torus2, 32)


@pytest.fixture(scope="module")
def solver(torus_embedding):
    return perturb.ConformalSolver(torus_embedding, resolution=48, e=1.0)


@pytest.fixture(scope="module")
def manufactured(solver):
    x1 = solver.grid.points[:, 0]
    f = np.zeros((solver.grid.N, 2, 2))
    f[:, 0, 0] = 1e-3 * np.cos(x1)
    f[:, 1, 1] = -1e-3 * np.cos(x1)
    return f


@pytest.fixture(scope="module")
def solved(solver, torus_embedding, manufactured):
    return fixed_point_solve(torus_embedding, manufactured, k=0.0, tol=1e-11,
                             solver=solver)


def band_limited_field(grid, seed, comps=3, kmax=5):
    rng = np.random.default_rng(seed)
    v = np.zeros((grid.N, comps))
    x = grid.points
    for c in range(comps):
        for _ in range(4):
            k = rng.integers(-kmax, kmax + 1, size=2)
            v[:, c] += rng.standard_normal() * np.cos(x @ k + rng.uniform(0, TWO_PI))
    return v


def test_backend_requires_flat(sphere):
    prov = analytic_spectrum(sphere, count=40)
    emb = build_embedding(prov, 0.2, TruncationPolicy(q_override=24))
    with pytest.raises(PreconditionError, match="flat"):
        perturb.ConformalSolver(emb)
    with pytest.raises(PreconditionError):
        perturb.SpectralGrid(sphere, 16)


def test_round_trip_and_derivative_exactness(sgrid):
    v = band_limited_field(sgrid, 1)
    assert_allclose(sgrid.from_spec(sgrid.to_spec(v)), v, atol=1e-12)
    # Laplacian of a single mode is -lambda times the mode
    x = sgrid.points
    mode = np.cos(x @ np.array([3, -2]))[:, None]
    assert_allclose(sgrid.laplacian(mode), -13.0 * mode, atol=1e-13 * 13)
    # differentiation commutes with the transform
    g1 = sgrid.grad(v)
    g2 = sgrid.from_spec(sgrid.to_spec(sgrid.grad(v)))
    assert_allclose(g1, g2, atol=1e-12)


def test_dealiased_product_projection(sgrid):
    # pad/unpad reproduces the exact band-limited projection of a product
    a = band_limited_field(sgrid, 2, comps=1, kmax=7)[:, 0]
    b = band_limited_field(sgrid, 3, comps=1, kmax=7)[:, 0]
    prod = sgrid.unpad(sgrid.pad(a[:, None]) * sgrid.pad(b[:, None]))[:, 0]
    direct = sgrid.from_spec(sgrid.to_spec((a * b)[:, None]))[:, 0]
    # frequencies |k| <= 14 < Nyquist survive both paths identically
    assert_allclose(prod, direct, atol=1e-11)


def test_resolvent(sgrid):
    const = np.full((sgrid.N, 1), 3.0)
    assert_allclose(resolvent_apply(sgrid, const, 2.0), -1.5, atol=1e-13)
    mode = np.cos(sgrid.points @ np.array([1, 0]))[:, None]
    assert_allclose(resolvent_apply(sgrid, mode, 1.0), -mode / 2.0, atol=1e-13)
    v = band_limited_field(sgrid, 4)
    out = resolvent_apply(sgrid, v, 1.7)
    back = sgrid.laplacian(out) - 1.7 * out
    assert_allclose(back, v, atol=1e-12)
    with pytest.raises(Exception):
        resolvent_apply(sgrid, v, -1.0)


def test_Lij_trivial_inputs(sgrid):
    zero = np.zeros((sgrid.N, 2))
    assert_allclose(compute_Lij(sgrid, zero, 1.0), 0.0, atol=1e-15)
    const = np.full((sgrid.N, 2), 1.3)
    assert_allclose(compute_Lij(sgrid, const, 1.0), 0.0, atol=1e-13)


def test_Lij_single_mode_closed_form(sgrid):
    """One cosine component: the second-derivative products cancel and only
    the shift term -(e/2) grad v grad v survives."""
    e = 1.4
    m = np.array([2, 1])
    amp = 0.7
    v = amp * np.cos(sgrid.points @ m)[:, None]
    L = compute_Lij(sgrid, v, e)
    s2 = np.sin(sgrid.points @ m) ** 2
    expected = -(e / 2) * amp**2 * s2[:, None, None] * np.outer(m, m)
    assert_allclose(L, expected, atol=1e-10)


def test_Lij_spectral_identity(sgrid):
    """(Delta - e)(grad_i v . grad_j v) = 2 L_ij + transport terms.

    Both sides are computed by independent spectral routes on a random
    band-limited field; this pins the sign of the shift term in L.
    """
    e = 0.9
    v = band_limited_field(sgrid, 7, comps=2, kmax=4)
    Gv = sgrid.grad(v)                                   # [N, c, n]
    S = np.einsum("nci,ncj->nij", Gv, Gv)
    lhs = sgrid.laplacian(S) - e * S
    L = compute_Lij(sgrid, v, e)
    Dv = sgrid.laplacian(v)
    T = np.einsum("nc,nci->ni", Dv, Gv)                  # Delta v . grad v
    gradT = sgrid.grad(T)                                # [N, i, j] = d_j T_i
    rhs = 2.0 * L + gradT + np.transpose(gradT, (0, 2, 1))
    # products leave the grid band; compare their band-limited projections
    lhs_p = sgrid.from_spec(sgrid.to_spec(lhs))
    rhs_p = sgrid.from_spec(sgrid.to_spec(rhs))
    assert np.max(np.abs(lhs_p - rhs_p)) <= 1e-7 * np.max(np.abs(lhs_p))


def test_r_terms(torus2, sphere):
    rng = np.random.default_rng(9)
    w = rng.standard_normal(2)
    gw = rng.standard_normal((2, 2))
    assert_allclose(compute_r_terms(torus2, [0.1, 0.2], w, gw), 0.0, atol=1e-15)
    x = np.array([1.1, 0.6])
    assert_allclose(compute_r_terms(sphere, x, np.zeros(2), np.zeros((2, 2))),
                    0.0, atol=1e-15)
    r = compute_r_terms(sphere, x, w, gw)
    assert np.all(np.isfinite(r))
    # frame rotation conjugates the output tensor (inputs rotate accordingly)
    Q, _ = np.linalg.qr(rng.standard_normal((2, 2)))
    r_rot = compute_r_terms(sphere, x, Q.T @ w, Q.T @ gw @ Q)
    assert_allclose(r_rot, Q.T @ r @ Q, atol=1e-8)


def test_quadratic_defining_equation(solver):
    """P(u) Q(v,v) reproduces the resolvent-processed right-hand side."""
    assert_allclose(solver.quadratic(np.zeros((solver.grid.N, solver.emb.q))),
                    0.0, atol=1e-15)
    rng = np.random.default_rng(21)
    v = 1e-2 * rng.standard_normal((solver.grid.N, solver.emb.q))
    v = solver.grid.from_spec(solver.grid.to_spec(v))    # band-limit the draw
    Q = solver.quadratic(v)
    grid = solver.grid
    Dv, Gv = grid.laplacian(v), grid.grad(v)
    prod = grid.unpad(np.einsum("fm,fmi->fi", grid.pad(Dv), grid.pad(Gv)))
    X = -grid.resolvent(prod, solver.e)
    B = grid.resolvent(compute_Lij(grid, v, solver.e), solver.e)
    rhs = np.concatenate([X, jets.pack_symmetric(B)], axis=-1)
    img = np.einsum("nmq,nq->nm", solver.E.P, Q)
    assert np.max(np.abs(img - rhs)) <= 1e-9 * max(1.0, np.max(np.abs(rhs)))


def test_quadratic_bilinear_bound(torus2):
    """Difference bound with a stable constant across random pairs."""
    prov = analytic_spectrum(torus2, count=80)
    emb = build_embedding(prov, 0.05, TruncationPolicy(q_override=48))
    small = perturb.ConformalSolver(emb, resolution=32, e=1.0)
    rng = np.random.default_rng(31)
    t = emb.t
    ratios = []
    for _ in range(20):
        v = 1e-3 * rng.standard_normal((small.grid.N, emb.q))
        u = 1e-3 * rng.standard_normal((small.grid.N, emb.q))
        dv = np.max(np.linalg.norm(v - u, axis=1))
        sv = np.max(np.linalg.norm(v, axis=1)) + np.max(np.linalg.norm(u, axis=1))
        dq = np.max(np.linalg.norm(small.quadratic(v) - small.quadratic(u), axis=1))
        ratios.append(dq / (t ** (-1.25) * dv * sv))
    ratios = np.array(ratios)
    assert np.all(ratios > 0)
    assert ratios.max() / ratios.min() < 100.0
    assert ratios.max() < 10.0


def test_fixed_point_trivial(solver, torus_embedding):
    f = np.zeros((solver.grid.N, 2, 2))
    history, v = fixed_point_solve(torus_embedding, f, k=0.0, solver=solver)
    assert len(history) == 1
    assert v.sup_norm() == 0.0


def test_fixed_point_converges(solved):
    history, v = solved
    assert len(history) <= 20
    for st in history[1:]:
        assert st.contraction <= 0.5
    assert all(st.bound_ok for st in history)
    assert history[-1].residual <= 1e-10


def test_fixed_point_residual_identity(solver, manufactured, solved):
    # at convergence v solves its own defining equation to the tolerance
    _, v = solved
    seed = solver.seed(manufactured, 0.0)
    gap = v.values - seed - solver.quadratic(v.values)
    assert np.max(np.linalg.norm(gap, axis=1)) <= 1e-11


def test_verify_conformal(solver, torus_embedding, manufactured, solved):
    _, v = solved
    rep = verify_conformal(torus_embedding, v, manufactured, solver)
    assert rep.residual_sup <= 1e-8
    assert rep.pullback_residual_sup <= 1e-8
    zero = np.zeros_like(v.values)
    rep0 = verify_conformal(torus_embedding, zero, np.zeros_like(manufactured), solver)
    assert rep0.residual_sup <= 1e-14
    corrupted = v.values.copy()
    corrupted[0, 5] += 1e-3
    repc = verify_conformal(torus_embedding, corrupted, manufactured, solver)
    assert repc.residual_sup > 1e-5


def test_theta_condition_rejection(solver, torus_embedding):
    f = np.zeros((solver.grid.N, 2, 2))
    f[:, 0, 0] = 3.0 * np.cos(solver.grid.points[:, 0])
    f[:, 1, 1] = -f[:, 0, 0]
    with pytest.raises(PreconditionError, match="smallness"):
        fixed_point_solve(torus_embedding, f, solver=solver)


def test_traceless_rejection(solver, torus_embedding):
    f = np.ones((solver.grid.N, 2, 2)) * 1e-3
    with pytest.raises(PreconditionError, match="traceless"):
        fixed_point_solve(torus_embedding, f, solver=solver)


def test_divergence_guard(solver, torus_embedding, manufactured):
    with pytest.raises(ConvergenceError):
        fixed_point_solve(torus_embedding, manufactured, solver=solver,
                          tol=1e-30, max_iter=5)


def test_assemble_C(solver, torus_embedding, manufactured, solved):
    _, v = solved
    res = perturb.assemble_C(torus_embedding, v, solver, k=0.0,
                             manufactured_f=manufactured)
    assert res.defect_sup <= 1e-10
    assert res.injectivity > 0 and res.injectivity_ok
    assert res.C.values.shape == (solver.grid.N, torus_embedding.q)
    # v = 0: C is the embedding itself, still injective on the grid
    zero = perturb.FieldRq(solver.grid, np.zeros_like(v.values))
    res0 = perturb.assemble_C(torus_embedding, zero, solver)
    assert res0.injectivity > 0


def test_field_norms(sgrid):
    v = perturb.FieldRq(sgrid, np.zeros((sgrid.N, 4)))
    assert v.sup_norm() == 0.0
    v2 = perturb.FieldRq(sgrid, np.ones((sgrid.N, 4)))
    assert_allclose(v2.sup_norm(), 2.0)
    with pytest.raises(Exception):
        perturb.ResolventConfig(e=0.0)
