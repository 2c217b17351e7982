"""Jet operators P/P_c, Gram structure, right inverses, and Xi matrices."""
import numpy as np
import pytest
from numpy.testing import assert_allclose

from heatconf import (TruncationPolicy, analytic_spectrum, apply_E,
                      apply_Ec, assemble_P, assemble_Pc, block_inverse, build_embedding,
                      gram, kernel_generator, xi_inverse, xi_matrix)
from heatconf import analysis, jets
from heatconf.errors import PreconditionError

TWO_PI = 2.0 * np.pi
X0 = np.array([0.7, 1.9])


def test_row_ordering_contract():
    assert jets.row_index_pairs(2) == [(0, 1), (0, 0), (1, 1)]
    assert jets.row_index_pairs(3) == [(0, 1), (0, 2), (1, 2), (0, 0), (1, 1), (2, 2)]
    h = np.array([[1.0, 4.0], [4.0, 2.0]])
    packed = jets.pack_symmetric(h)
    assert_allclose(packed, [4.0, 1.0, 2.0])
    assert_allclose(jets.unpack_symmetric(packed, 2), h)


def test_row_counts(torus_embedding, circle):
    P = assemble_P(torus_embedding, X0)
    assert P.matrix.shape == (5, torus_embedding.q)    # n (n+3) / 2 = 5
    cprov = analytic_spectrum(circle, count=60)
    cemb = build_embedding(cprov, 0.1, TruncationPolicy(rho=1.0))
    Pc = assemble_P(cemb, np.array([0.4]))
    assert Pc.matrix.shape == (2, cemb.q)              # n = 1: 1 + 1 rows


def test_torus_covariant_equals_coordinate(torus_embedding):
    # flat torus: vanishing connection makes covariant = coordinate derivatives
    vals, grads, hess = torus_embedding.component_jets(X0)
    P = assemble_P(torus_embedding, X0)
    assert_allclose(P.matrix[0], grads[:, 0], atol=1e-15)
    assert_allclose(P.matrix[2], hess[:, 0, 1], atol=1e-15)   # row (0,1)
    assert_allclose(P.matrix[3], hess[:, 0, 0], atol=1e-15)   # row (0,0)


def test_sphere_covariant_correction(sphere):
    # on the sphere the connection term is nonzero and must be subtracted
    prov = analytic_spectrum(sphere, count=50)
    emb = build_embedding(prov, 0.15, TruncationPolicy(q_override=24))
    x = np.array([1.0, 2.0])
    P = assemble_P(emb, x)
    from heatconf import geometry
    m = geometry.metric_at(sphere, x)
    F = geometry.orthonormal_frame(sphere, x)
    vals, grads, hess = emb.component_jets(x)
    hess_cov = hess - np.einsum("kij,qk->qij", m.christoffel, grads)
    expected = np.einsum("ia,qij,jb->qab", F, hess_cov, F)
    assert_allclose(P.matrix[2], expected[:, 0, 1], atol=1e-13)


def test_P_full_rank(torus_embedding):
    sv = np.linalg.svd(assemble_P(torus_embedding, X0).matrix, compute_uv=False)
    assert sv[4] > 1e-3 * np.sqrt(2 * 0.05)    # smallest of the O(sqrt(1/2t)) scale split


def test_Pc_loses_exactly_one_rank(torus_embedding):
    P = assemble_P(torus_embedding, X0).matrix
    Pc = assemble_Pc(torus_embedding, X0).matrix
    sv = np.linalg.svd(P, compute_uv=False)
    svc = np.linalg.svd(Pc, compute_uv=False)
    thresh = 1e-8
    rank = np.sum(sv > thresh * sv[0])
    rank_c = np.sum(svc > thresh * svc[0])
    assert rank == 5 and rank_c == 4
    # the trace-projected diagonal rows sum to the zero row
    assert np.max(np.abs(Pc[-2:].sum(axis=0))) <= 1e-10 * np.max(np.abs(Pc))


def test_Pc_is_projection_of_P(torus_embedding):
    P = assemble_P(torus_embedding, X0).matrix
    Pc = assemble_Pc(torus_embedding, X0).matrix
    n = 2
    D = np.zeros((5, 5))
    D[3:, 3:] = np.ones((2, 2))       # selector of the repeated-derivative rows
    assert_allclose(Pc, P - D @ P / n, atol=1e-12 * np.max(np.abs(P)))


def test_gram_blocks_small_t(torus2):
    t = 0.02
    prov = analytic_spectrum(torus2, count=2700)
    emb = build_embedding(prov, t, TruncationPolicy(rho=1.0))
    G = gram(assemble_P(emb, X0))
    assert_allclose(G[:2, :2], np.eye(2), atol=5 * t)
    lower = 2 * t * G[2:, 2:]
    target = np.eye(3)
    target[1:, 1:] = 3.0 * xi_matrix(2, 1.0 / 3.0)
    assert_allclose(lower, target, atol=5 * t)
    Gc = gram(assemble_Pc(emb, X0))
    target_c = np.eye(3)
    target_c[1:, 1:] = 1.0 * xi_matrix(2, -1.0)     # (2n-2)/n Xi(-1/(n-1)), n = 2
    assert_allclose(2 * t * Gc[2:, 2:], target_c, atol=5 * t)


def test_gram_inverse_asymptotics(torus2):
    t = 0.02
    prov = analytic_spectrum(torus2, count=2700)
    emb = build_embedding(prov, t, TruncationPolicy(rho=1.0))
    G_inv = np.linalg.inv(gram(assemble_P(emb, X0)))
    assert_allclose(G_inv[:2, :2], np.eye(2), atol=5 * t)
    target = np.eye(3)
    target[1:, 1:] = np.linalg.inv(3.0 * xi_matrix(2, 1.0 / 3.0))
    assert_allclose(G_inv[2:, 2:] / (2 * t), target, atol=5 * t)


def test_block_inverse_identity_and_oracle():
    rng = np.random.default_rng(8)
    assert_allclose(block_inverse(np.eye(2), 2 * np.eye(3), np.zeros((3, 2))),
                    np.diag([1, 1, 0.5, 0.5, 0.5]), atol=1e-14)
    for _ in range(100):
        A1 = rng.standard_normal((3, 3))
        A1 = A1 @ A1.T + 3 * np.eye(3)
        A2 = rng.standard_normal((3, 3))
        A2 = A2 @ A2.T + 3 * np.eye(3)
        b = 0.1 * rng.standard_normal((3, 3))
        M = np.block([[A1, b.T], [b, A2]])
        inv = block_inverse(A1, A2, b)
        assert_allclose(inv, np.linalg.inv(M), atol=1e-10)
        assert_allclose(M @ inv, np.eye(6), atol=1e-10)
        # coupling-norm inequality
        c = np.linalg.inv(A2) @ b @ np.linalg.inv(A1)
        bound = (np.linalg.norm(np.linalg.inv(A2), 2) * np.linalg.norm(b, 2)
                 * np.linalg.norm(np.linalg.inv(A1), 2))
        assert np.linalg.norm(c, 2) <= bound * (1 + 1e-12)


def test_block_inverse_rejects_singular():
    with pytest.raises(PreconditionError):
        block_inverse(np.zeros((2, 2)), np.eye(2), np.zeros((2, 2)))


def test_apply_E_right_inverse(torus_embedding):
    rng = np.random.default_rng(12)
    P = assemble_P(torus_embedding, X0)
    assert_allclose(apply_E(torus_embedding, X0,
                            jets.RhsVector.from_flat(np.zeros(5), 2)), 0.0)
    for _ in range(100):
        rhs = jets.RhsVector.from_flat(rng.standard_normal(5), 2)
        v = apply_E(torus_embedding, X0, rhs)
        assert np.linalg.norm(P.matrix @ v - rhs.flat) <= 1e-9 * np.linalg.norm(rhs.flat)


def test_apply_E_orthogonal_to_kernel(torus_embedding):
    # null-space basis from the singular value decomposition as the oracle
    P = assemble_P(torus_embedding, X0).matrix
    _, _, VT = np.linalg.svd(P, full_matrices=True)
    kernel = VT[5:]
    rng = np.random.default_rng(13)
    rhs = jets.RhsVector.from_flat(rng.standard_normal(5), 2)
    v = apply_E(torus_embedding, X0, rhs)
    overlap = kernel @ v
    assert np.max(np.abs(overlap)) <= 1e-9 * np.linalg.norm(v)


def test_kernel_generator(torus_embedding):
    Pc = assemble_Pc(torus_embedding, X0).matrix
    P = assemble_P(torus_embedding, X0).matrix
    w = kernel_generator(torus_embedding, X0)
    assert np.linalg.norm(Pc @ w) <= 1e-9 * np.sqrt(2.0)
    assert w @ w > 0
    rhs = P @ w
    assert_allclose(rhs, jets.RhsVector.from_tensor(np.zeros(2), np.eye(2)).flat,
                    atol=1e-9)
    _, _, VT = np.linalg.svd(P, full_matrices=True)
    assert np.max(np.abs(VT[5:] @ w)) <= 1e-9 * np.linalg.norm(w)


def test_apply_Ec_family(torus_embedding):
    h = np.array([[0.4, 0.6], [0.6, -0.4]])
    Pc = assemble_Pc(torus_embedding, X0).matrix
    w = kernel_generator(torus_embedding, X0)
    base = apply_Ec(torus_embedding, X0, h, 0.0)
    rhs0 = jets.RhsVector.from_tensor(np.zeros(2), h)
    assert_allclose(base, apply_E(torus_embedding, X0, rhs0), atol=1e-15)
    images = []
    for k in (-1.0, 0.5, 2.0):
        v = apply_Ec(torus_embedding, X0, h, k)
        assert_allclose(v - base, k * w, atol=1e-12)
        images.append(Pc @ v)
    for img in images[1:]:
        assert_allclose(img, images[0], atol=1e-10)


def test_apply_Ec_rejects_traceful(torus_embedding):
    with pytest.raises(PreconditionError, match="traceless"):
        apply_Ec(torus_embedding, X0, np.eye(2), 0.0)


def test_kernel_dimension_gap(torus_embedding):
    """dim Ker P_c - dim Ker P = 1 by singular-value counting."""
    rng = np.random.default_rng(5)
    for _ in range(4):
        x = rng.uniform(0, TWO_PI, 2)
        P = assemble_P(torus_embedding, x).matrix
        Pc = assemble_Pc(torus_embedding, x).matrix
        q = P.shape[1]
        sv = np.linalg.svd(P, compute_uv=False)
        svc = np.linalg.svd(Pc, compute_uv=False)
        ker = q - np.sum(sv > 1e-8 * sv[0])
        ker_c = q - np.sum(svc > 1e-8 * svc[0])
        assert ker_c - ker == 1


def test_xi_matrices():
    assert_allclose(xi_matrix(4, 0.0), np.eye(4))
    Xi = xi_matrix(3, 1.0 / 3.0)
    inv = xi_inverse(3, 1.0 / 3.0)
    assert_allclose(inv, 1.5 * (np.eye(3) - np.ones((3, 3)) / 5.0), atol=1e-15)
    assert_allclose(Xi @ inv, np.eye(3), atol=1e-14)
    for n in range(2, 7):
        sv = np.linalg.svd(xi_matrix(n, -1.0 / (n - 1)), compute_uv=False)
        assert np.sum(sv > 1e-12 * sv[0]) == n - 1
    with pytest.raises(PreconditionError):
        xi_inverse(3, -0.5)
    with pytest.raises(PreconditionError):
        xi_inverse(3, 1.0)


def test_nI_minus_J_spectrum():
    for n in range(2, 7):
        eig = np.sort(np.linalg.eigvalsh(n * np.eye(n) - np.ones((n, n))))
        assert_allclose(eig[0], 0.0, atol=1e-12)
        assert_allclose(eig[1:], n, atol=1e-12)


def test_E_operator_norm_scaling(torus2):
    """Fitted decay of the right-inverse norm stays within the allowed rate."""
    rng = np.random.default_rng(77)
    ts = [0.1, 0.05, 0.02, 0.01]
    prov = analytic_spectrum(torus2, count=10100)
    norms = []
    for t in ts:
        emb = build_embedding(prov, t, TruncationPolicy(rho=1.0))
        vals = []
        for _ in range(6):
            rhs = jets.RhsVector.from_flat(rng.standard_normal(5), 2)
            x = rng.uniform(0, TWO_PI, 2)
            vals.append(np.linalg.norm(apply_E(emb, x, rhs))
                        / np.linalg.norm(rhs.flat))
        norms.append(max(vals))
    fit = analysis.fit_order(ts, norms)
    assert fit.slope >= -(0 + 0.5) / 2 - 0.2


def test_pointwise_right_inverse_batch(torus_embedding):
    from heatconf import geometry
    pts = geometry.sample_grid(torus_embedding.model, 8).points
    E = jets.PointwiseRightInverse(torus_embedding, pts)
    rng = np.random.default_rng(3)
    rhs = rng.standard_normal((len(pts), 5))
    sol = E.apply(rhs)
    resid = np.einsum("nmq,nq->nm", E.P, sol) - rhs
    assert np.max(np.abs(resid)) <= 1e-9
    w = E.kernel_generator()
    single = kernel_generator(torus_embedding, pts[5])
    assert_allclose(w[5], single, atol=1e-12)
