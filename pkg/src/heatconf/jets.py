"""Pointwise jet operators of an embedding and their right inverses.

At a chart point x the operator P(u)(x) stacks the first and second covariant
derivatives of the embedding components into an m x q matrix,
m = n + n(n+1)/2, expressed in the orthonormal frame (which coincides with
normal coordinates at x to the orders used).  Row ordering contract:

    rows 0..n-1                first derivatives, frame directions ascending
    rows n..n+n(n-1)/2-1       mixed second derivatives (a, b), a < b, lexicographic
    remaining n rows           repeated second derivatives (a, a), a ascending

P_c(u) replaces each repeated row by its trace-free part and loses exactly
one rank; the lost direction is recovered by the kernel generator w solving
P w = (0, identity).  E = P^T (P P^T)^{-1} is the minimum-norm right inverse;
it is never materialized as a q x m matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import PreconditionError

_BLOCK_INVERSE_T = 0.05    # below this t the Gram is inverted via the block lemma


def row_index_pairs(n: int) -> list[tuple[int, int]]:
    """Second-derivative row ordering: off-diagonal pairs first, then diagonals."""
    pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
    pairs += [(a, a) for a in range(n)]
    return pairs


@dataclass
class RhsVector:
    """Right-hand side (f, h) packed to match the P row ordering."""

    f_part: np.ndarray
    h_part: np.ndarray

    @classmethod
    def from_tensor(cls, f_vec, h_mat) -> "RhsVector":
        h_mat = np.asarray(h_mat, dtype=float)
        n = h_mat.shape[0]
        pairs = row_index_pairs(n)
        return cls(np.asarray(f_vec, dtype=float),
                   np.array([h_mat[a, b] for a, b in pairs]))

    @classmethod
    def from_flat(cls, flat, n: int) -> "RhsVector":
        flat = np.asarray(flat, dtype=float)
        return cls(flat[:n], flat[n:])

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.f_part, self.h_part])


def pack_symmetric(h: np.ndarray) -> np.ndarray:
    """Symmetric [..., n, n] -> packed [..., n(n+1)/2] per the row contract."""
    n = h.shape[-1]
    pairs = row_index_pairs(n)
    return np.stack([h[..., a, b] for a, b in pairs], axis=-1)


def unpack_symmetric(packed: np.ndarray, n: int) -> np.ndarray:
    pairs = row_index_pairs(n)
    out = np.zeros(packed.shape[:-1] + (n, n))
    for idx, (a, b) in enumerate(pairs):
        out[..., a, b] = packed[..., idx]
        out[..., b, a] = packed[..., idx]
    return out


@dataclass
class JetMatrixP:
    matrix: np.ndarray      # [m, q]
    n: int


@dataclass
class JetMatrixPc:
    matrix: np.ndarray
    n: int


def _jet_rows(emb, points: np.ndarray) -> np.ndarray:
    """Batched P matrices [N, m, q] in the orthonormal frame."""
    points = np.asarray(points, dtype=float)
    model = emb.model
    n = model.dim
    _, grads, hess = emb.jets_on(points)                  # [q, N, n], [q, N, n, n]
    gamma = geometry.christoffel_on_grid(model, points)   # [N, k, i, j]
    _, _, frame = geometry.metric_on_grid(model, points)
    hess_cov = hess - np.einsum("nkij,qnk->qnij", gamma, grads)
    grads_f = np.einsum("qni,nia->qna", grads, frame)
    hess_f = np.einsum("nia,qnij,njb->qnab", frame, hess_cov, frame)
    N, q = points.shape[0], grads.shape[0]
    m = n * (n + 3) // 2
    P = np.empty((N, m, q))
    P[:, :n] = np.transpose(grads_f, (1, 2, 0))
    for idx, (a, b) in enumerate(row_index_pairs(n)):
        P[:, n + idx] = hess_f[:, :, a, b].T
    return P


def assemble_P(emb, x) -> JetMatrixP:
    """First/second covariant derivative operator of the embedding at x."""
    x = geometry.wrap_point(emb.model, x)
    return JetMatrixP(_jet_rows(emb, x[None, :])[0], emb.model.dim)


def _trace_project(P: np.ndarray, n: int) -> np.ndarray:
    """Replace the repeated-derivative rows by their trace-free parts."""
    Pc = P.copy()
    diag = Pc[..., -n:, :]
    diag -= np.mean(diag, axis=-2, keepdims=True)
    return Pc


def assemble_Pc(emb, x) -> JetMatrixPc:
    """Trace-free variant of P; the n repeated rows sum to zero."""
    P = assemble_P(emb, x)
    return JetMatrixPc(_trace_project(P.matrix, P.n), P.n)


def gram(P) -> np.ndarray:
    """P P^T for a JetMatrixP/JetMatrixPc or a raw [m, q] matrix."""
    mat = P.matrix if hasattr(P, "matrix") else np.asarray(P)
    return mat @ mat.T


def block_inverse(A1: np.ndarray, A2: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Inverse of [[A1, b^T], [b, A2]] through the small-coupling factorization.

    With c = -A2^{-1} b A1^{-1} the inverse is
    [[A1^{-1}, c^T], [c, A2^{-1}]] . diag((I + b^T c)^{-1}, (I + b c^T)^{-1})
    exactly (checked against dense inversion), and
    ||c|| <= ||A2^{-1}|| ||b|| ||A1^{-1}||.
    """
    A1 = np.asarray(A1, dtype=float)
    A2 = np.asarray(A2, dtype=float)
    b = np.asarray(b, dtype=float)
    m1, m2 = A1.shape[0], A2.shape[0]
    try:
        A1_inv = np.linalg.inv(A1)
        A2_inv = np.linalg.inv(A2)
    except np.linalg.LinAlgError as exc:
        raise PreconditionError("diagonal blocks must be invertible") from exc
    c = -A2_inv @ b @ A1_inv
    left = np.zeros((m1 + m2, m1 + m2))
    left[:m1, :m1] = A1_inv
    left[:m1, m1:] = c.T
    left[m1:, :m1] = c
    left[m1:, m1:] = A2_inv
    try:
        right = np.zeros_like(left)
        right[:m1, :m1] = np.linalg.inv(np.eye(m1) + b.T @ c)
        right[m1:, m1:] = np.linalg.inv(np.eye(m2) + b @ c.T)
    except np.linalg.LinAlgError as exc:
        raise PreconditionError("coupling too large: I + b^T c is singular") from exc
    inv = left @ right
    M = np.zeros_like(left)
    M[:m1, :m1] = A1
    M[:m1, m1:] = b.T
    M[m1:, :m1] = b
    M[m1:, m1:] = A2
    if np.max(np.abs(M @ inv - np.eye(m1 + m2))) > 1e-6 * max(1.0, np.max(np.abs(M))):
        raise PreconditionError("coupling too large for the block-inverse route")
    return inv


def gram_solve(G: np.ndarray, n: int, rhs: np.ndarray, t: float) -> np.ndarray:
    """Solve G y = rhs; small-t Grams go through the block-inverse route."""
    if t < _BLOCK_INVERSE_T:
        inv = block_inverse(G[:n, :n], G[n:, n:], G[n:, :n])
        return inv @ rhs
    try:
        return np.linalg.solve(G, rhs)
    except np.linalg.LinAlgError as exc:
        raise PreconditionError("singular jet Gram matrix") from exc


def apply_E(emb, x, rhs: RhsVector) -> np.ndarray:
    """Minimum-norm solution of P(u)(x) v = rhs, orthogonal to Ker P."""
    P = assemble_P(emb, x)
    y = gram_solve(gram(P), P.n, rhs.flat, emb.t)
    return P.matrix.T @ y


def kernel_generator(emb, x) -> np.ndarray:
    """Generator w of Ker P_c / Ker P: the unique solution of P w = (0, g)."""
    n = emb.model.dim
    rhs = RhsVector.from_tensor(np.zeros(n), np.eye(n))
    return apply_E(emb, x, rhs)


def apply_Ec(emb, x, h: np.ndarray, k: float = 0.0) -> np.ndarray:
    """Member k of the right-inverse family for P_c: E(0, h) + k E(0, g).

    h is a g-traceless symmetric matrix in frame components; every k gives
    the same P_c image, and the k-derivative is exactly the kernel generator.
    """
    h = np.asarray(h, dtype=float)
    n = emb.model.dim
    scale = max(1.0, float(np.max(np.abs(h))))
    if abs(np.trace(h)) > 1e-8 * scale:
        raise PreconditionError(f"h must be g-traceless, trace={np.trace(h):.3e}")
    v0 = apply_E(emb, x, RhsVector.from_tensor(np.zeros(n), h))
    if k == 0.0:
        return v0
    return v0 + k * kernel_generator(emb, x)


class PointwiseRightInverse:
    """Batched E over a grid: factors every P(u)(x) once, then applies fast."""

    def __init__(self, emb, points: np.ndarray):
        self.emb = emb
        self.n = emb.model.dim
        self.points = np.asarray(points, dtype=float)
        self.P = _jet_rows(emb, self.points)            # [N, m, q]
        self.gram = self.P @ self.P.transpose(0, 2, 1)  # [N, m, m]

    def apply(self, rhs: np.ndarray) -> np.ndarray:
        """rhs [N, m] -> min-norm solutions [N, q]."""
        y = np.linalg.solve(self.gram, rhs[..., None])[..., 0]
        return np.einsum("nmq,nm->nq", self.P, y)

    def apply_tensor(self, f_vecs: np.ndarray, h_mats: np.ndarray) -> np.ndarray:
        rhs = np.concatenate([f_vecs, pack_symmetric(h_mats)], axis=-1)
        return self.apply(rhs)

    def kernel_generator(self) -> np.ndarray:
        """w over the whole grid, [N, q]."""
        N = len(self.points)
        eye = np.broadcast_to(np.eye(self.n), (N, self.n, self.n))
        return self.apply_tensor(np.zeros((N, self.n)), eye)


def xi_matrix(n: int, sigma: float) -> np.ndarray:
    """n x n matrix with unit diagonal and constant off-diagonal sigma."""
    return np.full((n, n), float(sigma)) + (1.0 - sigma) * np.eye(n)


def xi_inverse(n: int, sigma: float) -> np.ndarray:
    """Closed-form inverse (1/(1-sigma)) (I - sigma/(1+(n-1) sigma) J).

    Valid exactly on sigma in (-1/(n-1), 1); the boundary value loses rank.
    """
    lo = -1.0 / (n - 1)
    if not lo < sigma < 1.0:
        raise PreconditionError(
            f"sigma={sigma} outside the invertibility interval ({lo}, 1)")
    J = np.ones((n, n))
    return (np.eye(n) - (sigma / (1.0 + (n - 1) * sigma)) * J) / (1.0 - sigma)
