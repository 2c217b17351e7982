"""Truncated normalized heat-kernel embeddings and their conformal defect.

An embedding map carries components c(t) * exp(-lambda_j t / 2) * phi_j for
j = 1..q (the constant mode is excluded), with the normalization
c(t) = sqrt(2) (4 pi)^{n/4} t^{(n+2)/4} chosen so the pullback metric tends
to g as t -> 0.  Truncation indices are always extended to close the final
eigenvalue shell: partial shells break the isometry-group symmetry that the
homothety tests rely on, and the embedding is only canonical on full shells.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import analysis, geometry, spectrum
from .errors import ConfigError, PreconditionError, SpectrumError
from .geometry import ManifoldModel, SampleGrid
from .spectrum import SpectrumProvider

_SHELL_RTOL = 1e-9


@dataclass(frozen=True)
class TruncationPolicy:
    """Component count selection: q(t) = ceil(t^(-n/2 - rho)) unless overridden."""

    rho: float = 1.0
    q_override: int | None = None

    def __post_init__(self):
        if self.rho <= 0:
            raise ConfigError("rho must be positive")
        if self.q_override is not None and self.q_override < 1:
            raise ConfigError("q_override must be a positive integer")

    def q(self, t: float, n: int) -> int:
        floor = n + n * (n + 1) // 2
        if self.q_override is not None:
            if self.q_override < floor:
                raise ConfigError(
                    f"q_override={self.q_override} below freeness floor {floor}")
            return self.q_override
        return max(int(math.ceil(t ** (-n / 2.0 - self.rho))), floor)


class EmbeddingMap:
    """Truncated normalized heat-kernel embedding M -> R^q with cached jets."""

    def __init__(self, provider: SpectrumProvider, t: float, q: int):
        self.provider = provider
        self.model = provider.model
        self.t = float(t)
        self.q = int(q)
        n = self.model.dim
        self.c_norm = math.sqrt(2.0) * (4.0 * math.pi) ** (n / 4.0) * t ** ((n + 2) / 4.0)
        # component j (1-based provider index) carries weight c(t) e^{-lambda_j t/2}
        self.weights = self.c_norm * np.exp(-provider.lambdas[1:q + 1] * t / 2.0)
        self._jet_cache: dict[bytes, tuple] = {}

    @property
    def lambdas(self) -> np.ndarray:
        return self.provider.lambdas[1:self.q + 1]

    def component_jets(self, x):
        """Scaled jets of all q components at one chart point."""
        x = geometry.wrap_point(self.model, x)
        vals, grads, hess = self.provider.jet_block(1, self.q + 1, x[None, :])
        w = self.weights
        return (w * vals[:, 0], w[:, None] * grads[:, 0], w[:, None, None] * hess[:, 0])

    def jets_on(self, points: np.ndarray):
        """Scaled jets on a grid [N, n]; cached per point set.

        Returns (values [q, N], gradients [q, N, n], hessians [q, N, n, n]).
        """
        points = np.asarray(points, dtype=float)
        key = points.tobytes()
        if key not in self._jet_cache:
            vals, grads, hess = self.provider.jet_block(1, self.q + 1, points)
            w = self.weights
            self._jet_cache[key] = (w[:, None] * vals,
                                    w[:, None, None] * grads,
                                    w[:, None, None, None] * hess)
        return self._jet_cache[key]

    def values_on(self, points: np.ndarray, chunk: int = 1024) -> np.ndarray:
        """Embedding point cloud [N, q] without materializing derivative jets."""
        points = np.asarray(points, dtype=float)
        out = np.empty((points.shape[0], self.q))
        for j0 in range(0, self.q, chunk):
            j1 = min(self.q, j0 + chunk)
            vals, _, _ = self.provider.jet_block(j0 + 1, j1 + 1, points)
            out[:, j0:j1] = (self.weights[j0:j1, None] * vals).T
        return out

    def pullback_on(self, points: np.ndarray, chunk: int = 1024) -> np.ndarray:
        """Pullback metric G(x) = sum_j grad Psi_j (x) outer grad Psi_j(x), [N, n, n]."""
        points = np.asarray(points, dtype=float)
        N, n = points.shape
        G = np.zeros((N, n, n))
        for j0 in range(0, self.q, chunk):
            j1 = min(self.q, j0 + chunk)
            _, grads, _ = self.provider.jet_block(j0 + 1, j1 + 1, points)
            grads = self.weights[j0:j1, None, None] * grads
            G += np.einsum("mni,mnj->nij", grads, grads)
        return G


def build_embedding(provider: SpectrumProvider, t: float,
                    policy: TruncationPolicy) -> EmbeddingMap:
    """Embedding at time t with the policy's component count, shell-closed."""
    if t <= 0:
        raise ConfigError("t must be positive")
    if t >= 1.0:
        warnings.warn(f"t = {t} >= 1: outside the asymptotic regime", stacklevel=2)
    n = provider.model.dim
    q = policy.q(t, n)
    lams = provider.lambdas
    if provider.count < q + 1:
        raise SpectrumError(
            f"insufficient spectrum: q(t)={q} needs {q + 1} modes, have {provider.count}")
    while q + 1 < provider.count and \
            lams[q + 1] - lams[q] <= _SHELL_RTOL * (1.0 + lams[q]):
        q += 1
    if q + 1 < provider.count and lams[q + 1] - lams[q] <= _SHELL_RTOL * (1.0 + lams[q]):
        raise SpectrumError("insufficient spectrum: cannot close the final shell")
    return EmbeddingMap(provider, t, q)


def pullback_metric(emb: EmbeddingMap, x) -> np.ndarray:
    """Pullback metric of the embedding at one chart point."""
    x = geometry.wrap_point(emb.model, x)
    return emb.pullback_on(x[None, :])[0]


def conformal_defect(G: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Trace-free part G - (tr_g G / n) g; zero exactly when G is conformal to g."""
    G = np.asarray(G, dtype=float)
    g = np.asarray(g, dtype=float)
    try:
        g_inv = np.linalg.inv(g)
    except np.linalg.LinAlgError as exc:
        raise PreconditionError("reference metric is singular") from exc
    n = g.shape[-1]
    tr = np.einsum("...ij,...ij->...", g_inv, G)
    return G - (tr / n)[..., None, None] * g


def trace_factor(G: np.ndarray, g: np.ndarray) -> np.ndarray:
    g_inv = np.linalg.inv(g)
    n = g.shape[-1]
    return np.einsum("...ij,...ij->...", g_inv, G) / n


def h1_solve(A1: np.ndarray, g: np.ndarray, eta1) -> np.ndarray:
    """First-order metric correction h1 = -A1 + (tr_g A1 / n) g + eta1 g.

    By construction tr-free(h1) = -tr-free(A1) and (1/n) tr_g h1 = eta1;
    works pointwise or batched over a leading grid axis.
    """
    A1 = np.asarray(A1, dtype=float)
    g = np.asarray(g, dtype=float)
    eta1 = np.asarray(eta1, dtype=float)
    n = g.shape[-1]
    g_inv = np.linalg.inv(g)
    tr = np.einsum("...ij,...ij->...", g_inv, A1)
    return -A1 + ((tr / n + eta1)[..., None, None] * g)


@dataclass
class CorrectionSpec:
    """Prescribed trace functions eta_i and the solved h_i (frame components).

    The target defect order is l; the corrected metric is g + sum h_i t^i for
    i = 1..l-1.  Only i = 1 is solvable natively (the closed-form first
    expansion tensor); higher orders need user-supplied expansion callbacks.
    """

    l: int = 2
    eta: tuple[float, ...] = (0.0,)
    h_frame: list = field(default_factory=list)

    def __post_init__(self):
        if self.l < 1:
            raise ConfigError("correction order l must be >= 1")
        if len(self.eta) < self.l - 1:
            raise ConfigError("need one eta_i for each order i = 1..l-1")
        if self.l > 2:
            raise ConfigError(
                "orders beyond the first correction need expansion callbacks "
                "for the higher coefficient tensors")


_BLOCKS = {
    geometry.FLAT_TORUS: None,               # single block, all coordinates
    geometry.CIRCLE: ((0,),),
    geometry.SPHERE2: ((0, 1),),
    geometry.PRODUCT_SPHERE_CIRCLE: ((0, 1), (2,)),
}


def h1_frame_constant(model: ManifoldModel, eta1: float, probes: int = 5) -> np.ndarray:
    """h1 in orthonormal-frame components, verified constant across probe points."""
    rng = np.random.default_rng(7)
    grid = geometry.sample_grid(model, 8)
    idx = rng.choice(len(grid), size=min(probes, len(grid)), replace=False)
    mats = []
    for x in grid.points[idx]:
        F = geometry.orthonormal_frame(model, x)
        m = geometry.metric_at(model, x)
        h1 = h1_solve(geometry.a1_tensor(model, x), m.g, eta1)
        mats.append(F.T @ h1 @ F)
    mats = np.array(mats)
    if np.max(np.abs(mats - mats[0])) > 1e-10:
        raise PreconditionError(
            "h1 is not constant in the product frame; switch to an external spectrum")
    return mats[0]


def corrected_model(model: ManifoldModel, h1_frame: np.ndarray, t: float,
                    eta1: float = 0.0, count: int | None = None,
                    lambda_max: float | None = None):
    """Model and provider realizing g(t) = g + t h1 for blockwise-constant h1.

    Returns (rescaled model, analytic provider of the rescaled metric).
    """
    h1_frame = np.asarray(h1_frame, dtype=float)
    n = model.dim
    if abs(np.trace(h1_frame) / n - eta1) > 1e-10:
        raise PreconditionError("(1/n) tr h1 must equal eta1")
    if np.max(np.abs(h1_frame - np.diag(np.diag(h1_frame)))) > 1e-10:
        raise PreconditionError("h1 must be diagonal in the product frame")
    blocks = _BLOCKS[model.kind]
    if blocks is None:
        blocks = (tuple(range(n)),)
    factors = []
    for blk in blocks:
        coeffs = np.diag(h1_frame)[list(blk)]
        if np.max(np.abs(coeffs - coeffs[0])) > 1e-10:
            raise PreconditionError("h1 must be a constant multiple of g on each block")
        fac = 1.0 + t * coeffs[0]
        if fac <= 0:
            raise PreconditionError(f"degenerate scale 1 + t*h1 = {fac} on block {blk}")
        factors.append(fac)
    base = spectrum.analytic_spectrum(model, count=count, lambda_max=lambda_max)
    if t == 0 or all(f == 1.0 for f in factors):
        return model, base
    scaled = spectrum.rescaled_provider(base, factors)
    if count is not None and scaled.count < count:
        scaled = spectrum.analytic_spectrum(scaled.model, count=count)
    if lambda_max is not None and scaled.lambda_max < lambda_max:
        scaled = spectrum.analytic_spectrum(scaled.model, lambda_max=lambda_max)
    return scaled.model, scaled


def a11_linearization(model: ManifoldModel, h1_frame: np.ndarray, x,
                      eps: float = 1e-5) -> np.ndarray:
    """Directional derivative of the first expansion tensor along h1.

    Finite-difference hook for the second-order trace equation: returns
    d/ds at s=0 of A1(g + s h1) in the original orthonormal frame.  Only the
    blockwise-constant h1 of the analytic testbeds is supported; assembling
    the full second-order correction additionally needs the closed second
    expansion tensor, which the caller must supply.
    """
    x = np.asarray(x, dtype=float)
    F = geometry.orthonormal_frame(model, x)
    eta1 = float(np.trace(h1_frame)) / model.dim

    def a1_orig_frame(s):
        # chart components of A1(g + s h1), pulled back to the original frame
        scaled, _ = corrected_model(model, h1_frame, s, eta1, count=model.dim + 2)
        return F.T @ geometry.a1_tensor(scaled, x) @ F

    return (a1_orig_frame(eps) - a1_orig_frame(-eps)) / (2.0 * eps)


@dataclass
class PullbackReport:
    """Pullback metric, trace factor, and trace-free defect over a grid."""

    G: np.ndarray                 # [N, n, n] chart components
    trace_factor: np.ndarray      # [N]
    defect_frame: np.ndarray      # [N, n, n] orthonormal-frame components
    sup: float
    holder: float


def pullback_report(emb: EmbeddingMap, grid: SampleGrid,
                    reference: ManifoldModel | None = None,
                    alpha: float = 0.5) -> PullbackReport:
    """Measure the embedding's conformal defect against a reference metric."""
    reference = reference or emb.model
    pts = grid.points
    G = emb.pullback_on(pts)
    g, g_inv, frame = geometry.metric_on_grid(reference, pts)
    n = reference.dim
    tr = np.einsum("nij,nij->n", g_inv, G) / n
    defect = G - tr[:, None, None] * g
    defect_frame = np.einsum("nia,nij,njb->nab", frame, defect, frame)
    sup = float(np.max(np.abs(defect_frame)))
    holder = analysis.holder_seminorm_field(
        defect_frame.reshape(len(pts), -1), pts, reference, alpha)
    return PullbackReport(G, tr, defect_frame, sup, holder)


def defect_scan(model: ManifoldModel, t_grid, policy: TruncationPolicy,
                correction: CorrectionSpec | None = None, resolution: int = 8,
                lambda_cutoff=None, alpha: float = 0.5) -> list[dict]:
    """One row per t: component count, defect norms, and trace-factor range.

    With a correction, the embedding is built from the corrected metric's
    spectrum while the defect is still measured against the original g.
    A lambda_cutoff (a number, or a callable of t) replaces the count policy
    by an eigenvalue window; all enumerated modes are then used.  The window
    must keep lambda_max * t large: the anisotropy of the last included
    shells enters the defect at size ~ exp(-lambda_max t), which buries any
    higher-order signal when the window is too narrow.
    """
    t_grid = list(t_grid)
    if any(not 0 < t < 1 for t in t_grid):
        raise ConfigError("t values must lie in (0, 1)")
    if any(b >= a for a, b in zip(t_grid, t_grid[1:])):
        raise ConfigError("t_grid must be strictly decreasing")
    grid = geometry.sample_grid(model, resolution)
    rows = []
    h1 = eta1 = None
    if correction is not None and correction.l >= 2:
        eta1 = correction.eta[0]
        h1 = h1_frame_constant(model, eta1)
        correction.h_frame = [h1]
    base_provider = None
    for t in t_grid:
        window = lambda_cutoff(t) if callable(lambda_cutoff) else lambda_cutoff
        q_target = None if window else policy.q(t, model.dim)
        if h1 is None:
            if base_provider is None or \
                    (window is None and base_provider.count < q_target + 1) or \
                    (window is not None and base_provider.lambda_max < window):
                base_provider = spectrum.analytic_spectrum(
                    model, count=None if window else q_target + 1,
                    lambda_max=window)
            provider = base_provider
        else:
            _, provider = corrected_model(
                model, h1, t, eta1,
                count=None if window else q_target + 1, lambda_max=window)
        if window is None:
            eff_policy = policy
        else:
            n_keep = int(np.searchsorted(provider.lambdas, window * (1 + 1e-12),
                                         side="right"))
            eff_policy = TruncationPolicy(rho=policy.rho, q_override=n_keep - 1)
        emb = build_embedding(provider, t, eff_policy)
        rep = pullback_report(emb, grid, reference=model, alpha=alpha)
        rows.append({
            "t": t,
            "q": emb.q,
            "defect_sup": rep.sup,
            "defect_holder": rep.holder,
            "trace_min": float(np.min(rep.trace_factor)),
            "trace_max": float(np.max(rep.trace_factor)),
        })
    return rows


SCAN_FIELDS = ("t", "q", "defect_sup", "defect_holder", "trace_min", "trace_max")


def write_scan_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SCAN_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in SCAN_FIELDS})


def write_scan_json(rows: list[dict], path, metadata: dict) -> None:
    with open(path, "w") as fh:
        json.dump({"metadata": metadata, "rows": rows}, fh, indent=2, sort_keys=True)


def tail_bound_check(provider: SpectrumProvider, t: float, policy: TruncationPolicy,
                     grid: SampleGrid | None = None, resolution: int = 16):
    """Truncation-tail size versus the exponential target exp(-t^(-rho/n)).

    tail = sup over the grid of sum_{j>q} c(t)^2 e^{-lambda_j t} |grad phi_j|^2
    (the discarded gradient mass of the embedding); reported, with a pass flag,
    never asserted here.
    """
    model = provider.model
    n = model.dim
    emb = build_embedding(provider, t, policy)
    q = emb.q
    bound = float(np.exp(-t ** (-policy.rho / n)))
    if q + 1 >= provider.count:
        return 0.0, bound, True
    if provider.count < 4 * q:
        raise SpectrumError(
            f"tail check needs >= 4x modes beyond q={q}, have {provider.count}")
    if grid is None:
        grid = geometry.sample_grid(model, resolution)
    _, g_inv, _ = geometry.metric_on_grid(model, grid.points)
    cn2 = emb.c_norm**2
    tail = np.zeros(len(grid))
    for j0 in range(q + 1, provider.count, 2048):
        j1 = min(provider.count, j0 + 2048)
        _, grads, _ = provider.jet_block(j0, j1, grid.points)
        w = cn2 * np.exp(-provider.lambdas[j0:j1] * t)
        # |grad phi|^2 in the metric: g^{ij} d_i phi d_j phi
        tail += np.einsum("m,mni,nij,mnj->n", w, grads, g_inv, grads)
    tail_sup = float(np.max(tail))
    return tail_sup, bound, tail_sup <= bound
