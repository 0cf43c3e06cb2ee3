"""Singular values of weight matrices and the amplification certificate.

The SVD is a one-sided (Hestenes) Jacobi iteration. Column pairs are visited
in a fixed round-robin tournament order so every round rotates disjoint pairs
at once; the result is deterministic for a given matrix and warm start.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError, ParameterError, SingularWeightError
from .netcore import Network, forward_with_trace

TOL = 1e-12
MAX_SWEEPS = 80


@dataclass
class SvdResult:
    singular_values: np.ndarray  # descending, length min(m, n)
    left_vectors: np.ndarray  # m x min(m, n)
    right_vectors: np.ndarray  # n x min(m, n)
    sweeps: int = 0
    basis: np.ndarray | None = field(default=None, repr=False)  # Jacobi-side rotation, for warm starts

    @property
    def sigma_min(self) -> float:
        return float(self.singular_values[-1])

    @property
    def sigma_max(self) -> float:
        return float(self.singular_values[0])

    @property
    def min_is_simple(self) -> bool:
        s = self.singular_values
        return len(s) < 2 or s[-2] - s[-1] > 1e-6 * max(s[0], 1.0)

    def reconstruct(self) -> np.ndarray:
        return (self.left_vectors * self.singular_values) @ self.right_vectors.T


def _jacobi_columns(A: np.ndarray, V0: np.ndarray | None = None):
    """Orthogonalise the columns of A (m >= k). Returns (A V, V, sweeps).

    Columns live in two blocks and ``top[i]`` is paired with ``bottom[i]``;
    between rounds the blocks shift by the circle method, so one sweep of
    k-1 rounds (k even) meets every pair exactly once.
    """
    m, k = A.shape
    if V0 is None:
        V0 = np.eye(k)
    # rotations are scale free; unit scale keeps products of squared norms representable
    scale = float(np.abs(A).max(initial=0.0))
    if scale == 0.0:
        return np.zeros_like(A), V0.copy(), 0
    # row j: column j of A V0 followed by column j of V0
    S = np.hstack([(A / scale @ V0).T, V0.T])
    if k < 2:
        return S[:, :m].T * scale, S[:, m:].T, 0
    ids = np.arange(k)
    if k % 2:
        S = np.vstack([S, np.zeros((1, S.shape[1]))])
        ids = np.append(ids, -1)
    h = S.shape[0] // 2
    top, bot = S[:h].copy(), S[h:].copy()
    tid, bid = ids[:h].copy(), ids[h:].copy()
    # columns below this norm are rounding noise of a rank-deficient A and count as null
    floor = (np.finfo(float).eps * np.linalg.norm(S[:, :m])) ** 2
    for sweep in range(1, MAX_SWEEPS + 1):
        off = 0.0
        for _ in range(2 * h - 1):
            # exact norms every round: incremental updates go stale once a column collapses
            nt = np.einsum("ij,ij->i", top[:, :m], top[:, :m])
            nb = np.einsum("ij,ij->i", bot[:, :m], bot[:, :m])
            gamma = np.einsum("ij,ij->i", top[:, :m], bot[:, :m])
            denom = np.sqrt(nt * nb)
            live = (nt > floor) & (nb > floor) & (np.abs(gamma) > TOL * denom)
            if live.any():
                off = max(off, float(np.max(np.abs(gamma[live]) / denom[live])))
                gamma = np.where(live, gamma, 0.0)
                zeta = (nb - nt) / np.where(live, 2.0 * gamma, 1.0)
                t = np.where(live, np.copysign(1.0, zeta) / (np.abs(zeta) + np.hypot(1.0, zeta)), 0.0)
                c = 1.0 / np.sqrt(1.0 + t * t)
                sn = (c * t)[:, None]
                c = c[:, None]
                top, bot = c * top - sn * bot, sn * top + c * bot
            if h == 1:
                continue
            # circle method: top[0] stays, everything else moves one seat
            top, bot = (np.concatenate([top[:1], bot[:1], top[1:-1]]),
                        np.concatenate([bot[1:], top[-1:]]))
            tid, bid = (np.concatenate([tid[:1], bid[:1], tid[1:-1]]),
                        np.concatenate([bid[1:], tid[-1:]]))
        if off <= TOL:
            S = np.empty((k, top.shape[1]))
            rows = np.concatenate([top, bot])
            order = np.concatenate([tid, bid])
            S[order[order >= 0]] = rows[order >= 0]
            return S[:, :m].T * scale, S[:, m:].T, sweep
    raise NumericError(f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")


def _complete(U: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Replace columns belonging to zero singular values with an orthonormal completion."""
    zero = np.flatnonzero(sigma == 0)
    if zero.size == 0:
        return U
    keep = U[:, sigma > 0]
    # Householder QR of [kept | I]: the columns after the kept block span their complement
    Q, _ = np.linalg.qr(np.hstack([keep, np.eye(U.shape[0])]))
    U[:, zero] = Q[:, keep.shape[1]:keep.shape[1] + zero.size]
    return U


def svd_small(W, warm: SvdResult | None = None) -> SvdResult:
    """Thin SVD ``W = U diag(s) V^T`` with descending ``s``.

    Each right vector is oriented so its first nonzero component is positive.
    ``warm`` is a previous result for a matrix of the same shape; its rotation
    seeds the iteration, which then needs far fewer sweeps when W moved little.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ParameterError(f"expected a matrix, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise NumericError("matrix has non-finite entries")
    tall = W.shape[0] >= W.shape[1]
    A = W if tall else W.T
    Q = None
    if A.shape[0] > A.shape[1]:
        # Jacobi on the triangular factor: same singular values, shorter vectors
        Q, A = np.linalg.qr(A)
    V0 = warm.basis if warm is not None and warm.basis is not None else None
    if V0 is not None and V0.shape != (A.shape[1], A.shape[1]):
        V0 = None
    B, V, sweeps = _jacobi_columns(A, V0)
    if Q is not None:
        B = Q @ B
    # per-column scaling keeps the norms finite near the ends of the float range
    peak = np.abs(B).max(axis=0)
    sigma = peak * np.linalg.norm(np.divide(B, peak, out=np.zeros_like(B), where=peak > 0), axis=0)
    # values at rounding level belong to a numerically rank-deficient W; their vectors are noise
    sigma[sigma <= np.finfo(float).eps * max(W.shape) * sigma.max(initial=0.0)] = 0.0
    order = np.argsort(-sigma, kind="stable")
    sigma, B, V = sigma[order], B[:, order], V[:, order]
    basis = V.copy()
    U = np.divide(B, sigma, out=np.zeros_like(B), where=sigma > 0)
    U = _complete(U, sigma)
    left, right = (U, V) if tall else (V, U)
    for j in range(right.shape[1]):
        nz = np.flatnonzero(np.abs(right[:, j]) > 1e-14)
        if nz.size and right[nz[0], j] < 0:
            right[:, j] *= -1
            left[:, j] *= -1
    return SvdResult(sigma, left, right, sweeps, basis)


def min_gain(W) -> float:
    """Largest c with ||W x|| >= c ||x|| for every x.

    Equals sigma_min when W has at least as many rows as columns; a wide
    matrix has a null space, so its guaranteed gain is zero.
    """
    W = np.asarray(W)
    if W.shape[0] < W.shape[1]:
        return 0.0
    return svd_small(W).sigma_min


# ---------------------------------------------------------------------------
# spectral regularizer


def spectral_penalty(net: Network, lam: float, cache: dict | None = None):
    """``-lam * sum_{i>=2} log sigma_min(W_i)`` and its gradient per layer.

    Layer 1 is unregularized; its gradient entry is a zero matrix.
    d sigma_min / dW = u v^T for the smallest singular pair. ``cache`` maps
    layer index to the previous SvdResult and is updated in place, so an
    optimizer loop can warm-start every decomposition.
    """
    if lam < 0:
        raise ParameterError(f"lambda must be >= 0, got {lam}")
    grads = [np.zeros_like(layer.W) for layer in net.layers]
    if lam == 0:
        return 0.0, grads
    total = 0.0
    for i in range(1, net.n):
        res = svd_small(net.layers[i].W, None if cache is None else cache.get(i))
        if cache is not None:
            cache[i] = res
        smin = res.sigma_min
        if smin <= 0:
            raise SingularWeightError(f"sigma_min(W_{i + 1}) is zero", layer=i + 1)
        total += np.log(smin)
        u, v = res.left_vectors[:, -1], res.right_vectors[:, -1]
        grads[i] = -lam * np.outer(u, v) / smin
    return -lam * total, grads


def min_sigma(net: Network) -> float:
    """Smallest sigma_min over layers 2..n (inf for a single-layer net)."""
    vals = [svd_small(l.W).sigma_min for l in net.layers[1:]]
    return min(vals) if vals else float("inf")


# ---------------------------------------------------------------------------
# certificate


@dataclass
class LayerSpectrum:
    index: int  # 1-based
    sigma_min: float
    sigma_max: float
    gain: float  # min_gain(W): sigma_min, or 0 for a wide matrix
    L_f: float
    simple: bool


@dataclass
class SpectralReport:
    per_layer: list[LayerSpectrum]
    beta: float
    assumption1: bool
    assumption2: bool
    interior_layers: int
    notes: list[str] = field(default_factory=list)

    @property
    def verdict(self) -> str:
        return "amplifying" if self.assumption1 and self.assumption2 else "not certified"

    def rows(self):
        """CSV rows ``layer,sigma_min,sigma_max,L_f,cum_beta``."""
        cum = 1.0
        for ls in self.per_layer:
            if ls.index >= 2:
                cum *= ls.L_f * ls.gain
            yield ls.index, ls.sigma_min, ls.sigma_max, ls.L_f, cum if ls.index >= 2 else 1.0


def certify_beta(net: Network) -> SpectralReport:
    per_layer, notes = [], []
    beta = 1.0
    for i, layer in enumerate(net.layers):
        res = svd_small(layer.W)
        gain = 0.0 if layer.out_dim < layer.in_dim else res.sigma_min
        ls = LayerSpectrum(i + 1, res.sigma_min, res.sigma_max, gain,
                           layer.activation.expansion_bound, res.min_is_simple)
        per_layer.append(ls)
        if i >= 1:
            beta *= ls.L_f * ls.gain
            if layer.out_dim < layer.in_dim:
                notes.append(f"layer {i + 1} is wide ({layer.out_dim}x{layer.in_dim}); guaranteed gain 0")
            if not ls.simple:
                notes.append(f"layer {i + 1} has a repeated smallest singular value")
    if net.n < 2:
        notes.append("no interior layers")
    a1 = all(ls.L_f > 0 for ls in per_layer)
    return SpectralReport(per_layer, beta, a1, beta > 1.0, net.n - 1, notes)


@dataclass
class BoundCheck:
    d: list[float]
    beta: float
    holds: bool
    layerwise: list[bool]
    degenerate: bool


def verify_bound(net: Network, x, x_prime, slack: float = 1e-9) -> BoundCheck:
    """Check d_i >= L_f_i * gain(W_i) * d_{i-1} for every i >= 2 and d_n >= beta * d_1."""
    x = np.asarray(x, dtype=np.float64)
    x_prime = np.asarray(x_prime, dtype=np.float64)
    if x.shape != x_prime.shape or x.ndim != 1:
        raise DimensionError(f"expected two vectors of equal shape, got {x.shape} and {x_prime.shape}")
    _, za = forward_with_trace(net, x)
    _, zb = forward_with_trace(net, x_prime)
    d = [float(np.linalg.norm(a - b)) for a, b in zip(za, zb)]
    rep = certify_beta(net)
    if d[0] == 0.0:
        return BoundCheck(d, rep.beta, True, [True] * (net.n - 1), True)
    layerwise = []
    for i in range(1, net.n):
        factor = rep.per_layer[i].L_f * rep.per_layer[i].gain
        layerwise.append(d[i] >= factor * d[i - 1] * (1 - slack))
    chained = d[-1] >= rep.beta * d[0] * (1 - slack)
    return BoundCheck(d, rep.beta, all(layerwise) and chained, layerwise, False)
