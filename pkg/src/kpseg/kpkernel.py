"""Kernel point convolution.

A neighbor x_i of query x contributes ``sum_k h_ik f_i W_k`` with the linear
correlation ``h_ik = max(0, 1 - ||x_i - x - xk_k|| / d)``. Positions are
constants; only features and weights carry gradients.

For speed the correlations of one neighbor table are packed into a sparse
operator ``A`` of shape (M*K, S+1) so that ``(A @ F).reshape(M, K*C_in)``
holds the kernel-weighted neighbor features of every query. One operator
serves every convolution that shares the same table and disposition.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .pccore import NeighborTable


@dataclass(frozen=True)
class KernelDisposition:
    points: np.ndarray  # (K, 3), kernel-local frame
    radius: float
    influence: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if not self.influence > 0:
            raise ValueError("influence distance must be positive")
        if not self.radius > 0:
            raise ValueError("kernel radius must be positive")

    @property
    def K(self) -> int:
        return len(self.points)

    def scaled(self, radius: float, influence_ratio: float = 1.5) -> "KernelDisposition":
        """Same shape at another radius."""
        return KernelDisposition(self.points * (radius / self.radius), radius, influence_ratio * radius)


def _repulsion_energy(x):
    diff = x[:, None, :] - x[None, :, :]
    d2 = (diff**2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    return 0.5 * (1.0 / np.sqrt(d2)).sum(), diff, d2


def _relax_on_sphere(x, iters):
    """Projected gradient descent on the Coulomb energy of unit vectors."""
    step = 0.05
    energy, diff, d2 = _repulsion_energy(x)
    for _ in range(iters):
        force = (diff / d2[..., None] ** 1.5).sum(axis=1)
        radial = (force * x).sum(axis=1, keepdims=True) * x
        tangent = force - radial
        trial = x + step * tangent
        trial /= np.linalg.norm(trial, axis=1, keepdims=True)
        e_trial, diff_t, d2_t = _repulsion_energy(trial)
        if e_trial <= energy:
            x, energy, diff, d2 = trial, e_trial, diff_t, d2_t
            step = min(step * 1.1, 0.5)
        else:
            step *= 0.5
            if step < 1e-14:
                break
    return x, energy


@lru_cache(maxsize=32)
def _unit_shell(n_shell: int, seed: int, iters: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n_shell, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    if n_shell > 1:
        x, _ = _relax_on_sphere(x, iters)
    # canonical orientation so the disposition does not depend on the random start frame
    if n_shell >= 3:
        _, _, vt = np.linalg.svd(x - x.mean(axis=0))
        rot = vt if np.linalg.det(vt) > 0 else vt * np.array([[1.0], [1.0], [-1.0]])
        x = x @ rot.T
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    x.setflags(write=False)
    return x


def generate_kernel_points(K: int = 15, r: float = 1.0, seed: int = 0, iters: int = 10_000,
                           influence_ratio: float = 1.5) -> KernelDisposition:
    """One kernel point at the center plus K-1 points spread on the sphere of radius r.

    The shell is the minimum of the Coulomb repulsion energy reached by a
    fixed-budget descent from a seeded random start.
    """
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    if not r > 0:
        raise ValueError(f"radius must be positive, got {r}")
    shell = _unit_shell(K - 1, seed, iters)
    points = np.vstack([np.zeros((1, 3)), shell * r])
    return KernelDisposition(points, float(r), influence_ratio * float(r))


def shell_min_angle(kd: KernelDisposition) -> float:
    """Smallest angle between two shell (non-center) kernel points."""
    shell = kd.points[np.linalg.norm(kd.points, axis=1) > 0]
    u = shell / np.linalg.norm(shell, axis=1, keepdims=True)
    cos = np.clip(u @ u.T, -1.0, 1.0)
    np.fill_diagonal(cos, -1.0)
    return float(np.arccos(cos.max()))


def _influence_columns(rel_pos: np.ndarray, kd: KernelDisposition) -> np.ndarray:
    """(K, n) correlations, one contiguous row per kernel point."""
    x, y, z = rel_pos[:, 0], rel_pos[:, 1], rel_pos[:, 2]
    h = np.empty((kd.K, len(rel_pos)))
    for k, (px, py, pz) in enumerate(kd.points):
        dist = np.sqrt((x - px) ** 2 + (y - py) ** 2 + (z - pz) ** 2)
        np.maximum(0.0, 1.0 - dist / kd.influence, out=h[k])
    return h


def kernel_influence(rel_pos: np.ndarray, kd: KernelDisposition) -> np.ndarray:
    """(n, K) linear correlations between relative positions and kernel points."""
    rel_pos = np.asarray(rel_pos, dtype=np.float64).reshape(-1, 3)
    return _influence_columns(rel_pos, kd).T


def influence_operator(queries, supports, neighbors: NeighborTable, kd: KernelDisposition) -> sp.csr_matrix:
    """Sparse (K*M, S+1) matrix of correlations.

    Row k*M + m holds the influence of kernel point k on the neighbors of
    query m; column S is the zero-feature shadow slot and never appears.
    """
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    supports = np.asarray(supports, dtype=np.float64).reshape(-1, 3)
    idx = neighbors.indices
    m, s, K = len(queries), len(supports), kd.K
    if idx.shape[0] != m:
        raise ValueError(f"neighbor table has {idx.shape[0]} rows for {m} queries")
    if neighbors.n_supports != s:
        raise ValueError(f"neighbor table built for {neighbors.n_supports} supports, got {s}")
    valid = idx < s
    qi, slot = np.nonzero(valid)  # row-major, so pairs are grouped by query
    si = idx[qi, slot]
    h = _influence_columns(supports[si] - queries[qi], kd)  # (K, P), already in row order
    nz = h > 0
    counts = np.zeros((K, m), dtype=np.int64)
    for k in range(K):
        counts[k] = np.bincount(qi[nz[k]], minlength=m)
    indptr = np.concatenate([[0], np.cumsum(counts.ravel())])
    cols = np.broadcast_to(si, h.shape)[nz]
    return sp.csr_matrix((h[nz], cols, indptr), shape=(K * m, s + 1))


def _check_weights(W, K, c_in):
    if W.ndim != 3 or W.shape[0] != K or W.shape[1] != c_in:
        raise ValueError(f"weights of shape {W.shape} do not match K={K}, C_in={c_in}")


def apply_operator(A: sp.csr_matrix, features: np.ndarray, W: np.ndarray):
    """Forward pass through a prebuilt operator.

    Returns (output, weighted) where ``weighted[k]`` is the (M, C_in) block of
    influence-weighted neighbor features for kernel point k.
    """
    K, c_in, c_out = W.shape
    if features.ndim != 2 or features.shape[0] != A.shape[1] or features.shape[1] != c_in:
        raise ValueError(f"features of shape {features.shape} do not match operator {A.shape} and C_in={c_in}")
    m = A.shape[0] // K
    weighted = np.asarray(A @ features).reshape(K, m, c_in)
    out = np.zeros((m, c_out))
    for k in range(K):
        out += weighted[k] @ W[k]
    return out, weighted


def apply_operator_backward(A: sp.csr_matrix, weighted: np.ndarray, W: np.ndarray, grad_out: np.ndarray):
    K, c_in, c_out = W.shape
    m = weighted.shape[1]
    if grad_out.shape != (m, c_out):
        raise ValueError(f"grad_out of shape {grad_out.shape}, expected {(m, c_out)}")
    grad_W = np.matmul(weighted.transpose(0, 2, 1), grad_out)
    grad_weighted = np.matmul(grad_out, W.transpose(0, 2, 1)).reshape(K * m, c_in)
    grad_features = np.asarray(A.T @ grad_weighted)
    grad_features[-1] = 0.0  # shadow row
    return grad_features, grad_W


def kpconv_forward(query_points, support_points, neighbors: NeighborTable, features, W, kd: KernelDisposition):
    """Kernel point convolution of (S+1, C_in) features; row S is the zero shadow row."""
    features = np.asarray(features, dtype=np.float64)
    _check_weights(W, kd.K, features.shape[1] if features.ndim == 2 else -1)
    A = influence_operator(query_points, support_points, neighbors, kd)
    out, _ = apply_operator(A, features, W)
    return out


def kpconv_backward(query_points, support_points, neighbors: NeighborTable, features, W, kd: KernelDisposition,
                    grad_out):
    """Gradients of the convolution w.r.t. features (shadow row zeroed) and weights."""
    features = np.asarray(features, dtype=np.float64)
    _check_weights(W, kd.K, features.shape[1] if features.ndim == 2 else -1)
    A = influence_operator(query_points, support_points, neighbors, kd)
    _, weighted = apply_operator(A, features, W)
    return apply_operator_backward(A, weighted, W, np.asarray(grad_out, dtype=np.float64))
