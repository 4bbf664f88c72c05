"""Similarity kernel, gated force kernel, group forces, and receptive fields.

The force kernel couples attribute similarity with social ties: entry (i, j)
is ``sim(x_i, x_j) * tie(i, j)`` when a bounded-hop path from i to j exists
and the product clears the gate threshold, else 0. Similarity is cosine
rescaled to [0, 1], so the threshold compares like against like.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import Tensor
from .graphs import PathTable


def similarity(a, b) -> float:
    """Rescaled cosine similarity ``(1 + cos(a, b)) / 2`` in [0, 1].

    Returns 0 when either vector has zero norm (degenerate direction).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"similarity needs equal-length vectors, got {a.shape} and {b.shape}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("similarity inputs must be finite")
    aa = float(np.dot(a, a))
    bb = float(np.dot(b, b))
    if aa == 0.0 or bb == 0.0:
        return 0.0
    # sqrt(x * x) reproduces |x| exactly, so identical and antipodal vectors
    # land exactly on 1 and 0
    c = float(np.dot(a, b)) / math.sqrt(aa * bb)
    c = min(1.0, max(-1.0, c))
    return 0.5 * (1.0 + c)


def similarity_matrix(feats: np.ndarray) -> np.ndarray:
    """All-pairs rescaled cosine similarity of the rows of ``feats``.

    Rows with zero norm get similarity 0 against everything, themselves
    included; the remaining diagonal is exactly 1.
    """
    z = np.asarray(feats, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("similarity_matrix expects a 2-D matrix")
    norms = np.linalg.norm(z, axis=1)
    nonzero = norms > 0.0
    u = np.zeros_like(z)
    u[nonzero] = z[nonzero] / norms[nonzero, None]
    cos = np.clip(u @ u.T, -1.0, 1.0)
    s = 0.5 * (1.0 + cos)
    s[~nonzero, :] = 0.0
    s[:, ~nonzero] = 0.0
    n = z.shape[0]
    s[np.arange(n), np.arange(n)] = np.where(nonzero, 1.0, 0.0)
    return s


def pairwise_similarity(feats) -> Tensor:
    """Differentiable all-pairs rescaled cosine similarity.

    Forward matches :func:`similarity_matrix` exactly. Zero-norm rows are
    constant 0 and receive no gradient (subgradient choice at the
    singularity); the diagonal is constant as well.
    """
    t = autodiff.as_tensor(feats)
    z = t.data
    s = similarity_matrix(z)

    norms = np.linalg.norm(z, axis=1)
    nonzero = norms > 0.0
    u = np.zeros_like(z)
    u[nonzero] = z[nonzero] / norms[nonzero, None]
    cos = 2.0 * s - 1.0

    def backward(g):
        if not t.requires_grad:
            return
        # d sim(i,j) / d z_i = (u_j - cos_ij * u_i) / (2 * |z_i|); symmetrize
        # the upstream signal since sim is symmetric in its arguments.
        h = 0.5 * (g + g.T)
        n = z.shape[0]
        h = h.copy()
        h[np.arange(n), np.arange(n)] = 0.0
        h[~nonzero, :] = 0.0
        h[:, ~nonzero] = 0.0
        coeff = (h * cos).sum(axis=1)
        dz = np.zeros_like(z)
        dz[nonzero] = (
            (h @ u)[nonzero] - coeff[nonzero, None] * u[nonzero]
        ) / norms[nonzero, None]
        t.grad += dz

    return autodiff._node(s, "pairwise_similarity", (t,), backward)


@dataclass(frozen=True)
class ForceKernel:
    """Gated force values plus the boolean gate that produced them."""

    values: np.ndarray
    gate: np.ndarray

    @property
    def n_vertices(self) -> int:
        return self.values.shape[0]


def gate_mask(sim: np.ndarray, ties: np.ndarray, reach: np.ndarray, threshold: float) -> np.ndarray:
    """Boolean gate: path exists and ``sim * tie`` clears the threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"gate threshold must lie in [0, 1], got {threshold}")
    product = sim * ties
    gate = reach & (product >= threshold)
    np.fill_diagonal(gate, False)
    return gate


def force_kernel(feats, ties: np.ndarray, paths: PathTable, threshold: float,
                 gate_override: np.ndarray | None = None) -> ForceKernel:
    """Gated force kernel over feature rows (raw attributes or latent signals).

    ``values[i, j] = sim(feats_i, feats_j) * ties[i, j]`` wherever the gate is
    open; the gate requires a stored path within the hop radius and a product
    at or above ``threshold``. ``gate_override`` reuses a previously frozen
    gate pattern instead of re-evaluating it.
    """
    feats = np.asarray(feats, dtype=np.float64)
    n = feats.shape[0]
    if ties.shape != (n, n):
        raise ValueError(f"tie matrix shape {ties.shape} does not match {n} feature rows")
    if paths.n_vertices != n:
        raise ValueError("path table does not match the feature rows")
    sim = similarity_matrix(feats)
    product = sim * ties
    if gate_override is not None:
        gate = gate_override.astype(bool)
    else:
        gate = gate_mask(sim, ties, paths.reachable_mask(), threshold)
    values = np.where(gate, product, 0.0)
    return ForceKernel(values=values, gate=gate)


@dataclass(frozen=True)
class GroupForce:
    """Per-vertex force toward each labeled class: kernel values times membership."""

    values: np.ndarray
    membership: np.ndarray


def membership_matrix(labels: np.ndarray, n_classes: int, restrict=None) -> np.ndarray:
    """One-hot membership rows for labeled vertices, zero rows otherwise.

    ``restrict`` optionally limits membership to a subset of vertex indices
    (e.g. the training split), zeroing everyone else.
    """
    n = labels.shape[0]
    m = np.zeros((n, n_classes))
    mask = labels >= 0
    if restrict is not None:
        allowed = np.zeros(n, dtype=bool)
        allowed[np.asarray(restrict, dtype=np.int64)] = True
        mask = mask & allowed
    idx = np.flatnonzero(mask)
    m[idx, labels[idx]] = 1.0
    return m


def group_force(kernel: ForceKernel, membership: np.ndarray) -> GroupForce:
    """Aggregate kernel values into a per-class force vector per vertex."""
    m = np.asarray(membership, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != kernel.n_vertices:
        raise ValueError(f"membership shape {m.shape} does not match kernel")
    if not np.isin(m, (0.0, 1.0)).all():
        raise ValueError("membership matrix must be binary")
    if (m.sum(axis=1) > 1).any():
        raise ValueError("membership rows must have at most one active class")
    return GroupForce(values=kernel.values @ m, membership=m)


def receptive_field(kernel: ForceKernel, i: int) -> set[int]:
    """Vertices whose gated force on ``i`` survives the threshold."""
    if not 0 <= i < kernel.n_vertices:
        raise IndexError(f"vertex {i} out of range")
    return set(int(j) for j in np.flatnonzero(kernel.gate[i]))
