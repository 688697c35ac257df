"""Exclusivity structure over a training set and the two cosine constraints.

For every example the training set yields two prototypes, both computed in
the raw input space once, before training:

  * the exclude-one mean: the mean of every other row, standing in for
    "everything else" (the heterogeneous case);
  * the peer mean: the mean of the example's m most cosine-similar rows,
    standing in for "more of the same kind" (the homologous case).

During training both prototypes are pushed through the current encoder and
compared against the example's latent code with a clamped cosine: the
difference (prototype minus code) is clamped dimension-wise to its
nonnegative part before the cosine is taken. The loss rewards low
similarity to the encoded exclude-one mean and high similarity to the
encoded peer mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import Matrix

# Norms below this are treated as degenerate: the term contributes 0 loss
# and 0 gradient instead of dividing by ~0.
DEGENERATE_EPS = 1e-12

REDUCTIONS = ("mean", "sum")


@dataclass(frozen=True)
class ExclusivityContext:
    """Precomputed training-set structure, immutable after construction."""

    row_sum: np.ndarray  # exact sum of all training rows
    count: int  # number of training rows
    neighbors: np.ndarray  # (count, m) indices, row i never contains i

    @property
    def n_neighbors(self) -> int:
        return self.neighbors.shape[1]


@dataclass(frozen=True)
class ExclusivityTargets:
    """The two raw-space prototypes for one example."""

    hetero_mean: np.ndarray
    homo_mean: np.ndarray


@dataclass
class ExclusivityLossResult:
    hetero_sim: float  # batch reduction of cos terms against exclude-one means
    homo_sim: float  # batch reduction of cos terms against peer means
    excl: float  # hetero_sim + (1 - homo_sim)
    grad_latent: Matrix
    grad_hetero: Matrix
    grad_homo: Matrix


def omega(v: np.ndarray) -> np.ndarray:
    """Dimension-wise nonnegative clamp: keeps v_i if v_i >= 0, else 0."""
    v = np.asarray(v, dtype=np.float64)
    return np.where(v >= 0.0, v, 0.0)


def clamped_cosine(u: np.ndarray, h: np.ndarray, eps: float = DEGENERATE_EPS) -> float:
    """cos(omega(u - h), h); 0 when either norm is degenerate."""
    u = np.asarray(u, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if u.shape != h.shape:
        raise ValueError(f"length mismatch: u has shape {u.shape}, h has shape {h.shape}")
    c = omega(u - h)
    nc = np.linalg.norm(c)
    nh = np.linalg.norm(h)
    if nc < eps or nh < eps:
        return 0.0
    return float(np.dot(c, h) / (nc * nh))


def _clamped_cosine_batch(u: Matrix, h: Matrix, eps: float):
    """Row-wise clamped cosine with gradients.

    Returns (sims, grad_u, grad_h), each row independent. The clamp's
    subgradient at exactly 0 is taken as 0, so gradients flow only through
    strictly positive components of u - h. Degenerate rows (either norm
    below eps) yield 0 similarity and 0 gradient.
    """
    d = u - h
    mask = (d > 0.0).astype(np.float64)
    c = d * mask
    nc = np.linalg.norm(c, axis=1)
    nh = np.linalg.norm(h, axis=1)
    ok = (nc >= eps) & (nh >= eps)
    nc_safe = np.where(ok, nc, 1.0)
    nh_safe = np.where(ok, nh, 1.0)
    dot = np.einsum("ij,ij->i", c, h)
    sims = np.where(ok, dot / (nc_safe * nh_safe), 0.0)

    inv = 1.0 / (nc_safe * nh_safe)
    # d cos / d c and the direct d cos / d h, rows zeroed where degenerate
    g_c = h * inv[:, None] - c * (sims / nc_safe**2)[:, None]
    g_h_direct = c * inv[:, None] - h * (sims / nh_safe**2)[:, None]
    g_c *= ok[:, None]
    g_h_direct *= ok[:, None]
    grad_u = g_c * mask
    grad_h = g_h_direct - g_c * mask
    return sims, grad_u, grad_h


def exclude_one_mean(ctx: ExclusivityContext, x_j: np.ndarray) -> np.ndarray:
    """Mean of all training rows except x_j: (sum - x_j) / (n - 1)."""
    if ctx.count < 2:
        raise ValueError(f"need at least 2 rows to exclude one, have {ctx.count}")
    return (ctx.row_sum - np.asarray(x_j, dtype=np.float64)) / (ctx.count - 1)


def _cosine_to_row(dataset: Matrix, j: int, norms: np.ndarray | None = None) -> np.ndarray:
    """Cosine similarity of row j to every row; pairs with a zero-norm side get -1."""
    if norms is None:
        norms = np.linalg.norm(dataset, axis=1)
    sims = np.full(dataset.shape[0], -1.0)
    if norms[j] > 0.0:
        nonzero = norms > 0.0
        sims[nonzero] = (dataset[nonzero] @ dataset[j]) / (norms[nonzero] * norms[j])
    return sims


def _rank_neighbors(sims: np.ndarray, j: int, m: int) -> list:
    candidates = [i for i in range(sims.shape[0]) if i != j]
    candidates.sort(key=lambda i: (-sims[i], i))
    return candidates[:m]


def top_m_neighbors(dataset: Matrix, j: int, m: int) -> list:
    """Indices of the m rows most cosine-similar to row j, best first.

    Row j itself is excluded; exact similarity ties go to the lower index.
    Zero-norm rows rank last (similarity -1).
    """
    n = dataset.shape[0]
    if not 0 <= j < n:
        raise ValueError(f"row index {j} out of range for {n} rows")
    if not 1 <= m <= n - 1:
        raise ValueError(f"m={m} out of range, need 1 <= m <= n-1 = {n - 1}")
    return _rank_neighbors(_cosine_to_row(dataset, j), j, m)


def build_context(dataset: Matrix, m: int) -> ExclusivityContext:
    """Compute the row sum and per-row neighbor table once, up front.

    The table rows are exactly what top_m_neighbors returns for each row;
    only the row norms are shared across rows.
    """
    dataset = np.asarray(dataset, dtype=np.float64)
    n = dataset.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 rows, have {n}")
    if not 1 <= m <= n - 1:
        raise ValueError(f"m={m} out of range, need 1 <= m <= n-1 = {n - 1}")
    norms = np.linalg.norm(dataset, axis=1)
    table = np.empty((n, m), dtype=np.int64)
    for i in range(n):
        table[i] = _rank_neighbors(_cosine_to_row(dataset, i, norms), i, m)
    return ExclusivityContext(row_sum=dataset.sum(axis=0), count=n, neighbors=table)


def targets_for(ctx: ExclusivityContext, dataset: Matrix, i: int) -> ExclusivityTargets:
    """Both raw-space prototypes for row i."""
    if not 0 <= i < ctx.count:
        raise ValueError(f"row index {i} out of range for {ctx.count} rows")
    hetero = exclude_one_mean(ctx, dataset[i])
    homo = dataset[ctx.neighbors[i]].mean(axis=0)
    return ExclusivityTargets(hetero_mean=hetero, homo_mean=homo)


def batch_targets(ctx: ExclusivityContext, dataset: Matrix, batch_indices) -> tuple:
    """Stacked prototypes for a batch of row indices: (hetero, homo) matrices."""
    idx = np.asarray(batch_indices, dtype=np.int64)
    hetero = (ctx.row_sum - dataset[idx]) / (ctx.count - 1)
    homo = dataset[ctx.neighbors[idx]].mean(axis=1)
    return hetero, homo


def exclusivity_loss(
    latent: Matrix,
    enc_hetero: Matrix,
    enc_homo: Matrix,
    eps: float = DEGENERATE_EPS,
    reduction: str = "mean",
) -> ExclusivityLossResult:
    """Both cosine constraints over a row-aligned batch.

    Row i of enc_hetero / enc_homo must be the encoded exclude-one mean and
    encoded peer mean of the example whose latent code is row i of latent.
    Gradients flow into all three inputs.
    """
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    if latent.shape != enc_hetero.shape or latent.shape != enc_homo.shape:
        raise ValueError(
            f"row-misaligned inputs: latent {latent.shape}, "
            f"enc_hetero {enc_hetero.shape}, enc_homo {enc_homo.shape}"
        )
    div = latent.shape[0] if reduction == "mean" else 1
    s1, g1_u, g1_h = _clamped_cosine_batch(enc_hetero, latent, eps)
    s2, g2_u, g2_h = _clamped_cosine_batch(enc_homo, latent, eps)
    hetero_sim = float(s1.sum() / div)
    homo_sim = float(s2.sum() / div)
    return ExclusivityLossResult(
        hetero_sim=hetero_sim,
        homo_sim=homo_sim,
        excl=hetero_sim + (1.0 - homo_sim),
        grad_latent=(g1_h - g2_h) / div,
        grad_hetero=g1_u / div,
        grad_homo=-g2_u / div,
    )
