"""Node embeddings: Laplacian eigenmaps plus text import/export.

The eigensolver path is deterministic: fixed ARPACK start vector,
ascending eigenvalues, sign-normalized columns, and a lexicographic
ordering inside numerically degenerate eigenvalue groups (gap <= 1e-8).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .errors import ConfigError, NumericError, ShapeError
from .graph import Graph, _open_text

log = logging.getLogger("cflink")

_DEGENERATE_GAP = 1e-8
_DENSE_CUTOFF = 256


@dataclass
class EmbeddingMatrix:
    """Dense per-node embedding, rows aligned with graph node ids."""

    data: np.ndarray  # (N, dim) float64, C-contiguous

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ShapeError(f"embedding must be 2-d, got {self.data.ndim}-d")

    @property
    def num_nodes(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])


def sym_normalized_laplacian(graph: Graph) -> sp.csr_matrix:
    """L = I - D^-1/2 A D^-1/2 with zero coupling for isolated nodes."""
    n = graph.num_nodes
    deg = graph.degrees().astype(np.float64)
    dinv = np.zeros(n)
    nz = deg > 0
    dinv[nz] = 1.0 / np.sqrt(deg[nz])
    data = np.ones(graph.indices.shape[0], dtype=np.float64)
    adj = sp.csr_matrix(
        (data, graph.indices.astype(np.int64), graph.indptr.astype(np.int64)),
        shape=(n, n),
    )
    dmat = sp.diags(dinv)
    return (sp.eye(n, format="csr") - dmat @ adj @ dmat).tocsr()


def _sign_normalize(vecs: np.ndarray) -> np.ndarray:
    out = vecs.copy()
    for c in range(out.shape[1]):
        col = out[:, c]
        k = int(np.argmax(np.abs(col)))
        if col[k] < 0:
            out[:, c] = -col
    return out


def _order_degenerate(vals: np.ndarray, vecs: np.ndarray):
    """Within eigenvalue groups closer than the gap tol, order columns
    lexicographically by coordinates so degenerate subspaces come out in
    a reproducible basis order."""
    n = vals.shape[0]
    start = 0
    vals = vals.copy()
    vecs = vecs.copy()
    while start < n:
        stop = start + 1
        while stop < n and vals[stop] - vals[stop - 1] <= _DEGENERATE_GAP:
            stop += 1
        if stop - start > 1:
            block = vecs[:, start:stop]
            order = np.lexsort(block[::-1])
            vecs[:, start:stop] = block[:, order]
            vals[start:stop] = vals[start:stop][order]
        start = stop
    return vals, vecs


def smallest_eigenvectors(lap: sp.csr_matrix, m: int):
    """The m eigenpairs of a symmetric PSD matrix with smallest eigenvalues.

    Dense eigh for small problems or near-full spectra, else ARPACK
    shift-invert with a fixed start vector. Returns (vals, vecs) with
    ascending eigenvalues, sign-normalized deterministic columns.
    """
    n = lap.shape[0]
    if not 1 <= m <= n:
        raise ConfigError(f"need 1 <= m <= {n}, got {m}")
    if n <= _DENSE_CUTOFF or m >= n - 1:
        vals, vecs = np.linalg.eigh(lap.toarray())
        vals, vecs = vals[:m], vecs[:, :m]
    else:
        v0 = np.random.default_rng(0).standard_normal(n)
        try:
            vals, vecs = eigsh(lap, k=m, sigma=-0.5, which="LM", v0=v0)
        except ArpackNoConvergence as exc:
            raise NumericError(
                f"eigensolver failed to converge: {exc}"
            ) from None
        order = np.argsort(vals, kind="stable")
        vals, vecs = vals[order], vecs[:, order]
    vecs = _sign_normalize(vecs)
    return _order_degenerate(vals, vecs)


def laplacian_eigenmap(graph: Graph, dim: int = 64) -> EmbeddingMatrix:
    """Rows = unit-normalized eigenvectors 2..dim+1 of the symmetric
    normalized Laplacian (the trivial smallest eigenvector is dropped)."""
    n = graph.num_nodes
    if not 0 < dim < n:
        raise ConfigError(f"need 0 < dim < num_nodes ({n}), got {dim}")
    if graph.num_edges == 0:
        log.warning("eigenmap on an edgeless graph is degenerate")
    _, vecs = smallest_eigenvectors(sym_normalized_laplacian(graph), dim + 1)
    emb = vecs[:, 1 : dim + 1]
    norms = np.sqrt((emb * emb).sum(axis=1))
    scale = np.ones_like(norms)
    nz = norms > 0
    scale[nz] = 1.0 / norms[nz]
    return EmbeddingMatrix(emb * scale[:, None])


def load_embeddings(path, graph: Graph) -> EmbeddingMatrix:
    """Read a text embedding matrix, one node per row; no rescaling."""
    with _open_text(path) as fh:
        try:
            mat = np.loadtxt(fh, dtype=np.float64, ndmin=2)
        except ValueError as exc:
            raise ShapeError(f"{path}: ragged or non-numeric rows ({exc})") from None
    if mat.shape[0] != graph.num_nodes:
        raise ShapeError(
            f"{path}: {mat.shape[0]} rows for {graph.num_nodes} nodes"
        )
    if not np.all(np.isfinite(mat)):
        raise NumericError(f"{path}: non-finite embedding values")
    return EmbeddingMatrix(mat)


def save_embeddings(emb: EmbeddingMatrix, path) -> None:
    with _open_text(path, "wt") as fh:
        np.savetxt(fh, emb.data, fmt="%.17g")
