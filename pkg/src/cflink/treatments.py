"""Binary structural pair treatments.

A treatment assigns T in {0, 1} to every unordered node pair. Cluster
kinds do it through node labels (same cluster -> 1): k-core shells,
Louvain communities, label propagation, spectral clustering. Pair-score
kinds threshold a symmetric score: shared-neighbor count, Katz index.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .embed import smallest_eigenvectors, sym_normalized_laplacian
from .errors import (
    BoundsError,
    CapacityError,
    ConfigError,
    DegenerateInputError,
    DivergenceError,
)
from .graph import Graph, _open_text

log = logging.getLogger("cflink")

TREATMENT_KEYS = ("kcore", "louvain", "propc", "specc", "commn", "katz")

_DENSE_NODE_CAP = 20000


@dataclass
class TreatmentAssignment:
    """Treatment oracle for node pairs.

    kind "cluster": labels[v] holds the cluster id, T=1 iff equal labels.
    kind "pair_score": T=1 iff score(i, j) >= threshold; the score is
    either a precomputed dense matrix (katz) or shared-neighbor counts
    read off the stored adjacency (common_neighbors).
    """

    kind: str
    num_nodes: int
    labels: np.ndarray | None = None
    score_fn_id: str | None = None
    threshold: float = 0.0
    score_matrix: np.ndarray | None = None
    _indptr: np.ndarray | None = field(default=None, repr=False)
    _indices: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("cluster", "pair_score"):
            raise ConfigError(f"unknown treatment kind {self.kind!r}")
        if self.kind == "cluster":
            if self.labels is None or self.labels.shape != (self.num_nodes,):
                raise ConfigError("cluster treatment needs one label per node")
        elif self.score_fn_id not in ("common_neighbors", "katz"):
            raise ConfigError(f"unknown score function {self.score_fn_id!r}")

    def _check_pair(self, i, j):
        n = self.num_nodes
        if not (0 <= i < n and 0 <= j < n):
            raise BoundsError(f"pair ({i}, {j}) outside [0, {n})")

    def _common_count(self, i, j) -> int:
        ri = self._indices[self._indptr[i] : self._indptr[i + 1]]
        rj = self._indices[self._indptr[j] : self._indptr[j + 1]]
        return int(np.intersect1d(ri, rj, assume_unique=True).size)

    def treatment_of(self, i, j) -> int:
        self._check_pair(int(i), int(j))
        i, j = int(i), int(j)
        if self.kind == "cluster":
            return int(self.labels[i] == self.labels[j])
        if self.score_fn_id == "katz":
            return int(self.score_matrix[i, j] >= self.threshold)
        return int(self._common_count(i, j) >= self.threshold)

    def pair_treatments(self, pairs: np.ndarray) -> np.ndarray:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if pairs.size:
            self._check_pair(int(pairs.min()), int(pairs.max()))
        if self.kind == "cluster":
            return (self.labels[pairs[:, 0]] == self.labels[pairs[:, 1]]).astype(
                np.int8
            )
        if self.score_fn_id == "katz":
            return (
                self.score_matrix[pairs[:, 0], pairs[:, 1]] >= self.threshold
            ).astype(np.int8)
        out = np.zeros(pairs.shape[0], dtype=np.int8)
        for r, (i, j) in enumerate(pairs):
            out[r] = self._common_count(int(i), int(j)) >= self.threshold
        return out

    def dense_matrix(self) -> np.ndarray:
        """Full (N, N) uint8 treatment matrix with a zero diagonal."""
        n = self.num_nodes
        if n > _DENSE_NODE_CAP:
            raise CapacityError(f"dense treatment matrix capped at {_DENSE_NODE_CAP} nodes")
        if self.kind == "cluster":
            out = (self.labels[:, None] == self.labels[None, :]).astype(np.uint8)
        elif self.score_fn_id == "katz":
            out = (self.score_matrix >= self.threshold).astype(np.uint8)
        else:
            adj = sp.csr_matrix(
                (np.ones(self._indices.shape[0]), self._indices, self._indptr),
                shape=(n, n),
            )
            counts = (adj @ adj).tocoo()
            out = np.zeros((n, n), dtype=np.uint8)
            hit = counts.data >= self.threshold
            out[counts.row[hit], counts.col[hit]] = 1
        np.fill_diagonal(out, 0)
        return out


def save_labels(t: TreatmentAssignment, path) -> None:
    """Two-column text export `node label` for cluster treatments."""
    if t.kind != "cluster":
        raise ConfigError("only cluster treatments have node labels")
    with _open_text(path, "wt") as fh:
        for v, lab in enumerate(t.labels):
            fh.write(f"{v} {lab}\n")


def _relabel_first_occurrence(labels: np.ndarray) -> np.ndarray:
    """Densify labels to 0..K-1 in order of first appearance."""
    out = np.empty(labels.shape[0], dtype=np.int64)
    seen = {}
    for v, lab in enumerate(labels.tolist()):
        if lab not in seen:
            seen[lab] = len(seen)
        out[v] = seen[lab]
    return out


# ---------------------------------------------------------------- k-core


def core_numbers(graph: Graph) -> np.ndarray:
    """Peeling order core decomposition (bucket version, O(N + E))."""
    n = graph.num_nodes
    deg = graph.degrees().astype(np.int64).copy()
    if n == 0:
        return deg
    indptr, indices = graph.indptr, graph.indices
    max_deg = int(deg.max())
    counts = np.bincount(deg, minlength=max_deg + 1)
    bin_start = np.zeros(max_deg + 2, dtype=np.int64)
    np.cumsum(counts, out=bin_start[1:])
    bin_ptr = bin_start[:-1].copy()

    vert = np.argsort(deg, kind="stable").astype(np.int64)
    pos = np.empty(n, dtype=np.int64)
    pos[vert] = np.arange(n)

    deg = deg.tolist()
    vert_l = vert.tolist()
    pos_l = pos.tolist()
    bin_l = bin_ptr.tolist()
    for idx in range(n):
        v = vert_l[idx]
        dv = deg[v]
        for u in indices[indptr[v] : indptr[v + 1]].tolist():
            du = deg[u]
            if du > dv:
                pu = pos_l[u]
                pw = bin_l[du]
                w = vert_l[pw]
                if u != w:
                    vert_l[pu], vert_l[pw] = w, u
                    pos_l[u], pos_l[w] = pw, pu
                bin_l[du] = pw + 1
                deg[u] = du - 1
    return np.array(deg, dtype=np.int64)


def kcore_treatment(graph: Graph) -> TreatmentAssignment:
    """T=1 iff two nodes sit in the same innermost core shell."""
    return TreatmentAssignment(
        kind="cluster", num_nodes=graph.num_nodes, labels=core_numbers(graph)
    )


# ---------------------------------------------------------------- louvain


def modularity(graph: Graph, labels: np.ndarray) -> float:
    """Newman modularity of a hard partition on an unweighted graph."""
    m = graph.num_edges
    if m == 0:
        raise DegenerateInputError("modularity undefined on an edgeless graph")
    labels = np.asarray(labels)
    same = labels[graph.edges[:, 0]] == labels[graph.edges[:, 1]]
    e_in = same.sum() / m
    deg = graph.degrees().astype(np.float64)
    dsum = np.bincount(
        _relabel_first_occurrence(labels), weights=deg
    )
    return float(e_in - np.sum((dsum / (2.0 * m)) ** 2))


def _louvain_one_level(adj, self_w, k, two_m, order, min_gain):
    n = len(adj)
    comm = list(range(n))
    tot = k.copy()
    m = two_m / 2.0
    moved_any = False
    while True:
        moves = 0
        for v in order:
            cv = comm[v]
            ncw = {}
            for u, w in adj[v].items():
                cu = comm[u]
                ncw[cu] = ncw.get(cu, 0.0) + w
            tot[cv] -= k[v]
            g_stay = ncw.get(cv, 0.0) - tot[cv] * k[v] / two_m
            best_c, best_g = cv, g_stay
            for c in sorted(ncw):
                if c == cv:
                    continue
                g = ncw[c] - tot[c] * k[v] / two_m
                if g > best_g:
                    best_c, best_g = c, g
            if best_c != cv and (best_g - g_stay) / m > min_gain:
                comm[v] = best_c
                tot[best_c] += k[v]
                moves += 1
            else:
                comm[v] = cv
                tot[cv] += k[v]
        if moves == 0:
            break
        moved_any = True
    return comm, moved_any


def _louvain_aggregate(adj, self_w, comm):
    dense = {}
    for v in range(len(adj)):
        if comm[v] not in dense:
            dense[comm[v]] = len(dense)
    nc = len(dense)
    new_adj = [dict() for _ in range(nc)]
    new_self = [0.0] * nc
    for v in range(len(adj)):
        cv = dense[comm[v]]
        new_self[cv] += self_w[v]
        for u, w in adj[v].items():
            cu = dense[comm[u]]
            if cu == cv:
                new_self[cv] += w  # both directions visited, counts twice
            else:
                new_adj[cv][cu] = new_adj[cv].get(cu, 0.0) + w
    mapping = np.array([dense[c] for c in comm], dtype=np.int64)
    return new_adj, new_self, mapping


def louvain_treatment(graph: Graph, seed: int = 0) -> TreatmentAssignment:
    """Two-phase greedy modularity communities at resolution 1.0.

    Node-visit order is shuffled once per level from the seed; a move
    needs a modularity gain above 1e-7. Deterministic for a fixed seed.
    """
    if graph.num_edges == 0:
        raise DegenerateInputError("louvain needs at least one edge")
    rng = np.random.default_rng(seed)
    n = graph.num_nodes
    adj = [dict() for _ in range(n)]
    for i, j in graph.edges:
        adj[int(i)][int(j)] = 1.0
        adj[int(j)][int(i)] = 1.0
    self_w = [0.0] * n
    two_m = 2.0 * graph.num_edges
    assign = np.arange(n, dtype=np.int64)

    for _level in range(100):
        k = [self_w[v] + sum(adj[v].values()) for v in range(len(adj))]
        order = rng.permutation(len(adj)).tolist()
        comm, moved = _louvain_one_level(adj, self_w, k, two_m, order, 1e-7)
        if not moved:
            break
        adj, self_w, mapping = _louvain_aggregate(adj, self_w, comm)
        assign = mapping[assign]
        if len(adj) == 1:
            break
    return TreatmentAssignment(
        kind="cluster",
        num_nodes=n,
        labels=_relabel_first_occurrence(assign),
    )


# ------------------------------------------------------- label propagation


def propc_treatment(
    graph: Graph, seed: int = 0, max_iters: int = 100
) -> TreatmentAssignment:
    """Asynchronous plurality label propagation.

    Sweep order reshuffles each round from the seed; a node adopts the
    plurality label of its neighbors, smallest label on ties. Stops when
    a full sweep changes nothing or after max_iters sweeps.
    """
    if max_iters < 0:
        raise ConfigError("max_iters must be >= 0")
    if graph.num_edges == 0:
        raise DegenerateInputError("label propagation needs at least one edge")
    n = graph.num_nodes
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64)
    indptr, indices = graph.indptr, graph.indices
    for _ in range(max_iters):
        changed = False
        for v in rng.permutation(n):
            row = indices[indptr[v] : indptr[v + 1]]
            if row.size == 0:
                continue
            counts = np.bincount(labels[row])
            new = int(np.argmax(counts))  # first max = smallest label
            if new != labels[v]:
                labels[v] = new
                changed = True
        if not changed:
            break
    return TreatmentAssignment(
        kind="cluster", num_nodes=n, labels=_relabel_first_occurrence(labels)
    )


# ------------------------------------------------------ spectral clustering


def _kmeans_pp_init(x: np.ndarray, k: int, rng) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[c] = x[int(rng.integers(n))]
            continue
        probs = d2 / total
        pick = int(rng.choice(n, p=probs))
        centers[c] = x[pick]
        d2 = np.minimum(d2, ((x - centers[c]) ** 2).sum(axis=1))
    return centers


def _lloyd(x: np.ndarray, centers: np.ndarray, iters: int = 300):
    labels = None
    for _ in range(iters):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(d2, axis=1)  # ties go to the lower index
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(centers.shape[0]):
            member = x[labels == c]
            if member.shape[0]:
                centers[c] = member.mean(axis=0)
    return labels


def spectral_treatment(graph: Graph, k: int = 16, seed: int = 0) -> TreatmentAssignment:
    """Seeded k-means++ over the first k eigenvectors of the symmetric
    normalized Laplacian."""
    n = graph.num_nodes
    if not 1 <= k <= n:
        raise ConfigError(f"need 1 <= k <= {n}, got {k}")
    if graph.num_edges == 0:
        raise DegenerateInputError("spectral clustering needs at least one edge")
    _, vecs = smallest_eigenvectors(sym_normalized_laplacian(graph), k)
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(vecs, k, rng)
    labels = _lloyd(vecs, centers)
    return TreatmentAssignment(
        kind="cluster", num_nodes=n, labels=labels.astype(np.int64)
    )


# ------------------------------------------------------------- pair scores


def commn_treatment(graph: Graph, threshold: int = 2) -> TreatmentAssignment:
    """T=1 iff the pair shares at least `threshold` neighbors."""
    if threshold < 1:
        raise ConfigError("threshold must be >= 1")
    return TreatmentAssignment(
        kind="pair_score",
        num_nodes=graph.num_nodes,
        score_fn_id="common_neighbors",
        threshold=float(threshold),
        _indptr=graph.indptr,
        _indices=graph.indices,
    )


def estimate_spectral_radius(graph: Graph, iters: int = 200, tol: float = 1e-10) -> float:
    """Power-iteration estimate of the adjacency spectral radius."""
    n = graph.num_nodes
    if n == 0 or graph.num_edges == 0:
        return 0.0
    adj = sp.csr_matrix(
        (np.ones(graph.indices.shape[0]), graph.indices, graph.indptr),
        shape=(n, n),
    )
    v = np.full(n, 1.0 / np.sqrt(n))
    lam = 0.0
    for _ in range(iters):
        w = adj @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new_lam = float(v @ (adj @ v))
        if abs(new_lam - lam) < tol * max(1.0, abs(new_lam)):
            lam = new_lam
            break
        lam = new_lam
    return lam


def katz_treatment(
    graph: Graph, beta: float | None = None, tol: float = 1e-6
) -> TreatmentAssignment:
    """Threshold the truncated Katz index sum_{l>=1} beta^l A^l.

    beta defaults to half of 0.85 / spectral-radius-estimate. The series
    is truncated when the next increment drops below tol in Frobenius
    norm; the threshold is twice the mean off-diagonal Katz score.
    """
    n = graph.num_nodes
    if n < 2:
        raise DegenerateInputError("katz treatment needs at least 2 nodes")
    lam = estimate_spectral_radius(graph)
    if beta is None:
        beta = 0.0 if lam == 0.0 else 0.5 * 0.85 / lam
    if beta < 0:
        raise ConfigError("beta must be >= 0")
    if lam > 0 and beta * lam >= 1.0:
        raise DivergenceError(
            f"katz series diverges: beta * lambda_max = {beta * lam:.4f} >= 1"
        )
    a_sp = sp.csr_matrix(
        (np.ones(graph.indices.shape[0]), graph.indices, graph.indptr),
        shape=(n, n),
    )
    katz = np.zeros((n, n))
    inc = beta * a_sp.toarray()
    for _ in range(1000):
        if np.linalg.norm(inc) < tol:
            break
        katz += inc
        inc = beta * (a_sp @ inc)
    else:
        raise DivergenceError("katz series did not truncate within 1000 terms")
    katz = (katz + katz.T) / 2.0
    off_sum = katz.sum() - np.trace(katz)
    threshold = 2.0 * off_sum / (n * (n - 1))
    if threshold == 0.0:
        log.warning("katz threshold is 0; treatment matrix is degenerate (all 1)")
    return TreatmentAssignment(
        kind="pair_score",
        num_nodes=n,
        score_fn_id="katz",
        threshold=threshold,
        score_matrix=katz,
    )


def make_treatment(name: str, graph: Graph, seed: int = 0) -> TreatmentAssignment:
    """CLI-facing constructor dispatch."""
    if name == "kcore":
        return kcore_treatment(graph)
    if name == "louvain":
        return louvain_treatment(graph, seed=seed)
    if name == "propc":
        return propc_treatment(graph, seed=seed)
    if name == "specc":
        return spectral_treatment(graph, seed=seed)
    if name == "commn":
        return commn_treatment(graph)
    if name == "katz":
        return katz_treatment(graph)
    raise ConfigError(f"unknown treatment {name!r}; choose from {TREATMENT_KEYS}")
