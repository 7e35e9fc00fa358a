"""Counterfactual link matching.

For a query pair (i, j) with treatment t, find the nearest treated-
opposite pair (a, b): minimize d(x_i, x_a) + d(x_j, x_b) subject to
T(a, b) = 1 - t and the cost staying under 2*gamma. Ties break to the
lexicographically smallest ordered (a, b). Queries with no feasible
match fall back to (t_cf, a_cf) = (t, query label).

The search runs over per-node candidate shortlists (all nodes within
2*gamma of the query endpoint, sorted by distance) so the numba kernel
and the numpy fallback scan identical float arrays and agree bit for
bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ._accel import JIT_ENABLED, njit, prange
from .embed import EmbeddingMatrix
from .errors import ConfigError, DegenerateInputError, ShapeError, StateError
from .graph import Graph
from .treatments import TreatmentAssignment

log = logging.getLogger("cflink")

_SAMPLE_PAIR_CUTOFF = 5000
_SAMPLE_PAIRS = 10**6


@dataclass(frozen=True)
class MatchConfig:
    """Matching hyperparameters: gamma is an absolute distance budget,
    gamma_pct records which percentile produced it."""

    gamma: float
    gamma_pct: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ConfigError(f"gamma must be finite and >= 0, got {self.gamma}")


def distance_row(emb: np.ndarray, i: int) -> np.ndarray:
    """Euclidean distances from node i to every node.

    Single shared expression; every matcher path and oracle must compute
    distances through this function so floats agree exactly.
    """
    diff = emb - emb[i]
    return np.sqrt((diff * diff).sum(axis=1))


def gamma_from_percentile(emb: EmbeddingMatrix, pct: float, seed: int = 0) -> float:
    """The pct-th percentile of pairwise node distances.

    Exact over all pairs up to 5000 nodes; above that, estimated from
    1e6 uniformly sampled distinct pairs.
    """
    if not 0.0 <= pct <= 100.0:
        raise ConfigError(f"percentile must lie in [0, 100], got {pct}")
    n = emb.num_nodes
    if n < 2:
        raise DegenerateInputError("need at least 2 nodes for pair distances")
    x = emb.data
    if n <= _SAMPLE_PAIR_CUTOFF:
        parts = []
        for i in range(n - 1):
            parts.append(distance_row(x, i)[i + 1 :])
        dists = np.concatenate(parts)
    else:
        rng = np.random.default_rng(seed)
        need = _SAMPLE_PAIRS
        ii = np.zeros(0, dtype=np.int64)
        jj = np.zeros(0, dtype=np.int64)
        while ii.size < need:
            draw = rng.integers(0, n, size=(2 * need, 2))
            ok = draw[:, 0] != draw[:, 1]
            ii = np.concatenate([ii, draw[ok, 0]])
            jj = np.concatenate([jj, draw[ok, 1]])
        ii, jj = ii[:need], jj[:need]
        diff = x[ii] - x[jj]
        dists = np.sqrt((diff * diff).sum(axis=1))
    val = float(np.percentile(dists, pct))
    if val == 0.0:
        log.warning("gamma percentile %.1f is 0; matching will be empty", pct)
    return val


class CandidateSets:
    """Per-node shortlist of nodes within 2*gamma, sorted by (distance,
    node id), stored as concatenated arrays with offsets."""

    def __init__(self, emb: EmbeddingMatrix, two_gamma: float):
        x = emb.data
        n = emb.num_nodes
        idx_parts, dist_parts = [], []
        offsets = np.zeros(n + 1, dtype=np.int64)
        for i in range(n):
            d = distance_row(x, i)
            sel = np.flatnonzero(d < two_gamma)
            ds = d[sel]
            order = np.lexsort((sel, ds))
            idx_parts.append(sel[order].astype(np.int64))
            dist_parts.append(ds[order])
            offsets[i + 1] = offsets[i] + sel.size
        self.indices = (
            np.concatenate(idx_parts) if idx_parts else np.zeros(0, dtype=np.int64)
        )
        self.dists = np.concatenate(dist_parts) if dist_parts else np.zeros(0)
        self.offsets = offsets
        self.two_gamma = two_gamma


@njit(cache=True)
def _bsearch(arr, lo, hi, key):  # pragma: no cover - numba kernel
    while lo < hi:
        mid = (lo + hi) // 2
        if arr[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True, parallel=True)
def _match_kernel(
    qi,
    qj,
    qt,
    qlabel,
    cidx,
    cdist,
    coff,
    use_labels,
    labels,
    tmat,
    two_gamma,
    tr_indptr,
    tr_indices,
    out_a,
    out_b,
    out_tcf,
    out_acf,
):  # pragma: no cover - numba kernel, mirrored by _match_numpy
    for q in prange(qi.shape[0]):
        i = qi[q]
        j = qj[q]
        want = 1 - qt[q]
        best_a = np.int64(-1)
        best_b = np.int64(-1)
        best_cost = 1e300
        si0, si1 = coff[i], coff[i + 1]
        sj0, sj1 = coff[j], coff[j + 1]
        if si1 > si0 and sj1 > sj0:
            dj_min = cdist[sj0]
            for p in range(si0, si1):
                a = cidx[p]
                da = cdist[p]
                lo = da + dj_min
                if lo >= two_gamma or lo > best_cost:
                    break
                for pp in range(sj0, sj1):
                    b = cidx[pp]
                    cost = da + cdist[pp]
                    if cost >= two_gamma or cost > best_cost:
                        break
                    if a == b:
                        continue
                    if (a == i and b == j) or (a == j and b == i):
                        continue
                    if use_labels:
                        t_ab = 1 if labels[a] == labels[b] else 0
                    else:
                        t_ab = tmat[a, b]
                    if t_ab != want:
                        continue
                    if cost < best_cost or (
                        cost == best_cost
                        and (a < best_a or (a == best_a and b < best_b))
                    ):
                        best_cost = cost
                        best_a = a
                        best_b = b
        out_a[q] = best_a
        out_b[q] = best_b
        if best_a >= 0:
            out_tcf[q] = want
            lo2 = tr_indptr[best_a]
            hi2 = tr_indptr[best_a + 1]
            pos = _bsearch(tr_indices, lo2, hi2, best_b)
            out_acf[q] = 1 if pos < hi2 and tr_indices[pos] == best_b else 0
        else:
            out_tcf[q] = qt[q]
            out_acf[q] = qlabel[q]


def _match_numpy(
    qi, qj, qt, qlabel, cand: CandidateSets, use_labels, labels, tmat, train: Graph
):
    m = qi.shape[0]
    out_a = np.full(m, -1, dtype=np.int64)
    out_b = np.full(m, -1, dtype=np.int64)
    out_tcf = np.zeros(m, dtype=np.int8)
    out_acf = np.zeros(m, dtype=np.int8)
    coff, cidx, cdist = cand.offsets, cand.indices, cand.dists
    two_gamma = cand.two_gamma
    for q in range(m):
        i, j, t = int(qi[q]), int(qj[q]), int(qt[q])
        want = 1 - t
        ai = cidx[coff[i] : coff[i + 1]]
        da = cdist[coff[i] : coff[i + 1]]
        bj = cidx[coff[j] : coff[j + 1]]
        db = cdist[coff[j] : coff[j + 1]]
        best = None
        if ai.size and bj.size:
            cost = da[:, None] + db[None, :]
            feas = cost < two_gamma
            feas &= ai[:, None] != bj[None, :]
            feas[(ai == i)[:, None] & (bj == j)[None, :]] = False
            feas[(ai == j)[:, None] & (bj == i)[None, :]] = False
            if use_labels:
                feas &= (labels[ai][:, None] == labels[bj][None, :]) == bool(want)
            else:
                feas &= tmat[np.ix_(ai, bj)] == want
            if feas.any():
                mc = cost[feas].min()
                tie = feas & (cost == mc)
                n = cand.offsets.shape[0] - 1
                keys = ai[:, None].astype(np.int64) * n + bj[None, :]
                key = keys[tie].min()
                best = (int(key // n), int(key % n))
        if best is None:
            out_tcf[q] = t
            out_acf[q] = qlabel[q]
        else:
            a, b = best
            out_a[q], out_b[q] = a, b
            out_tcf[q] = want
            out_acf[q] = 1 if train.has_edge(a, b) else 0
    return out_a, out_b, out_tcf, out_acf


class CfMatcher:
    """Bound matcher: embedding candidates + treatment oracle + the train
    graph used to read off matched-pair link labels."""

    def __init__(
        self,
        emb: EmbeddingMatrix,
        treatment: TreatmentAssignment,
        cfg: MatchConfig,
        train_graph: Graph,
    ):
        if emb.num_nodes != train_graph.num_nodes:
            raise ShapeError(
                f"embedding rows {emb.num_nodes} != nodes {train_graph.num_nodes}"
            )
        if treatment.num_nodes != train_graph.num_nodes:
            raise ShapeError("treatment and graph disagree on node count")
        self.cfg = cfg
        self.train_graph = train_graph
        self.cand = CandidateSets(emb, 2.0 * cfg.gamma)
        self.use_labels = treatment.kind == "cluster"
        if self.use_labels:
            self.labels = treatment.labels.astype(np.int64)
            self.tmat = np.zeros((1, 1), dtype=np.uint8)
        else:
            self.labels = np.zeros(1, dtype=np.int64)
            self.tmat = treatment.dense_matrix()

    def match(self, pairs: np.ndarray, tbits: np.ndarray, labels: np.ndarray):
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        qt = np.asarray(tbits, dtype=np.int8).reshape(-1)
        ql = np.asarray(labels, dtype=np.int8).reshape(-1)
        if not (pairs.shape[0] == qt.shape[0] == ql.shape[0]):
            raise ShapeError("query arrays disagree in length")
        if pairs.shape[0] == 0:
            z = np.zeros(0, dtype=np.int64)
            z8 = np.zeros(0, dtype=np.int8)
            return z, z.copy(), z8, z8.copy()
        if JIT_ENABLED:
            m = pairs.shape[0]
            out_a = np.empty(m, dtype=np.int64)
            out_b = np.empty(m, dtype=np.int64)
            out_tcf = np.empty(m, dtype=np.int8)
            out_acf = np.empty(m, dtype=np.int8)
            _match_kernel(
                pairs[:, 0].copy(),
                pairs[:, 1].copy(),
                qt,
                ql,
                self.cand.indices,
                self.cand.dists,
                self.cand.offsets,
                self.use_labels,
                self.labels,
                self.tmat,
                self.cand.two_gamma,
                self.train_graph.indptr,
                self.train_graph.indices,
                out_a,
                out_b,
                out_tcf,
                out_acf,
            )
            return out_a, out_b, out_tcf, out_acf
        return _match_numpy(
            pairs[:, 0],
            pairs[:, 1],
            qt,
            ql,
            self.cand,
            self.use_labels,
            self.labels,
            self.tmat,
            self.train_graph,
        )


def find_counterfactual(
    pair,
    t: int,
    label: int,
    emb: EmbeddingMatrix,
    treatment: TreatmentAssignment,
    cfg: MatchConfig,
    train_graph: Graph,
):
    """Single-query convenience wrapper. Returns (matched_or_None, t_cf, a_cf)."""
    matcher = CfMatcher(emb, treatment, cfg, train_graph)
    pairs = np.array([[pair[0], pair[1]]], dtype=np.int64)
    a, b, tcf, acf = matcher.match(
        pairs, np.array([t], dtype=np.int8), np.array([label], dtype=np.int8)
    )
    matched = (int(a[0]), int(b[0])) if a[0] >= 0 else None
    return matched, int(tcf[0]), int(acf[0])


class CounterfactualTable:
    """Memoized counterfactual rows keyed by query pair.

    Built once from the canonical training batch, then extended lazily
    as later epochs draw fresh negative pairs. Row order is insertion
    order, so a fixed resampling schedule reproduces the table exactly.
    """

    COLUMNS = ("query_i", "query_j", "t", "label", "matched_a", "matched_b", "t_cf", "a_cf")

    def __init__(self, matcher: CfMatcher):
        self.matcher = matcher
        self._rows = []  # [i, j, t, label, a, b, t_cf, a_cf]
        self._index = {}

    @property
    def num_rows(self) -> int:
        return len(self._rows)

    def matched_fraction(self) -> float:
        if not self._rows:
            raise DegenerateInputError("empty counterfactual table")
        hit = sum(1 for r in self._rows if r[4] >= 0)
        return hit / len(self._rows)

    def extend(self, pairs: np.ndarray, tbits: np.ndarray, labels: np.ndarray) -> None:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        tbits = np.asarray(tbits).reshape(-1)
        labels = np.asarray(labels).reshape(-1)
        fresh = [
            r
            for r in range(pairs.shape[0])
            if (int(pairs[r, 0]), int(pairs[r, 1])) not in self._index
        ]
        if not fresh:
            return
        sub = pairs[fresh]
        a, b, tcf, acf = self.matcher.match(sub, tbits[fresh], labels[fresh])
        for r, row in enumerate(fresh):
            key = (int(pairs[row, 0]), int(pairs[row, 1]))
            if key in self._index:
                continue
            self._index[key] = len(self._rows)
            self._rows.append(
                [
                    key[0],
                    key[1],
                    int(tbits[row]),
                    int(labels[row]),
                    int(a[r]),
                    int(b[r]),
                    int(tcf[r]),
                    int(acf[r]),
                ]
            )

    def lookup(self, pairs: np.ndarray):
        """(t_cf, a_cf, matched_mask, matched_pairs) for known query pairs."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        m = pairs.shape[0]
        tcf = np.zeros(m, dtype=np.float64)
        acf = np.zeros(m, dtype=np.float64)
        matched = np.zeros(m, dtype=bool)
        mpairs = np.zeros((m, 2), dtype=np.int64)
        for r in range(m):
            key = (int(pairs[r, 0]), int(pairs[r, 1]))
            if key not in self._index:
                raise StateError(f"pair {key} missing from counterfactual table")
            row = self._rows[self._index[key]]
            tcf[r] = row[6]
            acf[r] = row[7]
            if row[4] >= 0:
                matched[r] = True
                mpairs[r, 0] = row[4]
                mpairs[r, 1] = row[5]
        return tcf, acf, matched, mpairs

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(self.COLUMNS) + "\n")
            for r in self._rows:
                fh.write(",".join(str(v) for v in r) + "\n")


def build_counterfactual_table(
    pairs: np.ndarray,
    tbits: np.ndarray,
    labels: np.ndarray,
    emb: EmbeddingMatrix,
    treatment: TreatmentAssignment,
    cfg: MatchConfig,
    train_graph: Graph,
) -> CounterfactualTable:
    matcher = CfMatcher(emb, treatment, cfg, train_graph)
    table = CounterfactualTable(matcher)
    table.extend(pairs, tbits, labels)
    return table
