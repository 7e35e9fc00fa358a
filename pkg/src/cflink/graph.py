"""Undirected graph container, text loaders, edge splitting, negative
sampling, and the binary split snapshot."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BoundsError,
    CapacityError,
    ConfigError,
    DegenerateInputError,
    ParseError,
    ShapeError,
)

_SPLIT_MAGIC = b"CFSL"
_SPLIT_VERSION = 1


def _open_text(path, mode="rt"):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


class Graph:
    """Immutable undirected graph in CSR form with optional node features.

    The edge list is canonical: i < j, no self loops, no duplicates,
    sorted lexicographically. The CSR adjacency stores both directions
    with sorted column indices per row.
    """

    def __init__(self, num_nodes, edges, features=None):
        num_nodes = int(num_nodes)
        if num_nodes < 0:
            raise BoundsError("num_nodes must be non-negative")
        edges = np.asarray(edges, dtype=np.int64)
        if edges.size == 0:
            edges = edges.reshape(0, 2)
        if edges.ndim != 2 or edges.shape[1] != 2:
            raise ShapeError(f"edge array must be (E, 2), got {edges.shape}")
        if edges.size:
            if edges.min() < 0 or edges.max() >= num_nodes:
                raise BoundsError(
                    f"edge endpoint outside [0, {num_nodes}): "
                    f"min={edges.min()} max={edges.max()}"
                )
            lo = edges.min(axis=1)
            hi = edges.max(axis=1)
            keep = lo != hi
            edges = np.unique(np.stack([lo[keep], hi[keep]], axis=1), axis=0)
        self.num_nodes = num_nodes
        self.edges = edges
        self.edges.setflags(write=False)

        deg = np.zeros(num_nodes, dtype=np.int64)
        if edges.size:
            src = np.concatenate([edges[:, 0], edges[:, 1]])
            dst = np.concatenate([edges[:, 1], edges[:, 0]])
            order = np.lexsort((dst, src))
            src, dst = src[order], dst[order]
            deg = np.bincount(src, minlength=num_nodes).astype(np.int64)
            self.indices = dst
        else:
            self.indices = np.zeros(0, dtype=np.int64)
        self.indptr = np.zeros(num_nodes + 1, dtype=np.int64)
        np.cumsum(deg, out=self.indptr[1:])
        self.indptr.setflags(write=False)
        self.indices.setflags(write=False)

        self.features = None
        if features is not None:
            features = np.ascontiguousarray(features, dtype=np.float64)
            if features.ndim != 2 or features.shape[0] != num_nodes:
                raise ShapeError(
                    f"features must be ({num_nodes}, F), got {features.shape}"
                )
            self.features = features

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def feature_dim(self) -> int:
        return 0 if self.features is None else int(self.features.shape[1])

    def degrees(self) -> np.ndarray:
        return self.indptr[1:] - self.indptr[:-1]

    def neighbors(self, i) -> np.ndarray:
        if not 0 <= i < self.num_nodes:
            raise BoundsError(f"node {i} outside [0, {self.num_nodes})")
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def has_edge(self, i, j) -> bool:
        if not (0 <= i < self.num_nodes and 0 <= j < self.num_nodes):
            raise BoundsError(f"pair ({i}, {j}) outside [0, {self.num_nodes})")
        row = self.neighbors(i)
        pos = np.searchsorted(row, j)
        return bool(pos < row.size and row[pos] == j)

    def edge_key_set(self) -> set:
        n = self.num_nodes
        return set((self.edges[:, 0] * n + self.edges[:, 1]).tolist())

    def with_features(self, features) -> "Graph":
        return Graph(self.num_nodes, self.edges, features=features)


def load_edge_list(path, num_nodes=None) -> Graph:
    """Parse whitespace- or comma-separated `i j` lines into a Graph.

    Blank lines are skipped. When num_nodes is given, any endpoint >= it
    is a bounds error; otherwise the node count is max index + 1.
    """
    pairs = []
    with _open_text(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.replace(",", " ").strip()
            if not line:
                continue
            toks = line.split()
            if len(toks) != 2:
                raise ParseError(f"{path}:{ln}: expected 2 tokens, got {len(toks)}")
            try:
                i, j = int(toks[0]), int(toks[1])
            except ValueError:
                raise ParseError(f"{path}:{ln}: non-integer token") from None
            if i < 0 or j < 0:
                raise BoundsError(f"{path}:{ln}: negative node index")
            if num_nodes is not None and (i >= num_nodes or j >= num_nodes):
                raise BoundsError(
                    f"{path}:{ln}: index >= declared num_nodes {num_nodes}"
                )
            pairs.append((i, j))
    if num_nodes is None:
        num_nodes = 1 + max((max(p) for p in pairs), default=-1)
    return Graph(num_nodes, np.array(pairs, dtype=np.int64).reshape(-1, 2))


def save_edge_list(graph: Graph, path) -> None:
    with _open_text(path, "wt") as fh:
        for i, j in graph.edges:
            fh.write(f"{i} {j}\n")


def load_features(path, graph: Graph) -> Graph:
    """Attach a dense feature matrix from text (one row per node).

    Transparently reads .gz. Row count must equal graph.num_nodes and
    rows must have a consistent column count.
    """
    with _open_text(path) as fh:
        try:
            mat = np.loadtxt(fh, dtype=np.float64, ndmin=2)
        except ValueError as exc:
            raise ShapeError(f"{path}: ragged or non-numeric rows ({exc})") from None
    if mat.size == 0:
        raise ShapeError(f"{path}: empty feature file")
    if mat.shape[0] != graph.num_nodes:
        raise ShapeError(
            f"{path}: {mat.shape[0]} rows for {graph.num_nodes} nodes"
        )
    return graph.with_features(mat)


def save_features(graph: Graph, path) -> None:
    if graph.features is None:
        raise DegenerateInputError("graph has no features to save")
    with _open_text(path, "wt") as fh:
        np.savetxt(fh, graph.features, fmt="%.17g")


@dataclass
class TrainBatch:
    """One full-batch training view: pairs with link labels and treatments."""

    pairs: np.ndarray  # (M, 2) int64, canonical i < j
    labels: np.ndarray  # (M,) float64 in {0, 1}
    treatments: np.ndarray  # (M,) float64 in {0, 1}

    def __post_init__(self):
        m = self.pairs.shape[0]
        if self.labels.shape != (m,) or self.treatments.shape != (m,):
            raise ShapeError("batch arrays disagree in length")

    def __len__(self):
        return int(self.pairs.shape[0])


@dataclass
class EdgeSplit:
    """Train/valid/test positives plus equally sized sampled negatives."""

    train_graph: Graph
    valid_pos: np.ndarray
    valid_neg: np.ndarray
    test_pos: np.ndarray
    test_neg: np.ndarray

    @property
    def train_edges(self) -> np.ndarray:
        return self.train_graph.edges

    def full_edges(self) -> np.ndarray:
        allp = np.concatenate([self.train_edges, self.valid_pos, self.test_pos])
        return np.unique(allp, axis=0)


def _canon_sorted(pairs: np.ndarray) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.size == 0:
        return pairs
    lo = pairs.min(axis=1)
    hi = pairs.max(axis=1)
    return np.unique(np.stack([lo, hi], axis=1), axis=0)


def sample_negatives(graph: Graph, count, exclude=(), seed=0) -> np.ndarray:
    """Uniformly sample `count` distinct node pairs with no edge in `graph`.

    Pairs are canonical (i < j), never self pairs, and never in `exclude`.
    Exhaustive enumeration for graphs up to 2000 nodes, rejection
    sampling above that. Raises CapacityError when fewer than `count`
    qualifying pairs exist.
    """
    count = int(count)
    if count < 0:
        raise ConfigError("count must be >= 0")
    n = graph.num_nodes
    if count == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if n < 2:
        raise CapacityError(f"no pairs exist on {n} node(s)")

    edge_keys = graph.edge_key_set()
    excl_keys = set()
    for p in exclude:
        a, b = int(p[0]), int(p[1])
        if a == b:
            continue
        if a > b:
            a, b = b, a
        k = a * n + b
        if k not in edge_keys:
            excl_keys.add(k)
    total_pairs = n * (n - 1) // 2
    capacity = total_pairs - len(edge_keys) - len(excl_keys)
    if count > capacity:
        raise CapacityError(
            f"requested {count} negatives but only {capacity} disconnected "
            f"pairs are available"
        )

    rng = np.random.default_rng(seed)
    if n <= 2000:
        iu, ju = np.triu_indices(n, k=1)
        keys = iu.astype(np.int64) * n + ju
        banned = np.fromiter(edge_keys | excl_keys, dtype=np.int64, count=len(edge_keys) + len(excl_keys))
        mask = ~np.isin(keys, banned)
        cand_i, cand_j = iu[mask], ju[mask]
        pick = rng.choice(cand_i.size, size=count, replace=False)
        out = np.stack([cand_i[pick], cand_j[pick]], axis=1).astype(np.int64)
        return out

    banned = edge_keys | excl_keys
    seen = set()
    out = np.zeros((count, 2), dtype=np.int64)
    filled = 0
    while filled < count:
        draw = rng.integers(0, n, size=(max(4 * (count - filled), 1024), 2))
        for a, b in draw:
            if a == b:
                continue
            if a > b:
                a, b = b, a
            k = int(a) * n + int(b)
            if k in banned or k in seen:
                continue
            seen.add(k)
            out[filled, 0] = a
            out[filled, 1] = b
            filled += 1
            if filled == count:
                break
    return out


def split_edges(graph: Graph, valid_frac, test_frac, seed) -> EdgeSplit:
    """Partition edges into train/valid/test and sample matched negatives.

    valid/test sizes are floor(frac * E). Negatives are disconnected in
    the full graph, disjoint between valid and test, one set each of the
    same size as the positives. All five lists come back in canonical
    lexicographic order.
    """
    if not (0.0 < valid_frac < 1.0 and 0.0 < test_frac < 1.0):
        raise ConfigError("fractions must lie in (0, 1)")
    if valid_frac + test_frac >= 1.0:
        raise ConfigError("valid_frac + test_frac must be < 1")
    e = graph.num_edges
    nv = int(np.floor(valid_frac * e))
    nt = int(np.floor(test_frac * e))
    if e == 0 or nv == 0 or nt == 0:
        raise DegenerateInputError(
            f"graph with {e} edges yields empty valid ({nv}) or test ({nt}) split"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(e)
    valid_pos = _canon_sorted(graph.edges[perm[:nv]])
    test_pos = _canon_sorted(graph.edges[perm[nv : nv + nt]])
    train = _canon_sorted(graph.edges[perm[nv + nt :]])

    neg_seed = int(rng.integers(0, 2**63 - 1))
    negs = sample_negatives(graph, nv + nt, exclude=(), seed=neg_seed)
    valid_neg = _canon_sorted(negs[:nv])
    test_neg = _canon_sorted(negs[nv:])

    train_graph = Graph(graph.num_nodes, train, features=graph.features)
    return EdgeSplit(train_graph, valid_pos, valid_neg, test_pos, test_neg)


def _write_pairs(fh, pairs: np.ndarray) -> None:
    fh.write(struct.pack("<I", pairs.shape[0]))
    fh.write(pairs.astype("<u4").tobytes(order="C"))


def _read_pairs(fh) -> np.ndarray:
    (cnt,) = struct.unpack("<I", fh.read(4))
    raw = fh.read(8 * cnt)
    if len(raw) != 8 * cnt:
        raise ParseError("snapshot truncated")
    return np.frombuffer(raw, dtype="<u4").astype(np.int64).reshape(cnt, 2)


def save_split(split: EdgeSplit, path) -> None:
    """Binary snapshot: magic, version, node count, five u32 pair lists."""
    n = split.train_graph.num_nodes
    if n >= 2**32:
        raise CapacityError("snapshot format holds u32 node indices")
    with open(path, "wb") as fh:
        fh.write(_SPLIT_MAGIC)
        fh.write(struct.pack("<I", _SPLIT_VERSION))
        fh.write(struct.pack("<I", n))
        for arr in (
            split.train_edges,
            split.valid_pos,
            split.valid_neg,
            split.test_pos,
            split.test_neg,
        ):
            _write_pairs(fh, arr)


def load_split(path, features=None) -> EdgeSplit:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _SPLIT_MAGIC:
            raise ParseError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _SPLIT_VERSION:
            raise ParseError(f"{path}: unsupported snapshot version {version}")
        (n,) = struct.unpack("<I", fh.read(4))
        train, vpos, vneg, tpos, tneg = (_read_pairs(fh) for _ in range(5))
    graph = Graph(n, train, features=features)
    return EdgeSplit(graph, vpos, vneg, tpos, tneg)
