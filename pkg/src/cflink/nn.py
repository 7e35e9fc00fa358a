"""Graph encoder + pair decoder with hand-derived gradients.

Three encoder variants, all 3 layers, no biases:
  gcn    H' = relu(S H W), S = D~^-1/2 (A+I) D~^-1/2, linear last layer
  sage   H' = relu([H | mean_nbr(H)] W), linear last layer
  jknet  relu on every layer, output = mean of the three layer outputs
Decoder: MLP (repr+1) -> 64 -> 64 -> 1 with biases and ELU, applied to
rows [z_i * z_j, t]. Outputs are logits; the sigmoid lives in the loss.

The CSR spmm is the per-epoch hot loop: numba kernel when enabled,
reduceat fallback otherwise. Both accumulate per row in index order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ._accel import JIT_ENABLED, njit, prange
from .errors import ConfigError, ParseError, ShapeError
from .graph import Graph

ARCHS = ("gcn", "sage", "jknet")
DEC_HIDDEN = 64
NUM_LAYERS = 3

_CKPT_MAGIC = b"CFCK"
_CKPT_VERSION = 1
_ARCH_CODE = {"gcn": 0, "sage": 1, "jknet": 2}
_CODE_ARCH = {v: k for k, v in _ARCH_CODE.items()}


def normalize_adjacency(graph: Graph) -> sp.csr_matrix:
    """Symmetric GCN operator D~^-1/2 (A + I) D~^-1/2 as CSR."""
    n = graph.num_nodes
    adj = sp.csr_matrix(
        (np.ones(graph.indices.shape[0]), graph.indices, graph.indptr),
        shape=(n, n),
    )
    a_tilde = (adj + sp.eye(n, format="csr")).tocsr()
    dinv = 1.0 / np.sqrt(np.asarray(a_tilde.sum(axis=1)).ravel())
    dmat = sp.diags(dinv)
    out = (dmat @ a_tilde @ dmat).tocsr()
    out.sort_indices()
    return out


def mean_aggregator(graph: Graph) -> sp.csr_matrix:
    """Row-stochastic neighbor mean M = D^-1 A; isolated rows stay zero."""
    n = graph.num_nodes
    deg = graph.degrees().astype(np.float64)
    dinv = np.zeros(n)
    nz = deg > 0
    dinv[nz] = 1.0 / deg[nz]
    adj = sp.csr_matrix(
        (np.ones(graph.indices.shape[0]), graph.indices, graph.indptr),
        shape=(n, n),
    )
    out = (sp.diags(dinv) @ adj).tocsr()
    out.sort_indices()
    return out


def _csr_arrays(mat: sp.csr_matrix):
    return (
        np.ascontiguousarray(mat.indptr, dtype=np.int64),
        np.ascontiguousarray(mat.indices, dtype=np.int64),
        np.ascontiguousarray(mat.data, dtype=np.float64),
    )


@njit(cache=True, parallel=True)
def _spmm_kernel(indptr, indices, data, h, out):  # pragma: no cover - jit
    for i in prange(indptr.shape[0] - 1):
        for p in range(indptr[i], indptr[i + 1]):
            w = data[p]
            c = indices[p]
            for f in range(h.shape[1]):
                out[i, f] += w * h[c, f]


def _spmm_numpy(indptr, indices, data, h):
    # left-to-right accumulation per row, matching the kernel bit for bit
    # (reduceat would sum pairwise and drift in the last ulp)
    n = indptr.shape[0] - 1
    out = np.zeros((n, h.shape[1]))
    if indices.shape[0] == 0:
        return out
    contrib = data[:, None] * h[indices]
    for i in range(n):
        s, e = int(indptr[i]), int(indptr[i + 1])
        if s == e:
            continue
        acc = contrib[s].copy()
        for p in range(s + 1, e):
            acc += contrib[p]
        out[i] = acc
    return out


def spmm(op, h: np.ndarray) -> np.ndarray:
    """CSR @ dense with a fixed per-row accumulation order."""
    indptr, indices, data = op
    h = np.ascontiguousarray(h, dtype=np.float64)
    if h.shape[0] != indptr.shape[0] - 1:
        raise ShapeError(f"operand rows {h.shape[0]} != matrix dim {indptr.shape[0] - 1}")
    if JIT_ENABLED:
        out = np.zeros((indptr.shape[0] - 1, h.shape[1]))
        _spmm_kernel(indptr, indices, data, h, out)
        return out
    return _spmm_numpy(indptr, indices, data, h)


class GraphOperators:
    """Preassembled propagation operators for one training graph."""

    def __init__(self, graph: Graph, arch: str):
        if arch not in ARCHS:
            raise ConfigError(f"unknown arch {arch!r}; choose from {ARCHS}")
        self.arch = arch
        self.num_nodes = graph.num_nodes
        self._first = (None, None)
        if arch in ("gcn", "jknet"):
            self.s_op = _csr_arrays(normalize_adjacency(graph))
        else:
            m = mean_aggregator(graph)
            self.m_op = _csr_arrays(m)
            self.mt_op = _csr_arrays(m.T.tocsr())

    def first_agg(self, op, x: np.ndarray) -> np.ndarray:
        """Layer-0 aggregation cached by input identity: node features
        never change across epochs, so this spmm is loop-invariant."""
        src, val = self._first
        if src is x:
            return val
        val = spmm(op, x)
        self._first = (x, val)
        return val


@dataclass
class ModelParams:
    """Weights plus same-shaped gradient accumulators."""

    arch: str
    enc_w: list
    dec_w: list
    dec_b: list
    enc_gw: list = None
    dec_gw: list = None
    dec_gb: list = None

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.enc_gw is None:
            self.enc_gw = [np.zeros_like(w) for w in self.enc_w]
            self.dec_gw = [np.zeros_like(w) for w in self.dec_w]
            self.dec_gb = [np.zeros_like(b) for b in self.dec_b]

    @property
    def repr_dim(self) -> int:
        return int(self.enc_w[-1].shape[1])

    def zero_grads(self) -> None:
        for g in self.enc_gw + self.dec_gw + self.dec_gb:
            g[:] = 0.0

    def param_blocks(self):
        """Ordered (name, weight, grad) triples; the optimizer and the
        checkpoint both follow this order."""
        out = []
        for i, (w, g) in enumerate(zip(self.enc_w, self.enc_gw)):
            out.append((f"enc_w{i}", w, g))
        for i, (w, g) in enumerate(zip(self.dec_w, self.dec_gw)):
            out.append((f"dec_w{i}", w, g))
        for i, (b, g) in enumerate(zip(self.dec_b, self.dec_gb)):
            out.append((f"dec_b{i}", b, g))
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            arch=self.arch,
            enc_w=[w.copy() for w in self.enc_w],
            dec_w=[w.copy() for w in self.dec_w],
            dec_b=[b.copy() for b in self.dec_b],
        )


def _glorot(rng, fan_in, fan_out):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


def init_params(arch, feature_dim, hidden, repr_dim, rng) -> ModelParams:
    """Seeded Glorot-uniform weights, zero decoder biases.

    jknet averages its layer outputs, so it needs hidden == repr_dim.
    """
    if arch not in ARCHS:
        raise ConfigError(f"unknown arch {arch!r}")
    if min(feature_dim, hidden, repr_dim) < 1:
        raise ConfigError("dims must be >= 1")
    if arch == "jknet" and hidden != repr_dim:
        raise ConfigError("jknet averages layer outputs: hidden must equal repr_dim")
    dims = [(feature_dim, hidden), (hidden, hidden), (hidden, repr_dim)]
    if arch == "sage":
        dims = [(2 * fi, fo) for fi, fo in dims]
    enc_w = [_glorot(rng, fi, fo) for fi, fo in dims]
    dec_dims = [(repr_dim + 1, DEC_HIDDEN), (DEC_HIDDEN, DEC_HIDDEN), (DEC_HIDDEN, 1)]
    dec_w = [_glorot(rng, fi, fo) for fi, fo in dec_dims]
    dec_b = [np.zeros(fo) for _, fo in dec_dims]
    return ModelParams(arch=arch, enc_w=enc_w, dec_w=dec_w, dec_b=dec_b)


def re_init_decoder(params: ModelParams, rng) -> None:
    """Fresh decoder weights in place; encoder arrays untouched."""
    h = params.repr_dim
    dec_dims = [(h + 1, DEC_HIDDEN), (DEC_HIDDEN, DEC_HIDDEN), (DEC_HIDDEN, 1)]
    for i, (fi, fo) in enumerate(dec_dims):
        params.dec_w[i][:] = _glorot(rng, fi, fo)
        params.dec_b[i][:] = 0.0
        params.dec_gw[i][:] = 0.0
        params.dec_gb[i][:] = 0.0


def encoder_forward(params: ModelParams, ops: GraphOperators, x: np.ndarray):
    """Returns (Z, cache). The cache holds per-layer inputs needed by
    encoder_backward."""
    if ops.arch != params.arch:
        raise ConfigError(f"operators built for {ops.arch!r}, params are {params.arch!r}")
    x = np.ascontiguousarray(x, dtype=np.float64)
    expect = params.enc_w[0].shape[0] // (2 if params.arch == "sage" else 1)
    if x.shape[1] != expect:
        raise ShapeError(f"feature dim {x.shape[1]} != expected {expect}")
    arch = params.arch
    cache = []
    h = x
    if arch in ("gcn", "jknet"):
        outs = []
        for l, w in enumerate(params.enc_w):
            a = ops.first_agg(ops.s_op, h) if l == 0 else spmm(ops.s_op, h)
            p = a @ w
            last = l == NUM_LAYERS - 1
            if arch == "jknet" or not last:
                hn = np.maximum(p, 0.0)
            else:
                hn = p
            cache.append((a, p))
            outs.append(hn)
            h = hn
        z = sum(outs) / float(NUM_LAYERS) if arch == "jknet" else h
        return z, cache
    for l, w in enumerate(params.enc_w):
        mh = ops.first_agg(ops.m_op, h) if l == 0 else spmm(ops.m_op, h)
        c = np.concatenate([h, mh], axis=1)
        p = c @ w
        hn = np.maximum(p, 0.0) if l < NUM_LAYERS - 1 else p
        cache.append((c, p))
        h = hn
    return h, cache


def encoder_backward(params: ModelParams, ops: GraphOperators, cache, dz: np.ndarray):
    """Accumulates encoder weight gradients for an upstream dL/dZ."""
    arch = params.arch
    if arch == "jknet":
        g = np.zeros_like(dz)
        for l in range(NUM_LAYERS - 1, -1, -1):
            a, p = cache[l]
            g = g + dz / float(NUM_LAYERS)
            dp = g * (p > 0.0)
            params.enc_gw[l] += a.T @ dp
            if l > 0:  # the input gradient is never consumed
                g = spmm(ops.s_op, dp @ params.enc_w[l].T)
        return
    if arch == "gcn":
        g = dz
        for l in range(NUM_LAYERS - 1, -1, -1):
            a, p = cache[l]
            dp = g if l == NUM_LAYERS - 1 else g * (p > 0.0)
            params.enc_gw[l] += a.T @ dp
            if l > 0:
                g = spmm(ops.s_op, dp @ params.enc_w[l].T)
        return
    g = dz
    for l in range(NUM_LAYERS - 1, -1, -1):
        c, p = cache[l]
        dp = g if l == NUM_LAYERS - 1 else g * (p > 0.0)
        params.enc_gw[l] += c.T @ dp
        if l > 0:
            dc = dp @ params.enc_w[l].T
            d = c.shape[1] // 2
            g = dc[:, :d] + spmm(ops.mt_op, dc[:, d:])


def pair_rows(z: np.ndarray, pairs: np.ndarray, tbits: np.ndarray) -> np.ndarray:
    """Decoder inputs [z_i * z_j, t], one row per pair."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    t = np.asarray(tbits, dtype=np.float64).reshape(-1, 1)
    if t.shape[0] != pairs.shape[0]:
        raise ShapeError("pairs and treatments disagree in length")
    prod = z[pairs[:, 0]] * z[pairs[:, 1]]
    return np.concatenate([prod, t], axis=1)


def pair_rows_backward(drows: np.ndarray, z: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    """dL/dZ contribution of rows built by pair_rows (t column ignored)."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    dz = np.zeros_like(z)
    dprod = drows[:, :-1]
    np.add.at(dz, pairs[:, 0], dprod * z[pairs[:, 1]])
    np.add.at(dz, pairs[:, 1], dprod * z[pairs[:, 0]])
    return dz


def _elu(x):
    return np.where(x > 0.0, x, np.expm1(x))


def _delu(x):
    return np.where(x > 0.0, 1.0, np.exp(x))


def decoder_forward(params: ModelParams, rows: np.ndarray):
    """Logits for pair rows; empty input gives an empty output."""
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != params.repr_dim + 1:
        raise ShapeError(
            f"decoder rows must be (M, {params.repr_dim + 1}), got {rows.shape}"
        )
    w1, w2, w3 = params.dec_w
    b1, b2, b3 = params.dec_b
    p1 = rows @ w1 + b1
    e1 = _elu(p1)
    p2 = e1 @ w2 + b2
    e2 = _elu(p2)
    logits = (e2 @ w3 + b3).ravel()
    return logits, (rows, p1, e1, p2, e2)


def decoder_backward(params: ModelParams, cache, dlogits: np.ndarray) -> np.ndarray:
    """Accumulates decoder gradients, returns dL/drows."""
    rows, p1, e1, p2, e2 = cache
    w1, w2, w3 = params.dec_w
    d3 = np.asarray(dlogits, dtype=np.float64).reshape(-1, 1)
    params.dec_gw[2] += e2.T @ d3
    params.dec_gb[2] += d3.sum(axis=0)
    d2 = (d3 @ w3.T) * _delu(p2)
    params.dec_gw[1] += e1.T @ d2
    params.dec_gb[1] += d2.sum(axis=0)
    d1 = (d2 @ w2.T) * _delu(p1)
    params.dec_gw[0] += rows.T @ d1
    params.dec_gb[0] += d1.sum(axis=0)
    return d1 @ w1.T


def save_params(params: ModelParams, path) -> None:
    """Versioned binary checkpoint: named little-endian f64 arrays."""
    blocks = params.param_blocks()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<B", _ARCH_CODE[params.arch]))
        fh.write(struct.pack("<I", len(blocks)))
        for name, arr, _ in blocks:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ParseError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CKPT_VERSION:
            raise ParseError(f"{path}: unsupported checkpoint version {version}")
        (code,) = struct.unpack("<B", fh.read(1))
        if code not in _CODE_ARCH:
            raise ParseError(f"{path}: unknown arch code {code}")
        (count,) = struct.unpack("<I", fh.read(4))
        named = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(
                struct.unpack("<I", fh.read(4))[0] for _ in range(ndim)
            )
            size = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * size)
            if len(raw) != 8 * size:
                raise ParseError(f"{path}: truncated array {name}")
            named[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

    def take(prefix):
        keys = sorted(k for k in named if k.startswith(prefix))
        return [named[k] for k in keys]

    enc_w, dec_w, dec_b = take("enc_w"), take("dec_w"), take("dec_b")
    if len(enc_w) != NUM_LAYERS or len(dec_w) != 3 or len(dec_b) != 3:
        raise ParseError(f"{path}: incomplete parameter set")
    return ModelParams(
        arch=_CODE_ARCH[code], enc_w=enc_w, dec_w=dec_w, dec_b=dec_b
    )
