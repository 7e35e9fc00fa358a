"""Timing harness for the two hot kernels: CSR matmul and the matcher.

Each kernel runs through the plain numpy fallback and, when numba is
active, through the jit path. Outputs must agree bit for bit before any
timing is reported; a speedup column follows. Run from the repo root:

    python benchmarks/bench_kernels.py --nodes 3000 --queries 400

CFLINK_JIT=0 in the environment skips the numba columns entirely.
"""

import argparse
import time

import numpy as np

import cflink.matching as matching
import cflink.nn as nn
from cflink._accel import JIT_ENABLED
from cflink.embed import laplacian_eigenmap
from cflink.graph import Graph, sample_negatives
from cflink.matching import CfMatcher, MatchConfig, gamma_from_percentile
from cflink.nn import GraphOperators
from cflink.treatments import kcore_treatment


def random_graph(n: int, avg_degree: float, seed: int) -> Graph:
    rng = np.random.default_rng(seed)
    p = min(1.0, avg_degree / max(1, n - 1))
    mask = rng.random((n, n)) < p
    ii, jj = np.nonzero(np.triu(mask, 1))
    return Graph(n, np.stack([ii, jj], axis=1))


def timed(fn, repeats: int):
    best = float("inf")
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return out, best


def both_paths(module, fn, repeats: int):
    """Time fn under the numpy fallback and (if built) the jit path."""
    saved = module.JIT_ENABLED
    try:
        module.JIT_ENABLED = False
        ref, t_np = timed(fn, repeats)
        if not JIT_ENABLED:
            return ref, t_np, None
        module.JIT_ENABLED = True
        fn()  # warm the jit cache outside the timed region
        got, t_jit = timed(fn, repeats)
    finally:
        module.JIT_ENABLED = saved
    if isinstance(ref, tuple):
        agree = all(np.array_equal(a, b) for a, b in zip(ref, got))
    else:
        agree = np.array_equal(ref, got)
    if not agree:
        raise AssertionError("jit and numpy paths disagree")
    return ref, t_np, t_jit


def row(name: str, t_np: float, t_jit):
    if t_jit is None:
        print(f"{name:<18} {1e3 * t_np:>10.2f} ms {'-':>12} {'-':>9}")
    else:
        print(
            f"{name:<18} {1e3 * t_np:>10.2f} ms {1e3 * t_jit:>9.2f} ms "
            f"{t_np / t_jit:>8.1f}x"
        )


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=3000)
    ap.add_argument("--degree", type=float, default=8.0)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--queries", type=int, default=400)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    g = random_graph(args.nodes, args.degree, seed=0)
    print(
        f"graph: {g.num_nodes} nodes, {g.num_edges} edges | "
        f"numba {'active' if JIT_ENABLED else 'disabled'}"
    )

    rng = np.random.default_rng(1)
    h = rng.standard_normal((g.num_nodes, args.dim))
    ops = GraphOperators(g, "gcn")
    _, t_np, t_jit = both_paths(nn, lambda: nn.spmm(ops.s_op, h), args.repeats)
    print(f"{'kernel':<18} {'numpy':>13} {'numba':>12} {'speedup':>9}")
    row("spmm", t_np, t_jit)

    emb = laplacian_eigenmap(g, min(args.dim, 32))
    treat = kcore_treatment(g)
    gamma = gamma_from_percentile(emb, 20.0, seed=0)
    matcher = CfMatcher(emb, treat, MatchConfig(gamma, 20.0), g)
    m = args.queries // 2
    pos = g.edges[rng.choice(g.num_edges, m, replace=False)]
    neg = sample_negatives(g, m, seed=2)
    pairs = np.concatenate([pos, neg])
    tbits = treat.pair_treatments(pairs)
    labels = np.array([1] * m + [0] * m)
    _, t_np, t_jit = both_paths(
        matching, lambda: matcher.match(pairs, tbits, labels), args.repeats
    )
    row(f"match x{2 * m}", t_np, t_jit)


if __name__ == "__main__":
    main()
