import numpy as np
import pytest
import scipy.sparse as sp

import cflink.nn as nn
from cflink.errors import ConfigError, ParseError, ShapeError
from cflink.graph import Graph
from cflink.nn import (
    GraphOperators,
    decoder_backward,
    decoder_forward,
    encoder_backward,
    encoder_forward,
    init_params,
    load_params,
    mean_aggregator,
    normalize_adjacency,
    pair_rows,
    pair_rows_backward,
    re_init_decoder,
    save_params,
    spmm,
)
from conftest import random_graph
from oracles import numeric_gradient, relative_errors


def ones_params(arch, f=1, h=1):
    rng = np.random.default_rng(0)
    p = init_params(arch, f, h, h, rng)
    for w in p.enc_w:
        w[:] = 1.0
    return p


class TestOperators:
    def test_gcn_operator_single_edge(self):
        g = Graph(2, np.array([[0, 1]]))
        s = normalize_adjacency(g).toarray()
        assert np.allclose(s, [[0.5, 0.5], [0.5, 0.5]])

    def test_mean_aggregator_path(self, path4):
        m = mean_aggregator(path4).toarray()
        assert m[0].tolist() == [0.0, 1.0, 0.0, 0.0]
        assert m[1].tolist() == [0.5, 0.0, 0.5, 0.0]

    def test_mean_aggregator_isolated_row(self):
        g = Graph(3, np.array([[0, 1]]))
        m = mean_aggregator(g).toarray()
        assert m[2].tolist() == [0.0, 0.0, 0.0]

    def test_unknown_arch(self, path4):
        with pytest.raises(ConfigError):
            GraphOperators(path4, "gat")

    def test_first_agg_cached_by_identity(self, path4):
        ops = GraphOperators(path4, "gcn")
        x = np.random.default_rng(0).standard_normal((4, 3))
        a = ops.first_agg(ops.s_op, x)
        b = ops.first_agg(ops.s_op, x)
        assert a is b
        c = ops.first_agg(ops.s_op, x.copy())
        assert c is not b and np.array_equal(c, b)


class TestSpmm:
    def test_matches_scipy(self):
        rng = np.random.default_rng(1)
        mat = sp.random(30, 30, density=0.2, random_state=1, format="csr")
        op = (
            mat.indptr.astype(np.int64),
            mat.indices.astype(np.int64),
            mat.data.astype(np.float64),
        )
        h = rng.standard_normal((30, 5))
        assert np.allclose(spmm(op, h), mat @ h, atol=1e-12)

    def test_jit_and_numpy_agree_bitwise(self):
        rng = np.random.default_rng(2)
        mat = sp.random(40, 40, density=0.15, random_state=2, format="csr")
        op = (
            mat.indptr.astype(np.int64),
            mat.indices.astype(np.int64),
            mat.data.astype(np.float64),
        )
        h = rng.standard_normal((40, 7))
        from cflink.nn import _spmm_numpy

        ref = _spmm_numpy(*op, h)
        got = spmm(op, h)
        assert np.array_equal(got, ref)

    def test_shape_checked(self, path4):
        ops = GraphOperators(path4, "gcn")
        with pytest.raises(ShapeError):
            spmm(ops.s_op, np.zeros((3, 2)))

    def test_edgeless_graph_gives_zero_rows(self):
        g = Graph(3, np.zeros((0, 2)))
        m = mean_aggregator(g)
        op = (
            m.indptr.astype(np.int64),
            m.indices.astype(np.int64),
            m.data.astype(np.float64),
        )
        assert np.array_equal(spmm(op, np.ones((3, 2))), np.zeros((3, 2)))


class TestEncoderForward:
    """Scalar-width hand calculations on a 2-node, 1-edge graph with all
    encoder weights set to 1."""

    @pytest.fixture
    def pair_graph(self):
        return Graph(2, np.array([[0, 1]]))

    def test_gcn_hand_value(self, pair_graph):
        # S x = [1.5, 1.5] stays fixed through relu layers
        z, _ = encoder_forward(
            ones_params("gcn"), GraphOperators(pair_graph, "gcn"), np.array([[1.0], [2.0]])
        )
        assert np.allclose(z, [[1.5], [1.5]])

    def test_jknet_hand_value(self, pair_graph):
        z, _ = encoder_forward(
            ones_params("jknet"),
            GraphOperators(pair_graph, "jknet"),
            np.array([[1.0], [2.0]]),
        )
        assert np.allclose(z, [[1.5], [1.5]])  # mean of three equal layers

    def test_sage_hand_value(self, pair_graph):
        # each layer maps h to h + mean_nbr(h): 3 -> 6 -> 12
        z, _ = encoder_forward(
            ones_params("sage"),
            GraphOperators(pair_graph, "sage"),
            np.array([[1.0], [2.0]]),
        )
        assert np.allclose(z, [[12.0], [12.0]])

    def test_zero_features_give_zero_codes(self):
        g = random_graph(10, 0.3, seed=0)
        for arch in ("gcn", "sage", "jknet"):
            params = init_params(arch, 4, 8, 8, np.random.default_rng(1))
            z, _ = encoder_forward(params, GraphOperators(g, arch), np.zeros((10, 4)))
            assert np.array_equal(z, np.zeros((10, 8)))

    def test_permutation_equivariance(self):
        g = random_graph(12, 0.3, seed=3)
        x = np.random.default_rng(4).standard_normal((12, 5))
        perm = np.random.default_rng(5).permutation(12)
        g2 = Graph(12, perm[g.edges])
        for arch in ("gcn", "sage", "jknet"):
            params = init_params(arch, 5, 6, 6, np.random.default_rng(6))
            z1, _ = encoder_forward(params, GraphOperators(g, arch), x)
            x2 = np.empty_like(x)
            x2[perm] = x
            z2, _ = encoder_forward(params, GraphOperators(g2, arch), x2)
            assert np.allclose(z2[perm], z1, atol=1e-12)

    def test_wrong_feature_dim(self, path4):
        params = init_params("gcn", 3, 4, 4, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            encoder_forward(params, GraphOperators(path4, "gcn"), np.zeros((4, 2)))

    def test_arch_mismatch(self, path4):
        params = init_params("gcn", 3, 4, 4, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            encoder_forward(params, GraphOperators(path4, "sage"), np.zeros((4, 3)))


class TestEncoderBackward:
    @pytest.mark.parametrize("arch", ["gcn", "sage", "jknet"])
    def test_weight_gradients_match_finite_differences(self, arch):
        g = random_graph(7, 0.4, seed=10)
        x = np.random.default_rng(11).standard_normal((7, 3))
        r = np.random.default_rng(12).standard_normal((7, 4))
        params = init_params(arch, 3, 4, 4, np.random.default_rng(13))
        ops = GraphOperators(g, arch)

        params.zero_grads()
        _, cache = encoder_forward(params, ops, x)
        encoder_backward(params, ops, cache, r)

        def loss():
            z, _ = encoder_forward(params, ops, x)
            return float((z * r).sum())

        for l in range(3):
            fd = numeric_gradient(loss, params.enc_w[l])
            err = relative_errors(params.enc_gw[l], fd)
            assert err.max() < 1e-6, f"{arch} layer {l}"


class TestPairRows:
    def test_hand_example(self):
        z = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        rows = pair_rows(z, np.array([[0, 2], [1, 1]]), np.array([1, 0]))
        assert rows.tolist() == [[5.0, 12.0, 1.0], [9.0, 16.0, 0.0]]

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            pair_rows(np.zeros((3, 2)), np.array([[0, 1]]), np.array([0, 1]))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(20)
        z = rng.standard_normal((5, 3))
        pairs = np.array([[0, 1], [1, 2], [0, 0], [3, 4]])
        t = np.array([1, 0, 1, 0])
        r = rng.standard_normal((4, 4))

        def loss():
            return float((pair_rows(z, pairs, t) * r).sum())

        dz = pair_rows_backward(r, z, pairs)
        fd = numeric_gradient(loss, z)
        assert relative_errors(dz, fd).max() < 1e-6


class TestDecoder:
    def test_zero_rows_give_bias_logit(self):
        params = init_params("gcn", 3, 4, 4, np.random.default_rng(0))
        params.dec_b[2][:] = 0.75
        logits, _ = decoder_forward(params, np.zeros((2, 5)))
        assert np.allclose(logits, [0.75, 0.75])

    def test_row_width_checked(self):
        params = init_params("gcn", 3, 4, 4, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            decoder_forward(params, np.zeros((2, 4)))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(30)
        params = init_params("gcn", 3, 4, 4, rng)
        rows = rng.standard_normal((6, 5))
        r = rng.standard_normal(6)

        def loss():
            lg, _ = decoder_forward(params, rows)
            return float((lg * r).sum())

        params.zero_grads()
        logits, cache = decoder_forward(params, rows)
        drows = decoder_backward(params, cache, r)

        for i in range(3):
            fd_w = numeric_gradient(loss, params.dec_w[i])
            assert relative_errors(params.dec_gw[i], fd_w).max() < 1e-6
            fd_b = numeric_gradient(loss, params.dec_b[i])
            assert relative_errors(params.dec_gb[i], fd_b).max() < 1e-6
        fd_rows = numeric_gradient(loss, rows)
        assert relative_errors(drows, fd_rows).max() < 1e-6


class TestParams:
    def test_jknet_width_constraint(self):
        with pytest.raises(ConfigError):
            init_params("jknet", 3, 4, 8, np.random.default_rng(0))

    def test_sage_doubles_fan_in(self):
        p = init_params("sage", 3, 4, 5, np.random.default_rng(0))
        assert p.enc_w[0].shape == (6, 4)
        assert p.enc_w[2].shape == (8, 5)

    def test_seeded_init_reproducible(self):
        a = init_params("gcn", 3, 4, 4, np.random.default_rng(7))
        b = init_params("gcn", 3, 4, 4, np.random.default_rng(7))
        for (_, wa, _), (_, wb, _) in zip(a.param_blocks(), b.param_blocks()):
            assert np.array_equal(wa, wb)

    def test_block_order(self):
        p = init_params("gcn", 3, 4, 4, np.random.default_rng(0))
        names = [n for n, _, _ in p.param_blocks()]
        assert names == [
            "enc_w0", "enc_w1", "enc_w2",
            "dec_w0", "dec_w1", "dec_w2",
            "dec_b0", "dec_b1", "dec_b2",
        ]

    def test_copy_is_deep(self):
        p = init_params("gcn", 3, 4, 4, np.random.default_rng(0))
        q = p.copy()
        q.enc_w[0][0, 0] += 1.0
        assert p.enc_w[0][0, 0] != q.enc_w[0][0, 0]

    def test_re_init_decoder_freezes_encoder(self):
        p = init_params("gcn", 3, 4, 4, np.random.default_rng(0))
        enc_before = [w.copy() for w in p.enc_w]
        dec_before = [w.copy() for w in p.dec_w]
        re_init_decoder(p, np.random.default_rng(99))
        for w, ref in zip(p.enc_w, enc_before):
            assert np.array_equal(w, ref)
        assert any(not np.array_equal(w, ref) for w, ref in zip(p.dec_w, dec_before))
        assert all((b == 0).all() for b in p.dec_b)

    def test_re_init_reproducible(self):
        p = init_params("gcn", 3, 4, 4, np.random.default_rng(0))
        q = p.copy()
        re_init_decoder(p, np.random.default_rng(5))
        re_init_decoder(q, np.random.default_rng(5))
        for wa, wb in zip(p.dec_w, q.dec_w):
            assert np.array_equal(wa, wb)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = init_params("sage", 3, 4, 5, np.random.default_rng(3))
        path = tmp_path / "model.ckpt"
        save_params(p, path)
        q = load_params(path)
        assert q.arch == "sage"
        for (na, wa, _), (nb, wb, _) in zip(p.param_blocks(), q.param_blocks()):
            assert na == nb
            assert np.array_equal(wa, wb)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.ckpt"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(ParseError):
            load_params(path)

    def test_truncated(self, tmp_path):
        p = init_params("gcn", 3, 4, 4, np.random.default_rng(3))
        path = tmp_path / "model.ckpt"
        save_params(p, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 40])
        with pytest.raises(ParseError):
            load_params(path)
