import numpy as np
import pytest

from cflink.errors import (
    BoundsError,
    CapacityError,
    ConfigError,
    DegenerateInputError,
    DivergenceError,
)
from cflink.graph import Graph
from cflink.treatments import (
    TreatmentAssignment,
    commn_treatment,
    core_numbers,
    estimate_spectral_radius,
    katz_treatment,
    kcore_treatment,
    louvain_treatment,
    make_treatment,
    modularity,
    propc_treatment,
    save_labels,
    spectral_treatment,
)
from conftest import random_graph
from oracles import best_modularity_partition, katz_closed_form, modularity_oracle


class TestCoreNumbers:
    def test_triangle_with_pendant(self, triangle_pendant):
        assert core_numbers(triangle_pendant).tolist() == [2, 2, 2, 1]

    def test_clique(self, k5):
        assert core_numbers(k5).tolist() == [4] * 5

    def test_path(self, path4):
        assert core_numbers(path4).tolist() == [1, 1, 1, 1]

    def test_edgeless(self):
        g = Graph(4, np.zeros((0, 2)))
        assert core_numbers(g).tolist() == [0, 0, 0, 0]

    def test_permutation_invariance(self):
        g = random_graph(40, 0.15, seed=2)
        base = core_numbers(g)
        perm = np.random.default_rng(1).permutation(40)
        g2 = Graph(40, perm[g.edges])
        assert np.array_equal(core_numbers(g2)[perm], base)

    def test_treatment_groups_equal_core(self, triangle_pendant):
        t = kcore_treatment(triangle_pendant)
        assert t.treatment_of(0, 1) == 1  # both core 2
        assert t.treatment_of(0, 3) == 0  # core 2 vs core 1


class TestModularity:
    def test_matches_oracle_on_random_partitions(self):
        rng = np.random.default_rng(4)
        for trial in range(20):
            g = random_graph(18, 0.25, seed=trial)
            if g.num_edges == 0:
                continue
            labels = rng.integers(0, 4, size=18)
            assert modularity(g, labels) == pytest.approx(
                modularity_oracle(g, labels), abs=1e-12
            )

    def test_single_community_is_zero(self, k5):
        assert modularity(k5, np.zeros(5, dtype=np.int64)) == pytest.approx(0.0)


class TestLouvain:
    def test_recovers_bridged_cliques(self, bridged_cliques):
        t = louvain_treatment(bridged_cliques, seed=0)
        # [DERIVED: exhaustive search over all partitions of 8 nodes]
        best_labels, best_q = best_modularity_partition(bridged_cliques)
        q = modularity(bridged_cliques, t.labels)
        assert q == pytest.approx(best_q, abs=1e-9)
        groups = {tuple(np.flatnonzero(t.labels == c)) for c in np.unique(t.labels)}
        ref = {tuple(np.flatnonzero(best_labels == c)) for c in np.unique(best_labels)}
        assert groups == ref

    def test_beats_singletons(self):
        g = random_graph(30, 0.15, seed=8)
        t = louvain_treatment(g, seed=0)
        assert modularity(g, t.labels) >= modularity(g, np.arange(30))

    def test_deterministic(self):
        g = random_graph(30, 0.15, seed=8)
        a = louvain_treatment(g, seed=3).labels
        b = louvain_treatment(g, seed=3).labels
        assert np.array_equal(a, b)

    def test_labels_densified(self, bridged_cliques):
        labs = louvain_treatment(bridged_cliques, seed=0).labels
        assert set(labs.tolist()) == set(range(len(set(labs.tolist()))))
        assert labs[0] == 0  # first occurrence gets id 0

    def test_edgeless_rejected(self):
        with pytest.raises(DegenerateInputError):
            louvain_treatment(Graph(3, np.zeros((0, 2))))


class TestLabelPropagation:
    def test_separates_disconnected_cliques(self, two_cliques):
        t = propc_treatment(two_cliques, seed=0)
        labs = t.labels
        assert len(set(labs[:4].tolist())) == 1
        assert len(set(labs[4:].tolist())) == 1
        assert labs[0] != labs[4]

    def test_zero_iters_is_identity_partition(self, two_triangles_bridge):
        t = propc_treatment(two_triangles_bridge, seed=0, max_iters=0)
        assert t.labels.tolist() == list(range(6))

    def test_deterministic(self, two_triangles_bridge):
        a = propc_treatment(two_triangles_bridge, seed=5).labels
        b = propc_treatment(two_triangles_bridge, seed=5).labels
        assert np.array_equal(a, b)

    def test_negative_iters_rejected(self, path4):
        with pytest.raises(ConfigError):
            propc_treatment(path4, max_iters=-1)


class TestSpectralClustering:
    def test_two_cliques_split_exactly(self, two_cliques):
        t = spectral_treatment(two_cliques, k=2, seed=0)
        labs = t.labels
        assert len(set(labs[:4].tolist())) == 1
        assert len(set(labs[4:].tolist())) == 1
        assert labs[0] != labs[4]

    def test_deterministic(self, bridged_cliques):
        a = spectral_treatment(bridged_cliques, k=2, seed=1).labels
        b = spectral_treatment(bridged_cliques, k=2, seed=1).labels
        assert np.array_equal(a, b)

    def test_k_validation(self, path4):
        with pytest.raises(ConfigError):
            spectral_treatment(path4, k=0)
        with pytest.raises(ConfigError):
            spectral_treatment(path4, k=5)


class TestCommonNeighbors:
    def test_four_cycle(self):
        g = Graph(4, np.array([[0, 1], [1, 2], [2, 3], [3, 0]]))
        t = commn_treatment(g, threshold=2)
        assert t.treatment_of(0, 2) == 1  # shares {1, 3}
        assert t.treatment_of(0, 1) == 0  # adjacent but share nothing

    def test_threshold_one_on_path(self, path4):
        t = commn_treatment(path4, threshold=1)
        assert t.treatment_of(0, 2) == 1
        assert t.treatment_of(0, 3) == 0

    def test_threshold_validation(self, path4):
        with pytest.raises(ConfigError):
            commn_treatment(path4, threshold=0)

    def test_pair_treatments_matches_scalar(self, bridged_cliques):
        t = commn_treatment(bridged_cliques, threshold=2)
        pairs = np.array([(i, j) for i in range(8) for j in range(8) if i != j])
        vec = t.pair_treatments(pairs)
        for row, (i, j) in zip(vec, pairs):
            assert row == t.treatment_of(i, j)


class TestKatz:
    def test_single_edge_closed_form(self):
        g = Graph(2, np.array([[0, 1]]))
        t = katz_treatment(g, beta=0.1)
        # [DERIVED: geometric series 0.1 / (1 - 0.01)]
        assert t.score_matrix[0, 1] == pytest.approx(0.1 / 0.99, abs=1e-5)

    def test_matches_dense_closed_form(self, triangle_pendant):
        t = katz_treatment(triangle_pendant, beta=0.2, tol=1e-10)
        exact = katz_closed_form(triangle_pendant, 0.2)
        assert np.abs(t.score_matrix - exact).max() < 1e-8

    def test_score_symmetric(self):
        g = random_graph(25, 0.2, seed=6)
        t = katz_treatment(g)
        assert np.array_equal(t.score_matrix, t.score_matrix.T)

    def test_threshold_is_twice_mean_offdiag(self):
        g = random_graph(25, 0.2, seed=6)
        t = katz_treatment(g)
        n = 25
        off = t.score_matrix.sum() - np.trace(t.score_matrix)
        assert t.threshold == pytest.approx(2.0 * off / (n * (n - 1)))

    def test_default_beta_safe(self):
        g = random_graph(30, 0.2, seed=9)
        t = katz_treatment(g)
        assert np.isfinite(t.score_matrix).all()

    def test_divergent_beta_rejected(self):
        g = Graph(2, np.array([[0, 1]]))
        with pytest.raises(DivergenceError):
            katz_treatment(g, beta=1.5)

    def test_needs_two_nodes(self):
        with pytest.raises(DegenerateInputError):
            katz_treatment(Graph(1, np.zeros((0, 2))))

    def test_spectral_radius_of_clique(self, k5):
        # adjacency of K5 has leading eigenvalue n - 1
        assert estimate_spectral_radius(k5) == pytest.approx(4.0, abs=1e-8)


class TestAssignmentContainer:
    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            TreatmentAssignment(kind="other", num_nodes=3)

    def test_cluster_needs_labels(self):
        with pytest.raises(ConfigError):
            TreatmentAssignment(kind="cluster", num_nodes=3)

    def test_bounds_checked(self, path4):
        t = kcore_treatment(path4)
        with pytest.raises(BoundsError):
            t.treatment_of(0, 4)

    def test_dense_matrix_agrees_with_scalar(self, bridged_cliques):
        for t in (
            kcore_treatment(bridged_cliques),
            commn_treatment(bridged_cliques, threshold=2),
            katz_treatment(bridged_cliques, beta=0.1),
        ):
            dense = t.dense_matrix()
            assert (np.diag(dense) == 0).all()
            for i in range(8):
                for j in range(8):
                    if i != j:
                        assert dense[i, j] == t.treatment_of(i, j)

    def test_dense_matrix_capped(self):
        t = TreatmentAssignment(
            kind="cluster", num_nodes=20001, labels=np.zeros(20001, dtype=np.int64)
        )
        with pytest.raises(CapacityError):
            t.dense_matrix()


class TestLabelIO:
    def test_round_trip(self, tmp_path, triangle_pendant):
        t = kcore_treatment(triangle_pendant)
        p = tmp_path / "labels.txt"
        save_labels(t, p)
        rows = [line.split() for line in p.read_text().splitlines()]
        assert [int(r[1]) for r in rows] == [2, 2, 2, 1]

    def test_pair_score_has_no_labels(self, path4):
        t = commn_treatment(path4)
        with pytest.raises(ConfigError):
            save_labels(t, "unused.txt")


class TestDispatch:
    @pytest.mark.parametrize("name", ["kcore", "louvain", "propc", "commn", "katz"])
    def test_known_names(self, name, bridged_cliques):
        t = make_treatment(name, bridged_cliques, seed=0)
        assert t.num_nodes == 8

    def test_specc_uses_default_k(self):
        g = random_graph(40, 0.3, seed=1)
        t = make_treatment("specc", g, seed=0)
        assert t.labels.max() < 16

    def test_unknown_name(self, path4):
        with pytest.raises(ConfigError):
            make_treatment("ward", path4)
