import numpy as np
import pytest

from cflink.graph import Graph, load_edge_list, load_features

DATA = {
    "cora": "data/cora",
    "citeseer": "data/citeseer",
}


@pytest.fixture
def path4():
    # 0-1-2-3
    return Graph(4, np.array([[0, 1], [1, 2], [2, 3]]))


@pytest.fixture
def triangle_pendant():
    # triangle 0-1-2 with pendant 3 hanging off node 0
    return Graph(4, np.array([[0, 1], [1, 2], [0, 2], [0, 3]]))


@pytest.fixture
def two_cliques():
    # two 4-cliques, disconnected
    edges = []
    for base in (0, 4):
        for i in range(4):
            for j in range(i + 1, 4):
                edges.append([base + i, base + j])
    return Graph(8, np.array(edges))


@pytest.fixture
def bridged_cliques():
    # two 4-cliques joined by a single bridge edge 3-4
    edges = []
    for base in (0, 4):
        for i in range(4):
            for j in range(i + 1, 4):
                edges.append([base + i, base + j])
    edges.append([3, 4])
    return Graph(8, np.array(edges))


@pytest.fixture
def two_triangles_bridge():
    # triangles 0-1-2 and 3-4-5 joined by 2-3
    return Graph(
        6,
        np.array([[0, 1], [1, 2], [0, 2], [3, 4], [4, 5], [3, 5], [2, 3]]),
    )


@pytest.fixture
def k5():
    edges = [[i, j] for i in range(5) for j in range(i + 1, 5)]
    return Graph(5, np.array(edges))


def random_graph(n, p, seed, with_features=None):
    rng = np.random.default_rng(seed)
    mask = rng.random((n, n)) < p
    ii, jj = np.nonzero(np.triu(mask, k=1))
    g = Graph(n, np.stack([ii, jj], axis=1))
    if with_features:
        g = g.with_features(rng.standard_normal((n, with_features)))
    return g


@pytest.fixture(scope="session")
def cora():
    g = load_edge_list(DATA["cora"] + "/edges.txt")
    return load_features(DATA["cora"] + "/features.txt.gz", g)
