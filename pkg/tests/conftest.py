import numpy as np
import pytest

from lanegraph import map_model as mm
from lanegraph.preprocess import PatchConfig, preprocess_map
from lanegraph.synth_data import CityConfig, generate_city


def path_graph(n, spacing=1.0):
    nodes = np.c_[np.arange(n) * spacing, np.zeros(n)]
    edges = np.c_[np.arange(n - 1), np.arange(1, n)]
    return mm.PlainGraph(nodes, edges)


def plus_graph():
    nodes = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)]
    return mm.PlainGraph(nodes, [(0, 1), (0, 2), (0, 3), (0, 4)])


def same_graph(g1: mm.PlainGraph, g2: mm.PlainGraph) -> bool:
    """Isomorphism that also matches node coordinates (up to 1e-6)."""
    import networkx as nx

    a, b = g1.to_networkx(), g2.to_networkx()
    for g, G in ((g1, a), (g2, b)):
        for i in G.nodes:
            G.nodes[i]["xy"] = g.nodes[i]
    return nx.is_isomorphic(a, b, node_match=lambda u, v: np.allclose(u["xy"], v["xy"], atol=1e-6))


@pytest.fixture(scope="session")
def city():
    return generate_city(CityConfig(seed=1))


@pytest.fixture(scope="session")
def patches(city):
    items, _ = preprocess_map(city.graph, PatchConfig(seed=1), 16)
    return items


@pytest.fixture(scope="session")
def hier_patches(patches):
    return [h for *_, h in patches]


@pytest.fixture(scope="session")
def trained_small(hier_patches):
    """A coordinate_first model fitted to the 16 fixture patches (desk size)."""
    from lanegraph import hdmapgen as hg

    cfg = hg.TrainConfig("coordinate_first", hidden=48, layers=2, epochs=120, batch_size=4, lr=5e-3, seed=0)
    model, hist = hg.train(hier_patches, cfg)
    return model, hist
