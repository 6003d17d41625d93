import numpy as np
import pytest
import torch

from geowalk.core.errors import ConfigurationError, GraphParseError, GraphVersionError
from geowalk.services.catalog import Catalog
from geowalk.services.graph import (
    GraphBundle,
    RelationalGraph,
    build_bundle,
    embed_coordinates,
    format_graph,
    graph_statistics,
    knn_graph,
    load_bundle,
    load_graph,
    parse_graph,
    save_bundle,
    save_graph,
    subgraph_permuted,
)
from geowalk.services.manifold import ManifoldSpec, check_point, get_manifold, origin


def naive_knn(coords, spec, k):
    m = get_manifold(spec)
    n = coords.shape[0]
    lists = []
    for i in range(n):
        d = m.dist(coords[i].unsqueeze(0), coords).numpy()
        ranked = sorted((float(d[j]), j) for j in range(n) if j != i)[:k]
        lists.append([(j, dist) for dist, j in ranked])
    return lists


@pytest.fixture
def line_graph():
    coords = torch.tensor([[0.0], [1.0], [2.0], [10.0]], dtype=torch.float64)
    return knn_graph(coords, ManifoldSpec.euclidean(), k=1)


class TestKnn:
    def test_line_example(self, line_graph):
        assert [line_graph.neighbors(i) for i in range(4)] == [
            [(1, 1.0)],
            [(0, 1.0)],
            [(1, 1.0)],
            [(2, 8.0)],
        ]

    def test_complete_graph_when_k_is_n_minus_one(self):
        coords = torch.randn(6, 2, dtype=torch.float64)
        graph = knn_graph(coords, ManifoldSpec.euclidean(), k=5)
        for i in range(6):
            assert sorted(j for j, _ in graph.neighbors(i)) == [j for j in range(6) if j != i]

    @pytest.mark.parametrize("kind", ["euclidean", "hyperbolic", "spherical"])
    def test_brute_force_and_tree_match_oracle(self, small_catalog, specs, kind):
        catalog, _ = small_catalog
        spec = specs[kind]
        points = embed_coordinates(catalog, spec)
        expected = naive_knn(points.coords, spec, 5)
        for limit in (10_000, 1):
            graph = knn_graph(points, spec, 5, brute_force_limit=limit)
            for i in range(catalog.n):
                got = graph.neighbors(i)
                assert [j for j, _ in got] == [j for j, _ in expected[i]]
                np.testing.assert_allclose([d for _, d in got], [d for _, d in expected[i]], rtol=0, atol=1e-12)

    @pytest.mark.slow
    @pytest.mark.parametrize("kind", ["euclidean", "hyperbolic", "spherical"])
    def test_matches_full_distance_matrix_over_many_seeds(self, specs, kind):
        spec, k = specs[kind], 10
        m = get_manifold(spec)
        for seed in range(50):
            rng = np.random.default_rng(seed)
            catalog = Catalog(
                ids=range(500),
                ra=rng.uniform(0, 360, 500),
                dec=np.degrees(np.arcsin(rng.uniform(-1, 1, 500))),
                features=np.zeros((500, 1)),
            )
            coords = embed_coordinates(catalog, spec).coords
            dist = m.dist(coords.unsqueeze(1), coords.unsqueeze(0)).numpy()
            np.fill_diagonal(dist, np.inf)
            order = np.argsort(dist, axis=1, kind="stable")[:, :k]
            limits = (10_000, 1) if seed < 3 else (10_000,)
            for limit in limits:
                graph = knn_graph(coords, spec, k, brute_force_limit=limit)
                np.testing.assert_array_equal(graph.indices.reshape(500, k), order)
                np.testing.assert_allclose(
                    graph.distances.reshape(500, k), np.take_along_axis(dist, order, axis=1), rtol=0, atol=1e-12
                )

    def test_workers_do_not_change_result(self, small_catalog):
        catalog, _ = small_catalog
        spec = ManifoldSpec.spherical(1.0)
        points = embed_coordinates(catalog, spec)
        assert knn_graph(points, spec, 3, workers=1) == knn_graph(points, spec, 3, workers=4)

    def test_every_node_has_k_neighbors(self):
        coords = torch.randn(50, 3, dtype=torch.float64)
        graph = knn_graph(coords, ManifoldSpec.euclidean(), k=5)
        assert (graph.degrees() == 5).all()
        assert graph.directed_edge_count == 250

    @pytest.mark.parametrize("n,k", [(1, 1), (5, 5), (5, 0)])
    def test_rejects_bad_sizes(self, n, k):
        with pytest.raises(ConfigurationError):
            knn_graph(torch.zeros(n, 2, dtype=torch.float64), ManifoldSpec.euclidean(), k)


class TestEmbedding:
    def test_euclidean_is_unit_vector(self):
        catalog = Catalog(["a"], [0.0], [0.0], np.ones((1, 2)))
        np.testing.assert_allclose(embed_coordinates(catalog, ManifoldSpec.euclidean()).coords.numpy(), [[1, 0, 0]])

    def test_spherical_points_sit_at_unit_distance(self, small_catalog):
        catalog, _ = small_catalog
        spec = ManifoldSpec.spherical(1.0)
        points = embed_coordinates(catalog, spec)
        d = get_manifold(spec).dist(points.coords, origin(spec, 3).coords)
        np.testing.assert_allclose(d.numpy(), 1.0, atol=1e-12)

    def test_hyperbolic_points_are_on_the_hyperboloid(self, small_catalog):
        catalog, _ = small_catalog
        spec = ManifoldSpec.hyperbolic(-1.0)
        assert float(check_point(embed_coordinates(catalog, spec).coords, spec)) <= 1e-9


class TestFormat:
    def test_round_trip(self, tmp_path, line_graph):
        assert load_graph(save_graph(line_graph, tmp_path / "g.txt")) == line_graph

    def test_random_graph_round_trip(self, tmp_path):
        coords = torch.randn(300, 4, dtype=torch.float64)
        graph = knn_graph(coords, ManifoldSpec.euclidean(), k=7)
        assert load_graph(save_graph(graph, tmp_path / "g.txt")) == graph

    def test_header(self, line_graph):
        first = format_graph(line_graph).splitlines()[0]
        assert first == "GEOWALK-GRAPH v1 euclidean 0.0 4 1"

    def test_empty_file(self):
        with pytest.raises(GraphParseError):
            parse_graph("")

    def test_unknown_version(self):
        with pytest.raises(GraphVersionError):
            parse_graph("GEOWALK-GRAPH v9 euclidean 0.0 1 0\n0:\n")

    def test_malformed_pair_reports_location(self):
        text = "GEOWALK-GRAPH v1 euclidean 0.0 2 1\n0: (1,1.0)\n1: (0,abc\n"
        with pytest.raises(GraphParseError) as info:
            parse_graph(text)
        assert info.value.line == 3
        assert info.value.offset == 3

    @pytest.mark.parametrize(
        "body",
        [
            "0: (0,1.0)\n1: (0,1.0)\n",
            "0: (5,1.0)\n1: (0,1.0)\n",
            "0: (1,1.0)\n",
            "1: (0,1.0)\n0: (1,1.0)\n",
        ],
    )
    def test_invalid_bodies(self, body):
        with pytest.raises(GraphParseError):
            parse_graph("GEOWALK-GRAPH v1 euclidean 0.0 2 1\n" + body)

    def test_unsorted_distances(self):
        with pytest.raises(GraphParseError):
            parse_graph("GEOWALK-GRAPH v1 euclidean 0.0 3 2\n0: (1,2.0) (2,1.0)\n1:\n2:\n")

    @pytest.mark.parametrize("body", ["0: (1,1.0)\n1:\n", "0: (1,1.0)\n1: (0,1.0) (0,2.0)\n"])
    def test_neighbor_count_must_match_k(self, body):
        with pytest.raises(GraphParseError) as info:
            parse_graph("GEOWALK-GRAPH v1 euclidean 0.0 2 1\n" + body)
        assert info.value.line == 3

    def test_curvature_sign_checked(self):
        with pytest.raises(GraphParseError):
            parse_graph("GEOWALK-GRAPH v1 hyperbolic 1.0 1 0\n0:\n")


class TestBundle:
    def test_build_and_statistics(self, small_catalog, small_bundle):
        catalog, _ = small_catalog
        stats = graph_statistics(small_bundle)
        assert stats["n"] == catalog.n
        assert stats["k"] == 4
        assert set(stats["geometries"]) == {"euclidean", "hyperbolic", "spherical"}
        for entry in stats["geometries"].values():
            assert entry["directed_edges"] == 4 * catalog.n
            assert catalog.n * 4 / 2 <= entry["unique_pairs"] <= catalog.n * 4

    def test_save_and_load(self, tmp_path, small_bundle):
        paths = save_bundle(small_bundle, tmp_path, "graph_{kind}.txt")
        assert sorted(p.name for p in paths.values()) == [
            "graph_euclidean.txt",
            "graph_hyperbolic.txt",
            "graph_spherical.txt",
        ]
        loaded = load_bundle(tmp_path, "graph_{kind}.txt")
        for kind, graph in small_bundle.items():
            assert loaded[kind] == graph

    def test_bundle_requires_equal_node_counts(self, line_graph):
        other = knn_graph(torch.randn(5, 2, dtype=torch.float64), ManifoldSpec.euclidean(), k=1)
        with pytest.raises(ConfigurationError):
            GraphBundle(line_graph, other, line_graph)

    def test_same_catalog_gives_same_graphs(self, small_catalog, small_bundle):
        catalog, _ = small_catalog
        again = build_bundle(catalog, k=4)
        for kind, graph in small_bundle.items():
            assert again[kind] == graph


def test_subgraph_permuted_relabels_nodes(line_graph):
    permuted = subgraph_permuted(line_graph, np.array([3, 2, 1, 0]))
    # old node 3 (now 0) pointed at old node 2 (now 1)
    assert permuted.neighbors(0) == [(1, 8.0)]
    assert permuted.neighbors(3) == [(2, 1.0)]


def test_edge_index_and_pairs(line_graph):
    rows, cols = line_graph.edge_index()
    assert rows.tolist() == [0, 1, 2, 3]
    assert cols.tolist() == [1, 0, 1, 2]
    assert line_graph.undirected_pair_count() == 3


def test_from_neighbor_lists_equality():
    spec = ManifoldSpec.euclidean()
    a = RelationalGraph.from_neighbor_lists(spec, [[(1, 0.5)], [(0, 0.5)]])
    b = RelationalGraph.from_neighbor_lists(spec, [[(1, 0.5)], [(0, 0.5)]])
    assert a == b
    assert a.k == 1
