import numpy as np
import pytest

from sta4clc.graphs import (MultiRelationalGraph, Relation, build_multigraph,
                            knn_adjacency, laplacian, load_graph_json,
                            save_graph_json, sector_relations)


def brute_force_knn_edges(centroids, k):
    """Independent nearest-neighbor enumeration for the oracle."""
    n = len(centroids)
    pairs = set()
    for i in range(n):
        d = np.linalg.norm(centroids - centroids[i], axis=1)
        d[i] = np.inf
        for j in np.argsort(d, kind="stable")[:k]:
            pairs.add((min(i, j), max(i, j)))
    return pairs


class TestKnnAdjacency:
    def test_collinear_points_k1(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        rel = knn_adjacency(pts, k=1)
        got = {(int(i), int(j)): w for (i, j), w in zip(rel.edges, rel.weights)}
        assert got == {(0, 1): 1.0, (1, 2): 1.0}

    def test_matches_brute_force_enumeration(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 1000, size=(40, 2))
        rel = knn_adjacency(pts, k=5)
        got = {(int(i), int(j)) for i, j in rel.edges}
        assert got == brute_force_knn_edges(pts, 5)

    def test_k_at_least_n_minus_1_gives_complete_graph(self):
        pts = np.random.default_rng(1).uniform(0, 10, size=(6, 2))
        rel = knn_adjacency(pts, k=10)
        assert rel.n_edges == 6 * 5 // 2

    def test_coincident_centroids_clamped(self):
        pts = np.array([[5.0, 5.0], [5.0, 5.0], [9.0, 5.0]])
        rel = knn_adjacency(pts, k=2)
        w = {(int(i), int(j)): w for (i, j), w in zip(rel.edges, rel.weights)}
        assert w[(0, 1)] == 1.0  # 1 / d_min

    def test_too_few_nodes(self):
        with pytest.raises(ValueError):
            knn_adjacency(np.array([[0.0, 0.0]]), k=1)

    def test_weights_are_inverse_distance(self):
        pts = np.array([[0.0, 0.0], [4.0, 0.0], [10.0, 0.0]])
        rel = knn_adjacency(pts, k=1)
        w = {(int(i), int(j)): w for (i, j), w in zip(rel.edges, rel.weights)}
        assert w[(0, 1)] == pytest.approx(0.25)


def visits_map(n, members_visits):
    """sector_visits vector: NaN outside the sector's block set."""
    v = np.full(n, np.nan)
    for i, val in members_visits.items():
        v[i] = val
    return v


class TestSectorRelations:
    def test_gravity_weight_hand_evaluated(self):
        pts = np.array([[0.0, 0.0], [10.0, 0.0], [100.0, 100.0]])
        sv = {445: visits_map(3, {0: 100.0, 1: 50.0})}
        rels = sector_relations(pts, sv, min_blocks=1, edge_cap=None)
        assert len(rels) == 1
        assert rels[0].name == "sector_445"
        assert rels[0].weights[0] == pytest.approx(100.0 * 50.0 / 10.0 ** 2)

    def test_doubling_distance_quarters_weight(self):
        for d, expected in ((10.0, 50.0), (20.0, 12.5)):
            pts = np.array([[0.0, 0.0], [d, 0.0]])
            sv = {445: visits_map(2, {0: 100.0, 1: 50.0})}
            rels = sector_relations(pts, sv, min_blocks=1, edge_cap=None)
            assert rels[0].weights[0] == pytest.approx(expected)

    def test_zero_visit_block_has_no_edges(self):
        pts = np.array([[0.0, 0.0], [10.0, 0.0], [20.0, 0.0]])
        sv = {445: visits_map(3, {0: 0.0, 1: 50.0, 2: 25.0})}
        rels = sector_relations(pts, sv, min_blocks=1, edge_cap=None)
        assert 0 not in rels[0].node_set()

    def test_sector_below_threshold_skipped(self):
        pts = np.random.default_rng(2).uniform(0, 100, size=(30, 2))
        sv = {100: visits_map(30, {i: 10.0 for i in range(20)}),   # exactly 20: skipped
              200: visits_map(30, {i: 10.0 for i in range(21)})}   # 21 > 20: kept
        rels = sector_relations(pts, sv, min_blocks=20, edge_cap=None)
        assert [r.name for r in rels] == ["sector_200"]
        assert rels[0].node_set().size > 20

    def test_edge_cap_keeps_top_ranked_per_node(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(0, 1000, size=(40, 2))
        sv = {300: visits_map(40, {i: rng.uniform(10, 100) for i in range(40)})}
        capped = sector_relations(pts, sv, min_blocks=1, edge_cap=3)[0]
        full = sector_relations(pts, sv, min_blocks=1, edge_cap=None)[0]
        assert capped.n_edges < full.n_edges
        # every kept edge is in at least one endpoint's top-3 by weight
        w_full = full.dense_weight_matrix(40)
        for (i, j), w in zip(capped.edges, capped.weights):
            top_i = np.sort(w_full[i])[::-1][:3]
            top_j = np.sort(w_full[j])[::-1][:3]
            assert w >= top_i.min() or w >= top_j.min()

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        n = 12
        pts = rng.uniform(0, 100, size=(n, 2))
        vals = {i: rng.uniform(1, 50) for i in range(n)}
        sv = {500: visits_map(n, vals)}
        base = sector_relations(pts, sv, min_blocks=1, edge_cap=None)[0]
        perm = rng.permutation(n)
        inv = np.argsort(perm)
        sv_p = {500: visits_map(n, {int(inv[i]): v for i, v in vals.items()})}
        permuted = sector_relations(pts[perm], sv_p, min_blocks=1, edge_cap=None)[0]
        expected = {(min(int(inv[i]), int(inv[j])), max(int(inv[i]), int(inv[j]))): w
                    for (i, j), w in zip(base.edges, base.weights)}
        got = {(int(i), int(j)): w for (i, j), w in zip(permuted.edges, permuted.weights)}
        assert set(got) == set(expected)
        for key in got:
            assert got[key] == pytest.approx(expected[key])


class TestBuildMultigraph:
    def _adjacency(self, n=30):
        pts = np.random.default_rng(5).uniform(0, 100, size=(n, 2))
        return knn_adjacency(pts, k=3), pts

    def test_relation_count_and_order(self):
        adj, pts = self._adjacency()
        rng = np.random.default_rng(6)
        sv = {code: visits_map(30, {i: rng.uniform(1, 9) for i in range(25)})
              for code in (722, 445, 522)}
        sectors = sector_relations(pts, sv, min_blocks=20, edge_cap=None)
        g = build_multigraph(adj, sectors, 30)
        assert g.R == 4
        assert [r.name for r in g.relations] == [
            "adjacency", "sector_445", "sector_522", "sector_722"]

    def test_adjacency_only_graph(self):
        adj, _ = self._adjacency()
        g = build_multigraph(adj, [], 30)
        assert g.R == 1

    def test_duplicate_relation_names_rejected(self):
        adj, _ = self._adjacency()
        dup = Relation(name="sector_445", edges=np.array([[0, 1]]), weights=np.array([1.0]))
        with pytest.raises(ValueError):
            build_multigraph(adj, [dup, dup], 30)

    def test_out_of_range_endpoint_rejected(self):
        adj, _ = self._adjacency()
        with pytest.raises(ValueError):
            build_multigraph(adj, [], 10)


class TestLaplacian:
    def test_two_node_graph(self):
        rel = Relation("adjacency", np.array([[0, 1]]), np.array([0.7]))
        L = laplacian(rel, 2)
        assert np.allclose(L, [[0.7, -0.7], [-0.7, 0.7]])

    def test_three_node_path(self):
        rel = Relation("adjacency", np.array([[0, 1], [1, 2]]), np.array([1.0, 1.0]))
        L = laplacian(rel, 3)
        assert np.allclose(np.diag(L), [1.0, 2.0, 1.0])
        assert np.all(np.abs(L.sum(axis=1)) <= 1e-9)

    def test_empty_edge_set_gives_zero_matrix(self):
        rel = Relation("adjacency", np.empty((0, 2), dtype=np.int64), np.empty(0))
        assert np.array_equal(laplacian(rel, 4), np.zeros((4, 4)))

    def test_constant_vector_in_null_space(self):
        pts = np.random.default_rng(7).uniform(0, 100, size=(25, 2))
        L = laplacian(knn_adjacency(pts, k=4), 25)
        assert np.all(np.abs(L @ np.full(25, 3.3)) <= 1e-9)
        assert np.allclose(L, L.T)
        off = L - np.diag(np.diag(L))
        assert np.all(off <= 0)


class TestGraphJson:
    def test_round_trip(self, tmp_path):
        pts = np.random.default_rng(8).uniform(0, 100, size=(15, 2))
        adj = knn_adjacency(pts, k=3)
        rng = np.random.default_rng(9)
        sv = {445: visits_map(15, {i: rng.uniform(1, 20) for i in range(12)})}
        g = build_multigraph(adj, sector_relations(pts, sv, min_blocks=5, edge_cap=None), 15)
        path = tmp_path / "graph.json"
        save_graph_json(g, path)
        g2 = load_graph_json(path)
        assert g2.n_nodes == g.n_nodes
        assert [r.name for r in g2.relations] == [r.name for r in g.relations]
        for a, b in zip(g.relations, g2.relations):
            assert np.array_equal(a.edges, b.edges)
            assert np.array_equal(a.weights, b.weights)


class TestRelationValidation:
    def test_self_loop_rejected(self):
        with pytest.raises(ValueError):
            Relation("adjacency", np.array([[2, 2]]), np.array([1.0]))

    def test_duplicate_edge_rejected(self):
        with pytest.raises(ValueError):
            Relation("adjacency", np.array([[0, 1], [0, 1]]), np.array([1.0, 2.0]))

    def test_nonpositive_weight_rejected(self):
        with pytest.raises(ValueError):
            Relation("adjacency", np.array([[0, 1]]), np.array([0.0]))
