"""Multi-relational spatial graph construction.

Relation 0 is always the inverse-distance k-nearest-neighbor adjacency.
Further relations connect blocks hosting businesses of the same 3-digit
sector, weighted by a gravity rule: total sector visits of both endpoints
divided by squared centroid distance.  The diffusion regularizer consumes
the combinatorial Laplacian of the adjacency relation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

# distances below this clamp (meters) are treated as coincident centroids
D_MIN = 1.0


@dataclass(frozen=True)
class Relation:
    """One undirected weighted edge set; edges stored once with i < j."""

    name: str
    edges: np.ndarray   # (E, 2) int64, i < j
    weights: np.ndarray  # (E,) float64, > 0

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if edges.shape[0] != weights.shape[0]:
            raise ValueError(f"{self.name}: {edges.shape[0]} edges but {weights.shape[0]} weights")
        if edges.size and np.any(edges[:, 0] >= edges[:, 1]):
            raise ValueError(f"{self.name}: edges must satisfy i < j (no self-loops)")
        if edges.size:
            uniq = {(int(i), int(j)) for i, j in edges}
            if len(uniq) != edges.shape[0]:
                raise ValueError(f"{self.name}: duplicate edges")
        if weights.size and not (np.all(np.isfinite(weights)) and np.all(weights > 0)):
            raise ValueError(f"{self.name}: weights must be finite and positive")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "weights", weights)

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    def node_set(self) -> np.ndarray:
        return np.unique(self.edges.reshape(-1)) if self.n_edges else np.empty(0, dtype=np.int64)

    def dense_weight_matrix(self, n: int) -> np.ndarray:
        w = np.zeros((n, n))
        if self.n_edges:
            i, j = self.edges[:, 0], self.edges[:, 1]
            w[i, j] = self.weights
            w[j, i] = self.weights
        return w


@dataclass(frozen=True)
class MultiRelationalGraph:
    n_nodes: int
    relations: list

    def __post_init__(self):
        if not self.relations:
            raise ValueError("a graph needs at least one relation")
        names = [r.name for r in self.relations]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate relation name(s): {', '.join(dupes)}")
        for r in self.relations:
            if r.n_edges and r.edges.max() >= self.n_nodes:
                raise ValueError(
                    f"relation {r.name!r} references node {int(r.edges.max())} "
                    f">= n_nodes {self.n_nodes}")

    @property
    def R(self) -> int:
        return len(self.relations)


def knn_adjacency(centroids: np.ndarray, k: int = 10) -> Relation:
    """Symmetrized k-nearest-neighbor relation with inverse-distance weights."""
    centroids = np.asarray(centroids, dtype=np.float64)
    n = centroids.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 nodes for a knn graph, got {n}")
    if not np.all(np.isfinite(centroids)):
        raise ValueError("centroids must be finite")
    k_eff = min(k, n - 1)
    tree = cKDTree(centroids)
    dist, nbr = tree.query(centroids, k=k_eff + 1)
    pairs = {}
    for i in range(n):
        for d, j in zip(dist[i], nbr[i]):
            if j == i:
                continue
            a, b = (i, int(j)) if i < j else (int(j), i)
            pairs[(a, b)] = 1.0 / max(float(d), D_MIN)
    if pairs:
        keys = sorted(pairs)
        edges = np.array(keys, dtype=np.int64)
        weights = np.array([pairs[kk] for kk in keys])
    else:
        edges = np.empty((0, 2), dtype=np.int64)
        weights = np.empty(0)
    return Relation(name="adjacency", edges=edges, weights=weights)


def sector_relations(centroids: np.ndarray, sector_visits: dict,
                     min_blocks: int = 20, edge_cap: int | None = 15) -> list:
    """Gravity-weighted competition relations, one per qualifying sector.

    `sector_visits` maps a 3-digit sector code to a length-n vector of total
    per-block visits for that sector over the record; blocks with at least
    one POI of the sector hold a finite (possibly zero) entry, all other
    entries are NaN.  A sector qualifies when strictly more than `min_blocks`
    blocks host it.  Edge weight is V_i * V_j / d_ij^2 with the distance
    clamped below at D_MIN; zero-visit endpoints produce no edge.  When
    `edge_cap` is set, only edges ranking in the top `edge_cap` by weight for
    at least one endpoint (per sector) are kept.
    """
    centroids = np.asarray(centroids, dtype=np.float64)
    out = []
    for sector in sorted(sector_visits):
        visits = np.asarray(sector_visits[sector], dtype=np.float64)
        members = np.flatnonzero(~np.isnan(visits))
        if members.size <= min_blocks:
            log.info("sector %s skipped: %d block(s) <= threshold %d",
                     sector, members.size, min_blocks)
            continue
        v = visits[members]
        pos = v > 0
        active = members[pos]
        va = v[pos]
        m = active.size
        if m < 2:
            log.info("sector %s skipped: fewer than 2 blocks with visits", sector)
            continue
        diff = centroids[active][:, None, :] - centroids[active][None, :, :]
        d = np.sqrt((diff ** 2).sum(axis=2))
        d = np.maximum(d, D_MIN)
        w = (va[:, None] * va[None, :]) / (d * d)
        np.fill_diagonal(w, 0.0)
        if edge_cap is not None and m > edge_cap + 1:
            keep = np.zeros_like(w, dtype=bool)
            order = np.argsort(-w, axis=1, kind="stable")
            cols = order[:, :edge_cap]
            rows = np.repeat(np.arange(m), edge_cap)
            keep[rows, cols.reshape(-1)] = True
            keep |= keep.T  # an edge survives if either endpoint ranks it
            w = np.where(keep, w, 0.0)
        iu, ju = np.triu_indices(m, k=1)
        wu = w[iu, ju]
        nz = wu > 0
        gi, gj = active[iu[nz]], active[ju[nz]]
        edges = np.stack([np.minimum(gi, gj), np.maximum(gi, gj)], axis=1)
        out.append(Relation(name=f"sector_{sector}", edges=edges, weights=wu[nz]))
    return out


def build_multigraph(adjacency: Relation, sectors: list, n_nodes: int) -> MultiRelationalGraph:
    """Assemble relations with adjacency first, sectors in ascending code order."""
    if adjacency.name != "adjacency":
        raise ValueError(f"first relation must be the adjacency, got {adjacency.name!r}")
    ordered = sorted(sectors, key=lambda r: r.name)
    return MultiRelationalGraph(n_nodes=n_nodes, relations=[adjacency] + ordered)


def laplacian(adjacency: Relation, n: int) -> np.ndarray:
    """Combinatorial Laplacian L = D - W of the adjacency relation."""
    w = adjacency.dense_weight_matrix(n)
    return np.diag(w.sum(axis=1)) - w


def save_graph_json(graph: MultiRelationalGraph, path) -> None:
    payload = {
        "n_nodes": graph.n_nodes,
        "relations": [
            {"name": r.name,
             "edges": [[int(i), int(j), float(w)]
                       for (i, j), w in zip(r.edges, r.weights)]}
            for r in graph.relations
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_graph_json(path) -> MultiRelationalGraph:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    relations = []
    for rel in payload["relations"]:
        rows = rel["edges"]
        edges = np.array([[r[0], r[1]] for r in rows], dtype=np.int64).reshape(-1, 2)
        weights = np.array([r[2] for r in rows], dtype=np.float64)
        relations.append(Relation(name=rel["name"], edges=edges, weights=weights))
    return MultiRelationalGraph(n_nodes=payload["n_nodes"], relations=relations)
