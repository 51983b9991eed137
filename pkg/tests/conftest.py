import numpy as np
import pytest

from sta4clc.data import DisasterEvent, PeriodWindow
from sta4clc.graphs import build_multigraph, knn_adjacency, sector_relations
from sta4clc.model import ModelConfig, assemble_batch, init_parameters


def toy_graph(n, n_sectors, seed):
    rng = np.random.default_rng(seed)
    centroids = rng.uniform(0, 100, size=(n, 2))
    adjacency = knn_adjacency(centroids, k=min(2, n - 1))
    sector_visits = {}
    for s in range(n_sectors):
        v = np.full(n, np.nan)
        members = rng.choice(n, size=max(2, int(0.7 * n)), replace=False)
        v[members] = rng.uniform(5, 50, size=members.size)
        sector_visits[400 + s] = v
    sectors = sector_relations(centroids, sector_visits, min_blocks=1, edge_cap=None)
    return build_multigraph(adjacency, sectors, n), centroids


def toy_batch(n=6, T=12, n_sectors=2, n_periods=1, d=4, seed=0, with_events=True):
    """Small synthetic Batch covering every model pathway."""
    rng = np.random.default_rng(seed)
    graph, _ = toy_graph(n, n_sectors, seed)
    block_ids = [f"B{i}" for i in range(n)]
    periods = [PeriodWindow(p, p * (T // 2)) for p in range(n_periods)]
    S = n_periods * n
    X = rng.standard_normal((S, T, 6))
    z = rng.standard_normal((S, d))
    delta = rng.uniform(-0.4, 0.4, S)
    labels = rng.integers(0, 3, S)
    disasters = []
    if with_events:
        g_weeks = periods[-1].start_week + T
        for i, week in enumerate((T // 3, (2 * g_weeks) // 3)):
            sev = {bid: float(s) for bid, s in
                   zip(block_ids, rng.uniform(0, 2.0, n)) if s > 0.5}
            disasters.append(DisasterEvent(f"e{i}", int(week), sev))
    return assemble_batch(X, z, delta, labels, block_ids, periods, disasters, T, graph)


def toy_config(**overrides) -> ModelConfig:
    defaults = dict(hidden_dim=8, attention_heads=2, gat_heads=2, epochs=5, seed=1)
    defaults.update(overrides)
    return ModelConfig(**defaults)


@pytest.fixture
def small_batch():
    return toy_batch()


@pytest.fixture
def small_config():
    return toy_config()


@pytest.fixture
def small_params(small_batch, small_config):
    return init_parameters(small_config, d_static=small_batch.z.shape[1],
                           n_relations=small_batch.n_relations,
                           rng=np.random.default_rng(7))
