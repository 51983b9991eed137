"""Assembly of model-ready feature tensors from a Dataset.

Samples are (block, period) pairs ordered period-major with blocks in node
order, so each period occupies a contiguous slab aligned with the graph.
The six temporal channels per sample are: weekly visits, active-POI count,
rolling resilience (NaN while undefined), then weekly precipitation sum,
wind max and pressure mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ColumnScaler, DataError, Dataset, derive_label, weekly_aggregate_weather
from .resilience import ResilienceConfig, rolling_resilience

N_CHANNELS = 6


@dataclass
class FeatureSet:
    """Raw (unstandardized) tensors plus sample bookkeeping."""

    X: np.ndarray          # (S, T, 6), resilience channel may contain NaN
    z: np.ndarray          # (S, d)
    delta_y: np.ndarray    # (S,)
    labels: np.ndarray     # (S,) int
    block_index: np.ndarray   # (S,) node index of each sample
    period_index: np.ndarray  # (S,) position of the sample's period
    block_ids: list           # node order
    periods: list
    visits_global: np.ndarray  # (n_blocks, G) integer weekly visits
    sector_visits: dict        # sector -> (n_blocks,) totals, NaN where absent

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_nodes(self) -> int:
        return len(self.block_ids)

    def period_slice(self, p: int) -> slice:
        n = self.n_nodes
        return slice(p * n, (p + 1) * n)


def build_features(dataset: Dataset,
                   res_config: ResilienceConfig = ResilienceConfig()) -> FeatureSet:
    """Aggregate, score resilience and label every (block, period) sample."""
    block_ids = dataset.block_ids
    index = dataset.block_index()
    n, T = len(block_ids), dataset.T
    G = dataset.global_weeks

    visits = np.zeros((n, G), dtype=np.int64)
    active = np.zeros((n, G), dtype=np.int64)
    sector_totals: dict = {}
    for poi in dataset.pois:
        i = index[poi.block_id]
        visits[i] += poi.visits
        active[i] += (poi.visits >= 1).astype(np.int64)
        sv = sector_totals.setdefault(poi.sector, np.full(n, np.nan))
        sv[i] = (0.0 if np.isnan(sv[i]) else sv[i]) + float(poi.visits.sum())

    # resilience over the full record, sliced per period below
    resil = np.empty((n, G))
    for i in range(n):
        resil[i] = rolling_resilience(visits[i].astype(np.float64), res_config)

    weekly_weather = {}
    for bid in block_ids:
        daily = dataset.weather[bid]
        weekly_weather[bid] = weekly_aggregate_weather(daily, dataset.max_weather_gap)

    by_period = {}
    for b in dataset.blocks:
        key = (b.period_id, b.block_id)
        if key in by_period:
            raise DataError(f"duplicate blocks.csv row for block {b.block_id!r} "
                            f"period {b.period_id}")
        by_period[key] = b

    S = len(dataset.periods) * n
    d = dataset.blocks[0].z.size
    X = np.empty((S, T, N_CHANNELS))
    z = np.empty((S, d))
    delta = np.empty(S)
    labels = np.empty(S, dtype=np.int64)
    block_idx = np.empty(S, dtype=np.int64)
    period_idx = np.empty(S, dtype=np.int64)

    s = 0
    for p, period in enumerate(dataset.periods):
        lo, hi = period.start_week, period.start_week + T
        for i, bid in enumerate(block_ids):
            rec = by_period.get((period.period_id, bid))
            if rec is None:
                raise DataError(f"block {bid!r} has no blocks.csv row for "
                                f"period {period.period_id}")
            X[s, :, 0] = visits[i, lo:hi]
            X[s, :, 1] = active[i, lo:hi]
            X[s, :, 2] = resil[i, lo:hi]
            X[s, :, 3:6] = weekly_weather[bid][lo:hi]
            z[s] = rec.z
            delta[s] = rec.y_end - rec.y_start
            labels[s] = derive_label(rec.y_start, rec.y_end, dataset.label_config)
            block_idx[s] = i
            period_idx[s] = p
            s += 1

    return FeatureSet(X=X, z=z, delta_y=delta, labels=labels,
                      block_index=block_idx, period_index=period_idx,
                      block_ids=block_ids, periods=list(dataset.periods),
                      visits_global=visits, sector_visits=sector_totals)


@dataclass
class FoldScalers:
    """Standardization statistics fitted on one fold's training samples."""

    temporal: ColumnScaler  # over the 6 channels, pooled across weeks
    static: ColumnScaler    # over the z columns


def fit_fold_scalers(feats: FeatureSet, train_idx: np.ndarray) -> FoldScalers:
    pooled = feats.X[train_idx].reshape(-1, N_CHANNELS)
    return FoldScalers(temporal=ColumnScaler.fit(pooled),
                       static=ColumnScaler.fit(feats.z[train_idx]))


def apply_scalers(feats: FeatureSet, scalers: FoldScalers):
    """Standardized (X, z); undefined resilience maps to 0 afterwards."""
    S, T, _ = feats.X.shape
    X = scalers.temporal.transform(feats.X.reshape(-1, N_CHANNELS)).reshape(S, T, N_CHANNELS)
    X[np.isnan(X)] = 0.0
    z = scalers.static.transform(feats.z)
    return X, z
