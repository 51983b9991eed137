"""Deterministic synthetic scenario generator.

The generator plants exactly the mechanisms the model is built to exploit:
disaster impacts that decay exponentially and depress visitation, gravity
competition between same-sector blocks, and neighbor diffusion of change
pressure.  Class labels are carved out of a latent change-pressure score by
pooled quantiles so the requested class mix is honored; magnitudes and
y_start draws are arranged so that re-deriving labels from the written CSVs
reproduces the intended classes exactly.

This is a property-validation scaffold, not a calibrated city model.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .data import CLASS_DECREASE, CLASS_INCREASE, CLASS_NOCHANGE, PERIOD_STRIDE_WEEKS
from .graphs import knn_adjacency

SECTOR_CODES = (311, 445, 447, 522, 621, 713, 722, 812)


class InfeasibleScenario(Exception):
    """The generative rule cannot realize the requested class mix."""


@dataclass(frozen=True)
class DisasterSpec:
    week: int            # global week index
    severity: float      # peak impact at the epicenter
    radius: float        # footprint radius, meters


@dataclass(frozen=True)
class ScenarioConfig:
    n_blocks: int = 300
    extent: float = 10000.0        # square study area side, meters
    n_clusters: int = 6
    n_sectors: int = 8
    poi_rate: float = 3.0          # mean extra POIs per block (always >= 1)
    n_attributes: int = 10
    T: int = 104
    n_periods: int = 2
    period_stride: int = PERIOD_STRIDE_WEEKS
    disasters: tuple = (DisasterSpec(30, 1.5, 3200.0),
                        DisasterSpec(75, 2.0, 3600.0),
                        DisasterSpec(130, 1.8, 3200.0))
    alpha_true: float = 0.15       # per-week decay of disturbance
    a_plus_true: float = 0.4       # neighbor reinforcement of expansion
    a_minus_true: float = 0.4      # neighbor reinforcement of decline
    visit_noise: float = 0.05
    label_noise: float = 0.25
    class_proportions: tuple = (0.25, 0.5, 0.25)  # Increase, NoChange, Decrease
    seed: int = 42
    # mixing weights of the change-pressure score
    weight_attractiveness: float = 1.0
    weight_competition: float = 0.9
    weight_impact: float = 1.1
    weight_misc: float = 0.5

    def __post_init__(self):
        if self.n_blocks < 2 or self.n_sectors < 1 or self.T < 8 or self.n_periods < 1:
            raise ValueError("n_blocks, n_sectors, T and n_periods must be positive "
                             "(n_blocks >= 2, T >= 8)")
        props = self.class_proportions
        if len(props) != 3 or any(p < 0 for p in props) or abs(sum(props) - 1) > 1e-9:
            raise ValueError(f"class proportions must be 3 non-negatives summing to 1, "
                             f"got {props}")
        if self.extent <= 0 or self.poi_rate < 0:
            raise ValueError("extent must be positive and poi_rate non-negative")
        for spec in self.disasters:
            if not 0 <= spec.week < self.global_weeks:
                raise ValueError(f"disaster week {spec.week} outside the "
                                 f"{self.global_weeks}-week record")
            if spec.severity <= 0 or spec.radius <= 0:
                raise ValueError("disaster severity and radius must be positive")

    @property
    def global_weeks(self) -> int:
        return (self.n_periods - 1) * self.period_stride + self.T

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        if "disasters" in raw:
            raw["disasters"] = tuple(DisasterSpec(**d) for d in raw["disasters"])
        if "class_proportions" in raw:
            raw["class_proportions"] = tuple(raw["class_proportions"])
        return cls(**raw)


@dataclass
class Scenario:
    """Generated tables plus the ground truth that produced them."""

    blocks: pd.DataFrame
    pois: pd.DataFrame
    weather: pd.DataFrame
    disasters: pd.DataFrame
    truth: dict
    config: ScenarioConfig = field(repr=False)


def _zscore(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else np.zeros_like(x)


def _sector_codes(n: int) -> list:
    codes = list(SECTOR_CODES[:n])
    nxt = 820
    while len(codes) < n:
        codes.append(nxt)
        nxt += 7
    return codes


def generate(config: ScenarioConfig) -> Scenario:
    rng = np.random.default_rng(config.seed)
    n, G, T = config.n_blocks, config.global_weeks, config.T
    periods = list(range(config.n_periods))
    starts = [p * config.period_stride for p in periods]

    # geography: clustered commercial districts on a plane
    centers = rng.uniform(0.15, 0.85, (config.n_clusters, 2)) * config.extent
    cluster_of = rng.integers(0, config.n_clusters, n)
    centroids = np.clip(centers[cluster_of] + rng.normal(0, config.extent / 12, (n, 2)),
                        0.0, config.extent)

    # latent traits
    cluster_appeal = rng.normal(0, 1, config.n_clusters)
    attract = rng.normal(0, 1, n) + 0.5 * cluster_appeal[cluster_of]
    vulner = rng.uniform(0.2, 1.0, n)

    z = np.empty((n, config.n_attributes))
    z[:, 0] = attract + rng.normal(0, 0.3, n)
    z[:, 1] = vulner + rng.normal(0, 0.1, n)
    z[:, 2] = cluster_appeal[cluster_of] + rng.normal(0, 0.3, n)
    z[:, 3:] = rng.normal(0, 1, (n, config.n_attributes - 3))

    # POIs: sector mix leans on a per-cluster affinity profile
    codes = _sector_codes(config.n_sectors)
    affinity = rng.dirichlet(np.full(config.n_sectors, 1.5), config.n_clusters)
    poi_counts = 1 + rng.poisson(config.poi_rate, n)
    poi_block, poi_sector, poi_base = [], [], []
    for i in range(n):
        sectors = rng.choice(config.n_sectors, size=poi_counts[i], p=affinity[cluster_of[i]])
        for s in sectors:
            poi_block.append(i)
            poi_sector.append(codes[s])
            poi_base.append(rng.lognormal(np.log(60.0), 0.6))
    poi_block = np.array(poi_block)
    poi_sector = np.array(poi_sector)
    poi_base = np.array(poi_base)
    n_pois = poi_block.size

    # disasters: epicenter at a cluster center, severity fades to the footprint
    # edge and scales with block vulnerability
    event_sev = np.zeros((len(config.disasters), n))
    for e, spec in enumerate(config.disasters):
        epicenter = centers[rng.integers(0, config.n_clusters)]
        dist = np.linalg.norm(centroids - epicenter, axis=1)
        shape = np.maximum(0.0, 1.0 - dist / spec.radius)
        event_sev[e] = spec.severity * shape * (0.5 + 0.5 * vulner)

    # cumulative decayed disturbance per block and week
    impact_series = np.zeros((n, G))
    weeks = np.arange(G, dtype=np.float64)
    for e, spec in enumerate(config.disasters):
        tail = np.exp(-config.alpha_true * (weeks[spec.week:] - spec.week))
        impact_series[:, spec.week:] += event_sev[e][:, None] * tail[None, :]

    # weekly visitation: seasonal base, disturbance dips, renovation distractors
    phase = rng.uniform(0, 52, n)
    season = 1.0 + 0.2 * np.sin(2 * np.pi * (weeks[None, :] + phase[:, None]) / 52.0)
    dip = 1.0 - np.minimum(0.85, 0.4 * impact_series)
    visits = np.zeros((n_pois, G), dtype=np.int64)
    for j in range(n_pois):
        i = poi_block[j]
        level = poi_base[j] * season[i] * dip[i]
        if rng.random() < 0.25:  # an unrelated closure/renovation dip
            w0 = rng.integers(0, max(1, G - 6))
            level = level.copy()
            level[w0:w0 + 6] *= 0.3
        noisy = level * np.maximum(0.0, 1.0 + config.visit_noise * rng.standard_normal(G))
        visits[j] = np.maximum(0, np.round(noisy)).astype(np.int64)

    # gravity crowding: attractiveness of same-sector competitors, weighted by
    # the gravity coupling V_i V_j / d^2 (the same quantity the competition
    # relations carry as edge weights)
    d2 = ((centroids[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    d2 = np.maximum(d2, 1.0)
    totals = np.zeros((n, config.n_sectors))
    for j in range(n_pois):
        totals[poi_block[j], codes.index(poi_sector[j])] += visits[j].sum()
    block_total = totals.sum(axis=1)
    crowd = np.zeros(n)
    for k in range(config.n_sectors):
        vk = totals[:, k]
        coupling = (vk[:, None] * vk[None, :]) / d2
        strength = coupling.sum(axis=1)
        rival_appeal = np.divide(coupling @ attract, strength,
                                 out=np.zeros(n), where=strength > 0)
        share = np.divide(vk, block_total, out=np.zeros(n), where=block_total > 0)
        crowd += share * rival_appeal
    crowd = _zscore(crowd)

    # change-pressure score per (block, period)
    a_term = _zscore(attract)
    c_term = crowd
    misc_term = z[:, 3]  # an observable driver beyond the named traits
    adjacency = knn_adjacency(centroids, k=10)
    w_adj = adjacency.dense_weight_matrix(n)
    row_sum = w_adj.sum(axis=1, keepdims=True)
    w_norm = np.divide(w_adj, row_sum, out=np.zeros_like(w_adj), where=row_sum > 0)

    scores, impacts, gates = [], [], []
    for p, lo in enumerate(starts):
        in_window = [e for e, spec in enumerate(config.disasters)
                     if lo <= spec.week < lo + T]
        gate = 1.0 if in_window else 0.0
        impact_p = np.zeros(n)
        for e in in_window:
            recency = 0.4 + 0.6 * (config.disasters[e].week - lo) / T
            impact_p += event_sev[e] * recency
        impacts.append(impact_p)
        gates.append(gate)
    pooled_impact = np.concatenate(impacts)
    i_sd = pooled_impact.std()
    for p in periods:
        i_term = (impacts[p] - pooled_impact.mean()) / i_sd if i_sd > 0 else np.zeros(n)
        raw = gates[p] * (config.weight_attractiveness * a_term
                          - config.weight_competition * c_term
                          - config.weight_impact * i_term
                          + config.weight_misc * misc_term)
        raw = raw + config.label_noise * rng.standard_normal(n)
        neighbor = w_norm @ raw
        smoothed = raw + np.where(neighbor > 0, config.a_plus_true,
                                  config.a_minus_true) * neighbor
        scores.append(smoothed)
    pooled = np.concatenate(scores)

    # carve classes out of the pooled score
    S = pooled.size
    labels = np.full(S, CLASS_NOCHANGE, dtype=np.int64)
    spread = pooled.max() - pooled.min()
    p_inc, p_no, p_dec = config.class_proportions
    if spread > 1e-12:
        q_dec = np.quantile(pooled, p_dec)
        q_inc = np.quantile(pooled, 1.0 - p_inc)
        labels[pooled < q_dec] = CLASS_DECREASE
        labels[pooled > q_inc] = CLASS_INCREASE
        realized = np.bincount(labels, minlength=3) / S
        targets = np.array([p_inc, p_no, p_dec])
        if np.any(np.abs(realized - targets) > 0.03):
            raise InfeasibleScenario(
                f"realized class proportions {np.round(realized, 3).tolist()} miss the "
                f"target {targets.tolist()} by more than 3 points; raise label_noise, "
                f"adjust class_proportions, or add disasters so the change-pressure "
                f"score can spread")

    # magnitudes chosen so clamping never distorts the intended label
    eps = 1e-5
    delta = np.zeros(S)
    y_start = np.zeros(S)
    for s in range(S):
        if labels[s] == CLASS_INCREASE:
            margin = (pooled[s] - q_inc) / max(pooled.max() - q_inc, 1e-12)
            delta[s] = 0.03 + 0.17 * margin
            y_start[s] = rng.uniform(0.05, min(0.7, 1.0 - delta[s] - 0.01))
        elif labels[s] == CLASS_DECREASE:
            margin = (q_dec - pooled[s]) / max(q_dec - pooled.min(), 1e-12)
            delta[s] = -(0.03 + 0.17 * margin)
            y_start[s] = rng.uniform(-delta[s] + 0.02, 0.8)
        else:
            delta[s] = rng.uniform(-eps / 3, eps / 3)
            y_start[s] = rng.uniform(0.02, 0.8)
    y_end = np.clip(y_start + delta, 0.0, 1.0)

    block_ids = [f"B{i:04d}" for i in range(n)]
    blocks_rows = []
    for p in periods:
        for i in range(n):
            s = p * n + i
            row = {"block_id": block_ids[i], "cx": centroids[i, 0], "cy": centroids[i, 1]}
            row.update({f"z_{a}": z[i, a] for a in range(config.n_attributes)})
            row.update({"period_id": p, "y_start": y_start[s], "y_end": y_end[s]})
            blocks_rows.append(row)
    blocks_df = pd.DataFrame(blocks_rows)

    pois_df = pd.concat(
        [pd.DataFrame({"poi_id": [f"P{j:05d}" for j in range(n_pois)],
                       "block_id": [block_ids[i] for i in poi_block],
                       "naics3": poi_sector}),
         pd.DataFrame(visits, columns=[f"w{w}" for w in range(G)])],
        axis=1)

    # daily weather correlated with the disaster schedule
    n_days = 7 * G
    day_week = np.arange(n_days) // 7
    rows_precip = rng.exponential(1.5, (n, n_days))
    rows_wind = 8.0 + rng.gamma(2.0, 2.0, (n, n_days))
    rows_pressure = 1013.0 + rng.normal(0, 3.0, (n, n_days))
    max_sev = event_sev.max() if event_sev.size else 1.0
    for e, spec in enumerate(config.disasters):
        days = day_week == spec.week
        local = event_sev[e] / max_sev if max_sev > 0 else np.zeros(n)
        regional = 0.3 + 0.7 * local  # the storm is felt everywhere, worst in footprint
        rows_precip[:, days] += 35.0 * regional[:, None]
        rows_wind[:, days] += 45.0 * regional[:, None]
        rows_pressure[:, days] -= 22.0 * regional[:, None]
    weather_df = pd.DataFrame({
        "block_id": np.repeat(block_ids, n_days),
        "day_index": np.tile(np.arange(n_days), n),
        "precip": rows_precip.reshape(-1),
        "wind": rows_wind.reshape(-1),
        "pressure": rows_pressure.reshape(-1),
    })

    dis_rows = []
    for e, spec in enumerate(config.disasters):
        for i in np.flatnonzero(event_sev[e] > 0):
            dis_rows.append({"event_id": f"E{e}", "week": spec.week,
                             "block_id": block_ids[i], "severity": event_sev[e, i]})
    disasters_df = pd.DataFrame(dis_rows,
                                columns=["event_id", "week", "block_id", "severity"])

    truth = {
        "alpha_true": config.alpha_true,
        "a_plus_true": config.a_plus_true,
        "a_minus_true": config.a_minus_true,
        "class_names": ["Increase", "NoChange", "Decrease"],
        "samples": [
            {"block_id": block_ids[s % n], "period_id": int(s // n),
             "intended_class": int(labels[s]), "score": float(pooled[s]),
             "impact": float(impacts[s // n][s % n])}
            for s in range(S)
        ],
        "config": _config_dict(config),
    }
    return Scenario(blocks=blocks_df, pois=pois_df, weather=weather_df,
                    disasters=disasters_df, truth=truth, config=config)


def _config_dict(config: ScenarioConfig) -> dict:
    raw = asdict(config)
    raw["disasters"] = [asdict(d) for d in config.disasters]
    raw["class_proportions"] = list(config.class_proportions)
    return raw


def write_scenario(scenario: Scenario, out_dir) -> None:
    """Write the CSV bundle plus truth.json (and periods.csv if non-standard)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenario.blocks.to_csv(out / "blocks.csv", index=False)
    scenario.pois.to_csv(out / "pois.csv", index=False)
    scenario.weather.to_csv(out / "weather.csv", index=False)
    scenario.disasters.to_csv(out / "disasters.csv", index=False)
    cfg = scenario.config
    if cfg.period_stride != PERIOD_STRIDE_WEEKS:
        pd.DataFrame({"period_id": range(cfg.n_periods),
                      "start_week": [p * cfg.period_stride for p in range(cfg.n_periods)],
                      "label_year": ["" for _ in range(cfg.n_periods)]}
                     ).to_csv(out / "periods.csv", index=False)
    with open(out / "truth.json", "w", encoding="utf-8") as fh:
        json.dump(scenario.truth, fh, indent=1)


def reference_scenario() -> ScenarioConfig:
    """The benchmark configuration pinned for the acceptance suite."""
    return ScenarioConfig()
