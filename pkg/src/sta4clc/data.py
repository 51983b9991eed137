"""Data model, CSV ingestion, label derivation, aggregation and resampling.

File formats (UTF-8, header row, '.' decimal separator):

* blocks.csv    block_id, cx, cy, z_0..z_{d-1}, period_id, y_start, y_end
* pois.csv      poi_id, block_id, naics3, w0..w{G-1}   (non-negative integers)
* weather.csv   block_id, day_index, precip, wind, pressure
* disasters.csv event_id, week, block_id, severity
* periods.csv   period_id, start_week, label_year      (optional; when absent,
                periods are inferred at a 52-week stride)

The weekly columns of pois.csv span the full G-week record; each period is a
contiguous T-week slice of it starting at its start_week.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

CLASS_INCREASE, CLASS_NOCHANGE, CLASS_DECREASE = 0, 1, 2
CLASS_NAMES = ("Increase", "NoChange", "Decrease")

PERIOD_STRIDE_WEEKS = 52


class DataError(Exception):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class LabelConfig:
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass(frozen=True)
class BlockRecord:
    block_id: str
    centroid: tuple  # (x, y) in meters, projected plane
    z: np.ndarray
    y_start: float
    y_end: float
    period_id: int = 0


@dataclass(frozen=True)
class PoiRecord:
    poi_id: str
    block_id: str
    sector: int  # 3-digit NAICS
    visits: np.ndarray  # weekly non-negative integers, full record length


@dataclass(frozen=True)
class DisasterEvent:
    event_id: str
    week: int
    severity_by_block: dict


@dataclass(frozen=True)
class PeriodWindow:
    period_id: int
    start_week: int
    label_year: str = ""


@dataclass
class Dataset:
    blocks: list
    pois: list
    weather: dict  # block_id -> (7*G, 3) float array [precip, wind, pressure]
    disasters: list
    periods: list
    T: int
    label_config: LabelConfig = field(default_factory=LabelConfig)
    max_weather_gap: int = 0

    @property
    def global_weeks(self) -> int:
        return max(p.start_week for p in self.periods) + self.T

    @property
    def block_ids(self) -> list:
        """Sorted unique block ids; index order doubles as graph node order."""
        return sorted({b.block_id for b in self.blocks})

    def block_index(self) -> dict:
        return {bid: i for i, bid in enumerate(self.block_ids)}

    def pois_of(self, block_id: str) -> list:
        return [p for p in self.pois if p.block_id == block_id]


# ---------------------------------------------------------------------------
# labels


def derive_label(y_start: float, y_end: float, config: LabelConfig = LabelConfig()) -> int:
    """Three-way change class from start/end commercial shares."""
    delta = y_end - y_start
    if delta > config.epsilon:
        return CLASS_INCREASE
    if delta < -config.epsilon:
        return CLASS_DECREASE
    return CLASS_NOCHANGE


# ---------------------------------------------------------------------------
# aggregation


def aggregate_block_series(dataset: Dataset, block_id: str, period: PeriodWindow):
    """Weekly block visits and active-POI counts over one period.

    v[t] is the exact integer sum of member POI visits; p[t] counts POIs with
    at least one recorded visit in week t.
    """
    if block_id not in {b.block_id for b in dataset.blocks}:
        raise DataError(f"unknown block {block_id!r}")
    lo, hi = period.start_week, period.start_week + dataset.T
    v = np.zeros(dataset.T, dtype=np.int64)
    p = np.zeros(dataset.T, dtype=np.int64)
    for poi in dataset.pois:
        if poi.block_id != block_id:
            continue
        w = poi.visits[lo:hi]
        v += w
        p += (w >= 1).astype(np.int64)
    return v, p


def weekly_aggregate_weather(daily: np.ndarray, max_gap: int = 0) -> np.ndarray:
    """Collapse a (7*T, 3) daily [precip, wind, pressure] block to T weekly rows.

    Precipitation is summed, wind is the weekly max, pressure the weekly mean.
    NaN runs of length <= max_gap are linearly interpolated; longer gaps are
    an error.
    """
    daily = np.asarray(daily, dtype=np.float64)
    if daily.ndim != 2 or daily.shape[1] != 3:
        raise DataError(f"daily weather must be (days, 3), got {daily.shape}")
    if daily.shape[0] % 7 != 0:
        raise DataError(f"daily weather length {daily.shape[0]} is not a whole number of weeks")
    missing = np.isnan(daily).any(axis=1)
    if missing.any():
        run, longest = 0, 0
        for m in missing:
            run = run + 1 if m else 0
            longest = max(longest, run)
        if longest > max_gap:
            first = int(np.argmax(missing))
            raise DataError(
                f"weather gap of {longest} consecutive missing day(s) starting at "
                f"day {first} exceeds the allowed budget of {max_gap}")
        days = np.arange(daily.shape[0], dtype=np.float64)
        for c in range(3):
            col = daily[:, c]
            bad = np.isnan(col)
            if bad.any():
                daily[bad, c] = np.interp(days[bad], days[~bad], col[~bad])
    weeks = daily.reshape(-1, 7, 3)
    out = np.empty((weeks.shape[0], 3))
    out[:, 0] = weeks[:, :, 0].sum(axis=1)
    out[:, 1] = weeks[:, :, 1].max(axis=1)
    out[:, 2] = weeks[:, :, 2].mean(axis=1)
    return out


# ---------------------------------------------------------------------------
# standardization


@dataclass(frozen=True)
class ColumnScaler:
    """Per-column z-scoring with population (1/N) standard deviation.

    Zero-variance columns transform to 0.  NaN entries are ignored when
    fitting and pass through transform unchanged.
    """

    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "ColumnScaler":
        x = np.asarray(x, dtype=np.float64)
        if x.size == 0:
            raise ValueError("cannot fit a scaler on an empty array")
        mean = np.nanmean(x, axis=0)
        sd = np.sqrt(np.nanmean((x - mean) ** 2, axis=0))
        return cls(mean=mean, sd=sd)

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        safe = np.where(self.sd > 0, self.sd, 1.0)
        out = (x - self.mean) / safe
        return np.where(self.sd > 0, out, 0.0)


def standardize_features(train: np.ndarray, apply: np.ndarray):
    """Fit a column scaler on the training rows and apply it to both splits."""
    scaler = ColumnScaler.fit(train)
    return scaler.transform(train), scaler.transform(apply), scaler


# ---------------------------------------------------------------------------
# resampling


def resample_balanced(indices, labels, seed: int) -> np.ndarray:
    """Oversample each class with replacement up to the majority-class count.

    Original indices are always retained; only the shortfall is drawn.
    Deterministic for a fixed seed.
    """
    indices = np.asarray(indices)
    labels = np.asarray(labels)
    if indices.shape != labels.shape:
        raise ValueError(f"indices {indices.shape} and labels {labels.shape} differ")
    classes, counts = np.unique(labels, return_counts=True)
    present = set(classes.tolist())
    for c in (CLASS_INCREASE, CLASS_NOCHANGE, CLASS_DECREASE):
        if c not in present:
            raise DataError(f"class {CLASS_NAMES[c]} absent from the index set")
    target = counts.max()
    rng = np.random.default_rng(seed)
    parts = []
    for c in classes:
        members = indices[labels == c]
        parts.append(members)
        short = target - members.size
        if short > 0:
            parts.append(rng.choice(members, size=short, replace=True))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# CSV ingestion


def _read_csv(path: Path, name: str) -> pd.DataFrame:
    if not path.exists():
        raise DataError(f"missing input file: {path}")
    try:
        return pd.read_csv(path)
    except Exception as e:  # malformed CSV structure
        raise DataError(f"cannot parse {name}: {e}") from e


def _require_columns(df: pd.DataFrame, cols, name: str):
    missing = [c for c in cols if c not in df.columns]
    if missing:
        raise DataError(f"{name} is missing required column(s): {', '.join(missing)}")


def _reject_nan(df: pd.DataFrame, cols, name: str):
    for c in cols:
        bad = df.index[pd.to_numeric(df[c], errors="coerce").isna()]
        if len(bad):
            # +2: header line plus zero-based index
            raise DataError(f"{name} row {bad[0] + 2}: non-numeric or missing value in column {c!r}")


def load_dataset(data_dir, label_config: LabelConfig = LabelConfig(),
                 max_weather_gap: int = 0, T: int | None = None) -> Dataset:
    """Load and cross-validate the CSV bundle in `data_dir`.

    When `T` is given, the weekly columns of pois.csv must cover exactly the
    last period's window; otherwise the per-period length is inferred from
    the file itself.
    """
    data_dir = Path(data_dir)
    blocks_df = _read_csv(data_dir / "blocks.csv", "blocks.csv")
    pois_df = _read_csv(data_dir / "pois.csv", "pois.csv")
    weather_df = _read_csv(data_dir / "weather.csv", "weather.csv")
    disasters_df = _read_csv(data_dir / "disasters.csv", "disasters.csv")

    _require_columns(blocks_df, ["block_id", "cx", "cy", "period_id", "y_start", "y_end"],
                     "blocks.csv")
    z_cols = sorted([c for c in blocks_df.columns if c.startswith("z_")],
                    key=lambda c: int(c.split("_")[1]))
    _reject_nan(blocks_df, ["cx", "cy", "y_start", "y_end"] + z_cols, "blocks.csv")

    w_cols = sorted([c for c in pois_df.columns if c.startswith("w")
                     and c[1:].isdigit()], key=lambda c: int(c[1:]))
    if not w_cols:
        raise DataError("pois.csv has no weekly visit columns (w0..)")
    _require_columns(pois_df, ["poi_id", "block_id", "naics3"], "pois.csv")
    _reject_nan(pois_df, ["naics3"] + w_cols, "pois.csv")
    global_weeks = len(w_cols)

    # periods: explicit file, else inferred at the default stride
    periods_path = data_dir / "periods.csv"
    period_ids = sorted(blocks_df["period_id"].unique().tolist())
    if periods_path.exists():
        pdf = pd.read_csv(periods_path)
        _require_columns(pdf, ["period_id", "start_week"], "periods.csv")
        starts = {int(r.period_id): int(r.start_week) for r in pdf.itertuples()}
        labels_ = ({int(r.period_id): str(r.label_year) for r in pdf.itertuples()}
                   if "label_year" in pdf.columns else {})
        missing = [p for p in period_ids if p not in starts]
        if missing:
            raise DataError(f"periods.csv does not define period_id(s) {missing}")
        periods = [PeriodWindow(p, starts[p], labels_.get(p, "")) for p in period_ids]
    else:
        periods = [PeriodWindow(p, i * PERIOD_STRIDE_WEEKS)
                   for i, p in enumerate(period_ids)]
    last_start = max(p.start_week for p in periods)
    if T is not None:
        if global_weeks != last_start + T:
            raise DataError(
                f"pois.csv provides {global_weeks} weekly columns but {last_start + T} "
                f"are required for T={T} with the last period starting at week {last_start}")
    else:
        T = global_weeks - last_start
    if T < 1:
        raise DataError(
            f"pois.csv provides {global_weeks} weeks, too few for periods starting at "
            f"week {last_start}")

    blocks = []
    known_ids = set()
    for row in blocks_df.itertuples():
        y_start, y_end = float(row.y_start), float(row.y_end)
        cl_start, cl_end = min(max(y_start, 0.0), 1.0), min(max(y_end, 0.0), 1.0)
        if (cl_start, cl_end) != (y_start, y_end):
            log.warning("blocks.csv row %d: commercial share outside [0,1] clamped "
                        "(%g, %g) -> (%g, %g)", row.Index + 2, y_start, y_end,
                        cl_start, cl_end)
        z = np.array([float(getattr(row, c)) for c in z_cols])
        blocks.append(BlockRecord(block_id=str(row.block_id),
                                  centroid=(float(row.cx), float(row.cy)),
                                  z=z, y_start=cl_start, y_end=cl_end,
                                  period_id=int(row.period_id)))
        known_ids.add(str(row.block_id))

    d = len(z_cols)
    for b in blocks:
        if b.z.size != d:
            raise DataError(f"block {b.block_id!r} has {b.z.size} attributes, expected {d}")

    pois = []
    week_mat = pois_df[w_cols].to_numpy()
    for row, visits in zip(pois_df.itertuples(), week_mat):
        bid = str(row.block_id)
        if bid not in known_ids:
            raise DataError(f"pois.csv row {row.Index + 2}: unknown block {bid!r}")
        sector = int(row.naics3)
        if not 100 <= sector <= 999:
            raise DataError(f"pois.csv row {row.Index + 2}: naics3 {sector} outside 100..999")
        if np.any(visits < 0):
            raise DataError(f"pois.csv row {row.Index + 2}: negative visit count")
        pois.append(PoiRecord(poi_id=str(row.poi_id), block_id=bid, sector=sector,
                              visits=np.asarray(visits, dtype=np.int64)))

    _require_columns(weather_df, ["block_id", "day_index", "precip", "wind", "pressure"],
                     "weather.csv")
    _reject_nan(weather_df, ["day_index"], "weather.csv")
    n_days = 7 * global_weeks
    weather = {bid: np.full((n_days, 3), np.nan) for bid in known_ids}
    w_block = weather_df["block_id"].astype(str).to_numpy()
    w_day = weather_df["day_index"].to_numpy(dtype=np.int64)
    w_vals = weather_df[["precip", "wind", "pressure"]].to_numpy(dtype=np.float64)
    for i, (bid, day) in enumerate(zip(w_block, w_day)):
        if bid not in weather:
            raise DataError(f"weather.csv row {i + 2}: unknown block {bid!r}")
        if not 0 <= day < n_days:
            raise DataError(f"weather.csv row {i + 2}: day_index {day} outside 0..{n_days - 1}")
        weather[bid][day] = w_vals[i]

    disasters = []
    if len(disasters_df):
        _require_columns(disasters_df, ["event_id", "week", "block_id", "severity"],
                         "disasters.csv")
        _reject_nan(disasters_df, ["week", "severity"], "disasters.csv")
        for eid, group in disasters_df.groupby("event_id", sort=True):
            weeks = group["week"].unique()
            if len(weeks) != 1:
                raise DataError(f"disasters.csv: event {eid!r} spans multiple weeks {sorted(weeks)}")
            week = int(weeks[0])
            if not 0 <= week < global_weeks:
                raise DataError(f"disasters.csv: event {eid!r} week {week} outside 0..{global_weeks - 1}")
            sev = {}
            for row in group.itertuples():
                bid = str(row.block_id)
                if bid not in known_ids:
                    raise DataError(f"disasters.csv row {row.Index + 2}: unknown block {bid!r}")
                s = float(row.severity)
                if s < 0:
                    raise DataError(f"disasters.csv row {row.Index + 2}: negative severity")
                sev[bid] = s
            disasters.append(DisasterEvent(event_id=str(eid), week=week, severity_by_block=sev))

    return Dataset(blocks=blocks, pois=pois, weather=weather, disasters=disasters,
                   periods=periods, T=T, label_config=label_config,
                   max_weather_gap=max_weather_gap)
