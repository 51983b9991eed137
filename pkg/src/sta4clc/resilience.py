"""Theory-informed temporal features.

Two feature families live here:

* a rolling "ball-and-basin" resilience metric: within each window a
  smoothing spline reconstructs the drift f(v) = dv/dt, the potential
  V(v) = -∫ f dv is integrated, and the curvature V''(v*) at the potential
  minimum measures the restoring force of the visitation series;
* a cumulative exponential decay sequence turning timestamped disturbance
  events into a per-week impact signal.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.interpolate import make_smoothing_spline


@dataclass(frozen=True)
class ResilienceConfig:
    window: int = 26              # rolling window length, weeks
    bins: int = 20                # drift-curve bins over the value range
    smoothing: float | None = 0.1  # spline penalty; None selects GCV per window
    dense_grid_points: int = 200
    min_points: int = 6

    def __post_init__(self):
        if self.window < 8 or self.window % 2 != 0:
            raise ValueError(f"window must be an even integer >= 8, got {self.window}")
        if self.bins < 5:
            raise ValueError(f"bins must be >= 5, got {self.bins}")
        if self.min_points < 6:
            raise ValueError(f"min_points must be >= 6, got {self.min_points}")
        if self.smoothing is not None and self.smoothing < 0:
            raise ValueError(f"smoothing must be non-negative, got {self.smoothing}")


@dataclass(frozen=True)
class PotentialEstimate:
    """Binned drift curve and its integrated potential on one window."""

    v_grid: np.ndarray   # ascending value grid (in-bin mean values)
    f_hat: np.ndarray    # binned mean drift estimate on v_grid
    V: np.ndarray        # potential, V[0] = 0 convention
    V2: np.ndarray       # second derivative of V on v_grid
    v_star: float        # grid value minimizing V

    @property
    def curvature(self) -> float:
        return float(self.V2[int(np.argmin(self.V))])


@dataclass(frozen=True)
class DecayConfig:
    alpha: float = 0.17

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")


# relative value range below which a window is considered flat
_DEGENERATE_RANGE = 1e-9


@lru_cache(maxsize=256)
def _spline_operators(n: int, lam: float, dense: int):
    """Dense-evaluation and dense-derivative operators for a fixed-penalty
    smoothing spline on n uniformly spaced points.

    The fit is linear in the observations for fixed lam, so fitting the n
    basis vectors once gives matrices that evaluate any window by a matvec.
    """
    x = np.arange(float(n))
    grid = np.linspace(0.0, float(n - 1), dense)
    value_op = np.empty((dense, n))
    deriv_op = np.empty((dense, n))
    basis = np.zeros(n)
    for j in range(n):
        basis[j] = 1.0
        sp = make_smoothing_spline(x, basis, lam=lam)
        value_op[:, j] = sp(grid)
        deriv_op[:, j] = sp.derivative()(grid)
        basis[j] = 0.0
    return value_op, deriv_op


def _dense_spline_eval(times, values, config):
    """(dense values, dense drift) for one window, honoring the smoothing mode."""
    uniform = times.size > 1 and np.all(np.diff(times) == 1.0)
    if config.smoothing is not None and uniform:
        value_op, deriv_op = _spline_operators(times.size, config.smoothing,
                                               config.dense_grid_points)
        return value_op @ values, deriv_op @ values
    sp = make_smoothing_spline(times, values, lam=config.smoothing)
    grid = np.linspace(times[0], times[-1], config.dense_grid_points)
    return sp(grid), sp.derivative()(grid)


def estimate_potential(times, values, config: ResilienceConfig) -> PotentialEstimate | None:
    """Reconstruct the potential landscape on one window.

    Returns None (the Undefined marker) for degenerate windows: fewer than
    min_points observations, a flat series, or too few populated bins.
    """
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if times.size != values.size:
        raise ValueError(f"times ({times.size}) and values ({values.size}) differ in length")
    if times.size < config.min_points:
        return None
    span = values.max() - values.min()
    if span <= _DEGENERATE_RANGE * max(1.0, abs(values.mean())):
        return None

    v_dense, f_dense = _dense_spline_eval(times, values, config)
    lo, hi = v_dense.min(), v_dense.max()
    if hi - lo <= 0:
        return None

    # bin the (v, f) pairs; both coordinates averaged per bin so the drift
    # sample sits at the in-bin mean value rather than the bin center
    b = config.bins
    idx = np.clip(((v_dense - lo) / (hi - lo) * b).astype(np.intp), 0, b - 1)
    counts = np.bincount(idx, minlength=b)
    v_sum = np.bincount(idx, weights=v_dense, minlength=b)
    f_sum = np.bincount(idx, weights=f_dense, minlength=b)
    populated = counts > 0
    if populated.sum() < 3:
        return None
    v_grid = v_sum[populated] / counts[populated]
    f_hat = f_sum[populated] / counts[populated]

    # V = -∫ f dv by trapezoid, anchored at V[0] = 0
    V = np.concatenate(([0.0], -np.cumsum(0.5 * (f_hat[1:] + f_hat[:-1]) * np.diff(v_grid))))
    V2 = np.gradient(np.gradient(V, v_grid, edge_order=2), v_grid, edge_order=2)
    v_star = float(v_grid[int(np.argmin(V))])
    return PotentialEstimate(v_grid=v_grid, f_hat=f_hat, V=V, V2=V2, v_star=v_star)


def rolling_resilience(values, config: ResilienceConfig = ResilienceConfig()) -> np.ndarray:
    """Rolling curvature-at-minimum over a weekly series.

    Windows are centered and clipped at the series edges; degenerate windows
    yield NaN (filled downstream).
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    if n < config.window:
        raise ValueError(f"series length {n} is shorter than window {config.window}")
    times = np.arange(n, dtype=np.float64)
    half = config.window // 2
    out = np.full(n, np.nan)
    for i in range(n):
        lo = max(0, i - half)
        hi = min(n, i + half + 1)
        est = estimate_potential(times[lo:hi], values[lo:hi], config)
        if est is not None:
            out[i] = est.curvature
    return out


def fill_undefined(r: np.ndarray, mode: str = "zero") -> np.ndarray:
    """Replace NaN entries of a resilience series.

    mode="zero" maps Undefined to 0 (the post-standardization mean);
    mode="ffill" carries the last defined value forward (0 before the first).
    """
    out = r.copy()
    nan = np.isnan(out)
    if mode == "zero":
        out[nan] = 0.0
    elif mode == "ffill":
        last = 0.0
        for i in range(out.size):
            if np.isnan(out[i]):
                out[i] = last
            else:
                last = out[i]
    else:
        raise ValueError(f"unknown fill mode {mode!r}")
    return out


def decay_sequence(events, block_id: str, alpha: float, T: int) -> np.ndarray:
    """Cumulative exponentially decaying impact series for one block.

    D[t] = sum over events with week <= t of severity * exp(-alpha * (t - week)).
    Events without a severity entry for the block contribute nothing.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    weeks = np.arange(T, dtype=np.float64)
    out = np.zeros(T)
    for event in events:
        severity = event.severity_by_block.get(block_id, 0.0)
        if severity == 0.0:
            continue
        w = event.week
        if w >= T:
            continue
        out[w:] += severity * np.exp(-alpha * (weeks[w:] - w))
    return out
