import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sta4clc.data import (CLASS_DECREASE, CLASS_INCREASE, CLASS_NOCHANGE,
                          ColumnScaler, DataError, Dataset, LabelConfig,
                          aggregate_block_series, derive_label, load_dataset,
                          resample_balanced, standardize_features,
                          weekly_aggregate_weather)


def write_bundle(tmp_path, blocks_rows, pois_rows, n_weeks, weather_rows=None,
                 disaster_rows=None, periods_rows=None):
    d = len(blocks_rows[0]) - 6 if blocks_rows else 0
    z_cols = ",".join(f"z_{i}" for i in range(d))
    header = f"block_id,cx,cy,{z_cols},period_id,y_start,y_end" if d else \
        "block_id,cx,cy,period_id,y_start,y_end"
    (tmp_path / "blocks.csv").write_text(
        header + "\n" + "\n".join(",".join(str(x) for x in r) for r in blocks_rows) + "\n")
    w_cols = ",".join(f"w{i}" for i in range(n_weeks))
    (tmp_path / "pois.csv").write_text(
        f"poi_id,block_id,naics3,{w_cols}\n"
        + "\n".join(",".join(str(x) for x in r) for r in pois_rows)
        + ("\n" if pois_rows else ""))
    weather_rows = weather_rows or []
    (tmp_path / "weather.csv").write_text(
        "block_id,day_index,precip,wind,pressure\n"
        + "\n".join(",".join(str(x) for x in r) for r in weather_rows)
        + ("\n" if weather_rows else ""))
    disaster_rows = disaster_rows or []
    (tmp_path / "disasters.csv").write_text(
        "event_id,week,block_id,severity\n"
        + "\n".join(",".join(str(x) for x in r) for r in disaster_rows)
        + ("\n" if disaster_rows else ""))
    if periods_rows is not None:
        (tmp_path / "periods.csv").write_text(
            "period_id,start_week,label_year\n"
            + "\n".join(",".join(str(x) for x in r) for r in periods_rows) + "\n")
    return tmp_path


def full_weather(block_ids, n_weeks):
    rows = []
    for b in block_ids:
        for day in range(7 * n_weeks):
            rows.append((b, day, 1.0, 5.0, 1013.0))
    return rows


def tiny_bundle(tmp_path, n_weeks=8):
    blocks = [("B1", 0.0, 0.0, 0.1, 0, 0.2, 0.3),
              ("B2", 100.0, 0.0, -0.4, 0, 0.5, 0.5),
              ("B3", 0.0, 100.0, 1.2, 0, 0.4, 0.1)]
    visits = ["1"] * n_weeks
    pois = [("P1", "B1", 445, *visits), ("P2", "B2", 722, *visits)]
    return write_bundle(tmp_path, blocks, pois, n_weeks,
                        weather_rows=full_weather(["B1", "B2", "B3"], n_weeks))


class TestLoadDataset:
    def test_minimal_well_formed_input(self, tmp_path):
        ds = load_dataset(tiny_bundle(tmp_path))
        assert len(ds.blocks) == 3
        assert ds.T == 8
        assert ds.block_ids == ["B1", "B2", "B3"]
        assert len(ds.periods) == 1 and ds.periods[0].start_week == 0

    def test_unknown_block_reference_named_with_row(self, tmp_path):
        tiny_bundle(tmp_path)
        (tmp_path / "pois.csv").write_text(
            "poi_id,block_id,naics3," + ",".join(f"w{i}" for i in range(8)) + "\n"
            + "P1,B999,445," + ",".join(["1"] * 8) + "\n")
        with pytest.raises(DataError) as ei:
            load_dataset(tmp_path)
        assert "B999" in str(ei.value) and "row 2" in str(ei.value)

    def test_visit_length_mismatch_rejected(self, tmp_path):
        # declared T=104 but the file only carries 100 weekly columns
        blocks = [("B1", 0.0, 0.0, 0, 0.2, 0.3)]
        pois = [("P1", "B1", 445, *["1"] * 100)]
        write_bundle(tmp_path, blocks, pois, 100,
                     weather_rows=full_weather(["B1"], 100))
        with pytest.raises(DataError) as ei:
            load_dataset(tmp_path, T=104)
        assert "104" in str(ei.value)

    def test_short_visit_row_rejected_with_row_number(self, tmp_path):
        tiny_bundle(tmp_path)
        lines = (tmp_path / "pois.csv").read_text().splitlines()
        lines[1] = ",".join(lines[1].split(",")[:-2])  # drop 2 trailing weeks
        (tmp_path / "pois.csv").write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError) as ei:
            load_dataset(tmp_path)
        assert "row 2" in str(ei.value)

    def test_missing_file(self, tmp_path):
        tiny_bundle(tmp_path)
        (tmp_path / "weather.csv").unlink()
        with pytest.raises(DataError) as ei:
            load_dataset(tmp_path)
        assert "weather.csv" in str(ei.value)

    def test_nan_in_numeric_column_rejected(self, tmp_path):
        tiny_bundle(tmp_path)
        text = (tmp_path / "blocks.csv").read_text().replace("0.2", "")
        (tmp_path / "blocks.csv").write_text(text)
        with pytest.raises(DataError) as ei:
            load_dataset(tmp_path)
        assert "y_start" in str(ei.value)

    def test_y_outside_unit_interval_clamped_with_warning(self, tmp_path, caplog):
        blocks = [("B1", 0.0, 0.0, 0, -0.2, 1.4)]
        pois = [("P1", "B1", 445, *["1"] * 8)]
        write_bundle(tmp_path, blocks, pois, 8, weather_rows=full_weather(["B1"], 8))
        with caplog.at_level("WARNING"):
            ds = load_dataset(tmp_path)
        assert ds.blocks[0].y_start == 0.0 and ds.blocks[0].y_end == 1.0
        assert any("clamped" in r.message for r in caplog.records)

    def test_periods_csv_controls_windows(self, tmp_path):
        blocks = [("B1", 0.0, 0.0, 0, 0.2, 0.3), ("B1", 0.0, 0.0, 1, 0.3, 0.3)]
        pois = [("P1", "B1", 445, *["2"] * 12)]
        write_bundle(tmp_path, blocks, pois, 12,
                     weather_rows=full_weather(["B1"], 12),
                     periods_rows=[(0, 0, "y1"), (1, 4, "y2")])
        ds = load_dataset(tmp_path)
        assert ds.T == 8
        assert [p.start_week for p in ds.periods] == [0, 4]

    def test_bad_naics_rejected(self, tmp_path):
        blocks = [("B1", 0.0, 0.0, 0, 0.2, 0.3)]
        pois = [("P1", "B1", 45, *["1"] * 8)]
        write_bundle(tmp_path, blocks, pois, 8, weather_rows=full_weather(["B1"], 8))
        with pytest.raises(DataError) as ei:
            load_dataset(tmp_path)
        assert "naics3" in str(ei.value)


class TestAggregateBlockSeries:
    def _dataset(self, tmp_path, pois):
        blocks = [("B1", 0.0, 0.0, 0, 0.2, 0.3), ("B2", 9.0, 9.0, 0, 0.2, 0.3)]
        write_bundle(tmp_path, blocks, pois, 3, weather_rows=full_weather(["B1", "B2"], 3))
        return load_dataset(tmp_path)

    def test_two_pois_direct_sum(self, tmp_path):
        ds = self._dataset(tmp_path, [("P1", "B1", 445, 1, 2, 3),
                                      ("P2", "B1", 722, 4, 5, 6)])
        v, p = aggregate_block_series(ds, "B1", ds.periods[0])
        assert np.array_equal(v, [5, 7, 9])
        assert np.array_equal(p, [2, 2, 2])

    def test_block_with_zero_pois(self, tmp_path):
        ds = self._dataset(tmp_path, [("P1", "B1", 445, 1, 2, 3)])
        v, p = aggregate_block_series(ds, "B2", ds.periods[0])
        assert np.array_equal(v, [0, 0, 0]) and np.array_equal(p, [0, 0, 0])

    def test_active_poi_counting(self, tmp_path):
        ds = self._dataset(tmp_path, [("P1", "B1", 445, 0, 3, 0)])
        _, p = aggregate_block_series(ds, "B1", ds.periods[0])
        assert np.array_equal(p, [0, 1, 0])

    def test_unknown_block(self, tmp_path):
        ds = self._dataset(tmp_path, [("P1", "B1", 445, 1, 2, 3)])
        with pytest.raises(DataError):
            aggregate_block_series(ds, "B9", ds.periods[0])

    def test_matches_brute_force_recount(self, tmp_path):
        rng = np.random.default_rng(0)
        pois = [(f"P{i}", "B1", 445, *rng.integers(0, 5, size=3).tolist())
                for i in range(10)]
        ds = self._dataset(tmp_path, pois)
        v, p = aggregate_block_series(ds, "B1", ds.periods[0])
        table = np.array([r[3:] for r in pois])
        assert np.array_equal(v, table.sum(axis=0))
        assert np.array_equal(p, (table >= 1).sum(axis=0))


class TestWeeklyAggregateWeather:
    def test_precipitation_summed(self):
        daily = np.column_stack([np.ones(7), np.zeros(7), np.zeros(7)])
        assert weekly_aggregate_weather(daily)[0, 0] == 7.0

    def test_wind_weekly_max(self):
        daily = np.zeros((7, 3))
        daily[:, 1] = [2, 9, 3, 1, 0, 4, 5]
        assert weekly_aggregate_weather(daily)[0, 1] == 9.0

    def test_pressure_weekly_mean_of_constant(self):
        daily = np.zeros((7, 3))
        daily[:, 2] = 1013.0
        assert weekly_aggregate_weather(daily)[0, 2] == 1013.0

    def test_missing_day_is_error_by_default(self):
        daily = np.ones((7, 3))
        daily[3, :] = np.nan
        with pytest.raises(DataError):
            weekly_aggregate_weather(daily)

    def test_short_gap_interpolated_when_allowed(self):
        daily = np.ones((7, 3))
        daily[3, :] = np.nan
        out = weekly_aggregate_weather(daily, max_gap=2)
        assert out[0, 0] == pytest.approx(7.0)

    def test_long_gap_still_error(self):
        daily = np.ones((14, 3))
        daily[3:7, :] = np.nan
        with pytest.raises(DataError):
            weekly_aggregate_weather(daily, max_gap=2)


class TestDeriveLabel:
    def test_identity_is_nochange(self):
        assert derive_label(0.10, 0.10) == CLASS_NOCHANGE

    def test_clear_increase(self):
        assert derive_label(0.05, 0.12) == CLASS_INCREASE

    def test_tiny_change_inside_band(self):
        assert derive_label(0.30, 0.299995) == CLASS_NOCHANGE

    def test_clear_decrease(self):
        assert derive_label(0.30, 0.20) == CLASS_DECREASE

    def test_custom_epsilon(self):
        cfg = LabelConfig(epsilon=0.05)
        assert derive_label(0.30, 0.33, cfg) == CLASS_NOCHANGE

    @given(st.floats(0, 1), st.floats(0, 1))
    @settings(max_examples=200)
    def test_antisymmetric_under_swap(self, a, b):
        fwd, rev = derive_label(a, b), derive_label(b, a)
        assert {CLASS_INCREASE: CLASS_DECREASE,
                CLASS_DECREASE: CLASS_INCREASE,
                CLASS_NOCHANGE: CLASS_NOCHANGE}[fwd] == rev

    def test_brute_force_oracle_on_random_pairs(self):
        rng = np.random.default_rng(1)
        eps = 1e-5
        for _ in range(1000):
            a, b = rng.random(2)
            expected = (CLASS_INCREASE if b - a > eps
                        else CLASS_DECREASE if b - a < -eps
                        else CLASS_NOCHANGE)
            assert derive_label(a, b) == expected


class TestStandardize:
    def test_hand_zscore_population_sd(self):
        train = np.array([[1.0], [2.0], [3.0]])
        out, _, scaler = standardize_features(train, train)
        sd = np.sqrt(2.0 / 3.0)  # population sd of [1,2,3]
        assert scaler.mean[0] == pytest.approx(2.0)
        assert scaler.sd[0] == pytest.approx(sd)
        assert np.allclose(out[:, 0], (np.array([1, 2, 3]) - 2.0) / sd)

    def test_zero_variance_column_maps_to_zero(self):
        train = np.full((3, 1), 5.0)
        out, _, _ = standardize_features(train, train)
        assert np.array_equal(out, np.zeros((3, 1)))

    def test_apply_to_unseen_value_with_given_params(self):
        scaler = ColumnScaler(mean=np.array([2.0]), sd=np.array([1.0]))
        assert scaler.transform(np.array([[4.0]]))[0, 0] == 2.0

    def test_idempotent_on_standardized_train_data(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((50, 4)) * 5 + 3
        once, _, _ = standardize_features(x, x)
        twice, _, _ = standardize_features(once, once)
        assert np.max(np.abs(twice - once)) <= 1e-12

    def test_nan_entries_ignored_in_fit_and_passed_through(self):
        x = np.array([[1.0], [np.nan], [3.0]])
        out, _, scaler = standardize_features(x, x)
        assert scaler.mean[0] == pytest.approx(2.0)
        assert np.isnan(out[1, 0])


class TestResampleBalanced:
    def test_oversamples_to_majority_count(self):
        labels = np.array([0] * 2 + [1] * 10 + [2] * 3)
        idx = np.arange(15)
        out = resample_balanced(idx, labels, seed=0)
        _, counts = np.unique(labels[out], return_counts=True)
        assert np.array_equal(counts, [10, 10, 10])

    def test_balanced_input_is_fixed_point_cardinality(self):
        labels = np.array([0] * 5 + [1] * 5 + [2] * 5)
        out = resample_balanced(np.arange(15), labels, seed=0)
        assert sorted(out.tolist()) == list(range(15))

    def test_deterministic_for_seed(self):
        labels = np.array([0] * 2 + [1] * 7 + [2] * 4)
        a = resample_balanced(np.arange(13), labels, seed=7)
        b = resample_balanced(np.arange(13), labels, seed=7)
        assert np.array_equal(a, b)

    def test_originals_always_retained(self):
        labels = np.array([0] * 2 + [1] * 9 + [2] * 3)
        out = resample_balanced(np.arange(14), labels, seed=3)
        assert set(range(14)) <= set(out.tolist())

    def test_absent_class_is_error(self):
        labels = np.array([0, 0, 1, 1])
        with pytest.raises(DataError):
            resample_balanced(np.arange(4), labels, seed=0)
