import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from aspnn.dataset import (FEATURE_NAMES, N_FEATURES, DataError, NormStats, TrajectoryRecord,
                           denormalize, export_feature_matrix, extract_features,
                           filter_correct_trajectories, group_records, load_trajectories,
                           normalize, read_records, recursive_variation, split_tracks,
                           track_features, write_trajectories)
from aspnn.simulator import SimConfig, simulate

IDX = {name: i for i, name in enumerate(FEATURE_NAMES)}


def rec(frame, cid, x, y, area=78.5, ecc=0.0, bright=128.0, mitosis=None):
    return TrajectoryRecord(frame, cid, float(x), float(y), float(area), ecc, bright, mitosis)


def straight_track(cid, n, x0=10.0, y0=10.0, dx=1.0):
    return [rec(f, cid, x0 + dx * f, y0) for f in range(n)]


class TestVelocity:
    def test_backward_difference(self):
        ts = group_records([rec(0, 1, 0, 0), rec(1, 1, 3, 4)], 10, 10)
        v = ts.tracks[1].velocity
        assert np.isnan(v[0]).all()
        np.testing.assert_array_equal(v[1], [3, 4])

    def test_states_start_at_second_frame(self):
        ts = group_records(straight_track(0, 5), 100, 100)
        s = ts.tracks[0].states()
        assert s.shape == (4, 4)
        np.testing.assert_array_equal(s[:, 2], 1.0)
        np.testing.assert_array_equal(s[0, :2], [11.0, 10.0])


class TestIO:
    def test_duplicate_key_named(self):
        with pytest.raises(DataError, match="frame=3, cell_id=7"):
            group_records([rec(3, 7, 1, 1), rec(3, 7, 2, 2)], 10, 10)

    def test_out_of_bounds(self):
        with pytest.raises(DataError, match="outside image bounds"):
            group_records([rec(0, 0, 50, 5)], 20, 20)

    @pytest.mark.parametrize("fmt", ["csv", "jsonl"])
    def test_round_trip_simulator_output(self, tmp_path, fmt):
        recs = simulate(SimConfig(noise_fraction=0.1))
        path = tmp_path / f"t.{fmt}"
        write_trajectories(recs, path, fmt, 300.0, 100.0)
        back, meta = read_records(path)
        assert back == sorted(recs, key=lambda r: (r.frame, r.cell_id))
        assert meta == {"width": 300.0, "height": 100.0}

    def test_mitosis_column_round_trip(self, tmp_path):
        recs = [rec(0, 0, 1, 1, mitosis=0), rec(1, 0, 2, 1, mitosis=1)]
        write_trajectories(recs, tmp_path / "m.csv")
        ts = load_trajectories(tmp_path / "m.csv", width=10, height=10)
        np.testing.assert_array_equal(ts.tracks[0].mitosis, [0, 1])

    def test_bad_header(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("frame,cell,x,y\n0,0,1,1\n")
        with pytest.raises(DataError, match="header"):
            read_records(p)

    def test_bad_value_names_line(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("frame,cell_id,x,y,area,eccentricity,brightness\n0,0,1,oops,1,0,1\n")
        with pytest.raises(DataError, match="line 2"):
            read_records(p)

    def test_jsonl_missing_field(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text(json.dumps({"frame": 0, "cell_id": 0, "x": 1}) + "\n")
        with pytest.raises(DataError, match="missing fields"):
            read_records(p)

    def test_gap_truncates_track(self, caplog):
        recs = straight_track(0, 5)
        recs = [r for r in recs if r.frame != 3]
        ts = group_records(recs, 100, 100)
        assert list(ts.tracks[0].frames) == [0, 1, 2]
        assert ts.gaps == [(0, 2)]
        assert "truncated" in caplog.text


class TestFilter:
    def test_short_track_is_context(self):
        ts = group_records(straight_track(0, 104, dx=0.1), 100, 100)
        correct, context = filter_correct_trajectories(ts)
        assert not correct and list(context) == [0]

    def test_long_track_truncated(self):
        ts = group_records(straight_track(0, 200, dx=0.1), 100, 100)
        correct, context = filter_correct_trajectories(ts)
        assert len(correct[0]) == 105 and not context

    def test_empty(self):
        correct, context = filter_correct_trajectories(group_records([], 10, 10))
        assert correct == {} and context == {}

    def test_split_deterministic_and_disjoint(self):
        train, test = split_tracks(range(20), 0.2, seed=0)
        assert len(test) == 4 and not set(train) & set(test)
        assert (train, test) == split_tracks(list(range(20))[::-1], 0.2, seed=0)


class TestFeatures:
    def test_isolated_cell(self):
        ts = group_records([rec(0, 0, 50, 50), rec(1, 0, 52, 50)], 100, 100)
        f = extract_features(ts, 1, 0)
        assert f.shape == (N_FEATURES,)
        np.testing.assert_array_equal(f[IDX["grad_x"]:IDX["dens_se"] + 1], 0.0)
        assert f[IDX["n_neighbors"]] == 0
        np.testing.assert_array_equal(f[[IDX["nbr_vx"], IDX["nbr_vy"]]], 0.0)
        np.testing.assert_array_equal(f[:2], [52, 50])

    def test_east_neighbor_density(self):
        area = 40.0
        ts = group_records([rec(0, 0, 50, 50), rec(0, 1, 70, 50, area=area)], 100, 100)
        f = extract_features(ts, 0, 0)
        dens = f[IDX["dens_nw"]:IDX["dens_se"] + 1]
        expected = np.zeros(8)
        expected[FEATURE_NAMES.index("dens_e") - IDX["dens_nw"]] = area / 400
        np.testing.assert_allclose(dens, expected, atol=1e-15)
        assert f[IDX["grad_x"]] == pytest.approx(area / 400) and f[IDX["grad_y"]] == 0.0

    def test_diagonal_neighbor_gradient_direction(self):
        # south-east in image coordinates (y grows downwards)
        ts = group_records([rec(0, 0, 50, 50), rec(0, 1, 70, 70, area=80.0)], 100, 100)
        f = extract_features(ts, 0, 0)
        assert f[IDX["dens_se"]] == pytest.approx(0.2)
        g = 0.2 / math.sqrt(2)
        np.testing.assert_allclose(f[[IDX["grad_x"], IDX["grad_y"]]], [g, g], atol=1e-15)

    def test_sector_counts(self):
        recs = [rec(0, 0, 20, 20), rec(0, 1, 80, 20), rec(0, 2, 20, 80), rec(0, 3, 80, 80)]
        f = extract_features(group_records(recs, 100, 100), 0, 0)
        np.testing.assert_array_equal(f[IDX["sector_tl"]:IDX["sector_br"] + 1], [1, 1, 1, 1])

    def test_neighbor_radius_and_mean_velocity(self):
        recs = [rec(0, 0, 50, 50), rec(0, 1, 100, 50), rec(0, 2, 150, 50),
                rec(1, 0, 50, 50), rec(1, 1, 102, 50), rec(1, 2, 151, 50)]
        f = extract_features(group_records(recs, 200, 100), 1, 0)
        assert f[IDX["n_neighbors"]] == 1
        np.testing.assert_array_equal(f[[IDX["nbr_vx"], IDX["nbr_vy"]]], [2, 0])

    def test_area_variation(self):
        recs = [rec(0, 0, 50, 50, area=70), rec(1, 0, 50, 50, area=75)]
        ts = group_records(recs, 100, 100)
        assert extract_features(ts, 0, 0)[IDX["area_var"]] == 0.0
        assert extract_features(ts, 1, 0)[IDX["area_var"]] == 5.0

    def test_track_features_on_simulation(self):
        ts = group_records(simulate(SimConfig()), 300, 100)
        f = track_features(ts, ts.tracks[0])
        assert f.shape == (100, N_FEATURES) and np.all(np.isfinite(f))

    def test_export_feature_matrix(self, tmp_path):
        export_feature_matrix(tmp_path / "f.csv", np.ones((2, N_FEATURES)), np.zeros((2, 2)))
        lines = (tmp_path / "f.csv").read_text().splitlines()
        assert lines[0].split(",") == list(FEATURE_NAMES) + ["vx", "vy"] and len(lines) == 3

    def test_unknown_cell(self):
        with pytest.raises(KeyError):
            extract_features(group_records([rec(0, 0, 5, 5)], 10, 10), 0, 9)


class TestRecursiveVariation:
    def test_constant_series(self):
        np.testing.assert_array_equal(recursive_variation([3, 3, 3, 3], 2), 0.0)

    def test_sum_of_differences(self):
        assert recursive_variation([1, 2, 4, 8], 2)[3] == 6

    def test_window_one_is_difference(self):
        s = np.array([1.0, 4.0, 9.0, 16.0])
        np.testing.assert_array_equal(recursive_variation(s, 1)[1:], np.diff(s))

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=30), st.integers(1, 5))
    def test_equals_explicit_sum(self, s, w):
        s = np.array(s)
        out = recursive_variation(s, w)
        for n in range(len(s)):
            expected = sum(s[k] - s[k - 1] for k in range(max(1, n - w + 1), n + 1))
            assert out[n] == pytest.approx(expected, abs=1e-9)


class TestNormalization:
    def test_endpoints_and_midpoint(self):
        stats = NormStats(np.array([2.0, -4.0]), np.array([6.0, 4.0]))
        np.testing.assert_array_equal(stats.normalize([2.0, -4.0]), [-1.0, -1.0])
        np.testing.assert_array_equal(stats.normalize([6.0, 4.0]), [1.0, 1.0])
        np.testing.assert_array_equal(stats.normalize([4.0, 0.0]), [0.0, 0.0])

    def test_constant_component(self):
        stats = NormStats.fit(np.array([[1.0, 5.0], [2.0, 5.0]]))
        assert stats.normalize([1.5, 5.0])[1] == 0.0
        assert stats.denormalize(stats.normalize([1.5, 5.0]))[1] == 5.0

    @settings(max_examples=200)
    @given(arrays(np.float64, (10, 4), elements=st.floats(-500, 500)))
    def test_round_trip(self, data):
        stats = NormStats.fit(data)
        y = normalize(data, stats)
        assert np.all(y >= -1 - 1e-12) and np.all(y <= 1 + 1e-12)
        assert np.max(np.abs(denormalize(y, stats) - data)) < 1e-12

    def test_invalid(self):
        with pytest.raises(ValueError):
            NormStats(np.array([1.0]), np.array([0.0]))

    def test_dict_round_trip(self):
        stats = NormStats(np.array([0.1, 2.0]), np.array([0.3, 9.0]))
        back = NormStats.from_dict(json.loads(json.dumps(stats.to_dict())))
        np.testing.assert_array_equal(back.min, stats.min)
        np.testing.assert_array_equal(back.max, stats.max)
