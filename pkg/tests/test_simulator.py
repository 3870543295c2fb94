import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aspnn import simulator as sim
from aspnn.dataset import group_records
from aspnn.simulator import (SimCell, SimConfig, SimulationError, add_noise, position_noise,
                             resolve_elastic_collision, simulate)


def cell(i, x, y, vx, vy, r=5.0):
    return SimCell(i, np.array([x, y], float), np.array([vx, vy], float), r)


def kinetic(*cells):
    return sum(0.5 * float(c.velocity @ c.velocity) for c in cells)


def no_overlap(records, radius):
    by_frame = {}
    for r in records:
        by_frame.setdefault(r.frame, []).append((r.x, r.y))
    for frame, pts in by_frame.items():
        xy = np.array(pts)
        d = np.hypot(*(xy[:, None, :] - xy[None, :, :]).transpose(2, 0, 1))
        np.fill_diagonal(d, np.inf)
        assert d.min() >= 2 * radius - 1e-9, f"overlap in frame {frame}"


class TestCollision:
    def test_head_on_swap(self):
        a, b = resolve_elastic_collision(cell(0, 0, 0, 1, 0), cell(1, 9, 0, -1, 0))
        np.testing.assert_array_equal(a.velocity, [-1, 0])
        np.testing.assert_array_equal(b.velocity, [1, 0])

    def test_unequal_head_on_exchanges(self):
        a, b = resolve_elastic_collision(cell(0, 0, 0, 3, 0), cell(1, 9, 0, -0.5, 0))
        np.testing.assert_allclose(a.velocity, [-0.5, 0], atol=1e-15)
        np.testing.assert_allclose(b.velocity, [3, 0], atol=1e-15)

    def test_grazing_unchanged(self):
        a0, b0 = cell(0, 0, 0, 0, 1), cell(1, 10, 0, 0, -1)
        a, b = resolve_elastic_collision(a0, b0)
        np.testing.assert_array_equal(a.velocity, [0, 1])
        np.testing.assert_array_equal(b.velocity, [0, -1])

    def test_separating_pair_unchanged(self):
        a, b = resolve_elastic_collision(cell(0, 0, 0, -1, 0), cell(1, 9, 0, 1, 0))
        np.testing.assert_array_equal(a.velocity, [-1, 0])

    def test_coincident_centres(self):
        with pytest.raises(SimulationError):
            resolve_elastic_collision(cell(0, 1, 1, 1, 0), cell(1, 1, 1, 0, 0))

    @settings(max_examples=200)
    @given(st.lists(st.floats(-10, 10), min_size=6, max_size=6))
    def test_conservation(self, v):
        a0 = cell(0, 0, 0, v[0], v[1])
        b0 = cell(1, 6 + abs(v[4]) / 10, v[5] / 2, v[2], v[3])
        a, b = resolve_elastic_collision(a0, b0)
        np.testing.assert_allclose(a.velocity + b.velocity, a0.velocity + b0.velocity,
                                   rtol=0, atol=1e-12)
        assert abs(kinetic(a, b) - kinetic(a0, b0)) <= 1e-9
        # tangential components are untouched
        n = (b0.position - a0.position) / np.linalg.norm(b0.position - a0.position)
        t = np.array([-n[1], n[0]])
        assert a.velocity @ t == pytest.approx(a0.velocity @ t, abs=1e-12)
        assert b.velocity @ t == pytest.approx(b0.velocity @ t, abs=1e-12)


class TestSimulate:
    def test_default_shape(self):
        recs = simulate(SimConfig())
        assert len(recs) == 2000
        assert {r.frame for r in recs} == set(range(100))

    def test_single_cell_velocity_closed_form(self):
        recs = simulate(SimConfig(n_cells=1))
        ts = group_records(recs, 300, 100)
        v = ts.tracks[0].velocity
        n = np.arange(1, 100)
        np.testing.assert_allclose(v[1:, 0], 0.05 * n, atol=1e-9)
        np.testing.assert_allclose(v[1:, 1], 0.005 * n, atol=1e-9)

    def test_no_increments_constant_position(self):
        recs = simulate(SimConfig(n_cells=1, dvx=0.0, dvy=0.0))
        xy = {(r.x, r.y) for r in recs}
        assert len(xy) == 1

    def test_deterministic_default_stays_inside(self):
        recs = simulate(SimConfig())
        xs = np.array([r.x for r in recs])
        ys = np.array([r.y for r in recs])
        assert xs.min() >= 5 and xs.max() <= 295 and ys.min() >= 5 and ys.max() <= 95
        no_overlap(recs, 5.0)

    def test_seed_reproducible(self):
        assert simulate(SimConfig(seed=3)) == simulate(SimConfig(seed=3))
        assert simulate(SimConfig(seed=3)) != simulate(SimConfig(seed=4))

    def test_head_on_pair_in_simulation_exchanges(self):
        cfg = SimConfig(n_cells=2, dvx=0.0, dvy=0.0)
        cells = [cell(0, 100, 50, 1, 0), cell(1, 111, 50, -1, 0)]
        pairs = sim.step(cells, cfg)
        assert pairs == [(0, 1)]
        np.testing.assert_array_equal(cells[0].velocity, [-1, 0])
        np.testing.assert_array_equal(cells[1].velocity, [1, 0])

    def test_infeasible_packing(self):
        with pytest.raises(SimulationError):
            simulate(SimConfig(n_cells=500, channel_width=50, channel_height=20))

    @pytest.mark.parametrize("bad", [dict(radius=0), dict(n_cells=0), dict(noise_fraction=-1),
                                     dict(spawn="nowhere"), dict(radius=60)])
    def test_invalid_config(self, bad):
        with pytest.raises(SimulationError):
            SimConfig(**bad).validate()

    def test_stress_run_conserves_in_collisions(self, monkeypatch):
        events = []
        original = sim.resolve_elastic_collision

        def recording(a, b):
            before = (a.velocity.copy(), b.velocity.copy())
            out = original(a, b)
            events.append((before, (out[0].velocity.copy(), out[1].velocity.copy())))
            return out

        monkeypatch.setattr(sim, "resolve_elastic_collision", recording)
        recs = simulate(SimConfig(frames=1000, spawn="channel", seed=1))
        assert len(recs) == 20 * 1000
        assert len(events) > 10
        for (va, vb), (wa, wb) in events:
            np.testing.assert_allclose(wa + wb, va + vb, rtol=0, atol=1e-12)
            ke0 = 0.5 * (va @ va + vb @ vb)
            ke1 = 0.5 * (wa @ wa + wb @ wb)
            assert abs(ke1 - ke0) <= 1e-9 * max(1.0, ke0)
        no_overlap(recs, 5.0)


class TestNoise:
    def test_zero_noise_unchanged(self):
        recs = simulate(SimConfig())
        assert add_noise(recs, 0.0, 0) == recs

    def test_bound_respected(self):
        rng = np.random.default_rng(0)
        speed = rng.uniform(0, 10, size=20_000)
        d = position_noise(speed, 0.10, rng)
        assert np.all(np.abs(d) <= 0.10 * speed[:, None] + 1e-15)

    def test_sigma_monte_carlo(self):
        rng = np.random.default_rng(1)
        speed = np.full(100_000, 2.0)
        d = position_noise(speed, 0.10, rng, clamp=False)
        target = 0.10 * 2.0 / 3.0
        assert abs(d.std(axis=0) - target).max() < 0.05 * target

    def test_noisy_simulation_deviates_by_bounded_amount(self):
        clean = simulate(SimConfig())
        noisy = simulate(SimConfig(noise_fraction=0.10))
        ts = group_records(clean, 300, 100)
        key = {(r.frame, r.cell_id): r for r in noisy}
        for r in clean:
            v = ts.tracks[r.cell_id].velocity[r.frame]
            speed = 0.0 if r.frame == 0 else float(np.hypot(*v))
            n = key[(r.frame, r.cell_id)]
            assert abs(n.x - r.x) <= 0.10 * speed + 1e-12
            assert abs(n.y - r.y) <= 0.10 * speed + 1e-12
