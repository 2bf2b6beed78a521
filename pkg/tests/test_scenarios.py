import numpy as np
import pytest

from gridtopo.grid import InjectionFrame, TopologyState
from gridtopo.powerflow import derive_graph, solve_dc
from gridtopo.scenarios import (OUTAGE_DURATION, OUTAGES_PER_DAY,
                                attach_outages, eligible_outage_lines,
                                generate_scenario, generate_scenarios,
                                load_scenario, make_split, save_scenario,
                                SplitManifest)


class TestGeneration:
    def test_row_count_and_shapes(self, ieee14):
        sc = generate_scenario(ieee14, 0, seed=42)
        assert sc.load_mw.shape == (8064, 11)
        assert sc.gen_mw.shape == (8064, 5)

    def test_per_step_balance(self, ieee14):
        for sid in range(4):
            sc = generate_scenario(ieee14, sid, seed=42)
            imbalance = np.abs(sc.gen_mw.sum(axis=1) - sc.load_mw.sum(axis=1))
            assert imbalance.max() < 1e-6

    def test_all_values_nonnegative_and_capped(self, ieee14):
        sc = generate_scenario(ieee14, 3, seed=42)
        assert (sc.load_mw >= 0).all()
        assert (sc.gen_mw >= -1e-9).all()
        for g in ieee14.generators:
            assert sc.gen_mw[:, g.id].max() <= g.max_mw + 1e-9

    def test_same_seed_bit_identical(self, ieee14):
        a = generate_scenario(ieee14, 7, seed=13)
        b = generate_scenario(ieee14, 7, seed=13)
        assert np.array_equal(a.load_mw, b.load_mw)
        assert np.array_equal(a.gen_mw, b.gen_mw)
        c = generate_scenario(ieee14, 7, seed=14)
        assert not np.array_equal(a.load_mw, c.load_mw)

    def test_solar_dark_at_night(self, ieee14):
        sc = generate_scenario(ieee14, 1, seed=42)
        solar = next(g for g in ieee14.generators if g.kind == "solar")
        steps = np.arange(sc.steps)
        night = (steps % 288 < 84) | (steps % 288 > 228)
        assert np.all(sc.gen_mw[night, solar.id] == 0.0)
        assert sc.gen_mw[~night, solar.id].max() > 0.0

    def test_step_zero_feasible_for_most_scenarios(self, ieee14):
        # generator calibration target: default topology starts inside limits
        ok = 0
        n = 60
        state = TopologyState(ieee14)
        for sc in generate_scenarios(ieee14, n, seed=42):
            inj = InjectionFrame(sc.gen_mw[0], sc.load_mw[0])
            sol = solve_dc(derive_graph(ieee14, state, inj))
            if sol.converged and sol.rho.max() < 1.0:
                ok += 1
        assert ok >= 0.95 * n


class TestOutages:
    def test_event_counts_and_durations(self, ieee14):
        sc = attach_outages(generate_scenario(ieee14, 0, seed=42), ieee14, seed=42)
        assert len(sc.outages) == OUTAGES_PER_DAY * 28 == 56
        assert all(ev.duration_steps == OUTAGE_DURATION for ev in sc.outages)

    def test_lines_from_eligible_set(self, ieee14):
        eligible = set(eligible_outage_lines(ieee14))
        pairs = {frozenset((ieee14.lines[li].from_sub, ieee14.lines[li].to_sub))
                 for li in eligible}
        assert pairs == {frozenset(p) for p in
                         ((3, 4), (3, 6), (3, 8), (6, 8), (11, 12))}
        sc = attach_outages(generate_scenario(ieee14, 2, seed=42), ieee14, seed=42)
        assert {ev.line for ev in sc.outages} <= eligible

    def test_no_overlap(self, ieee14):
        sc = attach_outages(generate_scenario(ieee14, 5, seed=42), ieee14, seed=42)
        windows = sorted((ev.step, ev.step + ev.duration_steps) for ev in sc.outages)
        for (s1, e1), (s2, e2) in zip(windows, windows[1:]):
            assert e1 <= s2
        assert windows[-1][1] <= sc.steps

    def test_outages_deterministic(self, ieee14):
        base = generate_scenario(ieee14, 4, seed=42)
        a = attach_outages(base, ieee14, seed=9)
        b = attach_outages(base, ieee14, seed=9)
        assert a.outages == b.outages


class TestSplit:
    def _scenarios(self, ieee14, n):
        return generate_scenarios(ieee14, n, seed=1, steps=32)

    def test_sizes_for_1000(self, ieee14):
        scenarios = [type("S", (), {"id": i})() for i in range(1000)]
        diffs = {i: (i * 7919) % 97 for i in range(1000)}
        manifest = make_split(scenarios, diffs)
        assert len(manifest.train) == 700
        assert len(manifest.val) == 100
        assert len(manifest.test) == 200
        assert sorted(manifest.train + manifest.val + manifest.test) == list(range(1000))

    def test_each_bucket_split_exactly(self, ieee14):
        scenarios = [type("S", (), {"id": i})() for i in range(1000)]
        diffs = {i: (i * 31) % 11 for i in range(1000)}
        manifest = make_split(scenarios, diffs)
        for b in range(10):
            ids = [i for i, bb in manifest.bucket_of.items() if bb == b]
            assert len(ids) == 100
            assert sum(1 for i in ids if i in set(manifest.train)) == 70
            assert sum(1 for i in ids if i in set(manifest.val)) == 10
            assert sum(1 for i in ids if i in set(manifest.test)) == 20

    def test_zero_action_scenario_in_easiest_bucket(self, ieee14):
        scenarios = [type("S", (), {"id": i})() for i in range(100)]
        diffs = {i: 5 + i for i in range(100)}
        diffs[42] = 0
        manifest = make_split(scenarios, diffs)
        assert manifest.bucket_of[42] == 0

    def test_deterministic(self):
        scenarios = [type("S", (), {"id": i})() for i in range(100)]
        diffs = {i: i % 13 for i in range(100)}
        a = make_split(scenarios, diffs)
        b = make_split(scenarios, diffs)
        assert (a.train, a.val, a.test) == (b.train, b.val, b.test)

    def test_manifest_roundtrip(self):
        scenarios = [type("S", (), {"id": i})() for i in range(100)]
        diffs = {i: i % 5 for i in range(100)}
        m = make_split(scenarios, diffs)
        m2 = SplitManifest.from_json(m.to_json())
        assert m2.train == m.train and m2.test == m.test
        assert m2.bucket_of == m.bucket_of


class TestDiskFormat:
    def test_roundtrip(self, ieee14, tmp_path):
        sc = attach_outages(generate_scenario(ieee14, 3, seed=5, steps=64),
                            ieee14, seed=5)
        save_scenario(tmp_path, sc)
        back = load_scenario(tmp_path, 3)
        np.testing.assert_allclose(back.load_mw, sc.load_mw, atol=1e-6)
        np.testing.assert_allclose(back.gen_mw, sc.gen_mw, atol=1e-6)
        assert back.outages == sc.outages

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_scenario(tmp_path, 99)
