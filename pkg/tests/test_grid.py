import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from isac_alloc.errors import InvalidConfigError
from isac_alloc.grid import (BASELINE_KINDS, C0, OfdmConfig, ResourceState, ZadoffChuWarning, allocation_from_json,
                             allocation_to_json, baseline_allocation, probe_matrix, read_allocation_csv, unvec,
                             validate, vec, write_allocation_csv, zadoff_chu)


class TestOfdmConfig:
    def test_derived_quantities(self):
        cfg = OfdmConfig(256, 128)
        assert cfg.symbol_duration == pytest.approx(1 / 120e3)
        assert cfg.cp_duration == pytest.approx(0.25 / 120e3)
        assert cfg.total_symbol_duration == pytest.approx(1.25 / 120e3)
        assert cfg.wavelength == pytest.approx(C0 / 28e9)
        assert cfg.noise_power == pytest.approx(1e-18 * 120e3)
        assert cfg.tau0 == pytest.approx(1 / (2 * 256 * 120e3))
        assert cfg.f0 == pytest.approx(1 / (2 * 128 * cfg.total_symbol_duration))

    @pytest.mark.parametrize("kwargs", [
        dict(n_subcarriers=1, n_symbols=8),
        dict(n_subcarriers=8, n_symbols=1),
        dict(n_subcarriers=8, n_symbols=8, subcarrier_spacing=0.0),
        dict(n_subcarriers=8, n_symbols=8, cp_duration=1.0),
        dict(n_subcarriers=8, n_symbols=8, cp_duration=-1e-9),
    ])
    def test_rejects_bad_numerology(self, kwargs):
        with pytest.raises(InvalidConfigError):
            OfdmConfig(**kwargs)

    def test_dict_round_trip(self):
        cfg = OfdmConfig(32, 16, cp_duration=1e-6)
        assert OfdmConfig.from_dict(cfg.to_dict()) == cfg


class TestVectorization:
    def test_column_major(self):
        g = np.arange(6).reshape(3, 2)
        assert vec(g).tolist() == [0, 2, 4, 1, 3, 5]
        assert np.array_equal(unvec(vec(g), 3, 2), g)

    def test_re_indices_match_vec(self):
        cfg = OfdmConfig(4, 3)
        n, m = cfg.re_indices()
        assert np.array_equal(n + 4 * m, np.arange(12))


class TestZadoffChu:
    @pytest.mark.parametrize("N,q", [(1, 1), (5, 2), (7, 3), (13, 1)])
    def test_first_entry_is_one(self, N, q):
        assert zadoff_chu(N, q)[0] == 1 + 0j

    def test_length_two(self):
        with pytest.warns(ZadoffChuWarning):
            s = zadoff_chu(2, 1)
        assert s[1] == pytest.approx(-1 + 0j, abs=1e-15)

    def test_periodic_autocorrelation_odd_prime(self):
        s = zadoff_chu(7, 3)
        assert np.allclose(np.abs(s), 1.0)
        for lag in range(1, 7):
            acc = sum(s[n] * np.conj(s[(n + lag) % 7]) for n in range(7))
            assert abs(acc) < 1e-12

    @settings(max_examples=60, deadline=None)
    @given(N=st.integers(1, 300), q=st.integers(1, 50))
    def test_unit_modulus(self, N, q):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ZadoffChuWarning)
            assert np.allclose(np.abs(zadoff_chu(N, q)), 1.0, atol=1e-12)

    def test_zero_length(self):
        with pytest.raises(InvalidConfigError):
            zadoff_chu(0, 1)

    @pytest.mark.parametrize("N,q", [(8, 1), (9, 3)])
    def test_warns_without_ideal_autocorrelation(self, N, q):
        with pytest.warns(ZadoffChuWarning):
            zadoff_chu(N, q)

    def test_probe_matrix_per_symbol_roots(self):
        cfg = OfdmConfig(7, 3)
        pm = probe_matrix(cfg, roots=[1, 2, 3])
        assert pm.entries.shape == (7, 3)
        assert pm.roots == (1, 2, 3)
        assert np.allclose(pm.entries[:, 2], zadoff_chu(7, 3))


class TestBaselines:
    def test_radar_only(self):
        st_ = baseline_allocation(OfdmConfig(4, 4), "RadarOnly", n_users=2)
        assert np.all(st_.selections[0] == 1) and np.all(st_.selections[1:] == 0)

    def test_comm_only(self):
        st_ = baseline_allocation(OfdmConfig(4, 4), "CommOnly", n_users=2)
        assert np.all(st_.selections[0] == 0)
        assert np.all(st_.selections[1:].sum(axis=0) == 1)

    def test_tdm_block(self):
        st_ = baseline_allocation(OfdmConfig(4, 4), "TDM", 0.5)
        expected = np.zeros((4, 4))
        expected[:, :2] = 1
        assert np.array_equal(st_.selections[0], expected)

    def test_fdm_block(self):
        st_ = baseline_allocation(OfdmConfig(4, 4), "FDM", 0.5)
        expected = np.zeros((4, 4))
        expected[:2, :] = 1
        assert np.array_equal(st_.selections[0], expected)

    def test_uniform_lattice(self):
        st_ = baseline_allocation(OfdmConfig(8, 8), "Uniform", 0.25)
        assert st_.selections[0].sum() == 16
        assert np.array_equal(st_.selections[0][::2, ::2], np.ones((4, 4)))

    def test_random_count_and_replay(self):
        cfg = OfdmConfig(8, 8)
        a = baseline_allocation(cfg, "Random", 0.25, seed=7)
        b = baseline_allocation(cfg, "Random", 0.25, seed=7)
        assert a.selections[0].sum() == 16
        assert np.array_equal(a.selections, b.selections)

    def test_count_rounds_half_up(self):
        # 0.5 * 5 * 3 = 7.5 REs -> 8
        st_ = baseline_allocation(OfdmConfig(5, 3), "Random", 0.5, seed=0)
        assert st_.selections[0].sum() == 8

    def test_power_spread(self):
        st_ = baseline_allocation(OfdmConfig(4, 4), "TDM", 0.5, total_power=32.0)
        assert np.allclose(st_.power, 2.0)

    @settings(max_examples=40, deadline=None)
    @given(kind=st.sampled_from(BASELINE_KINDS), frac=st.floats(0, 1), K=st.integers(0, 3),
           N=st.integers(2, 12), M=st.integers(2, 12), seed=st.integers(0, 2 ** 16))
    def test_exclusive_and_boolean(self, kind, frac, K, N, M, seed):
        st_ = baseline_allocation(OfdmConfig(N, M), kind, frac, K, seed=seed)
        assert st_.is_boolean()
        assert np.all(st_.selections.sum(axis=0) <= 1)
        assert validate(st_).ok
        if kind not in ("RadarOnly", "CommOnly"):
            assert st_.selections[0].sum() == math.floor(frac * N * M + 0.5)

    def test_bad_fraction(self):
        with pytest.raises(InvalidConfigError):
            baseline_allocation(OfdmConfig(4, 4), "TDM", 1.5)


class TestValidate:
    def test_empty_state_ok(self):
        assert validate(ResourceState.empty(4, 4, 2)).ok

    def test_exclusivity_cell(self):
        s = ResourceState.empty(4, 4, 1)
        s.selections[0, 1, 2] = 1
        s.selections[1, 1, 2] = 1
        rep = validate(s)
        assert rep.kinds() == {"exclusivity"}
        assert rep.violations[0].cell == (1, 2)

    def test_budget_excess(self):
        s = ResourceState(np.zeros((1, 2, 2)), np.full((2, 2), 1.01 / 4 * 100))
        rep = validate(s, budget=100.0)
        v = [x for x in rep.violations if x.kind == "power_budget"][0]
        assert v.excess == pytest.approx(1.0)

    def test_fractional_flagged_unless_relaxed(self):
        s = ResourceState(np.full((1, 2, 2), 0.5), np.ones((2, 2)))
        assert validate(s).kinds() == {"boolean"}
        s.relaxed = True
        assert validate(s).ok

    def test_negative_power(self):
        s = ResourceState(np.zeros((1, 2, 2)), -np.ones((2, 2)))
        assert validate(s).kinds() == {"power_sign"}


class TestSerialization:
    def test_csv_round_trip(self, tmp_path):
        st_ = baseline_allocation(OfdmConfig(6, 4), "Random", 0.4, 2, seed=1)
        path = tmp_path / "a.csv"
        write_allocation_csv(st_, path)
        back = read_allocation_csv(path, n_users=2)
        assert np.array_equal(back.selections, st_.selections)

    def test_csv_marks_unassigned(self, tmp_path):
        s = ResourceState.empty(2, 2, 1)
        s.selections[1, 0, 0] = 1
        path = tmp_path / "b.csv"
        write_allocation_csv(s, path)
        assert path.read_text() == "1,-1\n-1,-1\n"

    def test_json_round_trip(self):
        st_ = baseline_allocation(OfdmConfig(6, 4), "Uniform", 0.5, 1, total_power=24.0)
        d = json.loads(json.dumps(allocation_to_json(st_, OfdmConfig(6, 4))))
        back = allocation_from_json(d)
        assert np.array_equal(back.selections, st_.selections)
        assert np.array_equal(back.power, st_.power)
