import numpy as np
import pytest

from fedprune.data import (CsvSchema, Silo, SyntheticConfig, fingerprint, gen_synthetic_silos, load_csv, normalize,
                           oversample_equalize, split_by_year, write_csv)
from fedprune.errors import ConfigError, DataError


def _silo(sid, n, seed=0, d=3):
    rng = np.random.default_rng(seed)
    year = 2000 + np.arange(n) % 5
    tr, va = split_by_year(year, 2004, 1)
    return Silo(sid, rng.normal(size=(n, d)), rng.normal(size=n), year, tr, va)


class TestSynthetic:
    def test_default_count_and_shape(self):
        silos = gen_synthetic_silos(SyntheticConfig())
        assert len(silos) == 9
        cfg = SyntheticConfig()
        for s in silos:
            assert s.x.shape[1] == cfg.n_features
            assert cfg.samples_range[0] <= len(s.y) <= cfg.samples_range[1]

    def test_deterministic(self):
        a = gen_synthetic_silos(SyntheticConfig(seed=3))
        b = gen_synthetic_silos(SyntheticConfig(seed=3))
        assert fingerprint(a) == fingerprint(b)
        assert fingerprint(a) != fingerprint(gen_synthetic_silos(SyntheticConfig(seed=4)))

    def test_validation_is_latest_years(self):
        cfg = SyntheticConfig(val_years=3)
        for s in gen_synthetic_silos(cfg):
            assert s.year[s.val_idx].min() == cfg.years[1] - 2
            assert s.year[s.train_idx].max() < cfg.years[1] - 2
            assert np.intersect1d(s.train_idx, s.val_idx).size == 0

    def test_label_shift_two_silos(self):
        cfg = SyntheticConfig(num_silos=2, samples_range=(20_000, 20_000), label_shift=5.0, scale_shift=0.0,
                              rotation=0.0, noise_spread=0.0)
        a, b = gen_synthetic_silos(cfg)
        assert abs(abs(a.y.mean() - b.y.mean()) - 10.0) < 0.5

    def test_iid_silos_share_distribution(self):
        cfg = SyntheticConfig(samples_range=(4000, 4000)).iid()
        means = [s.y.mean() for s in gen_synthetic_silos(cfg)]
        assert np.std(means) < 0.5

    def test_label_shift_monotone(self):
        def spread(shift):
            v = []
            for seed in range(3):
                cfg = SyntheticConfig(label_shift=shift, seed=seed)
                v.append(np.var([s.y.mean() for s in gen_synthetic_silos(cfg)]))
            return np.mean(v)
        assert spread(0.0) < spread(3.0) < spread(8.0)

    def test_task_is_nonlinear(self):
        # a least-squares fit misses a clear share of the noiseless signal (about 6%)
        s = gen_synthetic_silos(SyntheticConfig(num_silos=2, samples_range=(3000, 3000), noise=0.0).iid())[0]
        x = np.c_[s.x, np.ones(len(s.y))]
        resid = s.y - x @ np.linalg.lstsq(x, s.y, rcond=None)[0]
        assert resid.var() / s.y.var() > 0.05

    @pytest.mark.parametrize("kw", [dict(num_silos=1), dict(samples_range=(5, 2)), dict(label_shift=-1.0),
                                    dict(val_years=20)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            SyntheticConfig(**kw)


class TestOversample:
    def test_equalizes_and_retains(self):
        a, b = _silo("a", 8, 0), _silo("b", 20, 1)
        out = oversample_equalize([a, b], seed=0)
        assert out[0].n_train == out[1].n_train == b.n_train
        assert set(a.train_idx) <= set(out[0].train_idx)
        assert np.array_equal(out[0].train_idx[:a.n_train], a.train_idx)
        assert np.array_equal(out[0].val_idx, a.val_idx)
        assert set(out[0].train_idx) <= set(a.train_idx)

    def test_already_equal(self):
        a, b = _silo("a", 10, 0), _silo("b", 10, 1)
        out = oversample_equalize([a, b])
        assert all(np.array_equal(o.train_idx, s.train_idx) for o, s in zip(out, (a, b)))

    def test_reported_train_sizes(self):
        sizes = [598, 1000, 2200, 3316]
        silos = []
        for i, n in enumerate(sizes):
            year = np.full(n + 1, 2000)
            year[-1] = 2001
            tr, va = split_by_year(year, 2001, 1)
            silos.append(Silo(str(i), np.zeros((n + 1, 1)), np.zeros(n + 1), year, tr, va))
        assert [s.n_train for s in oversample_equalize(silos)] == [3316] * 4

    def test_empty(self):
        year = np.array([2004])
        s = Silo("e", np.zeros((1, 1)), np.zeros(1), year, np.array([], dtype=int), np.array([0]))
        with pytest.raises(DataError):
            oversample_equalize([s, _silo("a", 10)])


class TestNormalize:
    def test_pooled_moments(self):
        silos, stats = normalize([_silo("a", 50, 0), _silo("b", 80, 1)])
        x = np.concatenate([s.x_train for s in silos])
        np.testing.assert_allclose(x.mean(axis=0), 0, atol=1e-6)
        np.testing.assert_allclose(x.std(axis=0), 1, atol=1e-6)

    def test_inverse(self):
        raw = _silo("a", 40)
        (s,), stats = normalize([raw])
        np.testing.assert_allclose(stats.inverse_x(s.x), raw.x, atol=1e-6)
        np.testing.assert_allclose(stats.inverse_y(s.y), raw.y, atol=1e-6)

    def test_constant_feature(self):
        raw = _silo("a", 30)
        x = raw.x.copy()
        x[:, 1] = 7.0
        (s,), stats = normalize([Silo("a", x, raw.y, raw.year, raw.train_idx, raw.val_idx)])
        assert np.all(s.x[:, 1] == 0) and stats.constant[1]

    def test_uses_train_rows_only(self):
        raw = _silo("a", 30)
        x = raw.x.copy()
        x[raw.val_idx] += 100.0
        (s,), _ = normalize([Silo("a", x, raw.y, raw.year, raw.train_idx, raw.val_idx)])
        assert abs(s.x_train.mean()) < 1e-6


class TestCsv:
    def test_minimal(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("silo_id,year,f0,target\nA,2000,1.5,3\nA,2001,2.5,4\n")
        data = load_csv(p, CsvSchema(val_years=1))
        assert len(data.silos) == 1 and len(data.silos[0].y) == 2 and data.rejected == 0

    def test_rejects_empty_target(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("silo_id,year,f0,target\nA,2000,1.5,3\nA,2001,2.5,\nA,2001,x,1\n")
        data = load_csv(p, CsvSchema(val_years=1))
        assert data.rejected == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_csv(tmp_path / "nope.csv")

    def test_bad_header(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(DataError):
            load_csv(p)

    def test_no_usable_rows(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("silo_id,year,f0,target\nA,x,1,1\n")
        with pytest.raises(DataError):
            load_csv(p)

    @pytest.mark.parametrize("per_silo", [False, True])
    def test_round_trip(self, tmp_path, per_silo):
        cfg = SyntheticConfig(num_silos=3, samples_range=(30, 60))
        silos = gen_synthetic_silos(cfg)
        files = write_csv(silos, tmp_path / ("dir" if per_silo else "all.csv"), per_silo=per_silo)
        assert len(files) == (3 if per_silo else 1)
        back = load_csv(files[0].parent if per_silo else files[0], CsvSchema(val_years=cfg.val_years)).silos
        assert [s.id for s in back] == [s.id for s in silos]
        for a, b in zip(silos, back):
            assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y) and np.array_equal(a.year, b.year)
            assert np.array_equal(a.train_idx, b.train_idx) and np.array_equal(a.val_idx, b.val_idx)
        assert fingerprint(back) == fingerprint(silos)
