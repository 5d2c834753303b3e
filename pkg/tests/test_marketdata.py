import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volcast.marketdata import (
    DataError, Market, MinuteBar, StockMeta, SyntheticConfig, TradingDay, day_vwap, detect_vi,
    generate_synthetic, generate_synthetic_with_spikes, load_minute_bars, read_meta, trading_dates,
    turnover_rate, u_shape_profile, write_meta, write_minute_bars,
)

from conftest import DATE, make_day, random_day


def ohlc_day(open0, high, low, T=3):
    """Flat day at ``open0`` with one bar reaching ``high`` and one ``low``."""
    o = np.full(T, float(open0))
    h, l = o.copy(), o.copy()
    h[1], l[2] = high, low
    return TradingDay("AAA", DATE, o, h, l, o.copy(), np.ones(T, dtype=np.int64), o.copy())


class TestBars:
    def test_ohlc_ordering_enforced(self):
        with pytest.raises(DataError):
            MinuteBar("A", DATE, 0, 10.0, 9.0, 8.0, 9.5, 1, 9.0)

    def test_amount_without_volume_rejected(self):
        with pytest.raises(DataError):
            MinuteBar("A", DATE, 0, 10.0, 10.0, 10.0, 10.0, 0, 5.0)

    def test_shares_outstanding_positive(self):
        with pytest.raises(DataError):
            StockMeta("A", 0)

    def test_day_columns_read_only(self, rng):
        day = random_day(rng, T=10)
        with pytest.raises(ValueError):
            day.volume[0] = 1

    def test_from_bars_round_trip(self, rng):
        day = random_day(rng, T=12)
        assert TradingDay.from_bars(day.bars).equals(day)

    def test_from_bars_needs_contiguous_minutes(self, rng):
        bars = random_day(rng, T=4).bars
        with pytest.raises(DataError):
            TradingDay.from_bars([bars[0], bars[2], bars[1], bars[3]])


class TestVWAP:
    def test_single_bar(self):
        day = make_day([100.0], [10])
        assert day_vwap(day) == 100.0

    def test_two_bars(self):
        day = make_day([100.0, 200.0], [10, 30], open_=[100.0, 200.0])
        assert day_vwap(day) == pytest.approx(175.0, rel=1e-15)

    def test_zero_volume_day(self):
        with pytest.raises(DataError):
            day_vwap(make_day([100.0, 101.0], [0, 0]))

    def test_matches_brute_force(self, rng):
        day = random_day(rng)
        num = sum(((day.high[i] + day.low[i] + day.close[i]) / 3.0) * int(day.volume[i]) for i in range(390))
        assert day_vwap(day) == pytest.approx(num / sum(int(v) for v in day.volume), rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_within_typical_price_range(self, seed):
        day = random_day(np.random.default_rng(seed), T=50)
        v = day_vwap(day)
        tp = day.typical_price[day.volume > 0]
        assert tp.min() - 1e-9 <= v <= tp.max() + 1e-9


class TestVI:
    def test_high_branch_at_ten_percent(self):
        assert detect_vi(ohlc_day(100.0, 110.0, 95.0))

    def test_strictly_inside(self):
        assert not detect_vi(ohlc_day(100.0, 109.99, 90.01))

    def test_low_branch_boundary(self):
        assert detect_vi(ohlc_day(100.0, 105.0, 90.0))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([0.5, 2.0, 4.0, 0.25]))
    def test_invariant_to_power_of_two_scaling(self, seed, k):
        # power-of-two factors scale floats exactly, so the comparison is unaffected by rounding
        rng = np.random.default_rng(seed)
        day = random_day(rng, T=30)
        scaled = TradingDay(day.symbol, day.date, day.open * k, day.high * k, day.low * k, day.close * k,
                            day.volume, day.amount * k)
        assert detect_vi(day) == detect_vi(scaled)


class TestTurnover:
    def test_zero_volume(self):
        bar = MinuteBar("A", DATE, 0, 1.0, 1.0, 1.0, 1.0, 0, 0.0)
        assert turnover_rate(bar, StockMeta("A", 100)) == 0.0

    def test_division(self):
        bar = MinuteBar("A", DATE, 0, 1.0, 1.0, 1.0, 1.0, 1_000_000, 1e6)
        assert turnover_rate(bar, StockMeta("A", 100_000_000)) == 0.01

    def test_additive_over_day(self, rng):
        day = random_day(rng, T=60)
        meta = StockMeta("AAA", 7_654_321)
        total = math.fsum(turnover_rate(b, meta) for b in day.bars)
        assert total == pytest.approx(day.total_volume / meta.shares_outstanding, rel=1e-12)


@pytest.fixture
def meta_table():
    return {"AAA": StockMeta("AAA", 10_000_000, Market.US), "BBB": StockMeta("BBB", 5_000_000, Market.KR)}


def _write_rows(path, rows):
    with open(path, "w") as fh:
        fh.write("symbol,date,minute,open,high,low,close,volume,amount\n")
        for r in rows:
            fh.write(",".join(str(x) for x in r) + "\n")


def _rows(T, skip=(), symbol="AAA", date="2024-03-04"):
    out = []
    for m in range(T):
        if m in skip:
            continue
        p = 10.0 + 0.01 * m
        out.append((symbol, date, m, p, p + 0.02, p - 0.01, p + 0.01, 100 + m, 1000.0 + m))
    return out


class TestLoad:
    def test_complete_day(self, tmp_path, meta_table):
        _write_rows(tmp_path / "b.csv", _rows(390))
        res = load_minute_bars(tmp_path / "b.csv", meta_table)
        assert len(res.days) == 1 and res.warnings == 0 and res.filled_minutes == 0
        assert res.days[0].n_bars == 390

    def test_single_gap_filled_with_previous_close(self, tmp_path, meta_table):
        _write_rows(tmp_path / "b.csv", _rows(390, skip={200}))
        day = load_minute_bars(tmp_path / "b.csv", meta_table).days[0]
        assert day.n_bars == 390
        assert day.volume[200] == 0 and day.amount[200] == 0
        prev_close = day.close[199]
        for col in (day.open, day.high, day.low, day.close):
            assert col[200] == prev_close

    def test_leading_gap_uses_first_open(self, tmp_path, meta_table):
        _write_rows(tmp_path / "b.csv", _rows(390, skip={0, 1}))
        day = load_minute_bars(tmp_path / "b.csv", meta_table).days[0]
        assert day.open[0] == day.open[2] and day.volume[:2].sum() == 0

    def test_heavily_gapped_day_rejected(self, tmp_path, meta_table):
        _write_rows(tmp_path / "b.csv", _rows(390, skip=set(range(300, 390))))
        res = load_minute_bars(tmp_path / "b.csv", meta_table)
        assert res.days == [] and res.rejected == [("AAA", dt.date(2024, 3, 4), 90)]

    def test_five_percent_boundary(self, tmp_path, meta_table):
        # floor(0.05 * 390) = 19 missing minutes is still accepted, 20 is not
        _write_rows(tmp_path / "a.csv", _rows(390, skip=set(range(19))))
        _write_rows(tmp_path / "b.csv", _rows(390, skip=set(range(20))))
        assert len(load_minute_bars(tmp_path / "a.csv", meta_table).days) == 1
        assert len(load_minute_bars(tmp_path / "b.csv", meta_table).days) == 0

    def test_missing_weekday_counted(self, tmp_path, meta_table):
        _write_rows(tmp_path / "b.csv", _rows(10) + _rows(10, date="2024-03-06"))
        res = load_minute_bars(tmp_path / "b.csv", meta_table, bars_per_day=10)
        assert res.missing_days == 1 and len(res.days) == 2

    @pytest.mark.parametrize(
        "bad, message",
        [
            (("ZZZ", "2024-03-04", 0, 1, 1, 1, 1, 1, 1.0), "unknown symbol"),
            (("AAA", "2024-03-04", 0, 1, 1, 1, 1, 1), "columns"),
            (("AAA", "2024-03-04", 0, "x", 1, 1, 1, 1, 1.0), ":3:"),
            (("AAA", "2024-03-04", 0, 10.0, 10.02, 9.99, 10.01, 100, 1000.0), "duplicate"),
        ],
    )
    def test_errors_carry_line_numbers(self, tmp_path, meta_table, bad, message):
        rows = _rows(5)[:1] + [bad]
        _write_rows(tmp_path / "b.csv", rows)
        with pytest.raises(DataError, match=message) as info:
            load_minute_bars(tmp_path / "b.csv", meta_table, bars_per_day=5)
        assert ":3:" in str(info.value)

    def test_round_trip(self, tmp_path):
        days, metas = generate_synthetic(SyntheticConfig(n_stocks=2, n_days=3, bars_per_day=30, seed=4))
        write_minute_bars(tmp_path / "b.csv", days)
        write_meta(tmp_path / "m.csv", metas.values())
        metas2 = read_meta(tmp_path / "m.csv")
        assert metas2 == metas
        again = load_minute_bars(tmp_path / "b.csv", metas2, bars_per_day=30).days
        assert len(again) == len(days) and all(a.equals(b) for a, b in zip(days, again))


class TestSynthetic:
    def test_noise_free_curve_is_the_u_shape(self):
        cfg = SyntheticConfig(n_stocks=1, n_days=1, noise_sigma=0.0, spike_rate=0.0, base_volume=1e6)
        days, _ = generate_synthetic(cfg)
        vol = days[0].volume.astype(float)
        profile = u_shape_profile(390, cfg.u_shape_depth)
        np.testing.assert_allclose(vol / vol[195], profile, rtol=1e-5)

    def test_profile_endpoint_to_mid_ratio(self):
        for depth in (1.5, 3.0, 7.25):
            p = u_shape_profile(390, depth)
            assert p[0] / p[195] == depth
            assert np.argmin(p) == 195

    def test_same_seed_identical(self):
        cfg = SyntheticConfig(n_stocks=2, n_days=2, seed=11)
        a, ma = generate_synthetic(cfg)
        b, mb = generate_synthetic(cfg)
        assert ma == mb and all(x.equals(y) for x, y in zip(a, b))

    def test_spike_count_law_of_large_numbers(self):
        cfg = SyntheticConfig(n_stocks=1, n_days=1000, seed=2)
        _, _, spikes = generate_synthetic_with_spikes(cfg)
        mean = np.mean([len(v) for v in spikes.values()])
        assert 1.8 <= mean <= 2.2

    def test_days_are_valid_and_weekday_dated(self):
        days, metas = generate_synthetic(SyntheticConfig(n_stocks=3, n_days=8, seed=5))
        assert len(days) == 24 and set(metas) == {"S000", "S001", "S002"}
        assert all(d.date.weekday() < 5 and d.total_volume > 0 for d in days)

    def test_trading_dates_skip_weekends(self):
        dates = trading_dates(dt.date(2024, 3, 2), 3)  # a Saturday
        assert dates == [dt.date(2024, 3, 4), dt.date(2024, 3, 5), dt.date(2024, 3, 6)]

    @pytest.mark.parametrize("field", ["u_shape_depth", "spike_scale", "base_volume"])
    def test_scales_must_be_positive(self, field):
        with pytest.raises(ValueError):
            SyntheticConfig(**{field: 0.0})
