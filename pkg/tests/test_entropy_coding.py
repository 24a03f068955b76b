import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from gdcodec.entropy_coding import (
    SCALE_MIN,
    TOTAL,
    CdfTable,
    SymbolRangeError,
    TruncatedStreamError,
    _ndtr,
    build_cdf,
    build_cdfs,
    gaussian_pmf,
    ideal_bits,
    quantize_pmf,
    range_decode,
    range_encode,
)

GOLDEN_SYMBOLS = [
    -5, -4, -3, -2, 0, -4, -3, -2, -1, 0, -3, -2, -1, 0, 1, -3, -2, 0, 1, 2,
    -2, -1, 0, 2, 3, -1, 0, 1, 2, 3, 0, 1, 2, 3, 4, 0, 2, 3, 4, 5,
]
GOLDEN_HEX = "003b00018acd26045f77a84d3794c55ffdacc47a"


def golden_tables():
    means = np.linspace(-3, 3, 40)
    scales = np.linspace(0.04, 4, 40)
    return [build_cdf(m, s) for m, s in zip(means, scales)]


def random_problem(rng, n, lo=-64, hi=63):
    means = rng.normal(0, 4, n)
    scales = np.exp(rng.uniform(np.log(SCALE_MIN), np.log(10), n))
    cdfs = build_cdfs(means, scales, lo, hi)
    u = rng.integers(0, TOTAL, n)
    symbols = (cdfs[:, 1:] <= u[:, None]).sum(axis=1) + lo
    return symbols, (cdfs, lo)


def normal_cdf(x):
    return 0.5 * (1 + math.erf(x / math.sqrt(2)))


class TestBuildCdf:
    def test_table_invariants(self):
        t = build_cdf(0.3, 1.7, -8, 8)
        assert t.cdf[0] == 0 and t.cdf[-1] == TOTAL
        assert len(t.cdf) < TOTAL
        assert np.all(np.diff(t.cdf) >= 1)

    def test_degenerate_scale_concentrates_mass(self):
        t = build_cdf(0.0, SCALE_MIN, -2, 2)
        pmf = t.pmf()
        assert pmf[2] >= 0.999
        assert np.all(np.diff(t.cdf)[[0, 1, 3, 4]] == 1)

    def test_unit_gaussian_mass_matches_erf(self):
        t = build_cdf(0.0, 1.0, -8, 8)
        expected = normal_cdf(0.5) - normal_cdf(-0.5)
        assert expected == pytest.approx(0.3829, abs=1e-4)
        assert abs(t.prob(0) - expected) <= 17 / TOTAL

    def test_all_masses_close_to_erf(self):
        t = build_cdf(0.7, 2.3, -10, 10)
        for k in range(-9, 10):
            expected = normal_cdf((k + 0.5 - 0.7) / 2.3) - normal_cdf((k - 0.5 - 0.7) / 2.3)
            assert abs(t.prob(k) - expected) <= 21 / TOTAL

    def test_tails_folded_into_boundaries(self):
        t = build_cdf(0.0, 3.0, -2, 2)
        assert t.prob(-2) == pytest.approx(normal_cdf(-1.5 / 3.0), abs=6 / TOTAL)

    @pytest.mark.parametrize("scale", [0.04, 0.5, 1.0, 7.0])
    def test_symmetric_for_zero_mean(self, scale):
        t = build_cdf(0.0, scale, -8, 8)
        for k in range(1, 9):
            assert abs(t.freq(k) - t.freq(-k)) <= 1

    @pytest.mark.parametrize("lo,hi", [(3, 3), (4, -1)])
    def test_invalid_range(self, lo, hi):
        with pytest.raises(ValueError):
            build_cdf(0.0, 1.0, lo, hi)

    def test_scale_clamped_to_minimum(self):
        a = build_cdf(0.0, 1e-6, -4, 4)
        b = build_cdf(0.0, SCALE_MIN, -4, 4)
        np.testing.assert_array_equal(a.cdf, b.cdf)

    def test_normal_cdf_port_matches_scipy(self):
        rng = np.random.default_rng(0)
        x = np.concatenate([rng.normal(0, 3, 20000), rng.uniform(-45, 45, 20000),
                            [0.0, -0.0, 1.0, -1.0, math.sqrt(2), -math.sqrt(2), 8 * math.sqrt(2), 1e-300]])
        assert all(_ndtr(v) == ndtr(v) for v in x)

    @pytest.mark.parametrize("spread,lo_scale,hi_scale", [(3, 0.04, 5), (20, 0.01, 100), (90, 0.001, 0.5)])
    def test_compiled_tables_match_numpy_reference(self, spread, lo_scale, hi_scale):
        rng = np.random.default_rng(spread)
        means = rng.normal(0, spread, 20000)
        scales = np.exp(rng.uniform(np.log(lo_scale), np.log(hi_scale), 20000))
        for lo, hi in ((-64, 63), (-3, 5)):
            reference = quantize_pmf(gaussian_pmf(means, scales, lo, hi))
            np.testing.assert_array_equal(build_cdfs(means, scales, lo, hi), reference)

    def test_table_is_immutable(self):
        t = build_cdf(0.0, 1.0)
        with pytest.raises(ValueError):
            t.cdf[3] = 7


class TestRangeCoder:
    def test_empty_sequence(self):
        data = range_encode([], [])
        assert len(data) <= 8
        assert range_decode(data, []).size == 0

    def test_degenerate_symbols_compress(self):
        t = build_cdf(0.0, SCALE_MIN, -64, 63)
        data = range_encode([0] * 1000, [t] * 1000)
        bound = 1000 * -math.log2(t.prob(0)) / 8 + 32
        assert len(data) <= bound
        assert bound < 38

    def test_golden_fixture(self):
        tables = golden_tables()
        assert range_encode(GOLDEN_SYMBOLS, tables).hex() == GOLDEN_HEX
        decoded = range_decode(bytes.fromhex(GOLDEN_HEX), tables)
        assert decoded.tolist() == GOLDEN_SYMBOLS

    def test_out_of_range_symbol_rejected(self):
        tables = [build_cdf(0.0, 1.0, -4, 4)] * 3
        with pytest.raises(SymbolRangeError) as err:
            range_encode([0, 5, 0], tables)
        assert err.value.index == 1

    def test_symbol_table_count_mismatch(self):
        with pytest.raises(ValueError):
            range_encode([0, 1], [build_cdf(0.0, 1.0)])

    def test_truncated_stream(self):
        rng = np.random.default_rng(4)
        symbols, tables = random_problem(rng, 500)
        data = range_encode(symbols, tables)
        with pytest.raises(TruncatedStreamError) as err:
            range_decode(data[:-1], tables)
        assert err.value.position == len(data) - 1
        with pytest.raises(TruncatedStreamError):
            range_decode(b"", tables)

    def test_mixed_width_tables(self):
        tables = [build_cdf(0.0, 1.0, -2, 2), build_cdf(3.0, 5.0, -20, 40), build_cdf(0.0, 1.0, 0, 1)]
        symbols = [-2, 40, 1]
        assert range_decode(range_encode(symbols, tables), tables).tolist() == symbols

    def test_round_trip_10000_trials(self):
        rng = np.random.default_rng(2024)
        for _ in range(10_000):
            n = int(rng.integers(0, 40))
            lo = int(rng.integers(-64, 0))
            hi = int(rng.integers(lo + 1, 64))
            symbols, tables = random_problem(rng, n, lo, hi)
            data = range_encode(symbols, tables)
            np.testing.assert_array_equal(range_decode(data, tables), symbols)

    @settings(max_examples=200, deadline=None)
    @given(
        seed=st.integers(0, 2**32 - 1),
        n=st.integers(1, 300),
        lo=st.integers(-64, 10),
        width=st.integers(1, 100),
    )
    def test_round_trip_property(self, seed, n, lo, width):
        symbols, tables = random_problem(np.random.default_rng(seed), n, lo, lo + width)
        np.testing.assert_array_equal(range_decode(range_encode(symbols, tables), tables), symbols)

    @pytest.mark.parametrize("n", [100, 300, 1000, 3000])
    def test_compression_bound(self, n):
        rng = np.random.default_rng(n)
        for _ in range(30):
            symbols, tables = random_problem(rng, n)
            excess = 8 * len(range_encode(symbols, tables)) - ideal_bits(symbols, tables)
            assert 0 <= excess <= 64

    def test_encode_bound_short_sequences(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            symbols, tables = random_problem(rng, 200)
            assert 8 * len(range_encode(symbols, tables)) <= ideal_bits(symbols, tables) + 32

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        symbols, tables = random_problem(rng, 2000)
        assert range_encode(symbols, tables) == range_encode(symbols.copy(), tables)

    def test_table_objects_and_arrays_agree(self):
        rng = np.random.default_rng(6)
        means, scales = rng.normal(size=50), rng.uniform(0.1, 3, 50)
        objs = [build_cdf(m, s) for m, s in zip(means, scales)]
        arrs = (build_cdfs(means, scales), -64)
        symbols = np.round(means).astype(int)
        assert range_encode(symbols, objs) == range_encode(symbols, arrs)
        assert isinstance(objs[0], CdfTable)
