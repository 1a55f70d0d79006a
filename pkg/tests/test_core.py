from __future__ import annotations

from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from triad.core import (
    FP_ONE,
    NANOS_MAX,
    ClockExhausted,
    DriftRate,
    ImplausibleRate,
    OffEnclaveInterval,
    Provenance,
    ResidualPolicy,
    ResolutionUnit,
    RttEstimate,
    TrustedTimestamp,
    advance_by_resolution,
    apply_drift,
    compute_error_bound,
    ticks_for_nanos,
)

u64 = st.integers(0, NANOS_MAX)
ratios = st.integers(FP_ONE // 2, 2 * FP_ONE).map(DriftRate)


def test_error_bound_examples():
    assert compute_error_bound(OffEnclaveInterval(0), RttEstimate(0)) == 0
    assert compute_error_bound(OffEnclaveInterval(3_000_000), RttEstimate(140_000)) == 3_140_000


def test_error_bound_saturates():
    assert compute_error_bound(OffEnclaveInterval(NANOS_MAX), RttEstimate(5)) == NANOS_MAX


@given(u64, u64, u64, u64)
def test_error_bound_monotone(d1, d2, r1, r2):
    lo_d, hi_d = sorted((d1, d2))
    lo_r, hi_r = sorted((r1, r2))
    assert compute_error_bound(OffEnclaveInterval(lo_d), RttEstimate(lo_r)) <= \
        compute_error_bound(OffEnclaveInterval(hi_d), RttEstimate(hi_r))


def test_advance_examples():
    assert advance_by_resolution(TrustedTimestamp(100), ResolutionUnit(1)).nanos == 101
    assert advance_by_resolution(TrustedTimestamp(100), ResolutionUnit(250)).nanos == 350
    with pytest.raises(ClockExhausted):
        advance_by_resolution(TrustedTimestamp(NANOS_MAX), ResolutionUnit(1))


def test_advance_keeps_provenance():
    ts = TrustedTimestamp(5, Provenance.PEER, 9, peer_id=2)
    out = advance_by_resolution(ts, ResolutionUnit(3))
    assert (out.provenance, out.peer_id, out.error_bound_nanos) == (Provenance.PEER, 2, 9)


@given(st.integers(0, NANOS_MAX - 10**6), st.integers(1, 10**6))
def test_advance_strictly_increases(n, unit):
    assert advance_by_resolution(TrustedTimestamp(n), ResolutionUnit(unit)).nanos > n


def test_apply_drift_examples():
    assert apply_drift(1000, DriftRate.identity()) == 1000
    assert apply_drift(1000, DriftRate.from_ratio("0.5")) == 500


@given(st.integers(0, 1 << 61), ratios)
def test_apply_drift_matches_exact_rounding(raw, rate):
    # Python's round() on a Fraction is round-half-even, computed exactly
    assert apply_drift(raw, rate) == round(Fraction(raw) * rate.ratio)


def test_apply_drift_ties_to_even():
    half = DriftRate(FP_ONE // 2)
    assert apply_drift(1, half) == 0
    assert apply_drift(3, half) == 2
    assert apply_drift(5, half) == 2


@given(st.integers(0, 1 << 50), st.integers(0, 1 << 50), ratios)
def test_apply_drift_monotone(a, b, rate):
    lo, hi = sorted((a, b))
    assert apply_drift(lo, rate) <= apply_drift(hi, rate)


@given(st.integers(0, 1 << 40), ratios)
def test_inverse_round_trip(x, rate):
    assert abs(apply_drift(apply_drift(x, rate), rate.inverse()) - x) <= 1 + x // (1 << 30)


def test_ticks_for_nanos_inverts():
    rate = DriftRate.from_ratio(Fraction(100, 103))
    ticks = ticks_for_nanos(2_000_000, rate)
    assert abs(apply_drift(ticks, rate) - 2_000_000) <= 1


@pytest.mark.parametrize("ratio", ["0.49", "2.01", "0"])
def test_drift_plausibility_window(ratio):
    with pytest.raises(ImplausibleRate):
        DriftRate.from_ratio(ratio)


def test_drift_window_edges_accepted():
    assert DriftRate.from_ratio("0.5").ratio == Fraction(1, 2)
    assert DriftRate.from_ratio(2).ratio == 2


def test_rtt_split_must_sum():
    assert RttEstimate(10, 4, 6).reading_error_nanos == 5
    with pytest.raises(ValueError):
        RttEstimate(10, 4, 5)
    with pytest.raises(ValueError):
        RttEstimate(10, 4, None)


def test_timestamp_validation():
    with pytest.raises(ValueError):
        TrustedTimestamp(-1)
    with pytest.raises(ValueError):
        TrustedTimestamp(NANOS_MAX + 1)
    with pytest.raises(ValueError):
        TrustedTimestamp(1, Provenance.PEER)
    with pytest.raises(ValueError):
        TrustedTimestamp(1, error_bound_nanos=1, drift_residual_nanos=2)
    with pytest.raises(ValueError):
        ResolutionUnit(0)


def test_residual_policy_rate():
    p = ResidualPolicy()
    assert p.rate == Fraction(5, 95) + Fraction(1, 1000)
    assert p.residual(0) == 0
    assert p.residual(1_000_000) == 53_632
    assert p.widen(1_000) == 1_000 + 54


@given(st.integers(0, 10**15))
def test_residual_covers_undetected_slowdown(elapsed):
    # a counter slowed to 95% reports 0.95 * t for real time t
    real = Fraction(elapsed) / Fraction(95, 100)
    assert elapsed + ResidualPolicy().residual(elapsed) >= real
