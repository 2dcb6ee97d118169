import logging
import math

import pytest
from hypothesis import assume, given, strategies as st

import oracles
from cancmac import rates
from cancmac.rates import (OverheadProfile, RateEstimateRow, ancol_beneficial,
                           coop_beneficial, normalize_rate_gain, protocol_overhead,
                           r_ancol, r_ancol_both, r_coop, r_dir, relay_backoff_slots)

W, NV = 20e6, 1e-9
cplx = st.builds(complex, st.floats(-3e-4, 3e-4), st.floats(-3e-4, 3e-4))
power = st.floats(1e-4, 1.0)
gamma = st.floats(0, 1e-7)


def test_r_dir_examples():
    assert r_dir(W, 1.0, 0.0, NV) == 0.0
    assert r_dir(W, 1.0, 1e-9, NV) == pytest.approx(20e6, rel=1e-12)
    assert r_dir(W, 1.0, 15e-9, NV) == pytest.approx(80e6, rel=1e-12)


def test_r_coop_examples():
    assert r_coop(W, 0.1, 1e-7, 0.0, 1e-7, 2.0, NV) == 0.0
    assert r_coop(W, 0.1, 1e-7, 1e-7, 1e-7, 0.0, NV) == 0.0
    with pytest.raises(ValueError):
        r_coop(W, 0.1, 1e-7, 1e-7, 1e-7, 1.0, NV, form="other")


@given(power, gamma, gamma, gamma, st.floats(0, 1e3))
def test_r_coop_matches_oracle(P, g1, g2, g4, g):
    want = oracles.r_coop_paper(W, P, g1, g2, g4, g, NV)
    assert r_coop(W, P, g1, g2, g4, g, NV) == pytest.approx(want, rel=1e-9, abs=1e-6)


@given(power, gamma, gamma, gamma, st.floats(0, 1e3), st.sampled_from(["paper", "mrc"]))
def test_r_coop_capped_by_first_hop(P, g1, g2, g4, g, form):
    cap = W / 2 * math.log2(1 + P * g2 / NV)
    assert r_coop(W, P, g1, g2, g4, g, NV, form) <= cap * (1 + 1e-12)


def test_r_coop_mrc_form():
    P, g1, g2, g4, g = 0.1, 1e-8, 5e-7, 2e-7, 1.5
    relayed = (P * g2 / NV) * g4 * g * g / (1 + g4 * g * g)
    want = W / 2 * min(math.log2(1 + P * g2 / NV), math.log2(1 + P * g1 / NV + relayed))
    assert r_coop(W, P, g1, g2, g4, g, NV, "mrc") == pytest.approx(want, rel=1e-12)


def test_r_ancol_all_zero():
    assert r_ancol(W, 0.1, 0j, 0j, 0j, 0j, 0j, 1.0, NV) == 0.0


@given(power, cplx, cplx, cplx, cplx, cplx)
def test_r_ancol_g0_degenerates(P, h1, h2, h4, h7, h8):
    want = W * math.log2(1 + P * abs(h1) ** 2 / NV + P * abs(h8) ** 2 / NV)
    got = r_ancol(W, P, h1, h2, h4, h7, h8, 0.0, NV)
    if want == 0:
        assert got == 0
    else:
        assert abs(got - want) / want < 1e-12


@given(power, cplx, cplx, cplx, cplx, cplx, st.floats(0, 1e4))
def test_r_ancol_matches_term_by_term(P, h1, h2, h4, h7, h8, g):
    want = oracles.r_ancol_terms(W, P, h1, h2, h4, h7, h8, g, NV)
    got = r_ancol(W, P, h1, h2, h4, h7, h8, g, NV)
    assert got >= 0
    assert got == pytest.approx(want, rel=1e-6, abs=1e-3)


def test_r_ancol_cross_term_sign():
    # With aligned phases the cross term is subtracted, so rotating h8 by pi
    # must raise the rate.
    h1, h2, h4, h7, h8 = 1e-4, 2e-4, 2e-4, 2e-4, 1e-4
    a = r_ancol(W, 0.1, h1, h2, h4, h7, h8, 10.0, NV)
    b = r_ancol(W, 0.1, h1, h2, h4, h7, -h8, 10.0, NV)
    assert b > a


def test_r_ancol_clamped_non_negative():
    assert rates.ancol_snr_sum(0.1, 0, 0, 0, 0, 0, 1.0, NV) == 1.0
    assert r_ancol(W, 0.1, 0, 0, 0, 0, 0, 1.0, NV) >= 0


def test_r_ancol_both_is_min():
    fwd = (1e-4, 2e-4, 3e-4, 1e-4j, 2e-5)
    rev = (2e-5, 1e-4j, 1e-4, 2e-4, 3e-5)
    both = r_ancol_both(W, 0.1, fwd, rev, 3.0, NV)
    assert both == min(r_ancol(W, 0.1, *fwd, 3.0, NV), r_ancol(W, 0.1, *rev, 3.0, NV))


@given(st.floats(1e-4, 1.0), st.floats(1e-4, 1.0), gamma, gamma, gamma, cplx, cplx,
       cplx, cplx, cplx)
def test_rates_monotone_in_power(pa, pb, g1, g2, g4, h1, h2, h4, h7, h8):
    lo, hi = sorted((pa, pb))
    assert r_dir(W, lo, g1, NV) <= r_dir(W, hi, g1, NV)
    # g scaled with P the way the relay does it
    ga = lambda P: math.sqrt(P / (P * g2 + NV))
    assert r_coop(W, lo, g1, g2, g4, ga(lo), NV) <= r_coop(W, hi, g1, g2, g4, ga(hi), NV) * (1 + 1e-12)
    assert (r_ancol(W, lo, h1, h2, h4, h7, h8, 0.0, NV)
            <= r_ancol(W, hi, h1, h2, h4, h7, h8, 0.0, NV) * (1 + 1e-12))


def test_coop_beneficial_examples():
    assert not coop_beneficial(4000, 20e6, 20e6, 1e-6)
    assert coop_beneficial(4000, 40e6, 20e6, 0.0)
    assert 4000 / 30e6 + 50e-6 == pytest.approx(1.8333e-4, rel=1e-4)
    assert coop_beneficial(4000, 30e6, 20e6, 50e-6)
    assert not coop_beneficial(4000, 0.0, 20e6, 0.0)
    assert coop_beneficial(4000, 1e6, 0.0, 0.0)


def test_ancol_beneficial_examples():
    assert not ancol_beneficial(4000, 30e6, 30e6, 1e-5, 1e-5)
    assert ancol_beneficial(4000, 60e6, 30e6, 1e-5, 1e-5)
    assert not ancol_beneficial(4000, 0.0, 30e6, 0.0, 0.0)


@given(st.floats(1e2, 1e5), st.floats(1e5, 1e8), st.floats(1e5, 1e8), st.floats(0.1, 10))
def test_beneficial_scale_invariance(L, ra, rb, k):
    assume(abs(ra - rb) / max(ra, rb) > 1e-9)
    assert coop_beneficial(L, ra, rb, 0.0) == coop_beneficial(k * L, k * ra, k * rb, 0.0)
    assert (ancol_beneficial(L, ra, rb, 0.0, 0.0)
            == ancol_beneficial(k * L, k * ra, k * rb, 0.0, 0.0))


def test_protocol_overhead_examples():
    assert protocol_overhead(OverheadProfile(0, 0, 0, 0, 0, 0)) == 0
    p = OverheadProfile(52e-6, 44e-6, 47e-6, 16e-6, 9e-6, 45e-6)
    assert protocol_overhead(p) == pytest.approx(251e-6, rel=1e-12)
    base = protocol_overhead(OverheadProfile(52e-6, 44e-6, 47e-6, 16e-6, 9e-6))
    assert protocol_overhead(p) - base == pytest.approx(45e-6, rel=1e-9)
    with pytest.raises(ValueError):
        OverheadProfile(-1, 0, 0, 0, 0)


def test_relay_backoff_examples():
    assert relay_backoff_slots(2.0, 10) == 0
    assert relay_backoff_slots(1.0, 10) == 10
    assert relay_backoff_slots(1.5, 10) == 5
    assert relay_backoff_slots(1.9, 10) == 1
    assert relay_backoff_slots(1.2, 10) == 8
    with pytest.raises(ValueError):
        relay_backoff_slots(1.5, 0)


def test_relay_backoff_clamps_with_warning(caplog):
    with caplog.at_level(logging.WARNING, logger="cancmac.rates"):
        assert relay_backoff_slots(3.0, 10) == 0
        assert relay_backoff_slots(0.5, 10) == 10
    assert len(caplog.records) == 2


@given(st.floats(1, 2), st.floats(1, 2), st.integers(1, 64))
def test_relay_backoff_monotone_and_bounded(a, b, n):
    lo, hi = sorted((a, b))
    assert 0 <= relay_backoff_slots(hi, n) <= relay_backoff_slots(lo, n) <= n
    assert relay_backoff_slots(lo, n) == 2 * n - math.floor(round(lo * n, 9))


def test_normalize_rate_gain():
    assert normalize_rate_gain(2 * 20e6, 20e6) == 2.0
    assert normalize_rate_gain(20e6, 20e6) == 1.0
    assert normalize_rate_gain(10e6, 20e6) == 1.0
    assert normalize_rate_gain(5e6, 0.0) == 1.0
    assert normalize_rate_gain(30e6, 20e6) == pytest.approx(1.5)
    assert normalize_rate_gain(1e9, 20e6) == 2.0


def test_rate_row_invariants():
    RateEstimateRow((0, 1), 1.0, (2, 3), 4, 1.0, 2.0)
    with pytest.raises(ValueError):
        RateEstimateRow((0, 1), 1.0, r_ancol=1.0)
    with pytest.raises(ValueError):
        RateEstimateRow((0, 1), 1.0, r_coop=1.0)
    with pytest.raises(ValueError):
        RateEstimateRow((0, 1), -1.0)
