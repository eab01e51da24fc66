"""Closed-form analysis against Monte Carlo oracles built directly on the channel model."""

import itertools
import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lorarelay import analysis as A
from lorarelay.core import FixedDistance, Geometry, Protocol, ScenarioConfig, UniformAnnulus, p_tx, validate_config

DEFAULT = validate_config(ScenarioConfig())


def _capture_oracle(cfg, n_trials, seed, d_gw=None, d_rel=None):
    """Monte Carlo of one tagged frame: returns per-trial (gw_ok, relay_ok) arrays.

    Interferers follow Binomial(n-1, p_tx); each receiver draws its own fading.
    """
    rng = np.random.default_rng(seed)
    g = cfg.geometry
    pt = p_tx(cfg)
    k = rng.binomial(cfg.n_sensors - 1, pt, size=n_trials)
    kmax = int(k.max(initial=0))
    ple, link_gain, cap_ratio = cfg.path_loss_exponent, cfg.gamma_linear, cfg.capture_ratio
    sens_mw = cfg.sensitivity_mw(cfg.sf_sensor)
    mask = np.arange(kmax)[None, :] < k[:, None]

    def link(law):
        dist_gw = law.sample(rng, n_trials)
        di = law.sample(rng, n_trials * kmax).reshape(n_trials, kmax) if kmax else np.zeros((n_trials, 0))
        p0 = link_gain * rng.exponential(size=n_trials) * dist_gw**-ple
        pi = link_gain * rng.exponential(size=(n_trials, kmax)) * di**-ple
        strongest = np.where(mask, pi, 0.0).max(axis=1, initial=0.0)
        return (p0 >= sens_mw) & (p0 > cap_ratio * strongest)

    return link(d_gw or g.sensor_gateway), link(d_rel or g.sensor_relay)


def _within(value, samples, z=4.0, bias=2e-4):
    mean = samples.mean()
    se = samples.std(ddof=1) / math.sqrt(samples.size)
    assert abs(value - mean) <= z * se + bias, (value, mean, se)


# -- exact formula pieces --


def test_p_rw_values():
    assert A.p_rw(1) == 0.5
    assert A.p_rw(11) == 11 / 12
    with pytest.raises(ValueError):
        A.p_rw(0)


def test_coded_payload_three_messages():
    assert A.coded_payload_bytes(DEFAULT, 3) == 16


def test_s_c_single_slot_window():
    assert A.s_c_closed(0.3, 0.5, 1) == 1.0
    assert A.s_c_sum(0.3, 0.5, 1) == 1.0
    cfg = ScenarioConfig(protocol=Protocol.COOPERATIVE, n_r=1)
    assert A.analyze(cfg).intermediates.s_c == 1.0


@settings(max_examples=200)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(1, 64))
def test_s_c_forms_agree(p_both, f, n_r):
    total = p_both + f
    if total > 1:
        p_both, f = p_both / total, f / total
    assert abs(A.s_c_sum(p_both, f, n_r) - A.s_c_closed(p_both, f, n_r)) <= 1e-12


@given(st.floats(0, 1), st.integers(1, 40))
def test_s_c_is_one_when_no_relay_only_slots(p_both, n_r):
    assert A.s_c_closed(p_both, 1.0 - p_both, n_r) == pytest.approx(1.0, abs=1e-12)


def test_s_c_brute_force_enumeration():
    cfg = DEFAULT.with_(n_r=5)
    pb, f = A.p_gr(cfg), A.f_empty(cfg)
    probs = {"both": pb, "relay_only": 1.0 - pb - f, "none": f}
    total = 0.0
    for outcome in itertools.product(probs, repeat=4):
        if "relay_only" not in outcome:
            total += math.prod(probs[o] for o in outcome)
    assert A.s_c(cfg) == pytest.approx(total, abs=1e-14)


def test_rdc_zero_without_traffic():
    cfg = DEFAULT.with_(lambda_rate=0.0)
    res = A.analyze(cfg)
    assert res.intermediates.f == 1.0
    assert res.intermediates.p_gr == 0.0
    assert res.l_av_s == 0.0 and res.rdc == 0.0


def test_rdc_cooperative_over_single_ratio():
    # same l_av: the two relays together transmit once per n_r slots
    for n_r in (1, 5, 11):
        single = DEFAULT.with_(n_r=n_r)
        coop = validate_config(single.with_(protocol=Protocol.COOPERATIVE, n_s="auto"))
        l_av = 0.01
        ratio = A.rdc_from_average(coop, l_av) / A.rdc_from_average(single, l_av)
        assert ratio == pytest.approx((n_r + 1) / n_r, rel=1e-12)


def test_average_frame_binomial():
    cfg = DEFAULT.with_(n_r=3)
    f = 0.7
    expected = sum(
        math.comb(3, m) * (1 - f) ** m * f ** (3 - m) * cfg.airtime(7, 10 + 2 * m) for m in range(1, 4)
    )
    assert A.average_relay_frame(cfg, f) == pytest.approx(expected, rel=1e-12)


# -- probabilities against Monte Carlo --


def test_s_dir_against_monte_carlo():
    gw, _ = _capture_oracle(DEFAULT, 4 * 10**5, 1)
    _within(A.s_dir(DEFAULT, "truncated"), gw.astype(float))


def test_s_dir_annulus_against_monte_carlo():
    cfg = validate_config(ScenarioConfig(geometry=Geometry(UniformAnnulus(500.0, 2500.0), FixedDistance(1000.0), 1000.0)))
    gw, _ = _capture_oracle(cfg, 4 * 10**5, 2)
    _within(A.s_dir(cfg, "truncated"), gw.astype(float))


def test_s_sr_against_monte_carlo():
    for n_r in (1, 11):
        cfg = DEFAULT.with_(n_r=n_r)
        gw, rel = _capture_oracle(cfg, 4 * 10**5, 3 + n_r)
        _within(A.s_sr(cfg) / A.p_rw(n_r), (rel & ~gw).astype(float))


def test_p_gr_and_f_against_slot_monte_carlo():
    # whole slots: every sensor may transmit; the relay captures at most one frame
    cfg = DEFAULT.with_(n_sensors=20)
    rng = np.random.default_rng(9)
    n_slots = 10**6
    pt = p_tx(cfg)
    link_gain, ple, cap_ratio = cfg.gamma_linear, cfg.path_loss_exponent, cfg.capture_ratio
    sens_mw = cfg.sensitivity_mw(8)
    tx = rng.random((n_slots, cfg.n_sensors)) < pt
    busy = np.flatnonzero(tx.any(axis=1))
    tx = tx[busy]

    def rx(d):
        p = link_gain * rng.exponential(size=tx.shape) * d**-ple
        return np.where(tx, p, 0.0)

    p0, p1 = rx(2000.0), rx(1000.0)

    def winner(p):
        order = np.sort(p, axis=1)
        best, second = order[:, -1], order[:, -2]
        ok = (best >= sens_mw) & (best > cap_ratio * second)
        return np.where(ok, p.argmax(axis=1), -1)

    w0, w1 = winner(p0), winner(p1)
    relay_got = w1 >= 0
    both = relay_got & (w0 == w1)
    f_mc = 1.0 - relay_got.sum() / n_slots
    pgr_mc = both.sum() / n_slots
    se_f = math.sqrt(f_mc * (1 - f_mc) / n_slots)
    se_g = math.sqrt(pgr_mc * (1 - pgr_mc) / n_slots)
    assert abs(A.f_empty(cfg) - f_mc) < 4 * se_f + 1e-4
    assert abs(A.p_gr(cfg) - pgr_mc) < 4 * se_g + 1e-4


def test_p_gr_conjunction_bound():
    cfg = DEFAULT
    lp = A.link_probabilities(cfg)
    assert lp.p_gr_frame <= min(lp.s_dir, lp.relay_rx_frame) + 1e-12
    assert lp.p_gr + lp.f <= 1.0 + 1e-12


def test_s_rg_closed_form():
    cfg = DEFAULT
    sens_mw = cfg.sensitivity_mw(7)
    assert A.s_rg(cfg) == pytest.approx(math.exp(-sens_mw * 1000.0**3.5 / cfg.gamma_linear), rel=1e-12)


# -- structural properties --


def test_clustered_matches_general():
    # the clustered form assumes no loss to sensitivity, so give the links 60 dB of margin
    for n in (10, 20, 40):
        cfg = validate_config(ScenarioConfig(n_sensors=n, median_margin_db=60.0))
        assert A._clear_margins(cfg)
        assert A.s_sr(cfg, "clustered") == pytest.approx(A.s_sr(cfg, "general"), abs=1e-4)


def test_truncated_vs_exponential_sdir():
    assert abs(A.s_dir(DEFAULT, "truncated") - A.s_dir(DEFAULT, "exponential")) < 1e-3


def test_mlr_identity_and_range():
    for p in (Protocol.SINGLE_RELAY, Protocol.COOPERATIVE):
        for n_r in (1, 4, 11):
            res = A.analyze(ScenarioConfig(protocol=p, n_r=n_r))
            lp = res.intermediates
            for v in (lp.s_dir, lp.s_sr, lp.s_rg, lp.s_c, lp.p_gr, lp.f, res.mlr):
                assert 0.0 <= v <= 1.0
            assert res.mlr + lp.s_dir + res.s_rel == pytest.approx(1.0, abs=1e-12)


def test_dead_relay_link():
    cfg = DEFAULT.with_(geometry=Geometry(FixedDistance(2000.0), FixedDistance(1000.0), 1e7))
    res = A.analyze(cfg)
    assert res.intermediates.s_rg == 0.0
    assert res.mlr == pytest.approx(1.0 - res.intermediates.s_dir, abs=1e-12)
    best, _, results = A.optimal_nr(cfg, 15)
    assert best == 1


def test_mlr_non_increasing_in_gamma():
    base = DEFAULT.gamma_db
    mlrs = [A.analyze(DEFAULT.with_(gamma_db=base + dg)).mlr for dg in (-6, -3, 0, 3, 6)]
    assert all(b <= a + 1e-12 for a, b in zip(mlrs, mlrs[1:]))


def test_cooperative_not_worse_than_single():
    for n_r in range(1, 16):
        single = A.analyze(ScenarioConfig(n_r=n_r)).mlr
        coop = A.analyze(ScenarioConfig(protocol=Protocol.COOPERATIVE, n_r=n_r)).mlr
        assert coop <= single + 1e-12


def test_baselines_rejected():
    for p in (Protocol.NO_RELAY, Protocol.IMMEDIATE, Protocol.UNCODED):
        with pytest.raises(A.UnsupportedProtocolForAnalysis):
            A.analyze(ScenarioConfig(protocol=p))


def test_coded_overflow_warning():
    with pytest.warns(A.CodedFrameOverflow):
        A.analyze(ScenarioConfig(n_r=40))


def test_f_clamped_with_warning(monkeypatch):
    real = A._moments

    def inflated(cfg, tol=1e-9):
        return replace(real(cfg, tol), exp_rel=1e3)

    monkeypatch.setattr(A, "_moments", inflated)
    with pytest.warns(A.FOutOfRange):
        assert A.f_empty(DEFAULT) == 0.0
    assert A.f_empty(DEFAULT, clamp=False) < 0.0


def test_analysis_deterministic():
    A._moments_cached.cache_clear()
    first = A.analyze(DEFAULT).to_dict()
    A._moments_cached.cache_clear()
    assert A.analyze(DEFAULT).to_dict() == first


def test_optimal_nr_defaults():
    best, mlr, results = A.optimal_nr(DEFAULT, 20)
    assert 1 < best < 20
    assert mlr == min(r.mlr for r in results)
    best_c, _, _ = A.optimal_nr(DEFAULT.with_(protocol=Protocol.COOPERATIVE), 20)
    assert best_c == 1


def test_expect_helper():
    from lorarelay.channel import RAYLEIGH

    assert A.expect(lambda a: a, [RAYLEIGH]) == pytest.approx(1.0, rel=1e-6)
    assert A.expect(lambda a, d: a * d, [RAYLEIGH, UniformAnnulus(1.0, 2.0)]) == pytest.approx(14 / 9, rel=1e-6)
    assert A.expect(lambda d: d, [FixedDistance(3.0)]) == 3.0


def test_warnings_silent_at_defaults():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        A.analyze(DEFAULT)
