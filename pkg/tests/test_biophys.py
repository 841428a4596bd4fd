import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridcrop import autodiff as ad
from hybridcrop import biophys as bp
from hybridcrop import synthgen as sg
from hybridcrop import weatherdata as wd

NO_POOL = bp.GddConfig(pooled_budbreak=False)


def gdd(tbasem=10.0, teffmx=30.0, tsumem=10.0, tsum1=100.0, tsum2=200.0, tsum3=300.0, tsum4=400.0):
    return bp.GddParams(tbasem, teffmx, tsumem, tsum1, tsum2, tsum3, tsum4).as_array()


def fer(**kw):
    base = dict(hcinit=-10.0, hcmin=-2.0, hcmax=-30.0, tendo=5.0, teco=5.0, ecobound=-300.0)
    base.update(kw)
    return bp.FergusonParams(**base).as_array()


def random_params(rng, spec, margin=0.05):
    lo, hi = spec.lo, spec.hi
    return lo + (margin + (1 - 2 * margin) * rng.random(len(spec))) * (hi - lo)


def random_gdd(rng):
    return random_params(rng, sg.SAMPLING_SPECS["gdd"])


def random_weather(rng, T, lo=-10.0, hi=35.0):
    return rng.uniform(lo, hi, T)


# -- parameter types -------------------------------------------------------------------

def test_param_checks():
    bp.GddParams(5, 30, 50, 200, 300, 400, 500).check()
    with pytest.raises(ValueError):
        bp.GddParams(16, 30, 50, 200, 300, 400, 500).check()
    with pytest.raises(ValueError):
        bp.FergusonParams(-10, -2, -1, 5, 5, -300).check()


def test_ferguson_rates_fixed():
    spec = bp.FERGUSON_SPEC
    for n in ("enacclim", "ecacclim", "endeacclim", "ecdeacclim"):
        i = spec.index(n)
        assert spec.lo[i] == spec.hi[i] == 0.2


def test_param_table_round_trip(tmp_path):
    table = {"A": gdd(), "B": gdd(tbasem=5.0)}
    bp.save_param_table(tmp_path / "t.json", bp.GDD_SPEC, table)
    rows = json.loads((tmp_path / "t.json").read_text())["A"]
    assert set(rows[0]) == {"name", "unit", "min", "max", "value"}
    back = bp.load_param_table(tmp_path / "t.json", bp.GDD_SPEC)
    for k in table:
        np.testing.assert_array_equal(back[k], table[k])


# -- gdd_response ----------------------------------------------------------------------------

@pytest.mark.parametrize("tmean,tb,tm,want", [(25, 10, 30, 15), (10, 10, 30, 0), (50, 0, 30, 30),
                                             (-5, 10, 30, 0)])
def test_gdd_response(tmean, tb, tm, want):
    assert bp.gdd_response(tmean, gdd(tbasem=tb, teffmx=tm)) == want


@settings(max_examples=60, deadline=None)
@given(st.floats(-40, 60), st.floats(0, 15), st.floats(15, 45))
def test_gdd_response_bounds(t, tb, tm):
    d = float(bp.gdd_response(t, gdd(tbasem=tb, teffmx=tm)))
    assert 0.0 <= d <= tm


# -- gdd_step ---------------------------------------------------------------------------------

def test_threshold_crossing_records_onset():
    st_ = bp.PhenologyState(bp.Stage.DORMANT, 109.0)
    out = bp.gdd_step(st_, gdd(), 25.0, 42)
    assert out.stage == bp.Stage.BUDBREAK
    assert out.onset_days == {bp.Stage.BUDBREAK: 42}
    assert out.dd_accum == pytest.approx(109 + 15 - 110)


def test_cold_season_stays_dormant():
    st_ = bp.PhenologyState()
    for d in range(100):
        st_ = bp.gdd_step(st_, gdd(), 5.0, d)
    assert st_.stage == bp.Stage.DORMANT and st_.dd_accum == 0.0


def test_constant_warmth_reaches_budbreak_on_tenth_day():
    # 10 degree days per day against a threshold of 100: day index 9 is the tenth day
    st_ = bp.PhenologyState()
    for d in range(12):
        st_ = bp.gdd_step(st_, gdd(), 20.0, d, NO_POOL)
    assert st_.onset_days[bp.Stage.BUDBREAK] == 9
    s = bp.gdd_rollout(np.full(12, 20.0), gdd(), NO_POOL)
    assert s.onsets[1] == 9


def test_pooled_threshold_uses_emergence_sum():
    s = bp.gdd_rollout(np.full(20, 20.0), gdd(tsumem=50.0))
    assert s.onsets[1] == 14


def test_hard_reset_delays_later_stage():
    p = gdd(tsum2=105.0)
    t = np.full(40, 23.0)
    carry = bp.gdd_rollout(t, p, NO_POOL)
    reset = bp.gdd_rollout(t, p, bp.GddConfig(False, carry_overshoot=False))
    assert carry.onsets[1] == reset.onsets[1]
    assert carry.onsets[2] < reset.onsets[2]
    np.testing.assert_array_equal(reset.stages, bp.oracle_gdd(t, p, bp.GddConfig(False, False)).stages)


def test_ripe_is_absorbing():
    s = bp.gdd_rollout(np.full(200, 35.0), gdd())
    assert s.stages[-1] == bp.Stage.RIPE
    assert np.all(np.isfinite(s.onsets))


# -- rollout contracts ---------------------------------------------------------------------

def test_length_mismatch_is_rejected():
    with pytest.raises(ValueError):
        bp.gdd_rollout(np.zeros(5), np.tile(gdd(), (3, 1)))
    with pytest.raises(ValueError):
        bp.ferguson_rollout(np.zeros(5), np.tile(fer(), (3, 1)))


def test_broadcast_equals_repeat():
    rng = np.random.default_rng(3)
    t = random_weather(rng, 150)
    p = random_gdd(rng)
    a = bp.gdd_rollout(t, p)
    b = bp.gdd_rollout(t, np.tile(p, (150, 1)))
    np.testing.assert_array_equal(a.stages, b.stages)
    f = fer()
    np.testing.assert_array_equal(bp.ferguson_rollout(t, f).values,
                                  bp.ferguson_rollout(t, np.tile(f, (150, 1))).values)


def test_generator_labels_match_differentiable_rollout(gdd_small, ferguson_small):
    for s in gdd_small.seasons:
        p = gdd_small.table.params[s.cultivar]
        r = bp.gdd_rollout(s.weather, p)
        np.testing.assert_array_equal(r.onsets, s.target.onsets)
    for s in ferguson_small.seasons:
        r = bp.ferguson_rollout(s.weather, ferguson_small.table.params[s.cultivar])
        np.testing.assert_allclose(r.values, s.target.values, rtol=0, atol=1e-9)


def test_oracle_empty_and_single_day():
    e = bp.oracle_gdd(np.zeros(0), gdd())
    assert len(e) == 0 and np.all(np.isnan(e.onsets))
    one = bp.oracle_gdd(np.array([25.0]), gdd())
    assert one.stages.tolist() == [0]
    h = bp.oracle_ferguson(np.array([0.0]), fer())
    assert h.values[0] == pytest.approx(-10 + 0.2 * -5 * (1 - 8 / 28))
    assert len(bp.oracle_ferguson(np.zeros(0), fer())) == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gdd_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(1, 250))
    t = random_weather(rng, T)
    p = random_gdd(rng)
    a = bp.gdd_rollout(t, p)
    b = bp.oracle_gdd(t, p)
    np.testing.assert_array_equal(a.stages, b.stages)
    np.testing.assert_array_equal(a.onsets, b.onsets)
    assert np.all(np.diff(a.stages) >= 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ferguson_matches_oracle_and_stays_bounded(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(1, 200))
    t = random_weather(rng, T, -25, 20)
    p = random_params(rng, bp.FERGUSON_SPEC, 0.0)
    a = bp.ferguson_rollout(t, p)
    b = bp.oracle_ferguson(t, p)
    np.testing.assert_allclose(a.values, b.values, rtol=0, atol=1e-9)
    np.testing.assert_array_equal(a.phase, b.phase)
    hcmin, hcmax = p[bp.F_HCMIN], p[bp.F_HCMAX]
    assert np.all(a.values >= hcmax - 1e-12) and np.all(a.values <= hcmin + 1e-12)
    assert np.all(np.diff(a.phase.astype(int)) >= 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_daily_params_match_oracle(seed):
    rng = np.random.default_rng(seed)
    T = 120
    t = random_weather(rng, T)
    p = np.array([random_gdd(rng) for _ in range(T)])
    np.testing.assert_array_equal(bp.gdd_rollout(t, p).stages, bp.oracle_gdd(t, p).stages)


def test_batch_scan_matches_stepper():
    rng = np.random.default_rng(8)
    B, T = 4, 90
    t = rng.uniform(0, 30, (B, T))
    p = np.array([[random_gdd(rng) for _ in range(T)] for _ in range(B)])
    valid = np.ones((B, T), bool)
    valid[1, 70:] = False
    tr = bp.gdd_rollout_batch(t, p, valid)
    st_ = bp.GddStepper(B)
    for d in range(T):
        st_.step(p[:, d], t[:, d], valid[:, d])
    ref = st_.finish()
    np.testing.assert_array_equal(tr.stages, ref.stages)
    np.testing.assert_array_equal(tr.onsets, ref.onsets)
    np.testing.assert_allclose(tr.onset_soft.value, ref.onset_soft.value, rtol=1e-12)
    np.testing.assert_allclose(tr.acc.value, ref.acc.value, rtol=1e-12)

    def loss_scan(q):
        return ad.vsum(bp.gdd_rollout_batch(t, q["p"], valid).onset_soft)

    def loss_step(q):
        s = bp.GddStepper(B)
        for d in range(T):
            s.step(ad.getitem(q["p"], (slice(None), d)), t[:, d], valid[:, d])
        return ad.vsum(s.finish().onset_soft)

    g1 = ad.grad(loss_scan, {"p": p})["p"]
    g2 = ad.grad(loss_step, {"p": p})["p"]
    np.testing.assert_allclose(g1, g2, rtol=1e-10, atol=1e-12)


def test_resumed_rollout_matches_single_pass():
    rng = np.random.default_rng(2)
    t = rng.uniform(0, 30, (2, 120))
    p = random_gdd(rng)
    full = bp.gdd_rollout_batch(t, p)
    a = bp.gdd_rollout_batch(t[:, :60], p)
    b = bp.gdd_rollout_batch(t[:, 60:], p, start_stage=a.stages[:, -1], start_acc=a.acc.value,
                             day_offset=60)
    np.testing.assert_array_equal(np.concatenate([a.stages, b.stages], 1), full.stages)


# -- Ferguson --------------------------------------------------------------------------------

def test_hardiness_saturates_at_bounds():
    p = fer(hcinit=-30.0)
    s = bp.ferguson_step(bp.HardinessState(-30.0), p, -10.0)
    assert s.hc == -30.0
    s = bp.ferguson_step(bp.HardinessState(-2.0), p, 20.0)
    assert s.hc == -2.0


def test_midway_acclimation_example():
    p = fer()
    s = bp.ferguson_step(bp.HardinessState(-16.0), p, 0.0)
    assert s.hc - (-16.0) == pytest.approx(-0.5, abs=1e-12)
    d = bp.hardiness_delta(-16.0, -2.0, -30.0, 0.2, 0.2, -5.0, 0.0)
    assert float(d.value) == pytest.approx(-0.5, abs=1e-12)


def test_phase_flips_once_under_sustained_cold():
    p = fer(ecobound=-200.0)
    t = np.concatenate([np.full(60, -5.0), np.full(40, 15.0)])
    s = bp.ferguson_rollout(t, p)
    flips = np.flatnonzero(np.diff(s.phase.astype(int)))
    assert len(flips) == 1
    assert s.phase[-1]
    # -10 chilling units per day reach -200 on the twentieth day
    assert np.argmax(s.phase) == 19


def test_chill_sum_is_non_increasing():
    rng = np.random.default_rng(0)
    st_ = bp.HardinessState(-10.0)
    p = fer()
    prev = 0.0
    for t in rng.uniform(-20, 20, 100):
        st_ = bp.ferguson_step(st_, p, t)
        assert st_.chill_sum <= prev
        prev = st_.chill_sum


def test_initial_hardiness_is_clamped():
    assert float(bp.initial_hardiness(fer(hcinit=5.0)).value) == -2.0


# -- differentiability -----------------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_degree_day_gradient_in_tbasem(seed):
    rng = np.random.default_rng(seed)
    p = random_gdd(rng)
    t = random_weather(rng, 60)
    tb, tm = p[0], p[1]
    keep = (np.abs(t - tb) > 1e-3) & (np.abs(t - tb - tm) > 1e-3)
    t = t[keep]

    def total(q):
        return ad.vsum(bp.gdd_response(t, q["p"]))

    g = ad.grad(total, {"p": p})["p"][0]
    eps = 1e-6
    up, dn = p.copy(), p.copy()
    up[0] += eps
    dn[0] -= eps
    num = (float(bp.gdd_response(t, up).sum()) - float(bp.gdd_response(t, dn).sum())) / (2 * eps)
    assert g == pytest.approx(num, rel=1e-4, abs=1e-8)


def test_ferguson_gradient_matches_finite_difference():
    rng = np.random.default_rng(4)
    t = rng.uniform(-15, 10, 40)
    p = fer(hcinit=-12.0, hcmax=-25.0)

    def loss(q):
        return ad.vsum(ad.square(bp.ferguson_rollout_batch(t, q["p"]).lte))

    g = ad.grad(loss, {"p": p})["p"]
    for i in (bp.F_HCINIT, bp.F_TENDO, bp.F_HCMAX):
        up, dn = p.copy(), p.copy()
        up[i] += 1e-6
        dn[i] -= 1e-6
        f = lambda q: float(loss({"p": ad.const(q)}).value)  # noqa: E731
        assert g[i] == pytest.approx((f(up) - f(dn)) / 2e-6, rel=1e-4, abs=1e-7)


def test_rollout_from_weather_series_uses_recorded_mean():
    w = wd.simulate_weather(0, "WA")
    s = bp.rollout("gdd", w, gdd(tbasem=5.0))
    np.testing.assert_array_equal(s.stages, bp.oracle_gdd(w.column("tmean"), gdd(tbasem=5.0)).stages)
    assert s.dates is w.dates
    with pytest.raises(ValueError):
        bp.rollout("wofost", w, gdd())


def test_threshold_dropping_below_accumulator_crosses_at_day_start():
    # four capped days bank 120 degree days against 310; on day 4 the
    # threshold falls to 110 while no degree days accrue
    t = np.array([[40.0, 40.0, 40.0, 40.0, 5.0, 5.0]])
    p = np.tile(gdd(), (1, 6, 1))
    p[0, :4, 3] = 300.0
    tr = bp.gdd_rollout_batch(t, p)
    assert tr.stages[0].tolist() == [0, 0, 0, 0, 1, 1]
    assert tr.onsets[0, 1] == 4
    assert tr.onset_soft.value[0, 1] == pytest.approx(3.0)
    g = ad.grad(lambda q: ad.vsum(bp.gdd_rollout_batch(t, q["p"]).onset_soft), {"p": p})["p"]
    assert np.all(np.isfinite(g))
    st_ = bp.GddStepper(1)
    for d in range(6):
        st_.step(p[:, d], t[:, d])
    np.testing.assert_array_equal(st_.finish().onset_soft.value, tr.onset_soft.value)
    np.testing.assert_array_equal(tr.stages[0], bp.oracle_gdd(t[0], p[0]).stages)
