import math

import numpy as np
import pytest
import scipy.signal
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from spinefuse import dsp, phantom as ph
from spinefuse.errors import ParameterError

FS = 30.0


def closed_form_gain(f, fc, fs):
    """Prewarped Butterworth magnitude of a 2nd-order bilinear design."""
    r = math.tan(math.pi * f / fs) / math.tan(math.pi * fc / fs)
    return 1.0 / math.sqrt(1.0 + r**4)


def sine(freq, cycles, fs=FS, amp=1.0):
    """Whole number of cycles, both end samples on zero crossings."""
    n = int(round(cycles / freq * fs))
    t = np.arange(n + 1) / fs
    return t, amp * np.sin(2 * np.pi * freq * t)


def rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


def df1_pass(c, x):
    """Direct form I, started in the steady state of the first sample."""
    x1 = x2 = y1 = y2 = x[0]
    y = np.empty_like(x)
    for i, xi in enumerate(x):
        yi = c.b0 * xi + c.b1 * x1 + c.b2 * x2 - c.a1 * y1 - c.a2 * y2
        x2, x1 = x1, xi
        y2, y1 = y1, yi
        y[i] = yi
    return y


def oracle_filtfilt(c, x, pad):
    x = np.asarray(x, dtype=float)
    ext = np.concatenate([
        [2 * x[0] - x[i] for i in range(pad, 0, -1)],
        x,
        [2 * x[-1] - x[-1 - i] for i in range(1, pad + 1)],
    ])
    y = df1_pass(c, ext)
    y = df1_pass(c, y[::-1])[::-1]
    return y[pad:pad + x.size]


@pytest.mark.parametrize("fc", [0.05, 0.3, 1.0, 3.5])
def test_butterworth_dc_and_cutoff(fc):
    c = dsp.design_butterworth_lp(2, fc, FS)
    assert abs(c.response(0.0, FS)) == pytest.approx(1.0, abs=1e-9)
    assert abs(c.response(fc, FS)) == pytest.approx(1 / math.sqrt(2), abs=1e-6)
    db = 20 * math.log10(abs(c.response(fc, FS)))
    assert db == pytest.approx(-3.0103, abs=1e-3)
    assert abs(c.response(4 * fc, FS)) < abs(c.response(2 * fc, FS))


@pytest.mark.parametrize("fc", [0.05, 0.3, 2.0])
def test_butterworth_matches_closed_form_and_scipy(fc):
    c = dsp.design_butterworth_lp(2, fc, FS)
    freqs = np.linspace(0.0, FS / 2 * 0.999, 200)
    expected = np.array([closed_form_gain(f, fc, FS) for f in freqs])
    np.testing.assert_allclose(np.abs(c.response(freqs, FS)), expected, atol=1e-9)
    b, a = scipy.signal.butter(2, fc, fs=FS)
    np.testing.assert_allclose(c.b, b, atol=1e-12)
    np.testing.assert_allclose(c.a, a, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(ratio=st.floats(1e-5, 0.4999))
def test_designed_filters_are_stable(ratio):
    c = dsp.design_butterworth_lp(2, ratio * FS, FS)
    assert np.all(np.abs(c.poles()) < 1 - 1e-9)


@pytest.mark.parametrize("fc", [15.0, 20.0, 0.0, -1.0])
def test_butterworth_rejects_bad_cutoff(fc):
    with pytest.raises(ParameterError):
        dsp.design_butterworth_lp(2, fc, FS)


def test_butterworth_only_second_order():
    with pytest.raises(ParameterError):
        dsp.design_butterworth_lp(4, 1.0, FS)


def test_coeffs_json():
    text = dsp.design_butterworth_lp(2, 0.3, FS).to_json()
    assert '"b0"' in text and '"a2"' in text


def test_filtfilt_matches_df1_oracle():
    rng = np.random.default_rng(3)
    x = np.cumsum(rng.normal(size=400))
    for fc in (0.3, 2.0, 7.5):
        c = dsp.design_butterworth_lp(2, fc, FS)
        pad = dsp.pad_length(c, x.size)
        np.testing.assert_allclose(dsp.filtfilt(c, x), oracle_filtfilt(c, x, pad), atol=1e-10)


def test_filtfilt_constant():
    c = dsp.design_butterworth_lp(2, 0.05, FS)
    y = dsp.filtfilt(c, np.full(500, 3.7))
    np.testing.assert_allclose(y, 3.7, atol=1e-9)


def test_filtfilt_passband_sine_no_lag():
    fs = 100.0
    c = dsp.design_butterworth_lp(2, 0.25 * fs, fs)
    f = 0.01 * fs
    t, x = sine(f, 10, fs=fs)
    y = dsp.filtfilt(c, x)
    assert rms(y) == pytest.approx(rms(x), rel=0.01)
    lags = np.arange(-20, 21)
    xc = [np.dot(x[20:-20], np.roll(y, k)[20:-20]) for k in lags]
    assert lags[int(np.argmax(xc))] == 0
    pad = dsp.pad_length(c, x.size)
    np.testing.assert_allclose(y, oracle_filtfilt(c, x, pad), atol=1e-10)


def test_filtfilt_impulse_symmetric():
    c = dsp.design_butterworth_lp(2, 1.0, FS)
    x = np.zeros(601)
    x[300] = 1.0
    y = dsp.filtfilt(c, x)
    np.testing.assert_allclose(y[:300], y[301:][::-1], atol=1e-12)


def test_filtfilt_symmetric_pulse_keeps_argmax():
    c = dsp.design_butterworth_lp(2, 0.3, FS)
    n = np.arange(500)
    x = np.exp(-((n - 217) ** 2) / (2 * 9.0**2))
    assert np.argmax(dsp.filtfilt(c, x)) == 217


def test_filtfilt_too_short():
    c = dsp.design_butterworth_lp(2, 0.3, FS)
    with pytest.raises(ParameterError):
        dsp.filtfilt(c, np.ones(30))


def test_remove_drift_constant():
    np.testing.assert_allclose(dsp.remove_drift(np.full(300, -2.5), FS), 0.0, atol=1e-8)


def test_remove_drift_attenuates_slow_sine():
    _, x = sine(0.01, 3)
    resid = dsp.remove_drift(x, FS)
    assert rms(resid) < 0.05 * rms(x)


def test_remove_drift_passes_1hz():
    _, x = sine(1.0, 300)
    y = dsp.remove_drift(x, FS)
    assert rms(y - x) < 0.02 * rms(x)


def test_smooth_reduces_white_noise():
    x = np.random.default_rng(0).normal(size=3000)
    assert np.var(dsp.smooth(x, FS)) < np.var(x)


def test_smooth_keeps_slow_sine():
    _, x = sine(0.05, 10)
    assert rms(dsp.smooth(x, FS) - x) < 0.02 * rms(x)


def test_smooth_attenuates_3hz():
    _, x = sine(3.0, 100)
    expected_db = 40 * math.log10(closed_form_gain(3.0, 0.3, FS))
    assert expected_db < -30
    measured_db = 20 * math.log10(rms(dsp.smooth(x, FS)) / rms(x))
    assert measured_db < -30


def test_normalize01_examples():
    np.testing.assert_allclose(dsp.normalize01([2, 4, 6]), [0, 0.5, 1])
    np.testing.assert_array_equal(dsp.normalize01([5, 5, 5]), [0, 0, 0])
    with pytest.raises(ParameterError):
        dsp.normalize01([])


finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 50), elements=finite))
def test_normalize01_range_and_idempotence(x):
    y = dsp.normalize01(x)
    if np.ptp(x) == 0:
        assert np.all(y == 0)
        return
    assert y.min() == 0.0 and y.max() == 1.0
    np.testing.assert_allclose(dsp.normalize01(y), y, atol=1e-12)


def test_resample_identity_on_grid():
    pos = 3.0 + 0.5 * np.arange(40)
    vals = np.random.default_rng(1).normal(size=40)
    tr = dsp.resample_to_grid(pos, vals, 0.5)
    assert tr.origin_mm == 3.0 and tr.spacing_mm == 0.5
    np.testing.assert_allclose(tr.values, vals, atol=1e-12)


def test_resample_linear_ramp_exact():
    pos = np.sort(np.random.default_rng(2).uniform(0, 100, 57))
    pos[0], pos[-1] = 0.0, 100.0
    tr = dsp.resample_to_grid(pos, 3.0 * pos - 7.0, 0.5)
    np.testing.assert_allclose(tr.values, 3.0 * tr.positions_mm - 7.0, atol=1e-12)
    assert tr.positions_mm[-1] <= pos[-1]


def test_resample_sine_against_closed_form():
    t = np.arange(0, 7.5 + 1e-9, 1 / FS)
    pos = 20.0 * t
    wavelength = 30.0
    vals = np.sin(2 * np.pi * pos / wavelength)
    tr = dsp.resample_to_grid(pos, vals, 0.5)
    err = np.abs(tr.values - np.sin(2 * np.pi * tr.positions_mm / wavelength))
    # linear interpolation bound: h^2/8 * max|f''| with h = 2/3 mm
    assert err.max() < (2 / 3) ** 2 / 8 * (2 * np.pi / wavelength) ** 2 + 1e-12
    assert err.max() < 1e-2


def test_resample_collapses_duplicates():
    pos = np.array([0.0, 1.0, 1.0, 2.0])
    vals = np.array([0.0, 1.0, 3.0, 2.0])
    tr = dsp.resample_to_grid(pos, vals, 1.0)
    np.testing.assert_allclose(tr.values, [0.0, 2.0, 2.0])


def test_resample_rejects_non_monotone():
    with pytest.raises(ParameterError):
        dsp.resample_to_grid([0, 2, 1], [0, 0, 0], 0.5)
    with pytest.raises(ParameterError):
        dsp.resample_to_grid([0], [0], 0.5)


def slow_clean_phantom(**kw):
    # Slow sweep over sharp bumps: the force maximum sits one sigma past the
    # apex and the 0.3 Hz smoothing adds a lag of its own, so both must stay small.
    base = dict(robot_speed=4.0, bump_sigma_per_level=(1.0,) * 5, applied_fz=10.0)
    base.update(kw)
    return ph.SpinePhantom(**base)


def local_maxima(trace):
    idx, _ = scipy.signal.find_peaks(trace.values, prominence=0.05)
    return trace.positions_mm[idx]


def test_preprocess_peaks_near_vertebrae():
    p = slow_clean_phantom()
    force, us, labels = dsp.preprocess_scan(ph.generate_scan(p))
    centers = np.array(p.vertebra_centers)
    for trace in (force, us):
        peaks = local_maxima(trace)
        assert peaks.size == 5
        assert np.all(np.abs(peaks - centers) <= 3.0)


def test_preprocess_shared_grid_and_determinism():
    rec = ph.generate_scan(ph.SpinePhantom(noise_std_force=0.3, us_noise_std=0.1, seed=3))
    f1, u1, l1 = dsp.preprocess_scan(rec, 0.5)
    f2, u2, l2 = dsp.preprocess_scan(rec, 0.5)
    assert f1.same_grid(u1) and len(l1) == len(f1)
    assert l1.spacing_mm == 0.5 and l1.origin_mm == f1.origin_mm
    assert np.array_equal(f1.values, f2.values) and np.array_equal(u1.values, u2.values)
    assert np.array_equal(l1.labels, l2.labels)
    for tr in (f1, u1):
        assert tr.values.min() >= 0.0 and tr.values.max() <= 1.0


def test_preprocess_labels_nearest_neighbour():
    rec = ph.generate_scan(ph.SpinePhantom())
    _, _, labels = dsp.preprocess_scan(rec, 0.5)
    for pos, lab in zip(labels.positions_mm, labels.labels):
        nearest = int(np.argmin(np.abs(rec.positions - pos)))
        assert lab == rec.ground_truth[nearest]


def test_preprocess_commutes_with_translation():
    rec = ph.generate_scan(slow_clean_phantom())
    delta = 12.5
    shifted = ph.ScanRecord(rec.timestamps, rec.positions + delta, rec.fy, rec.fz,
                            rec.us_prob, rec.ground_truth)
    a = dsp.preprocess_scan(rec, 0.5)
    b = dsp.preprocess_scan(shifted, 0.5)
    for ta, tb in zip(a[:2], b[:2]):
        assert tb.origin_mm == ta.origin_mm + delta
        pa = scipy.signal.find_peaks(ta.values)[0]
        pb = scipy.signal.find_peaks(tb.values)[0]
        np.testing.assert_array_equal(ta.positions_mm[pa] + delta, tb.positions_mm[pb])
        np.testing.assert_allclose(ta.values, tb.values, atol=1e-12)


@pytest.mark.parametrize("drift_freq", [0.005, 0.01, 0.02])
def test_drift_cancellation_keeps_peaks(drift_freq):
    p = slow_clean_phantom()
    rec = ph.generate_scan(p)
    bump_fy = np.max(np.abs(rec.fy))
    drifted = slow_clean_phantom(
        drift_params=ph.DriftParams(amplitude=5 * bump_fy, frequency=drift_freq, phase=0.7)
    )
    ref = local_maxima(dsp.preprocess_scan(rec)[0])
    got = local_maxima(dsp.preprocess_scan(ph.generate_scan(drifted))[0])
    assert ref.size == 5
    # residual drift may add weak maxima between bumps; each vertebra peak must survive
    moved = np.array([np.min(np.abs(got - r)) for r in ref])
    assert np.all(moved < 2.0)


def test_trace_csv_round_trip(tmp_path):
    tr = dsp.UniformTrace(1.25, 0.5, np.random.default_rng(0).uniform(size=30))
    dsp.write_trace_csv(tr, tmp_path / "t.csv")
    back = dsp.read_trace_csv(tmp_path / "t.csv")
    assert back.origin_mm == tr.origin_mm and back.spacing_mm == tr.spacing_mm
    assert np.array_equal(back.values, tr.values)
    assert (tmp_path / "t.csv").read_text().startswith("pos_mm,value\n")
