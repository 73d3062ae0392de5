import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import signal

from eegtext.dsp import (EpochTensor, FilterSpec, StftSpec, assemble_epochs, filtfilt,
                         fir_design, fix_length, freq_response, istft, load_epochs, save_epochs,
                         stft, stft_denoise)
from eegtext.ingest import CHANNELS, RawTrial, parse_trial_csv

from oracles import dft_loop, dtft

FS = 128.0
t384 = np.arange(384) / FS


def sine(f, n=384):
    return np.sin(2 * np.pi * f * np.arange(n) / FS)


def db(x):
    return 20 * np.log10(abs(x))


@pytest.fixture(scope="module")
def taps():
    return fir_design(FilterSpec())


@pytest.mark.parametrize("n,expect_tail", [(384, None), (380, 4), (400, None), (100, 284)])
def test_fix_length(n, expect_tail):
    x = np.arange(1, n + 1, dtype=float)
    y = fix_length(x)
    assert y.shape == (384,)
    m = min(n, 384)
    np.testing.assert_array_equal(y[:m], x[:m])
    if expect_tail:
        assert (y[-expect_tail:] == 0).all()


def test_fix_length_rejects_empty():
    with pytest.raises(ValueError):
        fix_length([])


def test_fir_taps_symmetric_and_band_limited(taps):
    assert taps.size == 129
    np.testing.assert_array_equal(taps, taps[::-1])
    assert abs(db(dtft(taps, 25.25, FS))) < 1e-9      # unit gain at band centre
    assert abs(db(dtft(taps, 10.0, FS))) <= 1.0
    assert db(dtft(taps, 60.0, FS)) <= -20.0
    assert abs(dtft(taps, 0.0, FS)) < 1e-12            # DC nulled


def test_fir_response_helper_agrees_with_term_by_term_sum(taps):
    for f in (0.3, 5.0, 33.0, 63.0):
        assert abs(freq_response(taps, f, FS) - dtft(taps, f, FS)) < 1e-12


def test_fir_passband_agrees_with_reference_design(taps):
    ref = signal.firwin(129, [0.5, 50.0], pass_zero=False, window="hamming", fs=FS)
    for f in (5.0, 10.0, 20.0, 30.0, 40.0):
        assert abs(db(dtft(taps, f, FS)) - db(dtft(ref, f, FS))) < 0.5


def test_fir_rejects_bad_edges():
    for lo, hi in [(10, 5), (-1, 20), (1, 64), (1, 80)]:
        with pytest.raises(ValueError):
            FilterSpec(passband_low_hz=lo, passband_high_hz=hi)
    with pytest.raises(ValueError):
        FilterSpec(tap_count=128)


@pytest.mark.parametrize("f", [2.0, 10.0, 20.0, 35.0])
def test_filtfilt_has_zero_lag(taps, f):
    x = sine(f)
    y = filtfilt(x, taps)
    lags = np.arange(-383, 384)
    assert lags[np.argmax(np.correlate(y, x, "full"))] == 0


def test_filtfilt_constant_and_zero_inputs(taps):
    y = filtfilt(np.full(384, 5.0), taps)
    assert np.abs(y[64:-64]).max() <= 0.1
    assert np.abs(y).max() <= 0.1
    np.testing.assert_array_equal(filtfilt(np.zeros(384), taps), 0.0)


def test_filtfilt_short_input_keeps_length(taps):
    assert filtfilt(sine(10, 50), taps).shape == (50,)


def test_stft_frames_and_bin_energy():
    s = StftSpec()
    assert stft(np.zeros(384), s).shape == (23, 17)
    assert not stft(np.zeros(384), s).any()
    spec = stft(sine(16.0), s)
    energy = np.abs(spec) ** 2
    share = energy / energy.sum(axis=1, keepdims=True)
    # the Hann main lobe spreads a bin-centred tone over bins 3..5 at 1/2, 1, 1/2 amplitude
    assert (share.argmax(axis=1) == 4).all()
    np.testing.assert_allclose(share[:, 4], 4 / 6, atol=1e-12)
    np.testing.assert_allclose(share[:, 3:6].sum(axis=1), 1.0, atol=1e-12)
    frame = sine(16.0)[16:48] * s.window
    np.testing.assert_allclose(spec[1], dft_loop(frame), atol=1e-10)
    with pytest.raises(ValueError):
        stft(np.zeros(10), s)


def test_istft_roundtrip_and_zero_spectrogram():
    s = StftSpec()
    x = np.random.default_rng(0).standard_normal(384)
    y = istft(stft(x, s), s, 384)
    assert np.sqrt(np.mean((y[32:-32] - x[32:-32]) ** 2)) <= 1e-6
    assert not istft(np.zeros((23, 17), complex), s).any()


def test_istft_rejects_non_cola():
    s = StftSpec(window_length=32, hop=12)
    with pytest.raises(ValueError):
        istft(np.zeros((5, 17), complex), s)


@given(st.sampled_from([(32, 16), (32, 8), (64, 16), (16, 8), (24, 6)]),
       st.integers(0, 2**16))
def test_stft_roundtrip_for_cola_specs(spec, seed):
    n, h = spec
    s = StftSpec(window_length=n, hop=h)
    assert s.is_cola()
    x = np.random.default_rng(seed).standard_normal(256)
    y = istft(stft(x, s), s, 256)
    assert np.sqrt(np.mean((y[n:-n] - x[n:-n]) ** 2)) <= 1e-6


def _band_gain(before, after, f):
    win = np.hanning(len(before))
    freqs = np.fft.rfftfreq(len(before), 1 / FS)
    i = np.argmin(np.abs(freqs - f))
    return db(np.fft.rfft(after * win)[i] / np.fft.rfft(before * win)[i])


def test_stft_denoise_removes_60hz_keeps_10hz():
    x = sine(10.0) + sine(60.0)
    y = stft_denoise(x, StftSpec())
    assert y.shape == x.shape
    assert _band_gain(x, y, 60.0) <= -20.0
    assert abs(_band_gain(x, y, 10.0)) <= 1.0


def test_stft_denoise_identity_mask_and_zeros():
    s = StftSpec(keep=np.ones(17, bool))
    x = np.random.default_rng(1).standard_normal(384)
    assert np.sqrt(np.mean((stft_denoise(x, s) - x)[32:-32] ** 2)) <= 1e-6
    assert not stft_denoise(np.zeros(384), StftSpec()).any()


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**16))
def test_dsp_ops_are_linear(a, b, seed):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal(384), r.standard_normal(384)
    taps = fir_design(FilterSpec())
    s = StftSpec()
    for op in (lambda v: filtfilt(v, taps), lambda v: stft_denoise(v, s),
               lambda v: istft(stft(v, s), s, 384)):
        np.testing.assert_allclose(op(a * x + b * y), a * op(x) + b * op(y), atol=1e-9)


def _trial(order=CHANNELS, n=384, seed=0, path=""):
    r = np.random.default_rng(seed)
    values = {c: r.standard_normal(n) for c in CHANNELS}
    text = "\n".join(",".join([c, *(repr(float(v)) for v in values[c])]) for c in order)
    tr = parse_trial_csv(text)
    tr.path, tr.label = path, 0
    return tr


def test_assemble_shape_and_channel_order():
    a = _trial(seed=1)
    b = _trial(order=tuple(reversed(CHANNELS)), seed=1)  # same values, shuffled lines
    ep = assemble_epochs([a, b])
    assert ep.data.shape == (2, 5, 384, 1)
    np.testing.assert_array_equal(ep.data[0], ep.data[1])


def test_assemble_clean_sines_change_little():
    waves = {c: 10 * sine(8.0 + i) for i, c in enumerate(CHANNELS)}
    ep = assemble_epochs([RawTrial(waves, label=0)])
    interior = slice(64, -64)
    for i, c in enumerate(CHANNELS):
        err = ep.data[0, i, interior, 0] - waves[c][interior]
        assert np.abs(err).max() < 0.05 * 10


def test_assemble_names_the_failing_trial():
    bad = RawTrial({c: np.array([]) for c in CHANNELS}, path="broken_trial.csv", label=0)
    with pytest.raises(ValueError, match="broken_trial.csv"):
        assemble_epochs([_trial(), bad])


def test_debug_dump_writes_filtered_csv(tmp_path):
    tr = _trial(path=str(tmp_path / "x_n01234567_1_s01_g0001.csv"))
    assemble_epochs([tr], dump_dir=tmp_path)
    dumped = parse_trial_csv((tmp_path / "x_n01234567_1_s01_g0001.filtered.csv").read_text())
    assert len(dumped.channels["Pz"]) == 384


def test_epoch_file_roundtrip(tmp_path):
    ep = assemble_epochs([_trial(seed=i) for i in range(3)], class_names=["a", "b"],
                         splits=["train", "val", "train"])
    save_epochs(ep, tmp_path / "e.bin")
    back = load_epochs(tmp_path / "e.bin")
    np.testing.assert_array_equal(back.data, ep.data)
    assert back.split.tolist() == ["train", "val", "train"]
    assert back.class_names == ["a", "b"]


def test_epoch_tensor_invariants():
    with pytest.raises(ValueError):
        EpochTensor(np.zeros((1, 4, 384, 1)), [0])
    with pytest.raises(ValueError):
        EpochTensor(np.full((1, 5, 384, 1), np.nan), [0])
