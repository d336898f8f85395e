import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msa_lab.dsp import (CropWindow, MelConfig, MelSpectrogram, Waveform,
                         compute_mel, crop, hz_to_mel, is_silent, mel_to_hz,
                         n_frames_for, read_wav, resample_linear, write_wav)


def test_one_second_at_16k_gives_98_frames():
    w = Waveform(np.zeros(16000), 16000)
    spec = compute_mel(w, MelConfig())
    assert spec.n_frames == 98
    assert spec.n_mels == 64


@given(length=st.integers(400, 200000), win=st.integers(2, 800), hop=st.integers(1, 800))
@settings(max_examples=200, deadline=None)
def test_frame_count_formula(length, win, hop):
    if win < hop or length < win:
        return
    assert n_frames_for(length, win, hop) == (length - win) // hop + 1


def test_frame_count_too_short_errors():
    with pytest.raises(ValueError, match="clip_too_short"):
        n_frames_for(399, 400, 160)
    with pytest.raises(ValueError, match="clip_too_short"):
        compute_mel(Waveform(np.zeros(100), 16000), MelConfig())


def test_zero_waveform_hits_log_floor_everywhere():
    cfg = MelConfig()
    spec = compute_mel(Waveform(np.zeros(16000), 16000), cfg)
    assert np.all(spec.data == np.float32(np.log(cfg.log_floor)))


def test_log_floor_lower_bounds_every_entry():
    cfg = MelConfig()
    rng = np.random.default_rng(0)
    spec = compute_mel(Waveform(rng.uniform(-1, 1, 32000), 16000), cfg)
    assert spec.data.min() >= np.float32(np.log(cfg.log_floor))


def test_compute_mel_is_deterministic():
    rng = np.random.default_rng(1)
    samples = rng.uniform(-1, 1, 16000)
    a = compute_mel(Waveform(samples.copy(), 16000), MelConfig())
    b = compute_mel(Waveform(samples.copy(), 16000), MelConfig())
    assert np.array_equal(a.data, b.data)


def test_pure_tone_lands_in_nearest_mel_band():
    # oracle: rebuild the mel center frequencies analytically and find the
    # band whose triangle peaks closest (in mel) to 1 kHz
    cfg = MelConfig()
    sr = 16000
    pts = 700.0 * (10.0 ** (np.linspace(hz_to_mel(0.0), hz_to_mel(sr / 2), cfg.n_mels + 2)
                            / 2595.0) - 1.0)
    centers = pts[1:-1]
    expected_band = int(np.argmin(np.abs(hz_to_mel(centers) - hz_to_mel(1000.0))))

    t = np.arange(16000) / sr
    spec = compute_mel(Waveform(np.sin(2 * np.pi * 1000.0 * t), sr), cfg)
    mean_energy = (np.exp(spec.data.astype(np.float64)) - cfg.log_floor).mean(axis=1)
    assert int(np.argmax(mean_energy)) == expected_band
    assert abs(centers[expected_band] - 1000.0) < 80.0  # sanity: band really sits near 1 kHz


def test_mel_scale_round_trip():
    f = np.linspace(0, 8000, 50)
    assert np.allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-6)


def test_crop_full_width_is_identity():
    rng = np.random.default_rng(2)
    spec = MelSpectrogram(rng.standard_normal((64, 98)).astype(np.float32), clip_id="c")
    out = crop(spec, CropWindow(0, 98))
    assert np.array_equal(out.data, spec.data)
    assert out.clip_id == "c"


def test_crop_takes_requested_columns():
    data = np.tile(np.arange(300, dtype=np.float32), (64, 1))
    out = crop(MelSpectrogram(data), CropWindow(100, 98))
    assert np.array_equal(out.data, data[:, 100:198])


def test_crop_out_of_range():
    spec = MelSpectrogram(np.zeros((64, 300), dtype=np.float32))
    with pytest.raises(ValueError, match="crop_out_of_range"):
        crop(spec, CropWindow(250, 98))
    with pytest.raises(ValueError, match="crop_out_of_range"):
        CropWindow(-1, 98)


def test_is_silent_threshold_cases():
    assert is_silent(Waveform(np.zeros(100), 16000))
    assert not is_silent(Waveform(np.full(100, 0.02), 16000))
    assert is_silent(Waveform(np.full(100, 0.005), 16000))


def test_is_silent_empty_segment_errors():
    with pytest.raises(ValueError, match="empty_segment"):
        is_silent(Waveform(np.array([]), 16000))


@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=64),
       st.floats(1.0001, 50))
@settings(max_examples=200, deadline=None)
def test_scaling_up_never_silences(samples, factor):
    w = Waveform(np.array(samples), 16000)
    scaled = Waveform(np.clip(np.array(samples) * factor, -factor, factor), 16000)
    if not is_silent(w):
        assert not is_silent(scaled)


def test_resample_identity_and_length():
    x = np.sin(np.arange(8000) / 50.0)
    assert np.array_equal(resample_linear(x, 16000, 16000), x)
    y = resample_linear(x, 8000, 16000)
    assert len(y) == 16000


def test_wav_round_trip_int16_and_float32(tmp_path):
    rng = np.random.default_rng(3)
    x = rng.uniform(-0.5, 0.5, 16000)
    write_wav(tmp_path / "f32.wav", Waveform(x, 16000))
    back = read_wav(tmp_path / "f32.wav")
    assert back.sample_rate == 16000
    assert np.allclose(back.samples, x, atol=1e-6)

    import scipy.io.wavfile
    scipy.io.wavfile.write(tmp_path / "i16.wav", 16000, (x * 32767).astype(np.int16))
    back = read_wav(tmp_path / "i16.wav")
    assert np.allclose(back.samples, x, atol=1e-3)


def test_wav_resamples_to_16k(tmp_path):
    import scipy.io.wavfile
    scipy.io.wavfile.write(tmp_path / "w.wav", 8000, np.zeros(8000, dtype=np.float32))
    back = read_wav(tmp_path / "w.wav")
    assert back.sample_rate == 16000
    assert len(back.samples) == 16000


def test_wav_rejects_stereo(tmp_path):
    import scipy.io.wavfile
    scipy.io.wavfile.write(tmp_path / "st.wav", 16000, np.zeros((100, 2), dtype=np.float32))
    with pytest.raises(ValueError, match="unreadable_wav"):
        read_wav(tmp_path / "st.wav")
