import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.io import wavfile

from audiokd.errors import DecodeError, EmptyInputError, TooShortError
from audiokd.frontend import (
    MelConfig,
    WaveformClip,
    compute_mel,
    frame_count,
    load_waveform,
    mel_band_centers,
    mel_filterbank,
    mel_power,
)

SR = 32000


def test_load_stereo_resampled_to_mono(tmp_path):
    t = np.arange(44100) / 44100
    left = (0.5 * np.sin(2 * np.pi * 440 * t) * 32767).astype(np.int16)
    right = np.zeros_like(left)
    path = tmp_path / "stereo.wav"
    wavfile.write(path, 44100, np.stack([left, right], axis=1))
    clip = load_waveform(path, SR)
    assert clip.sample_rate == SR
    assert clip.samples.ndim == 1
    assert len(clip) == SR
    assert np.abs(clip.samples).max() <= 1.0
    # channel average halves the amplitude of a one-sided signal
    assert np.abs(clip.samples).max() == pytest.approx(0.25, abs=0.01)


def test_load_mono_native_rate_is_exact(tmp_path):
    pcm = np.random.default_rng(0).integers(-32768, 32767, SR, dtype=np.int16)
    path = tmp_path / "mono.wav"
    wavfile.write(path, SR, pcm)
    clip = load_waveform(path, SR)
    np.testing.assert_array_equal(clip.samples, pcm / 32768.0)


@pytest.mark.parametrize("dtype,scale", [(np.int16, 32768.0), (np.int32, 2147483648.0)])
def test_load_ten_second_file(tmp_path, dtype, scale):
    pcm = np.zeros(10 * SR, dtype=dtype)
    path = tmp_path / "ten.wav"
    wavfile.write(path, SR, pcm)
    assert len(load_waveform(path, SR)) == 320000


def test_load_errors(tmp_path):
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"not a wav file at all")
    with pytest.raises(DecodeError):
        load_waveform(bad)
    with pytest.raises(DecodeError):
        load_waveform(tmp_path / "missing.wav")
    empty = tmp_path / "empty.wav"
    wavfile.write(empty, SR, np.zeros(0, dtype=np.int16))
    with pytest.raises(EmptyInputError):
        load_waveform(empty)


def test_silence_is_log_floor():
    cfg = MelConfig()
    spec = compute_mel(WaveformClip(np.zeros(10 * SR)), cfg)
    assert np.all(spec.values == np.float32(np.log(cfg.log_floor)))


@pytest.mark.parametrize("hop,expected", [(10, 999), (20, 500)])
def test_frame_counts_ten_seconds(hop, expected):
    # 1 + ceil((320000 - 800) / hop_len)
    cfg = MelConfig(hop_ms=hop)
    assert frame_count(320000, cfg) == expected
    assert compute_mel(WaveformClip(np.zeros(320000)), cfg).n_frames == expected


def test_single_frame_and_too_short():
    for hop in (10, 15, 20, 25):
        cfg = MelConfig(hop_ms=hop)
        assert frame_count(cfg.win_length, cfg) == 1
    cfg = MelConfig()
    with pytest.raises(TooShortError):
        compute_mel(WaveformClip(np.zeros(cfg.win_length - 1)), cfg)


def test_hop20_is_half_of_hop10():
    a = frame_count(320000, MelConfig(hop_ms=10))
    b = frame_count(320000, MelConfig(hop_ms=20))
    assert abs(b - a / 2) <= 1


def _direct_band_energies(freq, cfg):
    """Oracle: DFT of one windowed frame by explicit summation, then the filterbank."""
    n = cfg.win_length
    t = np.arange(n)
    x = np.sin(2 * np.pi * freq * t / cfg.sample_rate)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * t / n)
    k = np.arange(cfg.n_fft // 2 + 1)
    basis = np.exp(-2j * np.pi * np.outer(k, t) / cfg.n_fft)
    power = np.abs(basis @ (x * w)) ** 2
    return mel_filterbank(cfg) @ power


@pytest.mark.parametrize("band", [20, 45, 70, 100])
def test_sine_at_band_center_peaks_in_that_band(band):
    cfg = MelConfig(n_mels=128)
    freq = mel_band_centers(cfg)[band]
    assert np.argmax(_direct_band_energies(freq, cfg)) == band
    clip = WaveformClip(np.sin(2 * np.pi * freq * np.arange(SR) / SR))
    spec = compute_mel(clip, cfg)
    assert np.argmax(spec.values.mean(axis=1)) == band


def test_fast_path_matches_direct_dft():
    cfg = MelConfig(n_mels=64)
    freq = 1234.5
    x = np.sin(2 * np.pi * freq * np.arange(cfg.win_length) / SR)
    np.testing.assert_allclose(mel_power(x, cfg)[:, 0], _direct_band_energies(freq, cfg),
                               rtol=1e-9, atol=1e-12)


def test_filters_have_unit_area():
    cfg = MelConfig(n_mels=40)
    fb = mel_filterbank(cfg)
    df = cfg.sample_rate / cfg.n_fft
    # wide high-frequency filters are well sampled by the FFT grid
    np.testing.assert_allclose(fb[20:].sum(axis=1) * df, 1.0, rtol=0.02)


def test_determinism():
    rng = np.random.default_rng(3)
    clip = WaveformClip(rng.uniform(-1, 1, SR))
    a, b = compute_mel(clip, MelConfig()), compute_mel(clip, MelConfig())
    assert a.values.tobytes() == b.values.tobytes()


@settings(max_examples=40, deadline=None)
@given(n=st.integers(800, 20000), hop=st.sampled_from([10, 15, 20, 25]))
def test_shape_law(n, hop):
    cfg = MelConfig(hop_ms=hop, n_mels=40)
    spec = compute_mel(WaveformClip(np.zeros(n)), cfg)
    assert spec.n_frames == frame_count(n, cfg)
    assert spec.values.shape == (40, frame_count(n, cfg))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), g=st.floats(1.0, 10.0))
def test_energy_monotone_in_gain(seed, g):
    cfg = MelConfig(n_mels=40)
    x = np.random.default_rng(seed).uniform(-0.1, 0.1, 4000)
    assert np.all(mel_power(g * x, cfg) >= mel_power(x, cfg))


def test_config_validation():
    from audiokd.errors import ConfigError

    with pytest.raises(ConfigError):
        MelConfig(window_ms=10, hop_ms=20)
    with pytest.raises(ConfigError):
        MelConfig(fmin=9000, fmax=8000)
    with pytest.raises(ConfigError):
        MelConfig(fmax=20000)
    with pytest.raises(ConfigError):
        compute_mel(WaveformClip(np.zeros(16000), sample_rate=16000), MelConfig())
