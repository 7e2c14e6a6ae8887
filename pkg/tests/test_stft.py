import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meetbeam.errors import ConfigError, PreconditionError, ShapeError
from meetbeam.lib.audio import AudioClip
from meetbeam.lib.stft import (
    DEFAULT_STFT,
    SHIPPED_CONFIGS,
    ComplexSpectrogram,
    StftConfig,
    analysis_window,
    istft,
    num_frames_for,
    stft,
)


@pytest.mark.parametrize("cfg", SHIPPED_CONFIGS)
def test_perfect_reconstruction(cfg, rng):
    x = rng.standard_normal((2, 8001))
    y = istft(stft(AudioClip(x), cfg))
    assert y.num_samples == 8001
    np.testing.assert_allclose(y.samples, x, atol=1e-10)


def test_shapes():
    spec = stft(AudioClip(np.zeros((3, 16000))))
    assert spec.num_channels == 3
    assert spec.num_bins == 257
    assert spec.num_frames == num_frames_for(16000, DEFAULT_STFT) == 126


def test_impulse_at_frame_centre():
    x = np.zeros(4096)
    x[0] = 1.0
    spec = stft(AudioClip(x))
    w = analysis_window(DEFAULT_STFT)
    # frame 0 is centred on sample 0, so the impulse sits at the window centre
    np.testing.assert_allclose(np.abs(spec.data[0, 0]), w[256], atol=1e-12)


def test_linearity(rng):
    a = rng.standard_normal(4000)
    b = rng.standard_normal(4000)
    sa = stft(AudioClip(a)).data
    sb = stft(AudioClip(b)).data
    np.testing.assert_allclose(stft(AudioClip(2 * a - 3 * b)).data, 2 * sa - 3 * sb, atol=1e-9)


def test_bin_frequencies():
    cfg = StftConfig(window_len=400, hop=100, fft_len=512)
    spec = stft(AudioClip(np.zeros(1600)), cfg)
    freqs = spec.bin_frequencies()
    assert freqs[0] == 0.0
    assert freqs[-1] == pytest.approx(8000.0)


def test_cola_violation_rejected():
    with pytest.raises(ConfigError):
        StftConfig(window_len=512, hop=300)
    with pytest.raises(ConfigError):
        StftConfig(window_len=512, hop=256, window="hann")
    with pytest.raises(ConfigError):
        StftConfig(window_len=512, hop=128, fft_len=256)


def test_short_clip_rejected():
    with pytest.raises(PreconditionError):
        stft(AudioClip(np.zeros(100)))


def test_istft_checks_frame_count():
    spec = stft(AudioClip(np.zeros(4000)))
    bad = ComplexSpectrogram(spec.data[:, :-3], spec.config, spec.sample_rate, spec.num_samples)
    with pytest.raises(ShapeError):
        istft(bad)


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(min_value=512, max_value=3000),
    seed=st.integers(min_value=0, max_value=2**32 - 1),
)
def test_reconstruction_any_length(n, seed):
    x = np.random.default_rng(seed).standard_normal(n)
    np.testing.assert_allclose(istft(stft(AudioClip(x))).samples[0], x, atol=1e-9)


def test_bin_centred_sine_stays_in_its_bin():
    k = 40
    t = np.arange(16000)
    x = np.sin(2 * np.pi * k * t / DEFAULT_STFT.fft_len)
    spec = stft(AudioClip(x))
    # interior frames only; the reflect padding breaks the phase at the edges
    power = np.abs(spec.data[0, 10:-10]) ** 2
    peak = power.max()
    far = np.delete(power, [k - 1, k, k + 1], axis=1)
    assert 10 * np.log10(far.max() / peak) < -60.0


@pytest.mark.parametrize("cfg", SHIPPED_CONFIGS)
def test_reconstruction_random_multichannel(cfg):
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((int(rng.integers(1, 5)), int(rng.integers(2000, 10000))))
        y = istft(stft(AudioClip(x), cfg)).samples
        assert np.linalg.norm(y - x) / np.linalg.norm(x) <= 1e-6, seed
