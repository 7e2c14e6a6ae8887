import numpy as np
import pytest
import soundfile as sf

from meetbeam.errors import AudioFormatError, PreconditionError, ShapeError, UnsupportedEncodingError
from meetbeam.lib.audio import (
    AudioClip,
    clean_path,
    quantize_pcm16,
    read_audio,
    read_audio_segment,
    write_audio,
)


def test_mono_array_is_promoted_to_one_channel():
    clip = AudioClip(np.zeros(100))
    assert clip.num_channels == 1
    assert clip.num_samples == 100
    assert clip.duration == pytest.approx(100 / 16000)


def test_rejects_nan_and_bad_shapes():
    with pytest.raises(PreconditionError):
        AudioClip(np.array([0.0, np.nan]))
    with pytest.raises(ShapeError):
        AudioClip(np.zeros((2, 2, 2)))
    with pytest.raises(PreconditionError):
        AudioClip(np.zeros(10), sample_rate=0)


def test_float32_round_trip_is_bit_exact(wav_writer, rng):
    samples = rng.uniform(-1, 1, (2, 1000)).astype(np.float32).astype(np.float64)
    path = wav_writer("f32.wav", samples)
    clip = read_audio(path)
    assert clip.num_channels == 2
    assert clip.sample_rate == 16000
    np.testing.assert_array_equal(clip.samples, samples)


def test_pcm16_round_trip_within_one_lsb(wav_writer, rng):
    samples = rng.uniform(-0.9, 0.9, (3, 500))
    path = wav_writer("pcm.wav", samples, encoding="pcm16")
    clip = read_audio(path)
    assert np.max(np.abs(clip.samples - samples)) <= 2.0**-15


def test_pcm16_full_scale_values(wav_writer):
    path = wav_writer("edge.wav", np.array([-1.0, 0.0, 32767 / 32768]), encoding="pcm16")
    clip = read_audio(path)
    np.testing.assert_array_equal(clip.samples[0], [-1.0, 0.0, 32767 / 32768])


def test_quantize_clips_out_of_range():
    q = quantize_pcm16(np.array([2.0, -2.0]))
    np.testing.assert_array_equal(q, [32767, -32768])


def test_read_segment(wav_writer):
    samples = np.arange(16000, dtype=np.float64) / 16000.0
    path = wav_writer("ramp.wav", samples)
    seg = read_audio_segment(path, 0.25, 0.5)
    assert seg.num_samples == 4000
    assert seg.samples[0, 0] == pytest.approx(0.25, abs=1e-7)
    with pytest.raises(PreconditionError):
        read_audio_segment(path, 0.5, 2.0)


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        read_audio("/nonexistent/file.wav")


def test_malformed_file(tmp_path):
    path = tmp_path / "junk.wav"
    path.write_bytes(b"RIFF\x00\x00not really a wave file")
    with pytest.raises(AudioFormatError):
        read_audio(str(path))


def test_unsupported_encoding(tmp_path):
    path = str(tmp_path / "pcm24.wav")
    sf.write(path, np.zeros(100), 16000, subtype="PCM_24")
    with pytest.raises(UnsupportedEncodingError):
        read_audio(path)


def test_write_creates_directories(tmp_path):
    path = str(tmp_path / "a" / "b" / "out.wav")
    write_audio(AudioClip(np.zeros(10)), path)
    assert read_audio(path).num_samples == 10


def test_clean_path_strips_quotes():
    assert clean_path(' "/tmp/x.wav"\n') == "/tmp/x.wav"


def test_channel_helpers():
    clip = AudioClip(np.arange(12.0).reshape(3, 4))
    np.testing.assert_array_equal(clip.channel(1).samples, [[4, 5, 6, 7]])
    assert clip.select_channels([2, 0]).samples[0, 0] == 8
    with pytest.raises(PreconditionError):
        clip.channel(3)
