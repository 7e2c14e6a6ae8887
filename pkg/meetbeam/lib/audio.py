import logging
import os
import re
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
import soundfile as sf

from meetbeam.errors import (
    AudioFormatError,
    PreconditionError,
    ShapeError,
    UnsupportedEncodingError,
)

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 16000
# int16 <-> float uses a symmetric 2^15 divisor in both directions
INT16_SCALE = 32768.0

Encoding = Literal["pcm16", "float32"]

_SUBTYPES = {"pcm16": "PCM_16", "float32": "FLOAT"}


@dataclass(frozen=True)
class AudioClip:
    """Multichannel waveform.

    samples is a float64 array shaped [channel][sample]; a 1-D array is
    promoted to a single channel.
    """

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2:
            raise ShapeError(
                "samples must be [channel][sample], got %d dims" % samples.ndim
            )
        if samples.shape[0] < 1:
            raise ShapeError("clip needs at least one channel")
        if int(self.sample_rate) <= 0:
            raise PreconditionError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise PreconditionError("clip contains non-finite samples")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    def channel(self, index: int) -> "AudioClip":
        if not -self.num_channels <= index < self.num_channels:
            raise PreconditionError(
                "channel %d out of range for %d-channel clip"
                % (index, self.num_channels)
            )
        return AudioClip(self.samples[index : index + 1].copy(), self.sample_rate)

    def select_channels(self, indices: Sequence[int]) -> "AudioClip":
        indices = list(indices)
        if not indices or max(indices) >= self.num_channels or min(indices) < 0:
            raise PreconditionError(
                "cannot select channels %s from %d-channel clip"
                % (indices, self.num_channels)
            )
        return AudioClip(self.samples[indices].copy(), self.sample_rate)

    def with_samples(self, samples: np.ndarray) -> "AudioClip":
        return AudioClip(samples, self.sample_rate)


def require_mono(clip: AudioClip, name: str) -> np.ndarray:
    """Return the single channel of clip as a 1-D array."""
    if clip.num_channels != 1:
        raise PreconditionError(
            "%s must be a 1-channel clip, got %d channels" % (name, clip.num_channels)
        )
    return clip.samples[0]


def require_same_rate(a: AudioClip, b: AudioClip) -> None:
    if a.sample_rate != b.sample_rate:
        raise PreconditionError(
            "sample rates differ: %d vs %d (resampling is not supported)"
            % (a.sample_rate, b.sample_rate)
        )


def clean_path(path_str: str) -> str:
    # strip stray quotes, whitespace and unicode direction marks from pasted paths
    path_str = re.sub(r"[\u202a-\u202e]", "", str(path_str))
    return path_str.strip(" ").strip('"').strip("\n").strip('"').strip(" ")


def _open_info(path: str):
    path = clean_path(path)
    if not os.path.exists(path):
        raise FileNotFoundError("audio file does not exist: %s" % path)
    try:
        info = sf.info(path)
    except (sf.LibsndfileError, RuntimeError) as e:
        raise AudioFormatError("malformed audio file %s: %s" % (path, e)) from e
    if info.format != "WAV":
        raise UnsupportedEncodingError(
            "%s: only WAV is supported, got %s" % (path, info.format)
        )
    if info.subtype not in _SUBTYPES.values():
        raise UnsupportedEncodingError(
            "%s: unsupported WAV encoding %s (PCM_16 or FLOAT expected)"
            % (path, info.subtype)
        )
    return info


def _decode(path: str, subtype: str, start: int = 0, stop=None) -> tuple:
    dtype = "int16" if subtype == "PCM_16" else "float32"
    try:
        data, sr = sf.read(
            clean_path(path), dtype=dtype, always_2d=True, start=start, stop=stop
        )
    except (sf.LibsndfileError, RuntimeError) as e:
        raise AudioFormatError("failed to decode %s: %s" % (path, e)) from e
    if subtype == "PCM_16":
        samples = data.T.astype(np.float64) / INT16_SCALE
    else:
        samples = data.T.astype(np.float64)
    return samples, sr


def read_audio(path: str) -> AudioClip:
    """Read a PCM16 or float32 WAV file.

    PCM16 values are normalised by 32768, so 32767 reads as 32767/32768.
    Raises AudioFormatError for malformed files and UnsupportedEncodingError
    for other encodings.
    """
    info = _open_info(path)
    samples, sr = _decode(path, info.subtype)
    if samples.shape[1] != info.frames:
        raise AudioFormatError(
            "%s: truncated data, header declares %d frames but %d were read"
            % (path, info.frames, samples.shape[1])
        )
    if samples.shape[1] == 0:
        raise AudioFormatError("%s: no audio frames" % path)
    logger.debug(
        "Read %s: %d ch, %d samples @ %d Hz (%s)",
        path,
        samples.shape[0],
        samples.shape[1],
        sr,
        info.subtype,
    )
    return AudioClip(samples, sr)


def read_audio_segment(path: str, start: float, end: float) -> AudioClip:
    """Read the [start, end) seconds range of a WAV file."""
    info = _open_info(path)
    i0 = int(round(start * info.samplerate))
    i1 = int(round(end * info.samplerate))
    if not 0 <= i0 < i1 <= info.frames:
        raise PreconditionError(
            "%s: range [%.3f, %.3f) s outside %.3f s file"
            % (path, start, end, info.frames / info.samplerate)
        )
    samples, sr = _decode(path, info.subtype, start=i0, stop=i1)
    return AudioClip(samples, sr)


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(samples * INT16_SCALE), -32768, 32767).astype(np.int16)


def write_audio(clip: AudioClip, path: str, encoding: Encoding = "float32") -> None:
    """Write clip as a WAV file.

    float32 output round-trips bit-exactly for float32-representable samples;
    pcm16 output round-trips within 2^-15.
    """
    if encoding not in _SUBTYPES:
        raise UnsupportedEncodingError("unknown encoding %r" % (encoding,))
    if not np.all(np.isfinite(clip.samples)):
        raise PreconditionError("cannot write non-finite samples")
    if encoding == "pcm16":
        data = quantize_pcm16(clip.samples).T
    else:
        data = clip.samples.astype(np.float32).T
    path = clean_path(path)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    try:
        sf.write(path, data, clip.sample_rate, subtype=_SUBTYPES[encoding], format="WAV")
    except (sf.LibsndfileError, RuntimeError) as e:
        raise OSError("cannot write %s: %s" % (path, e)) from e
    logger.debug("Wrote %s (%s, %d ch)", path, encoding, clip.num_channels)
