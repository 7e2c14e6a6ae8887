"""Windowed STFT / inverse STFT shared by every frequency-domain stage.

Signals are reflect-padded by window_len // 2 on both sides before framing and
trimmed back after the inverse, so frame t is centred on sample t * hop of the
original signal. The inverse is a weighted overlap-add normalised by the
summed analysis x synthesis window, which gives perfect reconstruction for any
configuration passing the COLA check below.
"""

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.signal import get_window

from meetbeam.errors import ConfigError, PreconditionError, ShapeError
from meetbeam.lib.audio import AudioClip

logger = logging.getLogger(__name__)

WindowName = Literal["hann", "sqrt-hann"]

COLA_TOLERANCE = 1e-10


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 512
    hop: int = 128
    window: WindowName = "hann"
    fft_len: int = 0  # 0 means window_len

    def __post_init__(self):
        if self.fft_len == 0:
            object.__setattr__(self, "fft_len", self.window_len)
        if self.window_len <= 0 or self.hop <= 0:
            raise ConfigError("window_len and hop must be positive")
        if self.hop > self.window_len:
            raise ConfigError("hop (%d) exceeds window_len (%d)" % (self.hop, self.window_len))
        if self.fft_len < self.window_len:
            raise ConfigError(
                "fft_len (%d) must be >= window_len (%d)" % (self.fft_len, self.window_len)
            )
        if self.window not in ("hann", "sqrt-hann"):
            raise ConfigError("unknown window %r" % (self.window,))
        check_cola(self)

    @property
    def num_bins(self) -> int:
        return self.fft_len // 2 + 1


def analysis_window(cfg: StftConfig) -> np.ndarray:
    hann = get_window("hann", cfg.window_len, fftbins=True)
    if cfg.window == "sqrt-hann":
        return np.sqrt(hann)
    return hann


def synthesis_window(cfg: StftConfig) -> np.ndarray:
    # least-squares synthesis: the analysis window again
    return analysis_window(cfg)


def overlap_sum(cfg: StftConfig) -> np.ndarray:
    """One hop-period of the summed analysis x synthesis window."""
    product = analysis_window(cfg) * synthesis_window(cfg)
    n_shifts = -(-cfg.window_len // cfg.hop)
    padded = np.zeros(n_shifts * cfg.hop)
    padded[: cfg.window_len] = product
    return padded.reshape(n_shifts, cfg.hop).sum(axis=0)


def check_cola(cfg: StftConfig) -> None:
    """Raise ConfigError unless the window pair overlap-adds to a constant."""
    period = overlap_sum(cfg)
    spread = np.max(np.abs(period - np.median(period)))
    if np.median(period) <= 0 or spread > COLA_TOLERANCE * max(1.0, np.median(period)):
        raise ConfigError(
            "%s window %d with hop %d violates constant overlap-add (deviation %.3g)"
            % (cfg.window, cfg.window_len, cfg.hop, spread)
        )


# Shipped configurations; every one passes check_cola.
DEFAULT_STFT = StftConfig()
SHIPPED_CONFIGS = (
    DEFAULT_STFT,
    StftConfig(window_len=512, hop=256, window="sqrt-hann"),
    StftConfig(window_len=400, hop=100, window="hann", fft_len=512),
)


@dataclass(frozen=True)
class ComplexSpectrogram:
    """Complex STFT tensor shaped [channel][frame][bin]."""

    data: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = 16000
    num_samples: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.complex128)
        if data.ndim != 3:
            raise ShapeError("spectrogram must be [channel][frame][bin], got %d dims" % data.ndim)
        if data.shape[2] != self.config.num_bins:
            raise ShapeError(
                "expected %d bins for fft_len %d, got %d"
                % (self.config.num_bins, self.config.fft_len, data.shape[2])
            )
        if not np.all(np.isfinite(data)):
            raise PreconditionError("spectrogram contains non-finite entries")
        object.__setattr__(self, "data", data)

    @property
    def num_channels(self) -> int:
        return self.data.shape[0]

    @property
    def num_frames(self) -> int:
        return self.data.shape[1]

    @property
    def num_bins(self) -> int:
        return self.data.shape[2]

    def bin_frequencies(self) -> np.ndarray:
        return np.arange(self.num_bins) * self.sample_rate / self.config.fft_len

    def with_data(self, data: np.ndarray) -> "ComplexSpectrogram":
        return ComplexSpectrogram(data, self.config, self.sample_rate, self.num_samples)


def num_frames_for(num_samples: int, cfg: StftConfig) -> int:
    padded = num_samples + 2 * (cfg.window_len // 2)
    return (padded - cfg.window_len) // cfg.hop + 1


def _frame(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    # [channel][sample] -> [channel][frame][window_len] view
    n_frames = (x.shape[-1] - cfg.window_len) // cfg.hop + 1
    out_shape = x.shape[:-1] + (n_frames, cfg.window_len)
    out_strides = x.strides[:-1] + (x.strides[-1] * cfg.hop, x.strides[-1])
    return np.lib.stride_tricks.as_strided(x, shape=out_shape, strides=out_strides, writeable=False)


def stft(clip: AudioClip, cfg: StftConfig = DEFAULT_STFT) -> ComplexSpectrogram:
    if clip.num_samples < cfg.window_len:
        raise PreconditionError(
            "clip of %d samples is shorter than the %d-sample window"
            % (clip.num_samples, cfg.window_len)
        )
    pad = cfg.window_len // 2
    padded = np.pad(clip.samples, ((0, 0), (pad, pad)), mode="reflect")
    frames = _frame(np.ascontiguousarray(padded), cfg) * analysis_window(cfg)
    data = np.fft.rfft(frames, n=cfg.fft_len, axis=-1)
    return ComplexSpectrogram(data, cfg, clip.sample_rate, clip.num_samples)


def istft(spec: ComplexSpectrogram) -> AudioClip:
    cfg = spec.config
    n_frames = spec.num_frames
    if spec.num_samples <= 0 or num_frames_for(spec.num_samples, cfg) != n_frames:
        raise ShapeError(
            "%d frames do not match a %d-sample signal under hop %d"
            % (n_frames, spec.num_samples, cfg.hop)
        )
    frames = np.fft.irfft(spec.data, n=cfg.fft_len, axis=-1)[..., : cfg.window_len]
    frames = frames * synthesis_window(cfg)

    total = (n_frames - 1) * cfg.hop + cfg.window_len
    out = np.zeros((spec.num_channels, total))
    norm = np.zeros(total)
    product = analysis_window(cfg) * synthesis_window(cfg)
    for t in range(n_frames):
        s = t * cfg.hop
        out[:, s : s + cfg.window_len] += frames[:, t]
        norm[s : s + cfg.window_len] += product

    pad = cfg.window_len // 2
    out = out[:, pad : pad + spec.num_samples]
    norm = norm[pad : pad + spec.num_samples]
    nonzero = norm > 1e-12
    out[:, nonzero] /= norm[nonzero]
    out[:, ~nonzero] = 0.0
    return AudioClip(out, spec.sample_rate)
