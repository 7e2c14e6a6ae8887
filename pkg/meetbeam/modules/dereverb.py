"""Weighted prediction error (WPE) dereverberation.

Each channel is predicted from a K-tap stack of all channels delayed by Delta
frames; the prediction is subtracted. Prediction filters and the per-frame
power weights are updated alternately for a fixed number of iterations.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from meetbeam.errors import ConfigError, PreconditionError
from meetbeam.lib.audio import AudioClip
from meetbeam.lib.stft import DEFAULT_STFT, ComplexSpectrogram, StftConfig, istft, stft

logger = logging.getLogger(__name__)

SOLVE_LOADING = 1e-6
CONDITION_LIMIT = 1e10


@dataclass(frozen=True)
class WpeConfig:
    taps: int = 10
    delay: int = 3
    iterations: int = 3
    psd_floor: float = 1e-10

    def __post_init__(self):
        if self.taps < 0:
            raise ConfigError("taps must be >= 0")
        if self.delay < 1:
            raise ConfigError("delay must be >= 1 frame")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not self.psd_floor > 0.0:
            raise ConfigError("psd_floor must be positive")


@dataclass
class WpeDiagnostics:
    objective: List[float] = field(default_factory=list)
    loaded_bins: List[int] = field(default_factory=list)


def _tap_stack(y: np.ndarray, taps: int, delay: int) -> np.ndarray:
    """[bin][channel][frame] -> [bin][channel*taps][frame], zero before frame 0."""
    n_bins, n_ch, n_frames = y.shape
    stacked = np.zeros((n_bins, n_ch * taps, n_frames), dtype=y.dtype)
    for k in range(taps):
        d = k + delay
        if d >= n_frames:
            break
        stacked[:, k * n_ch : (k + 1) * n_ch, d:] = y[:, :, : n_frames - d]
    return stacked


def _power(x: np.ndarray, floor: float) -> np.ndarray:
    # [bin][channel][frame] -> [bin][frame]
    return np.maximum(np.mean(x.real**2 + x.imag**2, axis=1), floor)


def wpe_objective(x: np.ndarray, lam: np.ndarray) -> float:
    """sum over t, f of sum_c |x_c|^2 / lambda + M log lambda."""
    n_ch = x.shape[1]
    energy = np.sum(x.real**2 + x.imag**2, axis=1)
    return float(np.sum(energy / lam + n_ch * np.log(lam)))


def _weighted_error(x: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Per-bin sum over channels and frames of |x|^2 / lambda."""
    return np.sum(np.sum(x.real**2 + x.imag**2, axis=1) / lam, axis=-1)


def _solve(r: np.ndarray, p: np.ndarray, diagnostics: WpeDiagnostics) -> np.ndarray:
    """Batched r g = p; bins with an ill-conditioned r get a delta-loaded solve."""
    size = r.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.linalg.cond(r)
    ill = ~np.isfinite(cond) | (cond > CONDITION_LIMIT)
    if np.any(ill):
        level = np.maximum(np.real(np.trace(r, axis1=1, axis2=2)) / size, 1e-12)
        loading = np.where(ill, SOLVE_LOADING * level, 0.0)
        r = r + loading[:, None, None] * np.eye(size)[None]
        diagnostics.loaded_bins = sorted(set(diagnostics.loaded_bins).union(np.flatnonzero(ill).tolist()))
    return np.linalg.solve(r, p)


def wpe_with_diagnostics(
    spec: ComplexSpectrogram, cfg: Optional[WpeConfig] = None
) -> Tuple[ComplexSpectrogram, WpeDiagnostics]:
    cfg = cfg or WpeConfig()
    diagnostics = WpeDiagnostics()
    if cfg.taps == 0:
        return spec.with_data(spec.data.copy()), diagnostics
    if spec.num_frames <= cfg.taps + cfg.delay:
        raise PreconditionError(
            "WPE needs more than taps + delay = %d frames, got %d"
            % (cfg.taps + cfg.delay, spec.num_frames)
        )

    # [bin][channel][frame]
    y = np.transpose(spec.data, (2, 0, 1))
    y_tilde = _tap_stack(y, cfg.taps, cfg.delay)
    y_tilde_h = np.conj(np.swapaxes(y_tilde, 1, 2))
    x = y
    for it in range(cfg.iterations):
        lam = _power(x, cfg.psd_floor)
        weighted = y_tilde / lam[:, None, :]
        r = weighted @ y_tilde_h
        p = weighted @ np.conj(np.swapaxes(y, 1, 2))
        g = _solve(r, p, diagnostics)
        candidate = y - np.conj(np.swapaxes(g, 1, 2)) @ y_tilde
        # bins where the new filter does not lower the weighted error keep the previous one
        worse = _weighted_error(candidate, lam) > _weighted_error(x, lam)
        candidate[worse] = x[worse]
        x = candidate
        diagnostics.objective.append(wpe_objective(x, lam))
        logger.debug("WPE iteration %d: objective %.6g", it + 1, diagnostics.objective[-1])

    if diagnostics.loaded_bins:
        logger.warning(
            "WPE: ill-conditioned tap covariance at %d bins, used a loaded solve", len(diagnostics.loaded_bins)
        )
    return spec.with_data(np.transpose(x, (1, 2, 0))), diagnostics


def wpe(spec: ComplexSpectrogram, cfg: Optional[WpeConfig] = None) -> ComplexSpectrogram:
    return wpe_with_diagnostics(spec, cfg)[0]


def wpe_time(
    clip: AudioClip,
    stft_cfg: StftConfig = DEFAULT_STFT,
    wpe_cfg: Optional[WpeConfig] = None,
) -> AudioClip:
    return istft(wpe(stft(clip, stft_cfg), wpe_cfg))
