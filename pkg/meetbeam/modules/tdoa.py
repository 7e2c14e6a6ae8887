"""GCC-PHAT time-difference-of-arrival estimation."""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from meetbeam.errors import DegenerateInputError, PreconditionError
from meetbeam.lib.audio import AudioClip, require_mono, require_same_rate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TdoaConfig:
    max_delay: int = 64
    reliability_threshold: float = 0.2
    spectral_floor: float = 1e-8


@dataclass(frozen=True)
class TdoaEstimate:
    """Delay of a channel relative to the reference, in samples.

    Positive delay means the channel lags the reference.
    """

    delay: float
    peak_value: float
    reliable: bool


def _parabolic_offset(left: float, centre: float, right: float) -> float:
    denom = left - 2.0 * centre + right
    if denom >= 0.0:
        # not a strict local maximum
        return 0.0
    offset = 0.5 * (left - right) / denom
    return float(np.clip(offset, -0.5, 0.5))


def gcc_phat(
    reference: AudioClip,
    other: AudioClip,
    max_delay: int,
    cfg: Optional[TdoaConfig] = None,
) -> TdoaEstimate:
    """Estimate how many samples `other` lags `reference`.

    The phase-transform weighted cross-spectrum is inverted on a 2N-point
    grid (no circular wrap), the peak is searched within +-max_delay and
    refined with 3-point parabolic interpolation.
    """
    cfg = cfg or TdoaConfig(max_delay=max_delay)
    ref = require_mono(reference, "reference")
    oth = require_mono(other, "other")
    require_same_rate(reference, other)
    if ref.shape[0] != oth.shape[0]:
        raise PreconditionError(
            "gcc_phat needs equal lengths, got %d and %d" % (ref.shape[0], oth.shape[0])
        )
    n = ref.shape[0]
    max_delay = int(max_delay)
    if not 0 <= max_delay < n / 2:
        raise PreconditionError("max_delay %d must be in [0, %d)" % (max_delay, n / 2))
    if not np.any(ref) or not np.any(oth):
        raise DegenerateInputError("gcc_phat input has zero energy")

    n_fft = 2 * n
    spec_ref = np.fft.rfft(ref, n=n_fft)
    spec_oth = np.fft.rfft(oth, n=n_fft)
    cross = spec_oth * np.conj(spec_ref)
    cross /= np.abs(cross) + cfg.spectral_floor
    cc = np.fft.irfft(cross, n=n_fft)

    # lags -max_delay..max_delay
    window = np.concatenate((cc[n_fft - max_delay :], cc[: max_delay + 1]))
    k = int(np.argmax(window))
    peak = float(window[k])
    offset = 0.0
    if 0 < k < window.shape[0] - 1:
        offset = _parabolic_offset(window[k - 1], window[k], window[k + 1])
    delay = float(np.clip(k - max_delay + offset, -max_delay, max_delay))
    peak_value = float(np.clip(peak, 0.0, 1.0))
    return TdoaEstimate(
        delay=delay,
        peak_value=peak_value,
        reliable=peak_value >= cfg.reliability_threshold,
    )


def estimate_array_delays(
    clip: AudioClip,
    ref_channel: int = 0,
    max_delay: int = 64,
    cfg: Optional[TdoaConfig] = None,
) -> List[TdoaEstimate]:
    """One GCC-PHAT estimate per channel against ref_channel."""
    if clip.num_channels < 2:
        raise PreconditionError("delay estimation needs >= 2 channels, got %d" % clip.num_channels)
    if not 0 <= ref_channel < clip.num_channels:
        raise PreconditionError("ref_channel %d out of range" % ref_channel)
    cfg = cfg or TdoaConfig(max_delay=max_delay)
    reference = clip.channel(ref_channel)
    estimates = []
    for ch in range(clip.num_channels):
        if ch == ref_channel:
            estimates.append(TdoaEstimate(delay=0.0, peak_value=1.0, reliable=True))
            continue
        est = gcc_phat(reference, clip.channel(ch), max_delay, cfg)
        if not est.reliable:
            logger.warning(
                "Unreliable TDOA for channel %d (peak %.3f < %.2f)",
                ch,
                est.peak_value,
                cfg.reliability_threshold,
            )
        estimates.append(est)
    return estimates
