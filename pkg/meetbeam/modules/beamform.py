"""Delay-and-sum and mask-driven MVDR beamforming in the STFT domain.

Both beamformers are time-invariant over the processed chunk and reduce an
M-channel spectrogram to a single channel.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence

import numpy as np

from meetbeam.errors import NumericError, PreconditionError, ShapeError
from meetbeam.lib.audio import AudioClip
from meetbeam.lib.stft import DEFAULT_STFT, ComplexSpectrogram, StftConfig, istft, stft
from meetbeam.modules.tdoa import TdoaConfig, TdoaEstimate, estimate_array_delays

logger = logging.getLogger(__name__)

DIAGONAL_LOADING = 1e-6


@dataclass(frozen=True)
class SteeringDelays:
    """Per-channel delays in samples relative to the reference channel."""

    delays: np.ndarray
    ref_channel: int = 0

    def __post_init__(self):
        delays = np.asarray(self.delays, dtype=np.float64).reshape(-1)
        if not 0 <= self.ref_channel < delays.shape[0]:
            raise PreconditionError("ref_channel %d out of range" % self.ref_channel)
        if delays[self.ref_channel] != 0.0:
            raise PreconditionError("reference channel delay must be 0")
        object.__setattr__(self, "delays", delays)

    @classmethod
    def from_estimates(
        cls, estimates: Sequence[TdoaEstimate], ref_channel: int = 0
    ) -> "SteeringDelays":
        """Unreliable estimates fall back to zero delay."""
        delays = []
        for ch, est in enumerate(estimates):
            if ch == ref_channel:
                delays.append(0.0)
            elif est.reliable:
                delays.append(est.delay)
            else:
                logger.warning("Channel %d: unreliable delay %.2f replaced by 0", ch, est.delay)
                delays.append(0.0)
        return cls(np.array(delays), ref_channel)


@dataclass(frozen=True)
class TfMask:
    """Time-frequency mask shaped [frame][bin], values in [0, 1]."""

    values: np.ndarray
    role: Literal["speech", "noise"] = "speech"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError("mask must be [frame][bin]")
        if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
            raise PreconditionError("mask values must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    def speech(self) -> np.ndarray:
        return self.values if self.role == "speech" else 1.0 - self.values


def load_mask(path: str, role: Literal["speech", "noise"] = "speech") -> TfMask:
    """Load a float32 [frame][bin] mask stored with numpy.save."""
    values = np.load(path, allow_pickle=False)
    return TfMask(values.astype(np.float64), role)


@dataclass(frozen=True)
class BeamformerWeights:
    """Complex weights shaped [bin][channel]; output is w(f)^H y(t, f)."""

    w: np.ndarray
    ref_channel: int = 0

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.complex128)
        if w.ndim != 2:
            raise ShapeError("weights must be [bin][channel]")
        if not np.all(np.isfinite(w)):
            raise NumericError("beamformer weights are not finite")
        object.__setattr__(self, "w", w)


@dataclass
class SpatialCovariances:
    """Mask-weighted spatial covariance matrices, each [bin][channel][channel]."""

    speech: np.ndarray
    noise: np.ndarray
    speech_fallback_bins: List[int] = field(default_factory=list)
    noise_fallback_bins: List[int] = field(default_factory=list)


def _check_delays(spec: ComplexSpectrogram, delays: SteeringDelays) -> None:
    if delays.delays.shape[0] != spec.num_channels:
        raise ShapeError(
            "%d delays for a %d-channel spectrogram" % (delays.delays.shape[0], spec.num_channels)
        )


def das(spec: ComplexSpectrogram, delays: SteeringDelays) -> ComplexSpectrogram:
    """Phase-align every channel to the reference and average.

    A channel lagging by tau_i samples is advanced by exp(+j 2 pi f tau_i / fs),
    so fractional delays are applied exactly.
    """
    _check_delays(spec, delays)
    freqs = spec.bin_frequencies()
    tau = delays.delays / spec.sample_rate
    # [channel][bin]
    ramp = np.exp(2j * np.pi * tau[:, None] * freqs[None, :])
    aligned = spec.data * ramp[:, None, :]
    out = aligned.mean(axis=0, keepdims=True)
    return spec.with_data(out)


def _weighted_covariance(y: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # y: [channel][frame][bin], weights: [frame][bin] -> [bin][channel][channel]
    return np.einsum("tf,ctf,dtf->fcd", weights, y, np.conj(y), optimize=True)


def estimate_covariances(spec: ComplexSpectrogram, mask: TfMask) -> SpatialCovariances:
    """Phi_s(f) from the speech mask and Phi_n(f) from its complement.

    A bin whose mask weights sum to zero falls back to uniform weights (the plain
    sample covariance) and is listed in the fallback bins.
    """
    if mask.values.shape != (spec.num_frames, spec.num_bins):
        raise ShapeError(
            "mask shape %s does not match %d frames x %d bins"
            % (mask.values.shape, spec.num_frames, spec.num_bins)
        )
    m_speech = mask.speech()
    m_noise = 1.0 - m_speech
    uniform = np.ones_like(m_speech)
    y = spec.data

    result = []
    fallbacks = []
    for m in (m_speech, m_noise):
        total = m.sum(axis=0)
        empty = np.flatnonzero(total <= 0.0)
        if empty.size:
            m = m.copy()
            m[:, empty] = uniform[:, empty]
            total = m.sum(axis=0)
        phi = _weighted_covariance(y, m) / total[:, None, None]
        # exact Hermitian symmetry
        phi = 0.5 * (phi + np.conj(np.swapaxes(phi, 1, 2)))
        result.append(phi)
        fallbacks.append(empty.tolist())

    if fallbacks[0]:
        logger.warning("Speech covariance fell back to uniform weights at %d bins", len(fallbacks[0]))
    if fallbacks[1]:
        logger.warning("Noise covariance fell back to uniform weights at %d bins", len(fallbacks[1]))
    return SpatialCovariances(result[0], result[1], fallbacks[0], fallbacks[1])


def principal_steering(phi_s: np.ndarray, ref_channel: int = 0) -> np.ndarray:
    """Unit-norm principal eigenvector per bin, with a real-positive ref entry."""
    _, vecs = np.linalg.eigh(phi_s)
    d = vecs[..., -1]
    ref = d[:, ref_channel]
    phase = np.ones_like(ref)
    nonzero = np.abs(ref) > 0.0
    phase[nonzero] = np.conj(ref[nonzero]) / np.abs(ref[nonzero])
    return d * phase[:, None]


def mvdr_from_steering(
    steering: np.ndarray,
    phi_n: np.ndarray,
    ref_channel: int = 0,
    loading: float = DIAGONAL_LOADING,
) -> BeamformerWeights:
    """w(f) = Phi~_n^-1 d / (d^H Phi~_n^-1 d) with Phi~_n = Phi_n + loading*tr(Phi_n)/M*I."""
    n_ch = steering.shape[1]
    loaded = phi_n
    if loading > 0.0:
        trace = np.real(np.trace(phi_n, axis1=1, axis2=2))
        # silent bins still get a tiny ridge
        level = np.maximum(trace / n_ch, 1e-12)
        loaded = phi_n + (loading * level)[:, None, None] * np.eye(n_ch)[None]
    try:
        num = np.linalg.solve(loaded, steering[..., None])[..., 0]
    except np.linalg.LinAlgError as e:
        raise NumericError("noise covariance is singular: %s" % e) from e
    denom = np.einsum("fc,fc->f", np.conj(steering), num)
    w = num / denom[:, None]
    return BeamformerWeights(w, ref_channel)


def mvdr_weights(
    phi_s: np.ndarray,
    phi_n: np.ndarray,
    ref_channel: int = 0,
    loading: float = DIAGONAL_LOADING,
) -> BeamformerWeights:
    """MVDR weights steered at the principal eigenvector of Phi_s."""
    phi_s = np.asarray(phi_s, dtype=np.complex128)
    phi_n = np.asarray(phi_n, dtype=np.complex128)
    if phi_s.shape != phi_n.shape or phi_s.ndim != 3 or phi_s.shape[1] != phi_s.shape[2]:
        raise ShapeError("covariances must both be [bin][channel][channel]")
    if not (np.all(np.isfinite(phi_s)) and np.all(np.isfinite(phi_n))):
        raise NumericError("covariance matrices contain non-finite values")
    if not 0 <= ref_channel < phi_s.shape[1]:
        raise PreconditionError("ref_channel %d out of range" % ref_channel)
    d = principal_steering(phi_s, ref_channel)
    return mvdr_from_steering(d, phi_n, ref_channel, loading)


def apply_weights(spec: ComplexSpectrogram, weights: BeamformerWeights) -> ComplexSpectrogram:
    if weights.w.shape != (spec.num_bins, spec.num_channels):
        raise ShapeError(
            "weights shaped %s, expected (%d, %d)"
            % (weights.w.shape, spec.num_bins, spec.num_channels)
        )
    out = np.einsum("fc,ctf->tf", np.conj(weights.w), spec.data)
    return spec.with_data(out[None])


def das_time(
    clip: AudioClip,
    stft_cfg: StftConfig = DEFAULT_STFT,
    tdoa_cfg: Optional[TdoaConfig] = None,
    ref_channel: int = 0,
) -> AudioClip:
    """GCC-PHAT delays for the whole chunk, then DAS."""
    tdoa_cfg = tdoa_cfg or TdoaConfig()
    estimates = estimate_array_delays(clip, ref_channel, tdoa_cfg.max_delay, tdoa_cfg)
    delays = SteeringDelays.from_estimates(estimates, ref_channel)
    logger.info("DAS delays: %s", np.array2string(delays.delays, precision=2))
    return istft(das(stft(clip, stft_cfg), delays))


def mvdr_time(
    clip: AudioClip,
    mask: TfMask,
    stft_cfg: StftConfig = DEFAULT_STFT,
    ref_channel: int = 0,
    loading: float = DIAGONAL_LOADING,
) -> AudioClip:
    spec = stft(clip, stft_cfg)
    cov = estimate_covariances(spec, mask)
    weights = mvdr_weights(cov.speech, cov.noise, ref_channel, loading)
    return istft(apply_weights(spec, weights))
