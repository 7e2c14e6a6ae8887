"""Least-squares matched filters mapping a headset signal onto an array channel.

The filter f minimises sum_t ((f * h)(t) - x(t))^2 over the full convolution
support (x zero-extended), whose normal equations are the Toeplitz system

    (R + eps * tr(R) / L * I) f = r

with R the L x L autocorrelation matrix of the headset signal h and r the
headset/array cross-correlation. The filtered headset f * h, truncated to the
segment length, is the aligned reverberation-free target for that segment.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, signal

from meetbeam.errors import PreconditionError, SegmentTooShortError, SingularSystemError
from meetbeam.lib.audio import AudioClip, read_audio_segment, require_mono, require_same_rate
from meetbeam.lib.manifest import ChannelRole, SegmentAnnotation
from meetbeam.modules.mixgen import ClipSpan, SpeakerInterval, cut_clips

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlignConfig:
    filter_len: int = 1024
    reg: float = 1e-6
    ref_channel: int = 0
    fast: bool = True


@dataclass(frozen=True)
class FirFilter:
    coeffs: np.ndarray
    regularization: float = 0.0

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=np.float64).reshape(-1)
        if coeffs.size == 0 or not np.all(np.isfinite(coeffs)):
            raise PreconditionError("filter coefficients must be finite and non-empty")
        object.__setattr__(self, "coeffs", coeffs)

    def __len__(self) -> int:
        return self.coeffs.shape[0]


def correlation_terms(headset: np.ndarray, array: np.ndarray, filter_len: int):
    """First filter_len lags of the headset autocorrelation and headset/array cross-correlation."""
    n = headset.shape[0]
    auto = signal.correlate(headset, headset, mode="full", method="fft")[n - 1 : n - 1 + filter_len]
    cross = signal.correlate(array, headset, mode="full", method="fft")[n - 1 : n - 1 + filter_len]
    return auto, cross


def solve_normal_equations(
    auto: np.ndarray, cross: np.ndarray, reg: float = 0.0, fast: bool = True
) -> np.ndarray:
    """Solve the loaded symmetric Toeplitz system.

    fast=True uses Levinson recursion; otherwise a dense Cholesky solve.
    """
    filter_len = auto.shape[0]
    column = auto.copy()
    # tr(R) / L == R[0, 0]
    column[0] += reg * auto[0]
    if not column[0] > 0.0:
        raise SingularSystemError(
            "headset autocorrelation is zero; the system is singular (use reg > 0 and a non-silent headset)"
        )
    if fast:
        try:
            coeffs = linalg.solve_toeplitz(column, cross)
        except linalg.LinAlgError as e:
            raise SingularSystemError(
                "Toeplitz system is rank deficient (%s); retry with reg > 0" % e
            ) from e
        if not np.all(np.isfinite(coeffs)):
            raise SingularSystemError("Toeplitz system is rank deficient; retry with reg > 0")
        return coeffs
    try:
        factor = linalg.cho_factor(linalg.toeplitz(column), lower=True, check_finite=True)
    except linalg.LinAlgError as e:
        raise SingularSystemError(
            "autocorrelation matrix (L=%d) is not positive definite; retry with reg > 0" % filter_len
        ) from e
    return linalg.cho_solve(factor, cross)


def estimate_matched_filter(
    headset: AudioClip,
    array: AudioClip,
    filter_len: int = 1024,
    reg: float = 0.0,
    fast: bool = True,
) -> FirFilter:
    h = require_mono(headset, "headset")
    x = require_mono(array, "array")
    require_same_rate(headset, array)
    if h.shape[0] != x.shape[0]:
        raise PreconditionError(
            "headset and array lengths differ: %d vs %d" % (h.shape[0], x.shape[0])
        )
    if filter_len < 1:
        raise PreconditionError("filter_len must be >= 1")
    if h.shape[0] < 4 * filter_len:
        raise SegmentTooShortError(
            "segment of %d samples is shorter than 4 x filter_len = %d"
            % (h.shape[0], 4 * filter_len)
        )
    if reg < 0.0:
        raise PreconditionError("reg must be >= 0")
    auto, cross = correlation_terms(h, x, filter_len)
    coeffs = solve_normal_equations(auto, cross, reg, fast)
    return FirFilter(coeffs, reg)


def apply_filter(fir: FirFilter, clip: AudioClip) -> AudioClip:
    """Linear convolution truncated to the input length (delay kept)."""
    h = require_mono(clip, "clip")
    out = signal.convolve(h, fir.coeffs, mode="full")[: h.shape[0]]
    return clip.with_samples(out)


def residual_energy(fir: FirFilter, headset: AudioClip, array: AudioClip) -> float:
    """Least-squares residual energy over the full convolution support."""
    h = require_mono(headset, "headset")
    x = require_mono(array, "array")
    full = signal.convolve(h, fir.coeffs, mode="full")
    target = np.zeros_like(full)
    target[: x.shape[0]] = x
    return float(np.sum((full - target) ** 2))


def align_segment(
    headset_seg: AudioClip, array_seg: AudioClip, cfg: Optional[AlignConfig] = None
) -> AudioClip:
    """Return the headset segment filtered onto the array reference channel."""
    cfg = cfg or AlignConfig()
    if array_seg.num_channels > 1:
        array_seg = array_seg.channel(cfg.ref_channel)
    if headset_seg.num_channels > 1:
        headset_seg = headset_seg.channel(0)
    n = min(headset_seg.num_samples, array_seg.num_samples)
    if n < 4 * cfg.filter_len:
        raise SegmentTooShortError(
            "segment of %d samples is shorter than 4 x filter_len = %d" % (n, 4 * cfg.filter_len)
        )
    if headset_seg.num_samples != array_seg.num_samples:
        logger.debug(
            "Trimming segment pair to %d samples (%d vs %d)",
            n,
            headset_seg.num_samples,
            array_seg.num_samples,
        )
        headset_seg = headset_seg.with_samples(headset_seg.samples[:, :n])
        array_seg = array_seg.with_samples(array_seg.samples[:, :n])
    fir = estimate_matched_filter(headset_seg, array_seg, cfg.filter_len, cfg.reg, cfg.fast)
    return apply_filter(fir, headset_seg)


@dataclass(frozen=True)
class AlignedClip:
    span: ClipSpan
    array: AudioClip
    reference: AudioClip


def pair_segment_records(
    records: Sequence[SegmentAnnotation],
) -> List[Tuple[SegmentAnnotation, SegmentAnnotation]]:
    """Match each headset record with the array record of the same interval."""
    by_span: Dict[tuple, Dict[ChannelRole, SegmentAnnotation]] = defaultdict(dict)
    for rec in records:
        key = (rec.recording_id, rec.speaker_id, rec.start, rec.end)
        by_span[key][rec.channel_role] = rec
    pairs = []
    for key in sorted(by_span):
        roles = by_span[key]
        if ChannelRole.headset in roles and ChannelRole.array in roles:
            pairs.append((roles[ChannelRole.headset], roles[ChannelRole.array]))
        else:
            logger.warning("Segment %s %s [%.2f, %.2f) lacks a headset/array pair", *key)
    return pairs


def align_segments(
    records: Sequence[SegmentAnnotation],
    cfg: Optional[AlignConfig] = None,
    clip_len: float = 4.0,
) -> List[AlignedClip]:
    """Estimate one filter per non-overlapping segment, then cut clip_len clips.

    Segments shorter than 4 x filter_len are skipped with a warning.
    """
    cfg = cfg or AlignConfig()
    out: List[AlignedClip] = []
    for headset_rec, array_rec in pair_segment_records(records):
        headset = read_audio_segment(headset_rec.source_path, headset_rec.start, headset_rec.end)
        array = read_audio_segment(array_rec.source_path, array_rec.start, array_rec.end)
        try:
            reference = align_segment(headset, array, cfg)
        except SegmentTooShortError as e:
            logger.warning("Skipping %s: %s", headset_rec.source_path, e)
            continue
        n = reference.num_samples
        clip_samples = int(round(clip_len * array.sample_rate))
        interval = SpeakerInterval(
            headset_rec.speaker_id, headset_rec.start, headset_rec.end, headset_rec.recording_id
        )
        for k, span in enumerate(cut_clips(interval, clip_len)):
            i0 = k * clip_samples
            if i0 + clip_samples > n:
                break
            out.append(
                AlignedClip(
                    span,
                    array.with_samples(array.samples[:, i0 : i0 + clip_samples]),
                    reference.with_samples(reference.samples[:, i0 : i0 + clip_samples]),
                )
            )
    logger.info("Aligned %d clips from %d segment records", len(out), len(records))
    return out
