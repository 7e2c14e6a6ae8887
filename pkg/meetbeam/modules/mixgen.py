"""Mixture generation from real meeting recordings, plus synthetic test scenes.

Real-data path:
    annotations -> extract_nonoverlap_segments -> (align) -> cut_clips
    -> sample_recipes -> render_mixture

Intervals are half-open [start, end) and the exactly-one-active computation
runs on annotation boundaries, never on a sample grid.
"""

import hashlib
import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import fft as sp_fft

from meetbeam.errors import PoolError, PreconditionError
from meetbeam.lib.audio import AudioClip
from meetbeam.lib.manifest import (
    ChannelRole,
    Manifest,
    MixtureComponent,
    MixtureRecipe,
    SegmentAnnotation,
)
from meetbeam.lib.stft import DEFAULT_STFT, StftConfig, stft
from meetbeam.modules.beamform import TfMask

logger = logging.getLogger(__name__)

_EPS = 1e-9


@dataclass(frozen=True)
class SpeakerInterval:
    speaker_id: str
    start: float
    end: float
    recording_id: str = ""

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class ClipSpan:
    """A fixed-length piece of a speaker interval."""

    recording_id: str
    speaker_id: str
    start: float
    end: float

    @property
    def clip_id(self) -> str:
        return "%s_%s_%08d" % (self.recording_id, self.speaker_id, int(round(self.start * 1000)))


@dataclass(frozen=True)
class MixConfig:
    speaker_count_weights: Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    gain_jitter_db: float = 0.0
    clip_len: float = 4.0

    def __post_init__(self):
        weights = np.asarray(self.speaker_count_weights, dtype=float)
        if weights.shape != (4,) or np.any(weights < 0) or weights.sum() <= 0:
            raise PreconditionError("speaker_count_weights needs 4 non-negative weights")
        if self.clip_len <= 0:
            raise PreconditionError("clip_len must be positive")
        if self.gain_jitter_db < 0:
            raise PreconditionError("gain_jitter_db must be >= 0")

    def speaker_count_probabilities(self) -> np.ndarray:
        weights = np.asarray(self.speaker_count_weights, dtype=float)
        return weights / weights.sum()


@dataclass(frozen=True)
class PoolClip:
    clip_id: str
    speaker_id: str
    array: AudioClip
    reference: AudioClip


@dataclass
class MixtureBatch:
    mixtures: List[AudioClip]
    references: List[AudioClip]
    manifest: Manifest


# --------------------------------------------------------------------------
# segments


def filter_recordings(
    annotations: Iterable[SegmentAnnotation], recording_ids: Optional[Sequence[str]]
) -> List[SegmentAnnotation]:
    """Keep annotations of the listed recordings (all when the list is None)."""
    annotations = list(annotations)
    if recording_ids is None:
        return annotations
    keep = set(recording_ids)
    missing = keep - {a.recording_id for a in annotations}
    if missing:
        logger.warning("Recordings without annotations: %s", ", ".join(sorted(missing)))
    return [a for a in annotations if a.recording_id in keep]


def _merge_spans(spans: List[Tuple[float, float]]) -> List[Tuple[float, float]]:
    merged: List[Tuple[float, float]] = []
    for start, end in sorted(spans):
        if merged and start <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], end))
        else:
            merged.append((start, end))
    return merged


def extract_nonoverlap_segments(
    annotations: Sequence[SegmentAnnotation],
) -> List[SpeakerInterval]:
    """Maximal intervals during which exactly one speaker is active."""
    if not annotations:
        return []
    recordings = {a.recording_id for a in annotations}
    if len(recordings) > 1:
        raise PreconditionError(
            "annotations span %d recordings; pass one recording at a time" % len(recordings)
        )
    recording_id = recordings.pop()

    per_speaker: Dict[str, List[Tuple[float, float]]] = defaultdict(list)
    for a in annotations:
        per_speaker[a.speaker_id].append((a.start, a.end))

    # +1 at start, -1 at end; ends sort before starts at equal times
    events = []
    for speaker, spans in per_speaker.items():
        for start, end in _merge_spans(spans):
            events.append((start, 1, speaker))
            events.append((end, -1, speaker))
    events.sort(key=lambda e: (e[0], e[1], e[2]))

    intervals: List[SpeakerInterval] = []
    active: set = set()
    i = 0
    while i < len(events):
        t = events[i][0]
        while i < len(events) and events[i][0] == t:
            _, kind, speaker = events[i]
            if kind == 1:
                active.add(speaker)
            else:
                active.discard(speaker)
            i += 1
        if i >= len(events):
            break
        t_next = events[i][0]
        if len(active) == 1 and t_next > t:
            (speaker,) = tuple(active)
            if intervals and intervals[-1].speaker_id == speaker and intervals[-1].end == t:
                last = intervals.pop()
                intervals.append(SpeakerInterval(speaker, last.start, t_next, recording_id))
            else:
                intervals.append(SpeakerInterval(speaker, t, t_next, recording_id))
    return intervals


def cut_clips(interval: SpeakerInterval, clip_len: float) -> List[ClipSpan]:
    """Consecutive clip_len pieces from the interval start; the remainder is dropped."""
    if clip_len <= 0:
        raise PreconditionError("clip_len must be positive")
    count = int(np.floor(interval.duration / clip_len + _EPS))
    return [
        ClipSpan(
            interval.recording_id,
            interval.speaker_id,
            interval.start + k * clip_len,
            interval.start + (k + 1) * clip_len,
        )
        for k in range(count)
    ]


def build_segment_records(
    annotations: Sequence[SegmentAnnotation],
    recording_ids: Optional[Sequence[str]] = None,
    min_duration: float = 0.0,
) -> List[SegmentAnnotation]:
    """Headset + array record pairs for every non-overlapping interval.

    Speaker activity comes from the headset-role annotations, which also give
    each speaker's close-talk file; array-role annotations only name the
    recording's distant-microphone file.
    """
    by_recording: Dict[str, List[SegmentAnnotation]] = defaultdict(list)
    for a in filter_recordings(annotations, recording_ids):
        by_recording[a.recording_id].append(a)

    records: List[SegmentAnnotation] = []
    for recording_id in sorted(by_recording):
        rows = by_recording[recording_id]
        headset_paths = {
            a.speaker_id: a.source_path for a in rows if a.channel_role == ChannelRole.headset
        }
        array_paths = sorted({a.source_path for a in rows if a.channel_role == ChannelRole.array})
        if not array_paths:
            logger.warning("Recording %s has no array annotation, skipped", recording_id)
            continue
        if len(array_paths) > 1:
            logger.warning(
                "Recording %s lists %d array files, using %s",
                recording_id,
                len(array_paths),
                array_paths[0],
            )
        headset_rows = [a for a in rows if a.channel_role == ChannelRole.headset]
        for interval in extract_nonoverlap_segments(headset_rows):
            if interval.duration < min_duration:
                continue
            for role, path in (
                (ChannelRole.headset, headset_paths[interval.speaker_id]),
                (ChannelRole.array, array_paths[0]),
            ):
                records.append(
                    SegmentAnnotation(
                        recording_id=recording_id,
                        speaker_id=interval.speaker_id,
                        start=interval.start,
                        end=interval.end,
                        channel_role=role,
                        source_path=path,
                    )
                )
    return records


# --------------------------------------------------------------------------
# mixtures


def recipe_seed(seed: int, mixture_id: str) -> int:
    """Per-recipe sub-seed, independent of rendering order."""
    digest = hashlib.sha256(("%d:%s" % (seed, mixture_id)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _clips_by_speaker(pool: Iterable[PoolClip]) -> Dict[str, List[str]]:
    index: Dict[str, List[str]] = defaultdict(list)
    for clip in pool:
        index[clip.speaker_id].append(clip.clip_id)
    return {speaker: sorted(ids) for speaker, ids in index.items()}


def sample_recipes(
    clips_by_speaker: Mapping[str, Sequence[str]],
    count: int,
    seed: int,
    cfg: Optional[MixConfig] = None,
) -> List[MixtureRecipe]:
    """Draw `count` recipes sequentially from one seeded generator."""
    cfg = cfg or MixConfig()
    speakers = sorted(s for s, ids in clips_by_speaker.items() if ids)
    probs = cfg.speaker_count_probabilities()
    max_needed = int(np.max(np.flatnonzero(probs > 0))) + 1
    if len(speakers) < max_needed:
        raise PoolError(
            "pool has %d distinct speakers but mixtures of up to %d speakers are requested"
            % (len(speakers), max_needed)
        )

    rng = np.random.default_rng(seed)
    recipes = []
    for i in range(count):
        mixture_id = "mix%06d" % i
        n_speakers = int(rng.choice(4, p=probs)) + 1
        chosen = rng.choice(len(speakers), size=n_speakers, replace=False)
        picks = []
        for s in chosen:
            speaker = speakers[int(s)]
            ids = clips_by_speaker[speaker]
            picks.append((ids[int(rng.integers(len(ids)))], speaker))

        sub_seed = recipe_seed(seed, mixture_id)
        gains = np.ones(n_speakers)
        if cfg.gain_jitter_db > 0:
            sub_rng = np.random.default_rng(sub_seed)
            gains = 10.0 ** (sub_rng.uniform(-cfg.gain_jitter_db, cfg.gain_jitter_db, n_speakers) / 20.0)
        recipes.append(
            MixtureRecipe(
                mixture_id=mixture_id,
                n_speakers=n_speakers,
                components=tuple(
                    MixtureComponent(clip_id=clip_id, speaker_id=speaker, gain=float(g))
                    for (clip_id, speaker), g in zip(picks, gains)
                ),
                seed=sub_seed,
                clip_len=cfg.clip_len,
            )
        )
    return recipes


def render_mixture(
    recipe: MixtureRecipe, pool: Mapping[str, PoolClip], channels: int
) -> Tuple[AudioClip, AudioClip]:
    """mixture[ch] = sum_k gain_k * array_k[ch]; reference = sum_k gain_k * aligned_k."""
    mixture = None
    reference = None
    sample_rate = None
    for comp in recipe.components:
        clip = pool[comp.clip_id]
        if clip.array.num_channels < channels:
            raise PreconditionError(
                "clip %s has %d channels, %d requested"
                % (comp.clip_id, clip.array.num_channels, channels)
            )
        array = clip.array.select_channels(range(channels)).samples
        ref = clip.reference.samples[:1]
        if mixture is None:
            mixture = np.zeros_like(array)
            reference = np.zeros_like(ref)
            sample_rate = clip.array.sample_rate
        elif array.shape != mixture.shape or ref.shape != reference.shape:
            raise PreconditionError("clip %s length differs from the other components" % comp.clip_id)
        elif clip.array.sample_rate != sample_rate:
            raise PreconditionError("clip %s sample rate differs" % comp.clip_id)
        if comp.gain == 1.0:
            mixture = mixture + array
            reference = reference + ref
        else:
            mixture = mixture + comp.gain * array
            reference = reference + comp.gain * ref
    return AudioClip(mixture, sample_rate), AudioClip(reference, sample_rate)


def synthesize_mixtures(
    clip_pool: Sequence[PoolClip],
    count: int,
    channels: int,
    seed: int,
    cfg: Optional[MixConfig] = None,
) -> MixtureBatch:
    if channels not in (2, 8):
        raise PreconditionError("channels must be 2 or 8, got %d" % channels)
    pool = {clip.clip_id: clip for clip in clip_pool}
    recipes = sample_recipes(_clips_by_speaker(clip_pool), count, seed, cfg)
    mixtures, references = [], []
    for recipe in recipes:
        mixture, reference = render_mixture(recipe, pool, channels)
        mixtures.append(mixture)
        references.append(reference)
    logger.info("Synthesized %d mixtures (%d channels, seed %d)", count, channels, seed)
    return MixtureBatch(mixtures, references, Manifest(records=tuple(recipes)))


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SceneGeometry:
    """Per-channel delays (samples) and gains; [channel] or [source][channel].

    reverb_ms > 0 adds a per-channel exponentially decaying noise tail that
    falls 60 dB over reverb_ms.
    """

    delays: np.ndarray
    gains: Optional[np.ndarray] = None
    reverb_ms: float = 0.0

    def per_source(self, n_sources: int) -> Tuple[np.ndarray, np.ndarray]:
        delays = np.atleast_2d(np.asarray(self.delays, dtype=float))
        n_ch = delays.shape[1]
        gains = np.ones_like(delays) if self.gains is None else np.atleast_2d(np.asarray(self.gains, dtype=float))
        delays = np.broadcast_to(delays, (n_sources, n_ch))
        gains = np.broadcast_to(gains, (n_sources, n_ch))
        return delays, gains


@dataclass
class Scene:
    mixture: AudioClip
    images: List[AudioClip]
    references: List[AudioClip]
    noise: AudioClip
    mask: TfMask
    measured_snr_db: float = float("inf")


def fractional_delay(x: np.ndarray, delay: float) -> np.ndarray:
    """Delay x by `delay` samples (may be fractional or negative), zero-filled."""
    if delay == 0.0:
        return x.copy()
    n = x.shape[-1]
    n_fft = sp_fft.next_fast_len(n + 2 * int(np.ceil(abs(delay))) + 2, real=True)
    spectrum = np.fft.rfft(x, n=n_fft)
    k = np.arange(spectrum.shape[-1])
    spectrum *= np.exp(-2j * np.pi * k * delay / n_fft)
    return np.fft.irfft(spectrum, n=n_fft)[..., :n]


def decaying_tail(length: int, rng: np.random.Generator) -> np.ndarray:
    """Impulse response: unit direct path plus an exponentially decaying noise tail."""
    t = np.arange(length)
    envelope = np.exp(-3.0 * np.log(10.0) * t / length)
    rir = rng.standard_normal(length) * envelope
    # tail energy equal to the direct path
    rir[1:] *= 1.0 / np.sqrt(np.sum(rir[1:] ** 2))
    rir[0] = 1.0
    return rir


def speech_like(num_samples: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """White noise gated into 100-300 ms bursts, a stand-in for speech activity."""
    out = np.zeros(num_samples)
    pos = int(rng.integers(0, sample_rate // 10))
    while pos < num_samples:
        burst = int(rng.uniform(0.1, 0.3) * sample_rate)
        gap = int(rng.uniform(0.05, 0.2) * sample_rate)
        end = min(pos + burst, num_samples)
        ramp = np.hanning(end - pos) ** 0.25 if end - pos > 2 else 1.0
        out[pos:end] = rng.standard_normal(end - pos) * ramp * rng.uniform(0.3, 1.0)
        pos = end + gap
    peak = np.max(np.abs(out))
    return out / peak * 0.5 if peak > 0 else out


def oracle_mask(images: np.ndarray, noise: np.ndarray, sample_rate: int, cfg: StftConfig) -> TfMask:
    """1 where total source energy (over channels) exceeds the noise energy."""
    source_spec = stft(AudioClip(images, sample_rate), cfg).data
    noise_spec = stft(AudioClip(noise, sample_rate), cfg).data
    source_energy = np.sum(np.abs(source_spec) ** 2, axis=0)
    noise_energy = np.sum(np.abs(noise_spec) ** 2, axis=0)
    return TfMask((source_energy > noise_energy).astype(np.float64), "speech")


def synth_scene(
    geometry: SceneGeometry,
    sources: Sequence[AudioClip],
    snr_db: Optional[float],
    seed: int,
    stft_cfg: StftConfig = DEFAULT_STFT,
) -> Scene:
    """Render sources through the geometry and add white noise at snr_db.

    snr_db is the ratio of total source-image energy to total noise energy over
    all channels; None means no noise.
    """
    if not sources:
        raise PreconditionError("scene needs at least one source")
    rng = np.random.default_rng(seed)
    sample_rate = sources[0].sample_rate
    n = sources[0].num_samples
    delays, gains = geometry.per_source(len(sources))
    n_ch = delays.shape[1]
    if np.any(np.abs(delays) > stft_cfg.window_len / 2):
        raise PreconditionError("delays must stay within half a window (%d samples)" % (stft_cfg.window_len // 2))

    images = []
    for s, source in enumerate(sources):
        if source.num_channels != 1 or source.num_samples != n or source.sample_rate != sample_rate:
            raise PreconditionError("sources must be 1-channel clips of equal length and rate")
        dry = source.samples[0]
        image = np.empty((n_ch, n))
        for ch in range(n_ch):
            signal_ch = dry
            if geometry.reverb_ms > 0:
                rir = decaying_tail(int(geometry.reverb_ms * sample_rate / 1000), rng)
                signal_ch = np.convolve(dry, rir)[:n]
            image[ch] = gains[s, ch] * fractional_delay(signal_ch, delays[s, ch])
        images.append(image)

    total = np.sum(images, axis=0)
    noise = np.zeros_like(total)
    measured = float("inf")
    if snr_db is not None:
        noise = rng.standard_normal(total.shape)
        source_energy = np.sum(total**2)
        noise *= np.sqrt(source_energy / (np.sum(noise**2) * 10.0 ** (snr_db / 10.0)))
        measured = float(10.0 * np.log10(source_energy / np.sum(noise**2)))

    mask = oracle_mask(total, noise, sample_rate, stft_cfg)
    return Scene(
        mixture=AudioClip(total + noise, sample_rate),
        images=[AudioClip(img, sample_rate) for img in images],
        references=[AudioClip(src.samples.copy(), sample_rate) for src in sources],
        noise=AudioClip(noise, sample_rate),
        mask=mask,
        measured_snr_db=measured,
    )
