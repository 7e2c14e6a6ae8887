"""Per-file stage runners, the worker pool and run manifests used by the CLI.

Each task reads its own input and writes only its own output file, so results
do not depend on the number of workers.
"""

import hashlib
import json
import logging
import multiprocessing
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, TypeVar

from tqdm import tqdm

from meetbeam.configs.config import PipelineConfig
from meetbeam.errors import MeetbeamError, PreconditionError
from meetbeam.lib.audio import AudioClip, clean_path, read_audio, write_audio
from meetbeam.lib.manifest import (
    ClipRecord,
    Manifest,
    MixtureRecipe,
    SegmentAnnotation,
    read_manifest,
    write_manifest,
)
from meetbeam.lib.stft import ComplexSpectrogram, istft, stft
from meetbeam.modules.align import align_segments
from meetbeam.modules.beamform import (
    SteeringDelays,
    TfMask,
    apply_weights,
    das,
    estimate_covariances,
    load_mask,
    mvdr_weights,
)
from meetbeam.modules.dereverb import wpe
from meetbeam.modules.metrics import (
    ScoreReport,
    breakdown_by_speaker_count,
    read_transcripts,
    score_corpus,
    si_sdr,
    si_sdri,
)
from meetbeam.modules.mixgen import PoolClip, build_segment_records, synthesize_mixtures
from meetbeam.modules.tdoa import estimate_array_delays

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

RUN_MANIFEST = "run_manifest.json"


# --------------------------------------------------------------------------
# pool + bookkeeping


def run_pool(func: Callable[[T], R], tasks: Sequence[T], workers: int = 1, desc: str = "") -> List[R]:
    """Ordered map over tasks; in-process when workers == 1."""
    tasks = list(tasks)
    if workers <= 1 or len(tasks) <= 1:
        return [func(task) for task in tqdm(tasks, desc=desc, disable=not tasks)]
    with multiprocessing.Pool(processes=min(workers, len(tasks))) as pool:
        return list(tqdm(pool.imap(func, tasks), total=len(tasks), desc=desc))


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_run_manifest(
    out_dir: str,
    subcommand: str,
    cfg: PipelineConfig,
    arguments: Dict[str, object],
    outputs: Sequence[str],
) -> str:
    """Subcommand, effective config and a SHA-256 per output; no timestamps."""
    manifest = {
        "subcommand": subcommand,
        "config": cfg.model_dump(mode="json", exclude={"workers"}),
        "arguments": arguments,
        "outputs": {
            os.path.relpath(path, out_dir).replace(os.sep, "/"): sha256_file(path)
            for path in sorted(outputs)
        },
    }
    path = os.path.join(out_dir, RUN_MANIFEST)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def _unique_outputs(inputs: Sequence[str], out_dir: str) -> List[str]:
    outputs = [os.path.join(out_dir, _stem(p) + ".wav") for p in inputs]
    if len(set(outputs)) != len(outputs):
        raise PreconditionError("input files share a name; outputs would collide in %s" % out_dir)
    return outputs


def _resolve(base_dir: str, path: str) -> str:
    path = clean_path(path)
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


# --------------------------------------------------------------------------
# segments / align / mix


def run_segments(annotations_path: str, recording_ids: Optional[Sequence[str]], out_dir: str) -> List[str]:
    annotations = read_manifest(annotations_path).of_kind(SegmentAnnotation)
    records = build_segment_records(annotations, recording_ids)
    os.makedirs(out_dir, exist_ok=True)
    out_path = os.path.join(out_dir, "segments.jsonl")
    write_manifest(out_path, Manifest(records=tuple(records)))
    logger.info("Wrote %d segment records to %s", len(records), out_path)
    return [out_path]


def run_align(segments_path: str, cfg: PipelineConfig, out_dir: str) -> List[str]:
    base_dir = os.path.dirname(os.path.abspath(segments_path))
    records = [
        r.model_copy(update={"source_path": _resolve(base_dir, r.source_path)})
        for r in read_manifest(segments_path).of_kind(SegmentAnnotation)
    ]
    clips = align_segments(records, cfg.align.to_runtime(), cfg.mix.clip_len)
    outputs = []
    clip_records = []
    for clip in tqdm(clips, desc="align"):
        clip_id = clip.span.clip_id
        array_rel = "array/%s.wav" % clip_id
        reference_rel = "reference/%s.wav" % clip_id
        write_audio(clip.array, os.path.join(out_dir, array_rel))
        write_audio(clip.reference, os.path.join(out_dir, reference_rel))
        outputs += [os.path.join(out_dir, array_rel), os.path.join(out_dir, reference_rel)]
        clip_records.append(
            ClipRecord(
                clip_id=clip_id,
                recording_id=clip.span.recording_id,
                speaker_id=clip.span.speaker_id,
                start=clip.span.start,
                end=clip.span.end,
                array_path=array_rel,
                reference_path=reference_rel,
            )
        )
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "clips.jsonl")
    write_manifest(manifest_path, Manifest(records=tuple(clip_records)))
    return outputs + [manifest_path]


def load_clip_pool(clips_path: str) -> List[PoolClip]:
    base_dir = os.path.dirname(os.path.abspath(clips_path))
    pool = []
    for rec in read_manifest(clips_path).of_kind(ClipRecord):
        pool.append(
            PoolClip(
                clip_id=rec.clip_id,
                speaker_id=rec.speaker_id,
                array=read_audio(_resolve(base_dir, rec.array_path)),
                reference=read_audio(_resolve(base_dir, rec.reference_path)),
            )
        )
    return pool


def run_mix(clips_path: str, count: int, cfg: PipelineConfig, out_dir: str) -> List[str]:
    pool = load_clip_pool(clips_path)
    expected = None
    for clip in pool:
        n = int(round(cfg.mix.clip_len * clip.array.sample_rate))
        if clip.array.num_samples != n or clip.reference.num_samples != n:
            raise PreconditionError(
                "clip %s is %d samples, expected %d for clip_len %.3f s"
                % (clip.clip_id, clip.array.num_samples, n, cfg.mix.clip_len)
            )
        expected = n
    logger.info("Loaded %d clips (%s samples each)", len(pool), expected)
    batch = synthesize_mixtures(pool, count, cfg.channels, cfg.seed, cfg.mix.to_runtime())
    outputs = []
    for recipe, mixture, reference in zip(
        batch.manifest.of_kind(MixtureRecipe), batch.mixtures, batch.references
    ):
        for sub, clip in (("mixture", mixture), ("reference", reference)):
            path = os.path.join(out_dir, sub, recipe.mixture_id + ".wav")
            write_audio(clip, path)
            outputs.append(path)
    manifest_path = os.path.join(out_dir, "recipes.jsonl")
    write_manifest(manifest_path, batch.manifest)
    return outputs + [manifest_path]


# --------------------------------------------------------------------------
# enhancement


@dataclass(frozen=True)
class EnhanceTask:
    in_path: str
    out_path: str
    cfg: PipelineConfig
    method: str = "das"
    order: str = "wpe-first"
    mask_path: Optional[str] = None
    dereverb_only: bool = False


def _beamform_spec(spec: ComplexSpectrogram, clip: AudioClip, task: EnhanceTask) -> ComplexSpectrogram:
    cfg = task.cfg
    ref = cfg.beamform.ref_channel
    if task.method == "das":
        estimates = estimate_array_delays(clip, ref, cfg.tdoa.max_delay, cfg.tdoa.to_runtime())
        return das(spec, SteeringDelays.from_estimates(estimates, ref))
    mask: TfMask = load_mask(task.mask_path)
    cov = estimate_covariances(spec, mask)
    return apply_weights(spec, mvdr_weights(cov.speech, cov.noise, ref, cfg.beamform.loading))


def enhance_file(task: EnhanceTask) -> str:
    """Read one array recording, dereverberate and/or beamform it, write the result."""
    try:
        clip = read_audio(task.in_path)
        stft_cfg = task.cfg.stft.to_runtime()
        wpe_cfg = task.cfg.wpe.to_runtime()
        spec = stft(clip, stft_cfg)
        if task.dereverb_only:
            out = wpe(spec, wpe_cfg)
        elif task.order == "wpe-first":
            out = _beamform_spec(wpe(spec, wpe_cfg), clip, task)
        elif task.order == "beamform-first":
            out = wpe(_beamform_spec(spec, clip, task), wpe_cfg)
        else:
            out = _beamform_spec(spec, clip, task)
        write_audio(istft(out), task.out_path)
    except (MeetbeamError, OSError) as e:
        logger.error("%s failed on %s: %s", "wpe" if task.dereverb_only else "beamform", task.in_path, e)
        raise
    return task.out_path


def build_enhance_tasks(
    inputs: Sequence[str],
    out_dir: str,
    cfg: PipelineConfig,
    method: str = "das",
    order: str = "wpe-first",
    mask_dir: Optional[str] = None,
    dereverb_only: bool = False,
) -> List[EnhanceTask]:
    inputs = [clean_path(p) for p in inputs]
    if method == "mvdr" and not dereverb_only and not mask_dir:
        raise PreconditionError("mvdr needs --mask-dir with one <name>.mask.npy per input")
    tasks = []
    for in_path, out_path in zip(inputs, _unique_outputs(inputs, out_dir)):
        mask_path = None
        if method == "mvdr" and not dereverb_only:
            mask_path = os.path.join(mask_dir, _stem(in_path) + ".mask.npy")
            if not os.path.exists(mask_path):
                raise FileNotFoundError("mask file does not exist: %s" % mask_path)
        tasks.append(EnhanceTask(in_path, out_path, cfg, method, order, mask_path, dereverb_only))
    return tasks


def run_enhance(tasks: Sequence[EnhanceTask], workers: int, desc: str) -> List[str]:
    return run_pool(enhance_file, tasks, workers, desc)


# --------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class ScoreTask:
    name: str
    est_path: str
    ref_path: str
    baseline_path: Optional[str]
    ref_channel: int = 0


def _check_lengths(task: ScoreTask, clips: Sequence[AudioClip]) -> None:
    lengths = [c.num_samples for c in clips]
    if len(set(lengths)) != 1:
        raise PreconditionError(
            "%s: estimate/reference/baseline lengths differ %s" % (task.est_path, lengths)
        )


def score_file(task: ScoreTask) -> dict:
    est = read_audio(task.est_path).channel(0)
    ref = read_audio(task.ref_path).channel(0)
    clips = [est, ref]
    if task.baseline_path:
        clips.append(read_audio(task.baseline_path).channel(task.ref_channel))
    _check_lengths(task, clips)
    item = {"mixture_id": task.name, "si_sdr_db": si_sdr(est, ref), "si_sdri_db": None}
    if len(clips) == 3:
        item["si_sdri_db"] = si_sdri(est, ref, clips[2])
    return item


def run_eval_audio(
    est_dir: str,
    ref_dir: str,
    baseline_dir: Optional[str],
    recipes_path: Optional[str],
    workers: int,
    ref_channel: int = 0,
) -> ScoreReport:
    names = sorted(_stem(p) for p in os.listdir(est_dir) if p.endswith(".wav"))
    if not names:
        raise PreconditionError("no .wav files in %s" % est_dir)
    tasks = []
    for name in names:
        ref_path = os.path.join(ref_dir, name + ".wav")
        if not os.path.exists(ref_path):
            raise FileNotFoundError("reference missing for %s: %s" % (name, ref_path))
        baseline = os.path.join(baseline_dir, name + ".wav") if baseline_dir else None
        tasks.append(ScoreTask(name, os.path.join(est_dir, name + ".wav"), ref_path, baseline, ref_channel))
    items = run_pool(score_file, tasks, workers, "eval")

    n_speakers = {}
    if recipes_path:
        n_speakers = {r.mixture_id: r.n_speakers for r in read_manifest(recipes_path).of_kind(MixtureRecipe)}
    for item in items:
        item["n_speakers"] = n_speakers.get(item["mixture_id"])

    breakdown = breakdown_by_speaker_count(
        [(item["n_speakers"] or 0, item["si_sdr_db"], item["si_sdri_db"]) for item in items]
    )
    overall = breakdown["all"]
    return ScoreReport(
        si_sdr_db=overall["si_sdr_db"],
        si_sdri_db=overall["si_sdri_db"],
        items=items,
        by_speaker_count=breakdown,
    )


def run_eval_text(hyp_path: str, ref_path: str) -> ScoreReport:
    return score_corpus(read_transcripts(hyp_path), read_transcripts(ref_path))


def write_report(report: ScoreReport, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "report.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return path

