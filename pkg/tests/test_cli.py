import glob
import json
import os

import numpy as np
import pytest

from meetbeam.lib.audio import AudioClip, read_audio, write_audio
from meetbeam.lib.manifest import (
    ChannelRole,
    ClipRecord,
    Manifest,
    SegmentAnnotation,
    read_manifest,
    write_manifest,
)
from meetbeam.modules.mixgen import SceneGeometry, speech_like, synth_scene
from meetbeam.tools.cli import run_subcommand

SR = 16000


@pytest.fixture(autouse=True)
def _no_env_workers(monkeypatch):
    monkeypatch.delenv("MEETBEAM_WORKERS", raising=False)


def _build_pool(root, seconds, snr_db):
    """Four speakers, two 8-channel clips each, with dry references.

    Channel 0 is the zero-delay reference microphone; the others lag it by
    multiples of half a sample, so delay estimation is exercised.
    """
    records = []
    n = int(seconds * SR)
    for s in range(4):
        for k in range(2):
            rng = np.random.default_rng(10 * s + k)
            dry = AudioClip(speech_like(n, SR, rng), SR)
            delays = np.arange(8) * (s + 1) * 0.5
            scene = synth_scene(SceneGeometry(delays), [dry], snr_db=snr_db, seed=10 * s + k)
            clip_id = "spk%d_clip%d" % (s, k)
            write_audio(scene.mixture, str(root / "array" / (clip_id + ".wav")))
            write_audio(dry, str(root / "reference" / (clip_id + ".wav")))
            records.append(
                ClipRecord(
                    clip_id=clip_id,
                    recording_id="rec",
                    speaker_id="spk%d" % s,
                    start=float(k * seconds),
                    end=float((k + 1) * seconds),
                    array_path="array/%s.wav" % clip_id,
                    reference_path="reference/%s.wav" % clip_id,
                )
            )
    path = str(root / "clips.jsonl")
    write_manifest(path, Manifest(records=tuple(records)))
    return path


@pytest.fixture
def clip_pool(tmp_path):
    return _build_pool(tmp_path / "pool", seconds=1.0, snr_db=10.0)


def _mix(clips, out, seed=3):
    argv = ["mix", "--clips", clips, "--count", "4", "--channels", "8", "--clip-len", "1.0"]
    return run_subcommand(argv + ["--seed", str(seed), "--out", out])


def _outputs(out):
    with open(os.path.join(out, "run_manifest.json")) as f:
        return json.load(f)["outputs"]


def test_mix_writes_outputs_and_manifest(clip_pool, tmp_path):
    out = str(tmp_path / "mix")
    assert _mix(clip_pool, out) == 0
    assert len(glob.glob(os.path.join(out, "mixture", "*.wav"))) == 4
    assert len(glob.glob(os.path.join(out, "reference", "*.wav"))) == 4
    recipes = read_manifest(os.path.join(out, "recipes.jsonl"))
    assert len(recipes) == 4
    with open(os.path.join(out, "run_manifest.json")) as f:
        run = json.load(f)
    assert run["subcommand"] == "mix"
    assert run["config"]["seed"] == 3
    assert "recipes.jsonl" in run["outputs"]
    assert read_audio(os.path.join(out, "mixture", "mix000000.wav")).num_channels == 8


def test_mix_is_deterministic(clip_pool, tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert _mix(clip_pool, a) == 0
    assert _mix(clip_pool, b) == 0
    assert _outputs(a) == _outputs(b)


def _report(out):
    with open(os.path.join(out, "report.json")) as f:
        return json.load(f)


def test_wpe_then_das_improves_over_unprocessed(tmp_path):
    clips = _build_pool(tmp_path / "pool", seconds=4.0, snr_db=0.0)
    cfg = tmp_path / "single.json"
    cfg.write_text(json.dumps({"mix": {"speaker_count_weights": [1.0, 0.0, 0.0, 0.0]}}))
    mix = str(tmp_path / "mix")
    argv = ["mix", "--config", str(cfg), "--clips", clips, "--count", "4", "--channels", "8", "--clip-len", "4.0"]
    assert run_subcommand(argv + ["--seed", "11", "--out", mix]) == 0
    inputs = sorted(glob.glob(os.path.join(mix, "mixture", "*.wav")))

    dereverbed = str(tmp_path / "wpe")
    argv = ["wpe", "--input", *inputs, "--taps", "3", "--delay", "4", "--iters", "1", "--out", dereverbed]
    assert run_subcommand(argv) == 0
    bf = str(tmp_path / "bf")
    wpe_outputs = sorted(glob.glob(os.path.join(dereverbed, "*.wav")))
    assert run_subcommand(["beamform", "--input", *wpe_outputs, "--method", "das", "--order", "none", "--out", bf]) == 0
    out = read_audio(os.path.join(bf, "mix000000.wav"))
    assert out.num_channels == 1
    assert out.num_samples == 4 * SR

    ev = str(tmp_path / "eval")
    argv = ["eval", "--est", bf, "--ref", os.path.join(mix, "reference"),
            "--baseline", os.path.join(mix, "mixture"), "--recipes", os.path.join(mix, "recipes.jsonl"), "--out", ev]
    assert run_subcommand(argv) == 0
    report = _report(ev)
    assert report["by_speaker_count"]["all"]["count"] == 4
    assert all(item["n_speakers"] == 1 for item in report["items"])
    assert all(item["si_sdri_db"] > 0.0 for item in report["items"])
    assert report["si_sdri_db"] > 0.0


def test_eval_of_reference_against_itself_reports_inf(clip_pool, tmp_path):
    mix = str(tmp_path / "mix")
    assert _mix(clip_pool, mix) == 0
    ev = str(tmp_path / "eval")
    refs = os.path.join(mix, "reference")
    assert run_subcommand(["eval", "--est", refs, "--ref", refs, "--out", ev]) == 0
    assert _report(ev)["si_sdr_db"] == "+inf"


def test_eval_rejects_length_mismatch(clip_pool, tmp_path):
    mix = str(tmp_path / "mix")
    assert _mix(clip_pool, mix) == 0
    short = str(tmp_path / "short")
    for path in glob.glob(os.path.join(mix, "mixture", "*.wav")):
        clip = read_audio(path).channel(0)
        write_audio(clip.with_samples(clip.samples[:, :-10]), os.path.join(short, os.path.basename(path)))
    argv = ["eval", "--est", short, "--ref", os.path.join(mix, "reference"), "--out", str(tmp_path / "ev")]
    assert run_subcommand(argv) == 1
    assert not os.path.exists(os.path.join(str(tmp_path / "ev"), "report.json"))


def test_baseline_scores_zero_improvement(clip_pool, tmp_path):
    mix = str(tmp_path / "mix")
    assert _mix(clip_pool, mix) == 0
    ch0 = str(tmp_path / "ch0")
    for path in glob.glob(os.path.join(mix, "mixture", "*.wav")):
        clip = read_audio(path)
        write_audio(clip.channel(0), os.path.join(ch0, os.path.basename(path)))
    ev = str(tmp_path / "eval")
    argv = ["eval", "--est", ch0, "--ref", os.path.join(mix, "reference"),
            "--baseline", os.path.join(mix, "mixture"), "--out", ev]
    assert run_subcommand(argv) == 0
    with open(os.path.join(ev, "report.json")) as f:
        report = json.load(f)
    assert all(item["si_sdri_db"] == 0.0 for item in report["items"])


def test_worker_count_does_not_change_outputs(clip_pool, tmp_path):
    mix = str(tmp_path / "mix")
    assert _mix(clip_pool, mix) == 0
    inputs = sorted(glob.glob(os.path.join(mix, "mixture", "*.wav")))
    one, two = str(tmp_path / "w1"), str(tmp_path / "w2")
    assert run_subcommand(["wpe", "--input", *inputs, "--taps", "5", "--workers", "1", "--out", one]) == 0
    assert run_subcommand(["wpe", "--input", *inputs, "--taps", "5", "--workers", "2", "--out", two]) == 0
    assert _outputs(one) == _outputs(two)
    assert read_audio(os.path.join(one, "mix000001.wav")).num_channels == 8


def test_mvdr_needs_masks(clip_pool, tmp_path):
    mix = str(tmp_path / "mix")
    assert _mix(clip_pool, mix) == 0
    inputs = sorted(glob.glob(os.path.join(mix, "mixture", "*.wav")))
    assert run_subcommand(["beamform", "--input", *inputs, "--method", "mvdr", "--out", str(tmp_path / "o")]) == 1


def test_mvdr_with_masks(clip_pool, tmp_path):
    mix = str(tmp_path / "mix")
    assert _mix(clip_pool, mix) == 0
    path = os.path.join(mix, "mixture", "mix000000.wav")
    masks = tmp_path / "masks"
    masks.mkdir()
    np.save(str(masks / "mix000000.mask.npy"), np.ones((126, 257), dtype=np.float32))
    out = str(tmp_path / "o")
    argv = ["beamform", "--input", path, "--method", "mvdr", "--mask-dir", str(masks), "--order", "beamform-first", "--out", out]
    assert run_subcommand(argv) == 0
    assert os.path.exists(os.path.join(out, "mix000000.wav"))


def test_usage_error_exits_2(tmp_path):
    assert run_subcommand(["mix", "--count", "3", "--out", str(tmp_path)]) == 2
    assert run_subcommand(["frobnicate"]) == 2


def test_missing_input_exits_1(tmp_path):
    assert run_subcommand(["wpe", "--input", str(tmp_path / "nope.wav"), "--out", str(tmp_path / "o")]) == 1


def test_transcript_eval(tmp_path):
    hyp = tmp_path / "hyp.txt"
    ref = tmp_path / "ref.txt"
    hyp.write_text("speaker=a hello world <sc> speaker=a bye\nspeaker=c yes\n")
    ref.write_text("speaker=a hello world <sc> speaker=b bye\nspeaker=c yes\n")
    out = str(tmp_path / "ev")
    assert run_subcommand(["eval", "--hyp", str(hyp), "--ref-text", str(ref), "--out", out]) == 0
    with open(os.path.join(out, "report.json")) as f:
        report = json.load(f)
    assert report["wer_pct"] == 0.0
    assert report["ser_pct"] == pytest.approx(100 / 3)


def test_segments_and_align(tmp_path):
    rng = np.random.default_rng(0)
    n = 6 * SR
    heads = {s: 0.1 * rng.standard_normal(n) for s in ("A", "B")}
    array = np.zeros((2, n))
    for h in heads.values():
        array[:, 3:] += 0.5 * h[:-3]
    data = tmp_path / "data"
    paths = {}
    for s, h in heads.items():
        paths[s] = str(data / ("%s.wav" % s))
        write_audio(AudioClip(h), paths[s])
    array_path = str(data / "array.wav")
    write_audio(AudioClip(array), array_path)
    annotations = [
        SegmentAnnotation(recording_id="m1", speaker_id="A", start=0.0, end=3.5,
                          channel_role=ChannelRole.headset, source_path=paths["A"]),
        SegmentAnnotation(recording_id="m1", speaker_id="B", start=3.0, end=6.0,
                          channel_role=ChannelRole.headset, source_path=paths["B"]),
        SegmentAnnotation(recording_id="m1", speaker_id="array", start=0.0, end=6.0,
                          channel_role=ChannelRole.array, source_path=array_path),
    ]
    ann_path = str(data / "annotations.jsonl")
    write_manifest(ann_path, Manifest(records=tuple(annotations)))

    seg_out = str(tmp_path / "seg")
    assert run_subcommand(["segments", "--annotations", ann_path, "--meetings", "m1", "--out", seg_out]) == 0
    segments = read_manifest(os.path.join(seg_out, "segments.jsonl"))
    assert len(segments) == 4

    align_out = str(tmp_path / "align")
    argv = ["align", "--segments", os.path.join(seg_out, "segments.jsonl"), "--filter-len", "64",
            "--clip-len", "1.0", "--out", align_out]
    assert run_subcommand(argv) == 0
    clips = read_manifest(os.path.join(align_out, "clips.jsonl")).of_kind(ClipRecord)
    assert [c.speaker_id for c in clips] == ["A", "A", "A", "B", "B"]
    first = read_audio(os.path.join(align_out, clips[0].array_path))
    assert first.num_channels == 2 and first.num_samples == SR
