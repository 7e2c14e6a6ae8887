import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meetbeam.errors import ManifestParseError, ManifestVersionError
from meetbeam.lib.manifest import (
    ChannelRole,
    ClipRecord,
    Manifest,
    MixtureComponent,
    MixtureRecipe,
    SegmentAnnotation,
    parse_manifest,
    read_manifest,
    serialize_manifest,
    write_manifest,
)


def _segment(**kw):
    base = dict(
        recording_id="ES2002a",
        speaker_id="A",
        start=1.0,
        end=2.5,
        channel_role=ChannelRole.headset,
        source_path="headset/A.wav",
    )
    base.update(kw)
    return SegmentAnnotation(**base)


def test_round_trip_mixed_kinds(tmp_path):
    recipe = MixtureRecipe(
        mixture_id="mix000000",
        n_speakers=2,
        components=(
            MixtureComponent(clip_id="c1", speaker_id="A"),
            MixtureComponent(clip_id="c2", speaker_id="B", gain=0.5),
        ),
        seed=7,
        clip_len=4.0,
    )
    clip = ClipRecord(
        clip_id="c1",
        recording_id="ES2002a",
        speaker_id="A",
        start=0.0,
        end=4.0,
        array_path="array/c1.wav",
        reference_path="reference/c1.wav",
    )
    manifest = Manifest(records=(_segment(), recipe, clip))
    path = str(tmp_path / "m.jsonl")
    write_manifest(path, manifest)
    assert read_manifest(path) == manifest


def test_header_line_first():
    text = serialize_manifest(Manifest(records=(_segment(),)))
    lines = text.splitlines()
    assert json.loads(lines[0]) == {"schema_version": 1}
    assert json.loads(lines[1])["kind"] == "segment"


def test_serialization_is_deterministic():
    manifest = Manifest(records=(_segment(), _segment(speaker_id="B")))
    assert serialize_manifest(manifest) == serialize_manifest(parse_manifest(serialize_manifest(manifest)))


def test_empty_text_is_empty_manifest():
    assert len(parse_manifest("")) == 0


def test_bad_record_reports_line_number():
    text = serialize_manifest(Manifest(records=(_segment(),)))
    text += '{"kind": "segment", "recording_id": "x", "speaker_id": "A", "start": 3, "end": 1, ' \
        '"channel_role": "array", "source_path": "a.wav"}\n'
    with pytest.raises(ManifestParseError) as info:
        parse_manifest(text)
    assert info.value.line_number == 3


def test_invalid_json_and_unknown_kind():
    with pytest.raises(ManifestParseError):
        parse_manifest('{"schema_version": 1}\nnot json\n')
    with pytest.raises(ManifestParseError):
        parse_manifest('{"kind": "banana"}\n')


def test_unknown_version():
    with pytest.raises(ManifestVersionError):
        parse_manifest('{"schema_version": 99}\n')


def test_repeated_speakers_rejected():
    with pytest.raises(ValueError):
        MixtureRecipe(
            mixture_id="m",
            n_speakers=2,
            components=(MixtureComponent(clip_id="a", speaker_id="A"), MixtureComponent(clip_id="b", speaker_id="A")),
            seed=0,
            clip_len=4.0,
        )


_ids = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789_-", min_size=1, max_size=12)


@st.composite
def segments(draw):
    start = draw(st.floats(min_value=0, max_value=1e4, allow_nan=False))
    length = draw(st.floats(min_value=1e-3, max_value=100, allow_nan=False))
    return SegmentAnnotation(
        recording_id=draw(_ids),
        speaker_id=draw(_ids),
        start=start,
        end=start + length,
        channel_role=draw(st.sampled_from(list(ChannelRole))),
        source_path=draw(st.text(min_size=1, max_size=30)),
    )


@settings(max_examples=50, deadline=None)
@given(st.lists(segments(), max_size=8))
def test_round_trip_property(records):
    manifest = Manifest(records=tuple(records))
    assert parse_manifest(serialize_manifest(manifest)) == manifest
