"""JSON-lines manifests connecting the pipeline stages.

Layout::

    {"schema_version": 1}
    {"kind": "segment", "recording_id": "ES2002a", "speaker_id": "A", ...}
    {"kind": "recipe", "mixture_id": "mix000000", ...}

The header line is optional on input (an empty text is an empty manifest);
serialize_manifest always writes it.
"""

import json
import logging
import os
from enum import Enum
from typing import List, Literal, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from meetbeam.errors import ManifestParseError, ManifestVersionError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class ChannelRole(str, Enum):
    array = "array"
    headset = "headset"


class _Record(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SegmentAnnotation(_Record):
    """Who spoke when, and which recording holds that speech."""

    kind: Literal["segment"] = "segment"
    recording_id: str
    speaker_id: str = Field(min_length=1)
    start: float = Field(ge=0.0)
    end: float
    channel_role: ChannelRole
    source_path: str

    @model_validator(mode="after")
    def _check_span(self):
        if not self.start < self.end:
            raise ValueError("segment end (%r) must be after start (%r)" % (self.end, self.start))
        return self


class MixtureComponent(_Record):
    clip_id: str
    speaker_id: str = Field(min_length=1)
    gain: float = 1.0


class MixtureRecipe(_Record):
    """Everything needed to re-render one synthetic mixture."""

    kind: Literal["recipe"] = "recipe"
    mixture_id: str
    n_speakers: int = Field(ge=1, le=4)
    components: Tuple[MixtureComponent, ...]
    seed: int
    clip_len: float = Field(gt=0.0)

    @model_validator(mode="after")
    def _check_components(self):
        speakers = [c.speaker_id for c in self.components]
        if len(set(speakers)) != len(speakers):
            raise ValueError("speakers repeat within mixture %s" % self.mixture_id)
        if self.n_speakers != len(self.components):
            raise ValueError(
                "n_speakers=%d but %d components" % (self.n_speakers, len(self.components))
            )
        return self


class ClipRecord(_Record):
    """One aligned fixed-length clip: array audio plus its matched-filter reference."""

    kind: Literal["clip"] = "clip"
    clip_id: str
    recording_id: str
    speaker_id: str = Field(min_length=1)
    start: float = Field(ge=0.0)
    end: float
    array_path: str
    reference_path: str

    @model_validator(mode="after")
    def _check_span(self):
        if not self.start < self.end:
            raise ValueError("clip end must be after start")
        return self


Record = Union[SegmentAnnotation, MixtureRecipe, ClipRecord]

_KINDS = {
    "segment": SegmentAnnotation,
    "recipe": MixtureRecipe,
    "clip": ClipRecord,
}


class Manifest(BaseModel):
    model_config = ConfigDict(frozen=True)

    records: Tuple[Record, ...] = ()
    schema_version: int = SCHEMA_VERSION

    def of_kind(self, kind: type) -> List:
        return [r for r in self.records if isinstance(r, kind)]

    def __len__(self) -> int:
        return len(self.records)


def _record_line(record: Record) -> str:
    return json.dumps(record.model_dump(mode="json"), sort_keys=True, ensure_ascii=False)


def serialize_manifest(manifest: Manifest) -> str:
    lines = [json.dumps({"schema_version": manifest.schema_version})]
    lines.extend(_record_line(r) for r in manifest.records)
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> Manifest:
    """Parse JSON-lines text into a Manifest.

    Raises ManifestVersionError for an unknown schema_version and
    ManifestParseError (with the 1-based line number) for any bad record.
    """
    version = SCHEMA_VERSION
    records = []
    for line_number, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestParseError("invalid JSON: %s" % e.msg, line_number) from e
        if not isinstance(obj, dict):
            raise ManifestParseError("record must be a JSON object", line_number)

        if "schema_version" in obj and "kind" not in obj:
            if records:
                raise ManifestParseError("header must precede records", line_number)
            version = obj["schema_version"]
            if version != SCHEMA_VERSION:
                raise ManifestVersionError(
                    "unknown schema_version %r (expected %d)" % (version, SCHEMA_VERSION),
                    line_number,
                )
            continue

        model = _KINDS.get(obj.get("kind"))
        if model is None:
            raise ManifestParseError("unknown record kind %r" % obj.get("kind"), line_number)
        try:
            records.append(model.model_validate(obj))
        except ValidationError as e:
            problems = "; ".join(
                "%s: %s" % (".".join(str(p) for p in err["loc"]) or "record", err["msg"])
                for err in e.errors()
            )
            raise ManifestParseError(problems, line_number) from e
    return Manifest(records=tuple(records), schema_version=version)


def read_manifest(path: str) -> Manifest:
    with open(path, "r", encoding="utf-8") as f:
        manifest = parse_manifest(f.read())
    logger.debug("Loaded %d records from %s", len(manifest), path)
    return manifest


def write_manifest(path: str, manifest: Manifest) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(serialize_manifest(manifest))
