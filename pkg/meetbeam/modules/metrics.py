"""Enhancement and transcription scoring.

SI-SDR / SI-SDRi for separated waveforms, WER for word sequences and the
sentence-level speaker error rate (SER) for speaker-attributed transcripts.
"""

import functools
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from meetbeam.errors import DegenerateInputError, PreconditionError, TranscriptParseError
from meetbeam.lib.audio import AudioClip, require_mono

logger = logging.getLogger(__name__)

# residual below this fraction of the target energy counts as perfect
PERFECT_RATIO = 1e-12
SPEAKER_CHANGE = "<sc>"
SPEAKER_PREFIX = "speaker="

_PUNCT = re.compile(r"[^\w\s']")


# --------------------------------------------------------------------------
# SI-SDR


def si_sdr_arrays(est: np.ndarray, ref: np.ndarray) -> float:
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise PreconditionError("si_sdr needs equal lengths, got %s and %s" % (est.shape, ref.shape))
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise DegenerateInputError("si_sdr reference has zero energy")
    alpha = float(np.dot(est, ref)) / ref_energy
    target = alpha * ref
    residual = est - target
    target_energy = float(np.dot(target, target))
    residual_energy = float(np.dot(residual, residual))
    if target_energy == 0.0:
        return -math.inf
    if residual_energy < PERFECT_RATIO * target_energy:
        return math.inf
    return 10.0 * math.log10(target_energy / residual_energy)


def si_sdr(est: AudioClip, ref: AudioClip) -> float:
    """Scale-invariant SDR in dB; math.inf marks a perfect reconstruction."""
    return si_sdr_arrays(require_mono(est, "est"), require_mono(ref, "ref"))


def si_sdri(est: AudioClip, ref: AudioClip, baseline: AudioClip) -> float:
    """si_sdr(est, ref) - si_sdr(baseline, ref).

    Identical estimate and baseline give exactly 0 (also when both are perfect).
    """
    est_db = si_sdr(est, ref)
    if np.array_equal(est.samples, baseline.samples):
        return 0.0
    base_db = si_sdr(baseline, ref)
    if math.isinf(est_db) and math.isinf(base_db) and est_db == base_db:
        return 0.0
    return est_db - base_db


# --------------------------------------------------------------------------
# WER


def normalize_text(text: str) -> List[str]:
    """Lowercase, drop punctuation except apostrophes, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass(frozen=True)
class WerResult:
    substitutions: int
    deletions: int
    insertions: int
    ref_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def empty_reference(self) -> bool:
        return self.ref_words == 0

    @property
    def pct(self) -> float:
        return 100.0 * self.errors / max(1, self.ref_words)


def _edit_table(hyp: Sequence, ref: Sequence, sub_cost) -> np.ndarray:
    n_ref, n_hyp = len(ref), len(hyp)
    table = np.zeros((n_ref + 1, n_hyp + 1))
    table[:, 0] = np.arange(n_ref + 1)
    table[0, :] = np.arange(n_hyp + 1)
    for i in range(1, n_ref + 1):
        for j in range(1, n_hyp + 1):
            table[i, j] = min(
                table[i - 1, j - 1] + sub_cost(ref[i - 1], hyp[j - 1]),
                table[i - 1, j] + 1.0,
                table[i, j - 1] + 1.0,
            )
    return table


def _backtrace(table: np.ndarray, hyp: Sequence, ref: Sequence, sub_cost):
    """Alignment steps ('pair', i, j), ('del', i, None) or ('ins', None, j) in order."""
    i, j = len(ref), len(hyp)
    steps = []
    while i > 0 or j > 0:
        if i > 0 and j > 0 and math.isclose(
            table[i, j], table[i - 1, j - 1] + sub_cost(ref[i - 1], hyp[j - 1]), abs_tol=1e-9
        ):
            steps.append(("pair", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and math.isclose(table[i, j], table[i - 1, j] + 1.0, abs_tol=1e-9):
            steps.append(("del", i - 1, None))
            i -= 1
        else:
            steps.append(("ins", None, j - 1))
            j -= 1
    steps.reverse()
    return steps


def _word_cost(a: str, b: str) -> float:
    return 0.0 if a == b else 1.0


def wer(hyp: Sequence[str], ref: Sequence[str]) -> WerResult:
    """Minimum edit distance alignment with unit costs."""
    hyp, ref = list(hyp), list(ref)
    table = _edit_table(hyp, ref, _word_cost)
    subs = dels = ins = 0
    for kind, i, j in _backtrace(table, hyp, ref, _word_cost):
        if kind == "pair":
            subs += int(ref[i] != hyp[j])
        elif kind == "del":
            dels += 1
        else:
            ins += 1
    result = WerResult(subs, dels, ins, len(ref))
    if result.empty_reference and hyp:
        logger.warning("WER with an empty reference: %d insertions", ins)
    return result


# --------------------------------------------------------------------------
# speaker-attributed transcripts


@dataclass(frozen=True)
class SotTranscript:
    """Ordered (speaker_id, words) sentences of one utterance."""

    sentences: Tuple[Tuple[str, Tuple[str, ...]], ...] = ()

    def __post_init__(self):
        normalized = []
        for speaker, words in self.sentences:
            words = tuple(words)
            if not speaker:
                raise PreconditionError("sentence without a speaker id")
            if not words:
                raise PreconditionError("empty sentence for speaker %s" % speaker)
            normalized.append((str(speaker), words))
        object.__setattr__(self, "sentences", tuple(normalized))

    def words(self) -> List[str]:
        return [w for _, words in self.sentences for w in words]

    def speakers(self) -> List[str]:
        return [speaker for speaker, _ in self.sentences]


def parse_sot(line: str, normalize: bool = True) -> SotTranscript:
    """Parse `speaker=<id> w1 w2 <sc> speaker=<id> w3 ...`."""
    sentences = []
    text = line.strip()
    if not text:
        return SotTranscript()
    for part in text.split(SPEAKER_CHANGE):
        tokens = part.split()
        if not tokens or not tokens[0].startswith(SPEAKER_PREFIX):
            raise TranscriptParseError("sentence must start with %s<id>: %r" % (SPEAKER_PREFIX, part.strip()))
        speaker = tokens[0][len(SPEAKER_PREFIX) :]
        words = normalize_text(" ".join(tokens[1:])) if normalize else tokens[1:]
        if not speaker or not words:
            raise TranscriptParseError("empty speaker or sentence in %r" % part.strip())
        sentences.append((speaker, tuple(words)))
    return SotTranscript(tuple(sentences))


def format_sot(transcript: SotTranscript) -> str:
    return (" %s " % SPEAKER_CHANGE).join(
        "%s%s %s" % (SPEAKER_PREFIX, speaker, " ".join(words)) for speaker, words in transcript.sentences
    )


def read_transcripts(path: str, normalize: bool = True) -> List[SotTranscript]:
    """One utterance per line; blank lines are empty transcripts."""
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            try:
                out.append(parse_sot(line, normalize))
            except TranscriptParseError as e:
                raise TranscriptParseError("%s line %d: %s" % (path, number, e)) from e
    return out


@dataclass(frozen=True)
class SerResult:
    speaker_mismatches: int
    unaligned: int
    ref_sentences: int

    @property
    def errors(self) -> int:
        return self.speaker_mismatches + self.unaligned

    @property
    def empty_reference(self) -> bool:
        return self.ref_sentences == 0

    @property
    def pct(self) -> float:
        if self.ref_sentences == 0:
            return 0.0
        return 100.0 * self.errors / self.ref_sentences


def _sentence_cost(ref_sentence, hyp_sentence) -> float:
    result = wer(hyp_sentence[1], ref_sentence[1])
    return min(1.0, result.errors / max(1, result.ref_words))


def ser(hyp: SotTranscript, ref: SotTranscript) -> SerResult:
    """Sentence-level speaker error rate.

    Sentences are aligned by edit distance whose pair cost is the (capped)
    WER between the two sentences; insert and delete cost 1. Speaker labels
    never enter the alignment.
    """
    hyp_s, ref_s = list(hyp.sentences), list(ref.sentences)
    cost = functools.lru_cache(maxsize=None)(_sentence_cost)

    table = _edit_table(hyp_s, ref_s, cost)
    mismatches = unaligned = 0
    for kind, i, j in _backtrace(table, hyp_s, ref_s, cost):
        if kind == "pair":
            mismatches += int(ref_s[i][0] != hyp_s[j][0])
        elif kind == "del":
            unaligned += 1
    return SerResult(mismatches, unaligned, len(ref_s))


# --------------------------------------------------------------------------
# reports


def encode_db(value: Optional[float]):
    """JSON form of a dB value: infinities become "+inf"/"-inf", NaN becomes null."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    if math.isinf(value):
        return "+inf" if value > 0 else "-inf"
    return float(value)


def _mean(values: Sequence[float]) -> Optional[float]:
    if not values:
        return None
    with np.errstate(invalid="ignore"):
        return float(np.mean(values))


@dataclass
class ScoreReport:
    si_sdr_db: Optional[float] = None
    si_sdri_db: Optional[float] = None
    wer_pct: Optional[float] = None
    ser_pct: Optional[float] = None
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_words: int = 0
    sentence_errors: int = 0
    ref_sentences: int = 0
    items: List[dict] = field(default_factory=list)
    by_speaker_count: Dict[str, dict] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "si_sdr_db": encode_db(self.si_sdr_db),
            "si_sdri_db": encode_db(self.si_sdri_db),
            "wer_pct": self.wer_pct,
            "ser_pct": self.ser_pct,
            "counts": {
                "substitutions": self.substitutions,
                "deletions": self.deletions,
                "insertions": self.insertions,
                "ref_words": self.ref_words,
                "sentence_errors": self.sentence_errors,
                "ref_sentences": self.ref_sentences,
            },
            "items": [
                {k: encode_db(v) if k.endswith("_db") else v for k, v in item.items()}
                for item in self.items
            ],
            "by_speaker_count": {
                key: {k: encode_db(v) if k.endswith("_db") else v for k, v in row.items()}
                for key, row in self.by_speaker_count.items()
            },
        }


def _rate_rows(groups: Dict[str, Dict[str, int]]) -> Dict[str, dict]:
    rows = {}
    for key, g in groups.items():
        rows[key] = {
            "count": g["count"],
            "wer_pct": 100.0 * g["word_errors"] / max(1, g["ref_words"]),
            "ser_pct": 100.0 * g["sentence_errors"] / g["ref_sentences"] if g["ref_sentences"] else 0.0,
        }
    return rows


def score_corpus(
    hyps: Sequence[SotTranscript], refs: Sequence[SotTranscript]
) -> ScoreReport:
    """Corpus WER/SER: counts summed over utterances in input order.

    by_speaker_count groups utterances by the number of distinct reference
    speakers, plus "all".
    """
    if len(hyps) != len(refs):
        raise PreconditionError("%d hypotheses for %d references" % (len(hyps), len(refs)))
    report = ScoreReport()
    groups: Dict[str, Dict[str, int]] = {}
    for index, (hyp, ref) in enumerate(zip(hyps, refs)):
        w = wer(hyp.words(), ref.words())
        s = ser(hyp, ref)
        report.substitutions += w.substitutions
        report.deletions += w.deletions
        report.insertions += w.insertions
        report.ref_words += w.ref_words
        report.sentence_errors += s.errors
        report.ref_sentences += s.ref_sentences
        n_speakers = len(set(ref.speakers()))
        for key in ([str(n_speakers)] if n_speakers else []) + ["all"]:
            g = groups.setdefault(
                key, {"count": 0, "word_errors": 0, "ref_words": 0, "sentence_errors": 0, "ref_sentences": 0}
            )
            g["count"] += 1
            g["word_errors"] += w.errors
            g["ref_words"] += w.ref_words
            g["sentence_errors"] += s.errors
            g["ref_sentences"] += s.ref_sentences
        report.items.append({"index": index, "n_speakers": n_speakers, "wer_pct": w.pct, "ser_pct": s.pct})
    report.wer_pct = 100.0 * (report.substitutions + report.deletions + report.insertions) / max(1, report.ref_words)
    report.ser_pct = 100.0 * report.sentence_errors / report.ref_sentences if report.ref_sentences else 0.0
    report.by_speaker_count = _rate_rows(groups)
    logger.info("WER %.2f%% over %d words, SER %.2f%%", report.wer_pct, report.ref_words, report.ser_pct)
    return report


def breakdown_by_speaker_count(
    rows: Sequence[Tuple[int, float, Optional[float]]],
) -> Dict[str, dict]:
    """Mean SI-SDR / SI-SDRi per number of mixed speakers, plus "all".

    rows hold (n_speakers, si_sdr_db, si_sdri_db or None).
    """
    table: Dict[str, dict] = {}
    groups = [(str(n), [r for r in rows if r[0] == n]) for n in (1, 2, 3, 4)]
    groups.append(("all", list(rows)))
    for key, members in groups:
        if not members:
            continue
        improvements = [r[2] for r in members if r[2] is not None]
        table[key] = {
            "count": len(members),
            "si_sdr_db": _mean([r[1] for r in members]),
            "si_sdri_db": _mean(improvements) if improvements else None,
        }
    return table
