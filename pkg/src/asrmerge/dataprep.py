"""Manifest ingestion and the training-data munging pipeline.

Stages, in the order ``prepare`` applies them: drop unusable samples, clean
transcripts, mark over-long audio as truncated, upsample by vote score, and
cap the result at a fixed size.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import re
import unicodedata
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from asrmerge.metrics import normalize_and_tokenize

DEFAULT_CAP = 100_000
MAX_AUDIO_S = 30.0


class DataPrepError(ValueError):
    pass


class DatasetKind(str, enum.Enum):
    SCRIPTED = "SCRIPTED"
    SPONTANEOUS = "SPONTANEOUS"


@dataclass(frozen=True)
class SampleRecord:
    id: str
    audio_path: str
    duration_s: float
    transcript: str
    up_votes: int | None = None
    down_votes: int | None = None
    single_votes: int | None = None
    flagged: bool = False
    effective_duration_s: float | None = None
    truncated: bool = False

    def __post_init__(self):
        if not math.isfinite(self.duration_s) or self.duration_s < 0:
            raise DataPrepError(f"{self.id}: duration must be finite and non-negative, got {self.duration_s}")
        for name in ("up_votes", "down_votes", "single_votes"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise DataPrepError(f"{self.id}: {name} must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Manifest:
    language: str
    kind: DatasetKind
    records: tuple[SampleRecord, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", DatasetKind(self.kind))
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def with_records(self, records: Iterable[SampleRecord]) -> Manifest:
        return Manifest(self.language, self.kind, tuple(records))

    def check_unique_ids(self) -> None:
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise DataPrepError(f"duplicate record id {r.id!r}")
            seen.add(r.id)


# ------------------------------------------------------------------ stages


def filter_samples(m: Manifest) -> Manifest:
    """Drop flagged records, zero-length audio and blank transcripts."""
    keep = (r for r in m.records if not r.flagged and r.duration_s > 0 and normalize_and_tokenize(r.transcript))
    return m.with_records(keep)


def vote_score(r: SampleRecord, kind: DatasetKind) -> int:
    """Upvotes minus downvotes for scripted data, the single count otherwise."""
    if DatasetKind(kind) is DatasetKind.SCRIPTED:
        if r.up_votes is None or r.down_votes is None:
            raise DataPrepError(f"{r.id}: scripted record lacks up/down votes")
        return r.up_votes - r.down_votes
    if r.single_votes is None:
        raise DataPrepError(f"{r.id}: spontaneous record lacks a votes count")
    return r.single_votes


def upsample(m: Manifest) -> Manifest:
    # negative scores keep the record once rather than dropping it
    out = []
    for r in m.records:
        out.extend([r] * (max(vote_score(r, m.kind), 0) + 1))
    return m.with_records(out)


def cap_manifest(m: Manifest, cap: int = DEFAULT_CAP, seed: int = 0) -> Manifest:
    """Uniform seeded subsample of ``cap`` records, original order kept."""
    if cap < 1:
        raise DataPrepError(f"cap must be >= 1, got {cap}")
    n = len(m.records)
    if n <= cap:
        return m
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=cap, replace=False))
    return m.with_records(m.records[i] for i in idx)


def flag_truncation(m: Manifest, limit_s: float = MAX_AUDIO_S) -> Manifest:
    # metadata only: transcripts and source durations are left alone
    out = []
    for r in m.records:
        if r.duration_s > limit_s:
            r = replace(r, effective_duration_s=limit_s, truncated=True)
        out.append(r)
    return m.with_records(out)


# --------------------------------------------------------------- cleaning

# C0/C1 control characters that Python does not treat as whitespace
_CONTROL = "[\x00-\x08\x0e-\x1b\x7f-\x84\x86-\x9f]"
NFC = "@nfc"
TRIM = "@trim"
DIRECTIVES = {NFC, TRIM}

DEFAULT_RULES: tuple[tuple[str, str], ...] = (
    (_CONTROL, ""),
    (r"\s+", " "),
    (NFC, ""),
    (TRIM, ""),
)


@lru_cache(maxsize=256)
def _compile(pattern: str) -> re.Pattern:
    try:
        return re.compile(pattern)
    except re.error as exc:
        raise DataPrepError(f"invalid cleaning pattern {pattern!r}: {exc}") from exc


def clean_transcript(text: str, rules: Sequence[tuple[str, str]] = DEFAULT_RULES) -> str:
    """Apply ``(pattern, replacement)`` rules in order.

    Besides regular expressions, a rule pattern may be one of the directives
    ``@nfc`` (Unicode NFC normalisation) or ``@trim`` (strip surrounding
    whitespace); their replacement is ignored.
    """
    for pattern, repl in rules:
        if pattern == NFC:
            text = unicodedata.normalize("NFC", text)
        elif pattern == TRIM:
            text = text.strip()
        else:
            text = _compile(pattern).sub(repl, text)
    return text


def load_rules(path: str | Path) -> list[tuple[str, str]]:
    """Read a ruleset file: one ``pattern<TAB>replacement`` per line.

    Blank lines and lines starting with ``#`` are skipped.  A line holding
    only a pattern replaces matches with the empty string.
    """
    rules = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        pattern, _, repl = line.partition("\t")
        if pattern not in DIRECTIVES:
            try:
                _compile(pattern)
            except DataPrepError as exc:
                raise DataPrepError(f"{path}:{lineno}: {exc}") from None
        rules.append((pattern, repl))
    return rules


def clean_manifest(m: Manifest, rules: Sequence[tuple[str, str]] = DEFAULT_RULES) -> Manifest:
    return m.with_records(replace(r, transcript=clean_transcript(r.transcript, rules)) for r in m.records)


# ------------------------------------------------------------------ I/O

_COLUMNS = {
    "id": ("id", "audio_id", "sample_id"),
    "path": ("path", "audio_path", "audio_file", "audio"),
    "duration": ("duration", "duration_s", "duration_sec"),
    "duration_ms": ("duration_ms",),
    "sentence": ("sentence", "transcript", "transcription", "text"),
    "up_votes": ("up_votes",),
    "down_votes": ("down_votes",),
    "votes": ("votes",),
    "flags": ("flags", "flagged"),
}
_FALSEY = {"", "0", "false", "no", "none", "n", "f"}


def _resolve_columns(header: Sequence[str]) -> dict[str, str]:
    lowered = {h.strip().lower(): h for h in header}
    found = {}
    for key, aliases in _COLUMNS.items():
        for a in aliases:
            if a in lowered:
                found[key] = lowered[a]
                break
    return found


def _int_or_none(value: str | None, where: str) -> int | None:
    if value is None or value.strip() == "":
        return None
    try:
        return int(float(value))
    except ValueError:
        raise DataPrepError(f"{where}: not a vote count: {value!r}") from None


def read_tsv_manifest(
    path: str | Path,
    language: str = "",
    kind: DatasetKind | str | None = None,
    require_duration: bool = True,
) -> Manifest:
    """Header-driven TSV reader tolerant of varying column names.

    The dataset kind is inferred from the vote columns when not given:
    ``up_votes``/``down_votes`` means scripted, ``votes`` means spontaneous.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        cols = _resolve_columns(reader.fieldnames or [])
        if "sentence" not in cols or ("path" not in cols and "id" not in cols):
            raise DataPrepError(f"{path}: header needs a transcript column and an id or path column")
        if kind is None:
            if "up_votes" in cols and "down_votes" in cols:
                kind = DatasetKind.SCRIPTED
            elif "votes" in cols:
                kind = DatasetKind.SPONTANEOUS
            else:
                raise DataPrepError(f"{path}: cannot infer dataset kind without vote columns")
        kind = DatasetKind(kind)
        records = []
        for lineno, row in enumerate(reader, 2):
            where = f"{path}:{lineno}"
            get = lambda key: row.get(cols[key]) if key in cols else None  # noqa: E731
            if "duration" in cols:
                duration = float(get("duration") or 0.0)
            elif "duration_ms" in cols:
                duration = float(get("duration_ms") or 0.0) / 1000.0
            elif require_duration:
                raise DataPrepError(f"{path}: no duration column")
            else:
                duration = 0.0
            audio = get("path") or ""
            rid = get("id") or audio
            scripted = kind is DatasetKind.SCRIPTED
            records.append(
                SampleRecord(
                    id=rid,
                    audio_path=audio,
                    duration_s=duration,
                    transcript=get("sentence") or "",
                    up_votes=_int_or_none(get("up_votes"), where) if scripted else None,
                    down_votes=_int_or_none(get("down_votes"), where) if scripted else None,
                    single_votes=None if scripted else _int_or_none(get("votes"), where),
                    flagged=(get("flags") or "").strip().lower() not in _FALSEY,
                )
            )
    m = Manifest(language, kind, records)
    m.check_unique_ids()
    return m


def write_jsonl_manifest(m: Manifest, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in m.records:
            row = {"language": m.language, "kind": m.kind.value, **r.to_dict()}
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def read_jsonl_manifest(path: str | Path) -> Manifest:
    language, kind, records = "", DatasetKind.SPONTANEOUS, []
    fields_ = set(SampleRecord.__dataclass_fields__)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            language = row.get("language", language)
            kind = DatasetKind(row.get("kind", kind))
            records.append(SampleRecord(**{k: v for k, v in row.items() if k in fields_}))
    return Manifest(language, kind, records)


def read_manifest(path: str | Path, **kwargs) -> Manifest:
    if str(path).endswith((".jsonl", ".json")):
        return read_jsonl_manifest(path)
    return read_tsv_manifest(path, **kwargs)


def prepare(
    m: Manifest,
    rules: Sequence[tuple[str, str]] = DEFAULT_RULES,
    cap: int = DEFAULT_CAP,
    seed: int = 0,
    limit_s: float = MAX_AUDIO_S,
) -> tuple[Manifest, dict[str, int]]:
    """Run filter -> clean -> truncate -> upsample -> cap; return counts per stage."""
    counts = {"input": len(m)}
    m = filter_samples(m)
    counts["filtered"] = len(m)
    m = clean_manifest(m, rules)
    counts["cleaned"] = len(m)
    m = flag_truncation(m, limit_s)
    counts["truncated_flagged"] = sum(r.truncated for r in m.records)
    m = upsample(m)
    counts["upsampled"] = len(m)
    m = cap_manifest(m, cap, seed)
    counts["capped"] = len(m)
    return m, counts


# ------------------------------------------------------------- languages


@dataclass(frozen=True)
class LanguageMapping:
    target: str
    name: str
    family: str
    supports: tuple[str, ...]
    proxy: str
    script: str
    test_only: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["supports"] = list(self.supports)
        return d


def _read_resource(name: str) -> list[dict[str, str]]:
    text = resources.files("asrmerge").joinpath("data", name).read_text(encoding="utf-8")
    return list(csv.DictReader(text.splitlines(), delimiter="\t", quoting=csv.QUOTE_NONE))


@lru_cache(maxsize=1)
def language_table() -> tuple[LanguageMapping, ...]:
    rows = []
    for row in _read_resource("languages.tsv"):
        rows.append(
            LanguageMapping(
                target=row["target"],
                name=row["name"],
                family=row["family"],
                supports=tuple(s for s in row["supports"].split(",") if s),
                proxy=row["proxy"],
                script=row["script"],
                test_only=row["test_only"] == "1",
            )
        )
    return tuple(rows)


@lru_cache(maxsize=1)
def support_language_names() -> dict[str, str]:
    return {row["code"]: row["name"] for row in _read_resource("support_languages.tsv")}


def lookup_language(target: str) -> LanguageMapping:
    for row in language_table():
        if row.target == target:
            return row
    raise KeyError(f"unknown target language {target!r}")
