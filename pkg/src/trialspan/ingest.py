"""Registry ETL: parse trial XML into validated records, label durations,
filter, segment criteria text, split by start date, and summarize.

One XML document describes one trial. Parsing never crashes on incomplete
records: anything missing a required field comes back as a :class:`Skip`
naming the first offending field, so a directory scan can report exactly
why records were dropped. Only well-formedness failures raise.
"""

from __future__ import annotations

import json
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from datetime import date, datetime
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataFormatError, EmptyDatasetError, XmlParseError

DAYS_PER_YEAR = 365.25
MAX_DURATION_YEARS = 10.0


class InvalidIntervalError(DataFormatError):
    """Completion date does not fall after the start date."""


@dataclass
class TrialRecord:
    """One parsed registry entry with its duration label."""

    nct_id: str
    phase: int  # 1..4
    diseases: list[str]
    drugs: list[str]
    inclusion: list[str]  # ordered criterion sentences
    exclusion: list[str]
    start_date: date
    completion_date: date
    duration_years: float


@dataclass(frozen=True)
class Skip:
    """Why a document was not turned into a record."""

    reason: str
    nct_id: Optional[str] = None


@dataclass
class DatasetSplit:
    train: list[TrialRecord]
    test: list[TrialRecord]
    cutoff_date: date


@dataclass
class DurationSummary:
    count: int
    mean: float
    min: float
    q1: float
    median: float
    q3: float


@dataclass
class DurationStats:
    """Duration summary overall and per phase (phases with no records map to None)."""

    overall: DurationSummary
    per_phase: dict[int, Optional[DurationSummary]]


# Combined labels map to the later phase; early phase 1 counts as phase 1.
_PHASE_LABELS = {
    "early phase 1": 1,
    "phase 1": 1,
    "phase 1/phase 2": 2,
    "phase 2": 2,
    "phase 2/phase 3": 3,
    "phase 3": 3,
    "phase 4": 4,
}

_DATE_FORMATS = ("%B %d, %Y", "%B %Y", "%Y-%m-%d")

_EXCLUSION_HEADER = re.compile(r"exclusion\s+criteria\s*:?", re.IGNORECASE)
_INCLUSION_HEADER = re.compile(r"inclusion\s+criteria\s*:?", re.IGNORECASE)
_BULLET = re.compile(r"^[\-\*•–—]+\s*")


def compute_duration(start: date, completion: date) -> float:
    """Trial duration in years: calendar days between the dates over 365.25."""
    if completion <= start:
        raise InvalidIntervalError(
            f"completion date {completion} is not after start date {start}"
        )
    return (completion - start).days / DAYS_PER_YEAR


def parse_registry_date(text: str) -> Optional[date]:
    """Parse a registry date string; month-only dates resolve to day 1."""
    cleaned = " ".join(text.split())
    for fmt in _DATE_FORMATS:
        try:
            return datetime.strptime(cleaned, fmt).date()
        except ValueError:
            continue
    return None


def split_sentences(textblock: str) -> tuple[list[str], list[str]]:
    """Segment an eligibility textblock into (inclusion, exclusion) sentences.

    Text before the exclusion header belongs to the inclusion side, text
    after it to the exclusion side; without headers everything is inclusion.
    Sentences break on newlines and semicolons; leading bullet markers and
    the header phrases themselves are dropped, as are empty fragments.
    """
    if not textblock or not textblock.strip():
        return [], []
    m = _EXCLUSION_HEADER.search(textblock)
    if m:
        incl_text, excl_text = textblock[: m.start()], textblock[m.end() :]
    else:
        incl_text, excl_text = textblock, ""
    incl_text = _INCLUSION_HEADER.sub(" ", incl_text, count=1)
    return _segment(incl_text), _segment(excl_text)


def _segment(text: str) -> list[str]:
    sentences = []
    for part in re.split(r"[;\n]", text):
        s = _BULLET.sub("", part.strip()).strip()
        if s:
            sentences.append(s)
    return sentences


def parse_trial_xml(document: str) -> TrialRecord | Skip:
    """Parse one registry XML document into a TrialRecord, or a Skip.

    Fields are checked in a fixed order (id, study type, phase, diseases,
    drugs, criteria, dates, interval) so the Skip reason always names the
    first missing or invalid field. Malformed XML raises
    :class:`XmlParseError` carrying the byte offset of the failure.
    """
    try:
        root = ET.fromstring(document)
    except ET.ParseError as err:
        offset = None
        if err.position is not None:
            offset = _byte_offset(document, *err.position)
        raise XmlParseError(f"malformed XML: {err}", byte_offset=offset) from err

    nct_id = root.findtext("id_info/nct_id") or root.findtext(".//nct_id")
    if not nct_id or not nct_id.strip():
        return Skip("missing nct_id")
    nct_id = nct_id.strip()

    study_type = (root.findtext("study_type") or "").strip().lower()
    if study_type != "interventional":
        return Skip("non-interventional", nct_id)

    phase_text = " ".join((root.findtext("phase") or "").split()).lower()
    phase = _PHASE_LABELS.get(phase_text)
    if phase is None:
        return Skip("unknown phase", nct_id)

    diseases = [el.text.strip() for el in root.iter("condition") if el.text and el.text.strip()]
    if not diseases:
        return Skip("no diseases", nct_id)

    drugs = []
    for intervention in root.iter("intervention"):
        kind = (intervention.findtext("intervention_type") or "").strip().lower()
        name = (intervention.findtext("intervention_name") or "").strip()
        if kind == "drug" and name:
            drugs.append(name)
    if not drugs:
        return Skip("no drug intervention", nct_id)

    textblock = root.findtext("eligibility/criteria/textblock") or ""
    inclusion, exclusion = split_sentences(textblock)
    if not inclusion and not exclusion:
        return Skip("empty criteria", nct_id)

    start_text = root.findtext("start_date")
    if not start_text or not start_text.strip():
        return Skip("missing start_date", nct_id)
    start = parse_registry_date(start_text)
    if start is None:
        return Skip("invalid start_date", nct_id)

    completion_text = root.findtext("completion_date")
    if not completion_text or not completion_text.strip():
        return Skip("missing completion_date", nct_id)
    completion = parse_registry_date(completion_text)
    if completion is None:
        return Skip("invalid completion_date", nct_id)

    if completion <= start:
        return Skip("non-positive duration", nct_id)

    return TrialRecord(
        nct_id=nct_id,
        phase=phase,
        diseases=diseases,
        drugs=drugs,
        inclusion=inclusion,
        exclusion=exclusion,
        start_date=start,
        completion_date=completion,
        duration_years=compute_duration(start, completion),
    )


def _byte_offset(text: str, line: int, column: int) -> int:
    lines = text.split("\n")
    before = sum(len(l.encode("utf-8")) + 1 for l in lines[: line - 1])
    return before + len(lines[line - 1][:column].encode("utf-8"))


def filter_eligible(record: TrialRecord) -> bool:
    """Keep trials lasting up to 10 years with a known phase, drugs, criteria."""
    return (
        0.0 < record.duration_years <= MAX_DURATION_YEARS
        and record.phase in (1, 2, 3, 4)
        and bool(record.drugs)
        and bool(record.inclusion or record.exclusion)
    )


def split_temporal(records: list[TrialRecord], cutoff: date) -> DatasetSplit:
    """Partition records by start date: before the cutoff trains, the rest tests."""
    if not records:
        raise EmptyDatasetError("cannot split an empty record list")
    train = [r for r in records if r.start_date < cutoff]
    test = [r for r in records if r.start_date >= cutoff]
    return DatasetSplit(train=train, test=test, cutoff_date=cutoff)


def summarize(records: list[TrialRecord]) -> DurationStats:
    """Duration statistics (mean, min, linear-interpolation quartiles), overall and per phase."""
    if not records:
        raise EmptyDatasetError("cannot summarize an empty record list")
    per_phase: dict[int, Optional[DurationSummary]] = {}
    for phase in (1, 2, 3, 4):
        durations = [r.duration_years for r in records if r.phase == phase]
        per_phase[phase] = _summarize_durations(durations) if durations else None
    return DurationStats(
        overall=_summarize_durations([r.duration_years for r in records]),
        per_phase=per_phase,
    )


def _summarize_durations(durations: list[float]) -> DurationSummary:
    arr = np.asarray(durations, dtype=float)
    q1, median, q3 = np.quantile(arr, [0.25, 0.5, 0.75])
    return DurationSummary(
        count=len(durations),
        mean=float(arr.mean()),
        min=float(arr.min()),
        q1=float(q1),
        median=float(median),
        q3=float(q3),
    )


def ingest_directory(xml_dir: str | Path) -> tuple[list[TrialRecord], list[Skip]]:
    """Parse every ``*.xml`` file under a directory.

    Returns eligible records ordered by nct_id plus the skip list (parse
    order). Records failing :func:`filter_eligible` are skipped with reason
    "ineligible".
    """
    records, skips = [], []
    for path in sorted(Path(xml_dir).glob("*.xml")):
        result = parse_trial_xml(path.read_text(encoding="utf-8"))
        if isinstance(result, Skip):
            skips.append(result)
        elif not filter_eligible(result):
            skips.append(Skip("ineligible", result.nct_id))
        else:
            records.append(result)
    records.sort(key=lambda r: r.nct_id)
    return records, skips


# --- canonical JSONL serialization ---------------------------------------

_JSONL_FIELDS = (
    "nct_id",
    "phase",
    "diseases",
    "drugs",
    "inclusion",
    "exclusion",
    "start_date",
    "completion_date",
    "duration_years",
)


def record_to_dict(record: TrialRecord) -> dict:
    return {
        "nct_id": record.nct_id,
        "phase": record.phase,
        "diseases": list(record.diseases),
        "drugs": list(record.drugs),
        "inclusion": list(record.inclusion),
        "exclusion": list(record.exclusion),
        "start_date": record.start_date.isoformat(),
        "completion_date": record.completion_date.isoformat(),
        "duration_years": record.duration_years,
    }


def record_from_dict(data: dict) -> TrialRecord:
    missing = [f for f in _JSONL_FIELDS if f not in data]
    if missing:
        raise DataFormatError(f"record is missing fields: {', '.join(missing)}")
    return TrialRecord(
        nct_id=data["nct_id"],
        phase=int(data["phase"]),
        diseases=list(data["diseases"]),
        drugs=list(data["drugs"]),
        inclusion=list(data["inclusion"]),
        exclusion=list(data["exclusion"]),
        start_date=date.fromisoformat(data["start_date"]),
        completion_date=date.fromisoformat(data["completion_date"]),
        duration_years=float(data["duration_years"]),
    )


def save_jsonl(records: list[TrialRecord], path: str | Path) -> None:
    """Write records as canonical JSONL: UTF-8, one object per LF-ended line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(json.dumps(record_to_dict(record), ensure_ascii=False))
            fh.write("\n")


def load_jsonl(path: str | Path) -> list[TrialRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(record_from_dict(json.loads(line)))
            except (json.JSONDecodeError, ValueError, KeyError) as err:
                raise DataFormatError(f"{path}:{lineno}: bad record: {err}") from err
    return records
