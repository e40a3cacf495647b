"""Parsing and cohort filtering for NIH ChestX-ray14 style metadata.

The input is the ``Data_Entry_2017.csv`` layout: one row per image with
``Image Index``, ``Finding Labels`` (``|``-separated), ``Follow-up #``,
``Patient ID``, ``Patient Age``, ``Patient Gender`` and ``View Position``.
Any further columns are carried through untouched.
"""

from __future__ import annotations

import csv
import io
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, TextIO

from .errors import DuplicateFollowup, MalformedRow, MissingColumn, UnknownLabel

# Output vector positions depend on this order; bump VOCABULARY_VERSION if it changes.
LABELS: tuple[str, ...] = (
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Effusion",
    "Emphysema",
    "Fibrosis",
    "Hernia",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pleural_Thickening",
    "Pneumonia",
    "Pneumothorax",
    "No Finding",
)
VOCABULARY_VERSION = 1
LABEL_INDEX: dict[str, int] = {label: i for i, label in enumerate(LABELS)}
NO_FINDING = "No Finding"
NUM_LABELS = len(LABELS)

VIEWS = ("PA", "AP")
GENDERS = ("M", "F")

COL_IMAGE = "Image Index"
COL_LABELS = "Finding Labels"
COL_FOLLOWUP = "Follow-up #"
COL_PATIENT = "Patient ID"
COL_AGE = "Patient Age"
COL_GENDER = "Patient Gender"
COL_VIEW = "View Position"
REQUIRED_COLUMNS = (COL_IMAGE, COL_LABELS, COL_FOLLOWUP, COL_PATIENT, COL_AGE, COL_GENDER, COL_VIEW)

_LEADING_INT = re.compile(r"^\s*(\d+)")


def label_sort_key(label: str) -> int:
    return LABEL_INDEX[label]


@dataclass(frozen=True)
class XrayRecord:
    image_index: str
    patient_id: int
    followup_num: int
    labels: frozenset[str]
    view: str
    age: int
    gender: str
    image_path: str | None = None
    extras: tuple[tuple[str, str], ...] = field(default=(), compare=True)

    def __post_init__(self) -> None:
        if not self.labels:
            raise MalformedRow(f"{self.image_index}: empty label set")
        unknown = sorted(set(self.labels) - LABEL_INDEX.keys())
        if unknown:
            raise UnknownLabel(f"{self.image_index}: unknown label(s) {unknown}")
        if NO_FINDING in self.labels and len(self.labels) > 1:
            raise MalformedRow(f"{self.image_index}: 'No Finding' combined with other labels")
        if self.view not in VIEWS:
            raise MalformedRow(f"{self.image_index}: unknown view {self.view!r}")

    @property
    def label_string(self) -> str:
        return "|".join(sorted(self.labels, key=label_sort_key))


@dataclass(frozen=True)
class PatientGroup:
    patient_id: int
    records: tuple[XrayRecord, ...]

    @property
    def views(self) -> set[str]:
        return {r.view for r in self.records}

    def __len__(self) -> int:
        return len(self.records)


def _parse_labels(raw: str, where: str) -> frozenset[str]:
    tokens = [tok.strip() for tok in raw.split("|")]
    tokens = [tok for tok in tokens if tok]
    if not tokens:
        raise MalformedRow(f"{where}: empty '{COL_LABELS}'")
    for tok in tokens:
        if tok not in LABEL_INDEX:
            raise UnknownLabel(f"{where}: unknown label {tok!r}")
    return frozenset(tokens)


def _parse_int(raw: str, column: str, where: str, *, leading: bool = False) -> int:
    text = (raw or "").strip()
    if leading:
        m = _LEADING_INT.match(text)
        if m is None:
            raise MalformedRow(f"{where}: cannot parse {column!r} value {raw!r}")
        return int(m.group(1))
    try:
        return int(text)
    except ValueError:
        raise MalformedRow(f"{where}: non-integer {column!r} value {raw!r}") from None


def parse_metadata(stream: TextIO) -> list[XrayRecord]:
    """Parse a metadata CSV stream into records, preserving row order."""
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise MissingColumn("empty metadata file (no header row)") from None
    header = [h.strip() for h in header]
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing:
        raise MissingColumn(f"metadata header lacks column(s): {missing}")
    pos = {name: header.index(name) for name in REQUIRED_COLUMNS}
    extra_cols = [(i, name) for i, name in enumerate(header) if name not in REQUIRED_COLUMNS]

    records: list[XrayRecord] = []
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) < len(header):
            row = row + [""] * (len(header) - len(row))
        where = f"line {line_no}"
        view = row[pos[COL_VIEW]].strip()
        if view not in VIEWS:
            raise MalformedRow(f"{where}: unknown view position {view!r}")
        gender = row[pos[COL_GENDER]].strip()
        if gender not in GENDERS:
            raise MalformedRow(f"{where}: unknown gender {gender!r}")
        patient_id = _parse_int(row[pos[COL_PATIENT]], COL_PATIENT, where)
        if patient_id <= 0:
            raise MalformedRow(f"{where}: patient id must be positive, got {patient_id}")
        followup = _parse_int(row[pos[COL_FOLLOWUP]], COL_FOLLOWUP, where)
        if followup < 0:
            raise MalformedRow(f"{where}: negative follow-up number {followup}")
        records.append(
            XrayRecord(
                image_index=row[pos[COL_IMAGE]].strip(),
                patient_id=patient_id,
                followup_num=followup,
                labels=_parse_labels(row[pos[COL_LABELS]], where),
                view=view,
                age=_parse_int(row[pos[COL_AGE]], COL_AGE, where, leading=True),
                gender=gender,
                extras=tuple((name, row[i]) for i, name in extra_cols),
            )
        )
    return records


def read_metadata(path: str | Path) -> list[XrayRecord]:
    with open(path, newline="", encoding="utf-8") as handle:
        return parse_metadata(handle)


def write_metadata(records: Iterable[XrayRecord], stream: TextIO) -> None:
    """Serialise records back to the metadata CSV schema.

    Extra columns are taken from the first record; every record is expected to
    carry the same set.
    """
    records = list(records)
    extra_names = [name for name, _ in records[0].extras] if records else []
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(list(REQUIRED_COLUMNS) + extra_names)
    for r in records:
        writer.writerow(
            [r.image_index, r.label_string, r.followup_num, r.patient_id, r.age, r.gender, r.view]
            + [value for _, value in r.extras]
        )


def metadata_to_string(records: Iterable[XrayRecord]) -> str:
    buf = io.StringIO()
    write_metadata(records, buf)
    return buf.getvalue()


def group_patients(records: Iterable[XrayRecord]) -> list[PatientGroup]:
    """Group records by patient, each group sorted by follow-up number.

    Groups are returned in ascending patient id order.
    """
    by_patient: dict[int, list[XrayRecord]] = defaultdict(list)
    for rec in records:
        by_patient[rec.patient_id].append(rec)
    groups = []
    for pid in sorted(by_patient):
        recs = sorted(by_patient[pid], key=lambda r: r.followup_num)
        for prev, cur in zip(recs, recs[1:]):
            if prev.followup_num == cur.followup_num:
                raise DuplicateFollowup(
                    f"patient {pid} has follow-up #{cur.followup_num} more than once "
                    f"({prev.image_index}, {cur.image_index})"
                )
        groups.append(PatientGroup(pid, tuple(recs)))
    return groups


MIN_RECORDS = 3


def filter_min_followups(groups: Iterable[PatientGroup], min_records: int = MIN_RECORDS) -> list[PatientGroup]:
    """Filter 1: drop patients with fewer than ``min_records`` X-rays."""
    return [g for g in groups if len(g.records) >= min_records]


def filter_consistent_view(groups: Iterable[PatientGroup]) -> list[PatientGroup]:
    """Filter 2: drop patients whose X-rays mix PA and AP views."""
    return [g for g in groups if len(g.views) == 1]
