"""Triplet sample sets, view separation, train/test/validation partitions and manifests."""

from __future__ import annotations

import csv
import random
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import EmptyInput, ManifestValidationError, SchemaMismatch, TooFewRecords
from .metadata import (
    LABEL_INDEX,
    LABELS,
    VIEWS,
    PatientGroup,
    XrayRecord,
    label_sort_key,
)

WINDOW = 3
RATIOS = (0.7, 0.2, 0.1)
SPLIT_MODES = ("by_sample", "by_patient")
PARTITIONS = ("train", "test", "validation")

# Python's random.Random (MT19937) shuffle is a Fisher-Yates pass drawing
# indices with getrandbits; the name pins that choice for manifest provenance.
SHUFFLE_ALGORITHM = "mt19937-fisher-yates-v1"

MANIFEST_COLUMNS = (
    "sample_id",
    "patient_id",
    "view",
    "followup_1",
    "followup_2",
    "followup_3",
    "image_1",
    "image_2",
    "image_3",
    "target_label",
    "split_partition",
)
# Appended after the fixed columns so a manifest can be read back losslessly.
MANIFEST_EXTRA_COLUMNS = ("third_labels", "split_seed", "split_mode")


@dataclass(frozen=True)
class SampleSet:
    sample_id: int
    patient_id: int
    view: str
    images: tuple[str, str, str]
    source_followups: tuple[int, int, int]
    target_label: str
    original_third_labels: frozenset[str]

    def __post_init__(self) -> None:
        if self.target_label not in self.original_third_labels:
            raise ManifestValidationError(
                f"sample {self.sample_id}: target {self.target_label!r} not among third-image "
                f"labels {sorted(self.original_third_labels)}"
            )
        if self.target_label not in LABEL_INDEX:
            raise ManifestValidationError(f"sample {self.sample_id}: unknown label {self.target_label!r}")
        a, b, c = self.source_followups
        if not a < b < c:
            raise ManifestValidationError(f"sample {self.sample_id}: follow-ups {self.source_followups} not increasing")
        if self.view not in VIEWS:
            raise ManifestValidationError(f"sample {self.sample_id}: unknown view {self.view!r}")


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[SampleSet, ...]
    test: tuple[SampleSet, ...]
    validation: tuple[SampleSet, ...]
    seed: int
    mode: str = "by_sample"
    ratios: tuple[float, float, float] = RATIOS

    def partitions(self) -> dict[str, tuple[SampleSet, ...]]:
        return {"train": self.train, "test": self.test, "validation": self.validation}

    def all_samples(self) -> list[SampleSet]:
        return [*self.train, *self.test, *self.validation]

    def __len__(self) -> int:
        return len(self.train) + len(self.test) + len(self.validation)


def build_windows(group: PatientGroup) -> list[tuple[XrayRecord, XrayRecord, XrayRecord]]:
    """Sliding windows of three consecutive X-rays (stride 1)."""
    recs = group.records
    if len(recs) < WINDOW:
        raise TooFewRecords(f"patient {group.patient_id} has {len(recs)} records; need {WINDOW}")
    return [(recs[i], recs[i + 1], recs[i + 2]) for i in range(len(recs) - WINDOW + 1)]


def explode_multilabel(
    window: Sequence[XrayRecord], first_id: int = 0
) -> list[SampleSet]:
    """One sample per label of the window's third X-ray, ids from ``first_id`` upward."""
    first, second, third = window
    images = (first.image_index, second.image_index, third.image_index)
    followups = (first.followup_num, second.followup_num, third.followup_num)
    return [
        SampleSet(
            sample_id=first_id + k,
            patient_id=third.patient_id,
            view=third.view,
            images=images,
            source_followups=followups,
            target_label=label,
            original_third_labels=third.labels,
        )
        for k, label in enumerate(sorted(third.labels, key=label_sort_key))
    ]


def build_samples(groups: Iterable[PatientGroup]) -> list[SampleSet]:
    """Windows plus explosion for every patient, ids assigned in patient/follow-up/label order."""
    samples: list[SampleSet] = []
    for group in sorted(groups, key=lambda g: g.patient_id):
        for window in build_windows(group):
            samples.extend(explode_multilabel(window, first_id=len(samples)))
    return samples


def split_by_view(samples: Iterable[SampleSet]) -> tuple[list[SampleSet], list[SampleSet]]:
    pa: list[SampleSet] = []
    ap: list[SampleSet] = []
    for s in samples:
        (pa if s.view == "PA" else ap).append(s)
    return pa, ap


def _cut(n: int, ratios: Sequence[float]) -> tuple[int, int]:
    n_train = int(n * ratios[0])
    n_test = int(n * ratios[1])
    return n_train, n_train + n_test


def split_train_test_val(
    samples: Sequence[SampleSet],
    seed: int,
    mode: str = "by_sample",
    ratios: Sequence[float] = RATIOS,
) -> DatasetSplit:
    """Seeded shuffle followed by a contiguous 70/20/10 cut.

    Sizes are ``floor(0.7 n)``, ``floor(0.2 n)`` and the remainder. In
    ``by_patient`` mode ``n`` counts patients and each patient's samples go to
    a single partition.
    """
    if not samples:
        raise EmptyInput("cannot split an empty sample list")
    if mode not in SPLIT_MODES:
        raise ValueError(f"unknown split mode {mode!r}")
    rng = random.Random(seed)
    if mode == "by_sample":
        order = list(samples)
        rng.shuffle(order)
        a, b = _cut(len(order), ratios)
        parts = order[:a], order[a:b], order[b:]
    else:
        patients = sorted({s.patient_id for s in samples})
        rng.shuffle(patients)
        a, b = _cut(len(patients), ratios)
        where = {pid: 0 for pid in patients[:a]}
        where.update({pid: 1 for pid in patients[a:b]})
        where.update({pid: 2 for pid in patients[b:]})
        buckets: list[list[SampleSet]] = [[], [], []]
        rank = {pid: i for i, pid in enumerate(patients)}
        for s in sorted(samples, key=lambda s: (rank[s.patient_id], s.sample_id)):
            buckets[where[s.patient_id]].append(s)
        parts = tuple(buckets)
    return DatasetSplit(
        train=tuple(parts[0]),
        test=tuple(parts[1]),
        validation=tuple(parts[2]),
        seed=seed,
        mode=mode,
        ratios=tuple(ratios),
    )


@dataclass(frozen=True)
class CohortStats:
    patients: int
    samples: int
    per_label: dict[str, int]
    per_view: dict[str, int]


def cohort_stats(samples: Iterable[SampleSet]) -> CohortStats:
    samples = list(samples)
    labels = Counter(s.target_label for s in samples)
    views = Counter(s.view for s in samples)
    return CohortStats(
        patients=len({s.patient_id for s in samples}),
        samples=len(samples),
        per_label={label: labels.get(label, 0) for label in LABELS},
        per_view={view: views.get(view, 0) for view in VIEWS},
    )


def _sample_row(s: SampleSet, partition: str, split: DatasetSplit) -> list:
    return [
        s.sample_id,
        s.patient_id,
        s.view,
        *s.source_followups,
        *s.images,
        s.target_label,
        partition,
        "|".join(sorted(s.original_third_labels, key=label_sort_key)),
        split.seed,
        split.mode,
    ]


def write_manifest(split: DatasetSplit, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS + MANIFEST_EXTRA_COLUMNS)
        for partition, items in split.partitions().items():
            for s in items:
                writer.writerow(_sample_row(s, partition, split))
    return path


def _int(row: dict, key: str, line: int) -> int:
    try:
        return int(row[key])
    except (TypeError, ValueError):
        raise ManifestValidationError(f"line {line}: bad integer in {key!r}: {row[key]!r}") from None


def read_manifest(path: str | Path, default_seed: int = 0) -> DatasetSplit:
    """Read a manifest written by :func:`write_manifest`.

    Only the fixed columns are mandatory; the third-image label set defaults
    to the target label when absent.
    """
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        header = tuple(reader.fieldnames or ())
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise SchemaMismatch(f"{path}: manifest lacks column(s) {missing}")
        parts: dict[str, list[SampleSet]] = {p: [] for p in PARTITIONS}
        seed, mode = default_seed, "by_sample"
        for line, row in enumerate(reader, start=2):
            partition = row["split_partition"]
            if partition not in parts:
                raise ManifestValidationError(f"line {line}: unknown partition {partition!r}")
            third = row.get("third_labels") or row["target_label"]
            third_labels = frozenset(t for t in third.split("|") if t)
            unknown = sorted(third_labels - LABEL_INDEX.keys())
            if unknown:
                raise ManifestValidationError(f"line {line}: unknown label(s) {unknown}")
            try:
                sample = SampleSet(
                    sample_id=_int(row, "sample_id", line),
                    patient_id=_int(row, "patient_id", line),
                    view=row["view"],
                    images=(row["image_1"], row["image_2"], row["image_3"]),
                    source_followups=tuple(_int(row, f"followup_{k}", line) for k in (1, 2, 3)),
                    target_label=row["target_label"],
                    original_third_labels=third_labels,
                )
            except ManifestValidationError as exc:
                raise ManifestValidationError(f"{path} line {line}: {exc}") from None
            parts[partition].append(sample)
            if row.get("split_seed"):
                seed = _int(row, "split_seed", line)
            if row.get("split_mode"):
                mode = row["split_mode"]
    return DatasetSplit(
        train=tuple(parts["train"]),
        test=tuple(parts["test"]),
        validation=tuple(parts["validation"]),
        seed=seed,
        mode=mode,
    )
