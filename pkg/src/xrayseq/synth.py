"""Deterministic synthetic follow-up cohorts for desk-scale experiments.

Each patient gets a sequence of images showing one Gaussian blob on a noisy
background. The class is carried only by how the blob changes across
follow-ups (grows, shrinks, drifts, or stays put). Patients are generated in
groups, one patient per class, and every member of a group ends on the same
blob. The last image of a sequence therefore has the same distribution in
every class, and a model that sees only that image has nothing to go on.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .evaluation import auc_score
from .images import load_grayscale
from .metadata import LABEL_INDEX, REQUIRED_COLUMNS, group_patients, read_metadata
from .samples import build_windows

MOTIFS = ("grow", "shrink", "drift", "static")
DEFAULT_MOTIF_LABELS = {"grow": "Mass", "shrink": "Nodule", "drift": "Infiltration", "static": "No Finding"}
NIH_EXTRA_COLUMNS = ("OriginalImage[Width", "Height]", "OriginalImagePixelSpacing[x", "y]")

METADATA_FILE = "metadata.csv"
TALLY_FILE = "tally.csv"
IMAGE_DIR = "images"

BACKGROUND = 0.15
AMPLITUDE = 0.7
# Blob geometry at 128 px; scaled proportionally for other sizes.
RADIUS_RANGE = (8.0, 16.0)
RADIUS_STEP = 3.0
DRIFT_STEP = 10.0
CENTER_JITTER = 12.0


@dataclass(frozen=True)
class SynthSpec:
    n_patients: int = 400
    followups_per_patient: int = 3
    classes: tuple[str, ...] = ("grow", "shrink")
    labels: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_MOTIF_LABELS))
    image_size: int = 128
    noise_level: float = 0.05
    seed: int = 0
    view_mix: float = 1.0

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        if self.followups_per_patient < 3:
            raise ValueError("followups_per_patient must be >= 3")
        if not self.classes:
            raise ValueError("at least one motif class is required")
        unknown = [c for c in self.classes if c not in MOTIFS]
        if unknown:
            raise ValueError(f"unknown motif(s) {unknown}; choose from {MOTIFS}")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("motif classes must be distinct")
        mapped = [self.labels[c] for c in self.classes]
        if len(set(mapped)) != len(mapped):
            raise ValueError("motifs must map to distinct labels")
        if any(label not in LABEL_INDEX for label in mapped):
            raise ValueError(f"motif labels must be vocabulary labels, got {mapped}")
        if self.image_size not in (128, 1024):
            raise ValueError("image_size must be 128 or 1024")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if not 0.0 <= self.view_mix <= 1.0:
            raise ValueError("view_mix must lie in [0, 1]")

    def label_for(self, motif: str) -> str:
        return self.labels[motif]


@dataclass
class Cohort:
    root: Path
    metadata_path: Path
    tally_path: Path
    image_dir: Path
    tally: dict[str, dict[str, int]]
    spec: SynthSpec


def _trajectory(motif: str, end_radius: float, end_center: np.ndarray, n: int, scale: float):
    """Per-follow-up (radius, centre) ending at the shared final blob."""
    step = min(RADIUS_STEP * scale, (end_radius - 2.0 * scale) / (n - 1))
    frames = []
    for k in range(n):
        back = n - 1 - k  # follow-ups remaining until the final frame
        radius, center = end_radius, end_center
        if motif == "grow":
            radius = end_radius - step * back
        elif motif == "shrink":
            radius = end_radius + step * back
        elif motif == "drift":
            center = end_center - np.array([0.0, DRIFT_STEP * scale * back])
        frames.append((radius, center))
    return frames


def render_blob(size: int, radius: float, center: np.ndarray, noise: np.ndarray) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    d2 = (yy - center[0]) ** 2 + (xx - center[1]) ** 2
    image = BACKGROUND + AMPLITUDE * np.exp(-d2 / (2.0 * radius**2)) + noise
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def expected_tally(spec: SynthSpec) -> dict[str, dict[str, int]]:
    """Patients and sample sets per label that the pipeline should produce."""
    windows = spec.followups_per_patient - 2
    tally: dict[str, dict[str, int]] = {}
    for i in range(spec.n_patients):
        label = spec.label_for(spec.classes[i % len(spec.classes)])
        entry = tally.setdefault(label, {"patients": 0, "samples": 0})
        entry["patients"] += 1
        entry["samples"] += windows
    return tally


def generate_cohort(spec: SynthSpec, output_dir: str | Path) -> Cohort:
    """Write images, an NIH-schema metadata CSV and a tally CSV under ``output_dir``."""
    spec.validate()
    root = Path(output_dir)
    image_dir = root / IMAGE_DIR
    image_dir.mkdir(parents=True, exist_ok=True)
    size = spec.image_size
    scale = size / 128.0
    n = spec.followups_per_patient
    n_classes = len(spec.classes)

    rows = []
    for group in range(-(-spec.n_patients // n_classes)):
        grng = np.random.default_rng([spec.seed, group])
        end_radius = grng.uniform(*RADIUS_RANGE) * scale
        end_center = size / 2.0 + grng.uniform(-CENTER_JITTER, CENTER_JITTER, size=2) * scale
        end_center[1] += DRIFT_STEP * scale * (n - 1) / 2.0
        view = "PA" if grng.random() < spec.view_mix else "AP"
        for c, motif in enumerate(spec.classes):
            index = group * n_classes + c
            if index >= spec.n_patients:
                break
            patient_id = index + 1
            prng = np.random.default_rng([spec.seed, group, c, 1])
            age = int(prng.integers(20, 90))
            gender = "M" if prng.random() < 0.5 else "F"
            label = spec.label_for(motif)
            for k, (radius, center) in enumerate(_trajectory(motif, end_radius, end_center, n, scale)):
                noise = prng.normal(0.0, spec.noise_level, size=(size, size)) if spec.noise_level > 0 else 0.0
                name = f"{patient_id:08d}_{k:03d}.png"
                Image.fromarray(render_blob(size, radius, center, noise), mode="L").save(image_dir / name)
                rows.append([name, label, k, patient_id, f"{age:03d}", gender, view, size, size, 0.143, 0.143])

    metadata_path = root / METADATA_FILE
    with open(metadata_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow([*REQUIRED_COLUMNS, *NIH_EXTRA_COLUMNS])
        writer.writerows(rows)

    tally = expected_tally(spec)
    tally_path = root / TALLY_FILE
    with open(tally_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["label", "patients", "expected_samples"])
        for label in sorted(tally, key=LABEL_INDEX.__getitem__):
            writer.writerow([label, tally[label]["patients"], tally[label]["samples"]])
    return Cohort(root, metadata_path, tally_path, image_dir, tally, spec)


def read_tally(path: str | Path) -> dict[str, dict[str, int]]:
    with open(path, newline="", encoding="utf-8") as handle:
        return {
            row["label"]: {"patients": int(row["patients"]), "samples": int(row["expected_samples"])}
            for row in csv.DictReader(handle)
        }


def blob_area(path: str | Path) -> int:
    """Pixels brighter than half the blob amplitude above background."""
    raw = load_grayscale(path)
    image = raw.pixels / raw.max_value
    return int((image > BACKGROUND + AMPLITUDE / 2.0).sum())


def oracle_separability(
    cohort: Cohort,
    positive: str = "grow",
    negative: str = "shrink",
) -> tuple[float | None, float | None]:
    """AUCs of two hand-made scores for ``positive`` vs ``negative`` windows.

    The first uses the blob area of the third image alone, the second the
    area change from first to third image. Both are None when either class
    has no windows.
    """
    labels = cohort.spec.labels
    pos_label, neg_label = labels[positive], labels[negative]
    single, delta, truth = [], [], []
    for group in group_patients(read_metadata(cohort.metadata_path)):
        for first, _, third in build_windows(group):
            if third.labels == {pos_label}:
                truth.append(1)
            elif third.labels == {neg_label}:
                truth.append(0)
            else:
                continue
            a1 = blob_area(cohort.image_dir / first.image_index)
            a3 = blob_area(cohort.image_dir / third.image_index)
            single.append(a3)
            delta.append(a3 - a1)
    return auc_score(single, truth), auc_score(delta, truth)


def load_cohort(root: str | Path) -> Cohort:
    """Reopen a cohort directory written by :func:`generate_cohort` (spec fields not recoverable are defaulted)."""
    root = Path(root)
    tally = read_tally(root / TALLY_FILE)
    inverse = {label: motif for motif, label in DEFAULT_MOTIF_LABELS.items()}
    classes = tuple(inverse[label] for label in tally if label in inverse)
    spec = SynthSpec(n_patients=sum(t["patients"] for t in tally.values()), classes=classes or ("grow",))
    return Cohort(root, root / METADATA_FILE, root / TALLY_FILE, root / IMAGE_DIR, tally, spec)
