from __future__ import annotations

import io

import numpy as np
import pytest

from xrayseq.metadata import XrayRecord, group_patients, parse_metadata
from xrayseq.synth import SynthSpec, generate_cohort

# criterion id -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE_RESULTS: dict[str, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split()[0])):
        status, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"[{status}] {key}: {detail}")


HEADER = "Image Index,Finding Labels,Follow-up #,Patient ID,Patient Age,Patient Gender,View Position\n"


def make_record(pid: int, fu: int, labels: str = "No Finding", view: str = "PA") -> XrayRecord:
    return XrayRecord(
        image_index=f"{pid:08d}_{fu:03d}.png",
        patient_id=pid,
        followup_num=fu,
        labels=frozenset(labels.split("|")),
        view=view,
        age=40,
        gender="F",
    )


def csv_rows(rows: list[str]) -> list[XrayRecord]:
    return parse_metadata(io.StringIO(HEADER + "".join(r + "\n" for r in rows)))


@pytest.fixture
def figure6_records() -> list[XrayRecord]:
    return csv_rows(
        [
            "00000013_023.png,Infiltration|Mass|Pneumothorax,0,13,60,M,PA",
            "00000013_024.png,Mass,1,13,60,M,PA",
            "00000013_025.png,Cardiomegaly|Infiltration,2,13,60,M,PA",
        ]
    )


@pytest.fixture
def five_patient_groups():
    """Patients with 3, 3, 4, 5 and 7 records, mixed labels."""
    label_cycle = ["Mass", "Nodule|Effusion", "No Finding", "Atelectasis|Edema|Hernia"]
    records = []
    for pid, n in zip((1, 2, 3, 4, 5), (3, 3, 4, 5, 7)):
        for fu in range(n):
            records.append(make_record(pid, fu, label_cycle[(pid + fu) % len(label_cycle)]))
    return group_patients(records)


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    spec = SynthSpec(n_patients=40, noise_level=0.05, seed=11)
    return generate_cohort(spec, tmp_path_factory.mktemp("cohort"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
