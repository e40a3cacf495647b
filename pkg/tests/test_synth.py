import numpy as np
import pytest
from PIL import Image

from xrayseq.metadata import (
    LABEL_INDEX,
    filter_consistent_view,
    filter_min_followups,
    group_patients,
    read_metadata,
)
from xrayseq.samples import build_samples
from xrayseq.synth import (
    SynthSpec,
    blob_area,
    expected_tally,
    generate_cohort,
    load_cohort,
    oracle_separability,
    read_tally,
)


def test_ten_patients(tmp_path):
    cohort = generate_cohort(SynthSpec(n_patients=10, seed=1), tmp_path)
    images = sorted(cohort.image_dir.glob("*.png"))
    assert len(images) == 30
    records = read_metadata(cohort.metadata_path)
    assert len(records) == 30
    assert {r.image_index for r in records} == {p.name for p in images}
    with Image.open(images[0]) as im:
        assert im.size == (128, 128) and im.mode == "L"


def test_deterministic_bytes(tmp_path):
    spec = SynthSpec(n_patients=6, seed=7, classes=("grow", "shrink", "drift"))
    a = generate_cohort(spec, tmp_path / "a")
    b = generate_cohort(spec, tmp_path / "b")
    assert a.metadata_path.read_bytes() == b.metadata_path.read_bytes()
    assert a.tally_path.read_bytes() == b.tally_path.read_bytes()
    for p in sorted(a.image_dir.iterdir()):
        assert p.read_bytes() == (b.image_dir / p.name).read_bytes()
    c = generate_cohort(SynthSpec(n_patients=6, seed=8, classes=spec.classes), tmp_path / "c")
    assert any(p.read_bytes() != (c.image_dir / p.name).read_bytes() for p in a.image_dir.iterdir())


@pytest.mark.parametrize("followups,classes", [(3, ("grow", "shrink")), (5, ("grow", "shrink", "drift", "static"))])
def test_pipeline_reproduces_tally(tmp_path, followups, classes):
    spec = SynthSpec(n_patients=13, followups_per_patient=followups, classes=classes, seed=2)
    cohort = generate_cohort(spec, tmp_path)
    groups = filter_consistent_view(filter_min_followups(group_patients(read_metadata(cohort.metadata_path))))
    assert len(groups) == 13
    samples = build_samples(groups)
    tally = read_tally(cohort.tally_path)
    assert tally == expected_tally(spec)
    assert len(samples) == sum(t["samples"] for t in tally.values()) == 13 * (followups - 2)
    for label, entry in tally.items():
        assert sum(s.target_label == label for s in samples) == entry["samples"]
        assert len({s.patient_id for s in samples if s.target_label == label}) == entry["patients"]


def test_motif_geometry(tmp_path):
    cohort = generate_cohort(SynthSpec(n_patients=2, noise_level=0.0, seed=3), tmp_path)
    grow = [blob_area(cohort.image_dir / f"00000001_{k:03d}.png") for k in range(3)]
    shrink = [blob_area(cohort.image_dir / f"00000002_{k:03d}.png") for k in range(3)]
    assert grow[0] < grow[1] < grow[2]
    assert shrink[0] > shrink[1] > shrink[2]
    # same group, same final blob
    a = np.asarray(Image.open(cohort.image_dir / "00000001_002.png"))
    b = np.asarray(Image.open(cohort.image_dir / "00000002_002.png"))
    assert np.array_equal(a, b)


def test_oracle_noise_free(tmp_path):
    cohort = generate_cohort(SynthSpec(n_patients=60, noise_level=0.0, seed=4), tmp_path)
    single, delta = oracle_separability(cohort)
    assert delta == 1.0
    assert 0.4 <= single <= 0.6


def test_oracle_static_only(tmp_path):
    cohort = generate_cohort(SynthSpec(n_patients=4, classes=("static",)), tmp_path)
    assert oracle_separability(cohort) == (None, None)


def test_view_mix(tmp_path):
    cohort = generate_cohort(SynthSpec(n_patients=40, view_mix=0.5, seed=5), tmp_path)
    views = {r.view for r in read_metadata(cohort.metadata_path)}
    assert views == {"PA", "AP"}
    assert filter_consistent_view(group_patients(read_metadata(cohort.metadata_path)))


def test_large_images(tmp_path):
    cohort = generate_cohort(SynthSpec(n_patients=1, classes=("grow",), image_size=1024), tmp_path)
    with Image.open(next(cohort.image_dir.glob("*.png"))) as im:
        assert im.size == (1024, 1024)


def test_load_cohort(tmp_path):
    written = generate_cohort(SynthSpec(n_patients=8, classes=("grow", "static")), tmp_path)
    loaded = load_cohort(tmp_path)
    assert loaded.tally == written.tally
    assert loaded.spec.n_patients == 8
    assert set(loaded.spec.classes) == {"grow", "static"}


def test_labels_in_vocabulary():
    tally = expected_tally(SynthSpec(n_patients=9, classes=("grow", "shrink", "drift", "static")))
    assert all(label in LABEL_INDEX for label in tally)
    assert sum(t["patients"] for t in tally.values()) == 9


@pytest.mark.parametrize(
    "bad",
    [
        dict(n_patients=0),
        dict(followups_per_patient=2),
        dict(classes=()),
        dict(classes=("spin",)),
        dict(classes=("grow", "grow")),
        dict(image_size=256),
        dict(noise_level=-0.1),
        dict(view_mix=1.5),
        dict(labels={"grow": "Mass", "shrink": "Mass"}),
        dict(labels={"grow": "Flu", "shrink": "Mass"}),
    ],
)
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        SynthSpec(**bad).validate()
