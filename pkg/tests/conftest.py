import numpy as np
import pytest
import torch

from patientmae.core_types import Eye, FundusImage, Gender, MetadataLabels, PatientRecord
from patientmae.synth import SynthSpec, generate_patient, patient_seed

torch.set_num_threads(1)


def make_image(pid="P1", eye="L", scanner="A", acq=0, value=0.5, mask=None, seed=None):
    if seed is None:
        px = np.full((224, 224, 3), value, dtype=np.float32)
    else:
        px = np.random.default_rng(seed).random((224, 224, 3)).astype(np.float32)
    return FundusImage(pid, Eye(eye), scanner, px, retina_mask=mask, acquisition_index=acq)


def make_record(pid, views, age=50.0, gender="F"):
    images = [make_image(pid, e, s, acq=i) for i, (e, s) in enumerate(views)]
    return PatientRecord(pid, images, MetadataLabels(age, Gender(gender)))


@pytest.fixture(scope="session")
def synth_patients():
    """Four synthetic patients with retina masks attached."""
    from dataclasses import replace

    from patientmae.retina_mask import estimate_retina_mask

    spec = SynthSpec(n_patients=4)
    out = []
    for i in range(4):
        rec, truth = generate_patient(patient_seed(spec, i), spec, f"P{i:04d}")
        imgs = [replace(im, retina_mask=estimate_retina_mask(im)) for im in rec.images]
        out.append((replace(rec, images=imgs), truth))
    return out


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory):
    from patientmae.synth import generate_dataset

    root = tmp_path_factory.mktemp("synth") / "data"
    return generate_dataset(SynthSpec(n_patients=10), root)


def pytest_terminal_summary(terminalreporter):
    import sys

    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, passed, detail = results[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:2d} {title}: {detail}")
