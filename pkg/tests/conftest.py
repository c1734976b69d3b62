import numpy as np
import pytest

from cxrsynth.data_core import DatasetManifest, Record, write_png


def make_records(n_neg, n_pos, patients=True, prefix="", per_patient=1, provenance="real"):
    recs = []
    for label, n, dom in (("negative", n_neg, "normal"), ("positive", n_pos, "covid")):
        for i in range(n):
            sid = f"{prefix}{label[:3]}_{i:05d}"
            pid = f"{prefix}{label[:3]}_p{i // per_patient:05d}" if patients else None
            recs.append(
                Record(
                    path=f"{label}/{sid}.png",
                    sample_id=sid,
                    label=label if provenance == "real" else "positive",
                    provenance=provenance,
                    source_domain=dom if provenance == "real" else "covid",
                    patient_id=pid if provenance == "real" else None,
                )
            )
    return recs


def make_manifest(n_neg, n_pos, **kw):
    return DatasetManifest("t", tuple(make_records(n_neg, n_pos, **kw)), None)


@pytest.fixture
def image_tree(tmp_path):
    """Small on-disk corpus: 6 negatives (3 patients), 4 positives (2 patients)."""
    rng = np.random.default_rng(0)
    for sub, n in (("normal", 6), ("covid", 4)):
        d = tmp_path / "data" / sub
        d.mkdir(parents=True)
        for i in range(n):
            write_png(rng.uniform(0, 1, (40, 30, 1)), d / f"p{sub[0]}{i // 2}_{i % 2}.png")
    return tmp_path / "data"


LABEL_RULE = {
    "normal": {"label": "negative", "source_domain": "normal"},
    "covid": {"label": "positive", "source_domain": "covid"},
}


# acceptance criteria report one line each at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
