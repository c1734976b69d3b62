import json

import numpy as np
import pytest
from PIL import Image

from cxrsynth.data_core import DatasetManifest, Record, ingest_directory, load_pixels, quantize
from cxrsynth.synthesis import (
    SyntheticSet,
    export_dataset,
    load_synthetic_set,
    synthesize_minority,
    synthetic_id,
)
from cxrsynth.toy import make_domain
from cxrsynth.translation import GanHyperparams, GeneratorSpec, init_model, translate

HP = GanHyperparams(image_size=32, generator=GeneratorSpec(base_width=8, residual_blocks=1))


def majority(n, size=32, seed=0):
    imgs = make_domain("blob", n, size, seed=seed)
    recs = [
        Record(f"normal/{i}.png", f"normal/im{i:03d}", "negative", source_domain="normal",
               patient_id=f"p{i}", pixels=imgs[i])
        for i in range(n)
    ]
    return DatasetManifest("covid", tuple(recs)), imgs


def test_one_synthetic_per_source():
    model = init_model(HP)
    m, imgs = majority(10)
    s = synthesize_minority(model, m)
    assert len(s) == 10
    assert all(r.label == "positive" and r.provenance == "synthetic" and r.patient_id is None for r in s.manifest)
    assert {sid for sid, _ in s.sources} == set(s.manifest.sample_ids)
    assert synthetic_id("normal/im003", "covid") in s.manifest.sample_ids
    assert s.model_digest == model.digest()
    # pixels are the generator outputs, source by source
    by_id = {r.sample_id: r for r in s.manifest}
    np.testing.assert_allclose(
        by_id[synthetic_id("normal/im003", "covid")].pixels, translate(model, imgs[3:4])[0], atol=1e-5
    )


def test_synthesis_deterministic():
    model = init_model(HP)
    m, _ = majority(5)
    a, b = synthesize_minority(model, m), synthesize_minority(model, m)
    assert a.manifest.content_digest == b.manifest.content_digest
    for ra, rb in zip(a.manifest, b.manifest):
        np.testing.assert_array_equal(ra.pixels, rb.pixels)


def test_empty_majority():
    s = synthesize_minority(init_model(HP), DatasetManifest("covid", ()))
    assert len(s) == 0


def test_resolution_mismatch():
    m, _ = majority(2, size=48)
    with pytest.raises(ValueError, match="resolution"):
        synthesize_minority(init_model(HP), m)


def test_export_round_trip(tmp_path):
    model = init_model(HP)
    m, _ = majority(10)
    s = synthesize_minority(model, m)
    out = export_dataset(s, tmp_path / "G1")
    assert len(list((out / "images").glob("*.png"))) == 10
    assert (out / "manifest.jsonl").read_text().count("\n") == 10
    meta = json.loads((out / "provenance.json").read_text())
    assert meta["count"] == 10 and meta["model_digest"] == model.digest()

    back = load_synthetic_set(out)
    assert back.manifest.sample_ids == s.manifest.sample_ids
    by_id = {r.sample_id: r for r in s.manifest}
    for rec in back.manifest:
        px = load_pixels(back.manifest, rec)
        assert np.abs(px - by_id[rec.sample_id].pixels).max() <= 1 / 255 + 1e-6

    reingested, failures = ingest_directory(out, {"images": {"label": "positive", "source_domain": "covid"}})
    assert len(reingested) == 10 and not failures


def test_quantization_endpoints(tmp_path):
    px = np.zeros((4, 4, 1), np.float32)
    px[0, 0] = 1.0
    rec = Record("images/x.png", "x", "positive", provenance="synthetic", source_domain="covid", pixels=px)
    s = SyntheticSet("G1", "t", "d", DatasetManifest("G1_t", (rec,)), ())
    out = export_dataset(s, tmp_path / "q")
    raw = np.asarray(Image.open(out / "images" / "x.png"))
    assert raw.dtype == np.uint8
    assert raw[0, 0] == 255 and raw[1, 1] == 0
    assert quantize(np.array([0.0, 1.0, 0.5])).tolist() == [0, 255, 128]


def test_reexport_byte_identical(tmp_path):
    s = synthesize_minority(init_model(HP), majority(4)[0])
    a = export_dataset(s, tmp_path / "a")
    b = export_dataset(s, tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_export_failure_leaves_no_tree(tmp_path):
    rec = Record("images/x.png", "x", "positive", provenance="synthetic", source_domain="covid")
    s = SyntheticSet("G1", "t", "d", DatasetManifest("G1_t", (rec,), tmp_path / "nowhere"), ())
    with pytest.raises(Exception):
        export_dataset(s, tmp_path / "out")
    assert not (tmp_path / "out").exists()
    assert [p.name for p in tmp_path.iterdir()] == []
