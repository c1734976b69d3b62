import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from cxrsynth.classifier import TrainedClassifier, TrainingConfig, build_classifier
from cxrsynth.data_core import DatasetManifest, Record, SkewReport, skew_ratio
from cxrsynth.evaluation import (
    EvalReport,
    ProtocolViolation,
    comparison_report,
    confidence_scores,
    confusion_counts,
    evaluate,
    sensitivity,
)
from cxrsynth.toy import planted_region_images

CFG = TrainingConfig(custom_widths=(4,), image_size=16, name="stub")


def constant_model(bias_pos=0.0):
    """Classifier whose positive probability is sigmoid(bias_pos) for every input."""
    net = build_classifier(CFG)
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.copy_(torch.tensor([0.0, bias_pos]))
    return TrainedClassifier(net.eval(), CFG)


def toy_test_set(n_neg=4, n_pos=6):
    recs = []
    for i in range(n_neg + n_pos):
        pos = i >= n_neg
        px = planted_region_images(1, pos, 16, seed=i)[0]
        recs.append(Record(f"{i}.png", f"s{i:02d}", "positive" if pos else "negative", patient_id=f"p{i}", pixels=px))
    return DatasetManifest("toy", tuple(recs))


@pytest.mark.parametrize("tp,fn,expected", [(9, 37, 19.56), (29, 17, 63.04), (4, 42, 8.69)])
def test_sensitivity_reference_values(tp, fn, expected):
    assert sensitivity(tp, fn) == pytest.approx(expected, abs=0.01)


def test_sensitivity_edge_cases():
    assert sensitivity(10, 0) == 100.0
    with pytest.raises(ValueError, match="no positives"):
        sensitivity(0, 0)


@given(st.integers(0, 1000), st.integers(0, 1000), st.integers(1, 50))
def test_sensitivity_scale_free(tp, fn, k):
    if tp + fn == 0:
        return
    assert sensitivity(k * tp, k * fn) == pytest.approx(sensitivity(tp, fn), rel=1e-12)


@given(st.lists(st.tuples(st.integers(0, 1), st.floats(0, 1)), max_size=60), st.floats(0, 1), st.floats(0, 1))
def test_threshold_monotone_and_partition(pairs, t1, t2):
    labels = [p[0] for p in pairs]
    scores = [p[1] for p in pairs]
    lo, hi = sorted((t1, t2))
    a = confusion_counts(labels, scores, lo)
    b = confusion_counts(labels, scores, hi)
    assert sum(a) == sum(b) == len(pairs)
    assert a[0] >= b[0]


def test_tie_at_threshold_is_negative():
    assert confusion_counts([1, 0], [0.5, 0.5], 0.5) == (0, 0, 1, 1)


def test_evaluate_counts_and_confidences():
    m = toy_test_set()
    rep = evaluate(constant_model(bias_pos=2.0), m)
    assert (rep.TP, rep.FP, rep.TN, rep.FN) == (6, 4, 0, 0)
    assert rep.sensitivity == 100.0 and rep.test_digest == m.content_digest
    assert rep.n_test == len(m)
    assert len(rep.confidences) == 6

    half = constant_model(0.0)
    rep = evaluate(half, m)
    assert (rep.TP, rep.FN) == (0, 6)
    conf = confidence_scores(half, m.filter(label="positive"))
    assert conf == pytest.approx([0.5] * 6, abs=1e-7)


def test_evaluate_rejects_synthetic():
    m = toy_test_set()
    px = m.records[0].pixels
    bad = m.with_records(list(m.records) + [Record("x.png", "zz_synth", "positive", provenance="synthetic", pixels=px)])
    with pytest.raises(ProtocolViolation, match="protocol violation"):
        evaluate(constant_model(), bad)
    with pytest.raises(ValueError):
        evaluate(constant_model(), DatasetManifest("t", ()))


def test_confidence_scores_preconditions():
    m = toy_test_set()
    assert confidence_scores(constant_model(), DatasetManifest("t", ())) == []
    with pytest.raises(ValueError):
        confidence_scores(constant_model(), m)


def test_report_round_trip(tmp_path):
    rep = evaluate(constant_model(1.0), toy_test_set())
    rep.write(tmp_path)
    back = EvalReport.read(tmp_path)
    assert back == rep


def _report(name, tp, fn, digest="d"):
    return EvalReport(name, tp, 0, 10, fn, sensitivity(tp, fn), 0.5, digest)


def test_comparison_report():
    reps = [_report("real", 9, 37), _report("real+G1", 29, 17), _report("real+G1+G2", 20, 26), _report("only", 4, 42)]
    sk = lambda n, p: SkewReport(n, p, skew_ratio(n, p))
    skews = [sk(16537, 180), sk(16537, 16717), None, sk(16537, 16537)]
    table = comparison_report(reps, skews)
    lines = table.to_csv().splitlines()
    assert lines[0] == "config,SEN,FN,skew,best"
    assert len(lines) == 5
    assert lines[1] == "real,19.57,37,91.87,0"
    assert lines[2].endswith(",1")
    assert "only" in table.to_text()

    single = comparison_report([_report("x", 1, 1)])
    assert single.rows[0]["best"]
    with pytest.raises(ProtocolViolation):
        comparison_report([_report("a", 1, 1, "d1"), _report("b", 1, 1, "d2")])
