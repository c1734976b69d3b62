"""Held-out evaluation: confusion counts, sensitivity, confidence scores and
cross-configuration comparison tables."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .classifier import TrainedClassifier, predict_proba
from .data_core import DatasetManifest, SkewReport, load_array


class ProtocolViolation(ValueError):
    """The test set contains synthetic records, or reports were computed on
    different test sets."""


@dataclass
class EvalReport:
    config_id: str
    TP: int
    FP: int
    TN: int
    FN: int
    sensitivity: float
    threshold: float
    test_digest: str
    confidences: list[tuple[str, float]] = field(default_factory=list)

    @property
    def n_test(self) -> int:
        return self.TP + self.FP + self.TN + self.FN

    def metrics(self) -> dict:
        d = asdict(self)
        d.pop("confidences")
        return d

    def write(self, run_dir: str | Path) -> None:
        """``metrics.json`` and ``confidences.csv`` into ``run_dir``."""
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "metrics.json").write_text(json.dumps(self.metrics(), indent=2, sort_keys=True) + "\n")
        with (run_dir / "confidences.csv").open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample_id", "probability"])
            for sid, p in self.confidences:
                w.writerow([sid, repr(p)])

    @classmethod
    def read(cls, run_dir: str | Path) -> "EvalReport":
        run_dir = Path(run_dir)
        path = run_dir / "metrics.json" if run_dir.is_dir() else run_dir
        report = cls(**json.loads(path.read_text()))
        conf = path.parent / "confidences.csv"
        if conf.exists():
            with conf.open(newline="") as f:
                report.confidences = [(r["sample_id"], float(r["probability"])) for r in csv.DictReader(f)]
        return report


def sensitivity(tp: int, fn: int) -> float:
    """Percentage of positives detected: 100 * TP / (TP + FN)."""
    if tp + fn <= 0:
        raise ValueError("no positives: sensitivity is undefined")
    return 100.0 * tp / (tp + fn)


def confusion_counts(labels: Sequence[int], scores: Sequence[float], threshold: float = 0.5) -> tuple[int, int, int, int]:
    """(TP, FP, TN, FN) with a positive call iff score > threshold."""
    labels = np.asarray(labels).astype(bool)
    pred = np.asarray(scores) > threshold
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    tn = int(np.sum(~pred & ~labels))
    fn = int(np.sum(~pred & labels))
    return tp, fp, tn, fn


def check_test_protocol(test: DatasetManifest) -> None:
    synthetic = [r.sample_id for r in test.records if r.provenance == "synthetic"]
    if synthetic:
        raise ProtocolViolation(
            f"protocol violation: test set contains {len(synthetic)} synthetic record(s), e.g. {synthetic[0]!r}"
        )


def _positive_scores(model, test: DatasetManifest, image_size: int) -> np.ndarray:
    if len(test) == 0:
        return np.zeros(0)
    return predict_proba(model, load_array(test, image_size))[:, 1]


def evaluate(model: TrainedClassifier, test: DatasetManifest, threshold: float = 0.5) -> EvalReport:
    check_test_protocol(test)
    if len(test) == 0:
        raise ValueError("empty test set")
    scores = _positive_scores(model, test, model.config.image_size)
    labels = [1 if r.label == "positive" else 0 for r in test.records]
    tp, fp, tn, fn = confusion_counts(labels, scores, threshold)
    return EvalReport(
        config_id=model.config.config_id,
        TP=tp,
        FP=fp,
        TN=tn,
        FN=fn,
        sensitivity=sensitivity(tp, fn),
        threshold=threshold,
        test_digest=test.content_digest,
        confidences=[(r.sample_id, float(s)) for r, s in zip(test.records, scores) if r.label == "positive"],
    )


def confidence_scores(model: TrainedClassifier, test_positives: DatasetManifest) -> list[float]:
    """Positive-class probability for each record, in manifest order."""
    if len(test_positives) == 0:
        return []
    bad = [r.sample_id for r in test_positives.records if r.label != "positive" or r.provenance != "real"]
    if bad:
        raise ValueError(f"confidence scores take real positive records only; got {bad[0]!r}")
    return [float(s) for s in _positive_scores(model, test_positives, model.config.image_size)]


@dataclass
class ComparisonTable:
    rows: list[dict]
    test_digest: str

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config", "SEN", "FN", "skew", "best"])
        for r in self.rows:
            skew = "" if r["skew"] is None else f"{r['skew']:.2f}"
            w.writerow([r["config"], f"{r['SEN']:.2f}", r["FN"], skew, int(r["best"])])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max([len("config")] + [len(r["config"]) for r in self.rows])
        lines = [f"{'config':<{width}}  {'SEN (%)':>8}  {'FN':>4}  {'skew':>7}", "-" * (width + 27)]
        for r in self.rows:
            skew = "-" if r["skew"] is None else f"{r['skew']:.2f}"
            mark = "  *" if r["best"] else ""
            lines.append(f"{r['config']:<{width}}  {r['SEN']:>8.2f}  {r['FN']:>4d}  {skew:>7}{mark}")
        lines.append(f"test set {self.test_digest[:12]}; * best sensitivity")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "comparison.csv").write_text(self.to_csv())
        (out_dir / "comparison.txt").write_text(self.to_text())


def comparison_report(
    reports: Sequence[EvalReport], skews: Sequence[SkewReport | None] | None = None
) -> ComparisonTable:
    if not reports:
        raise ValueError("no reports to compare")
    digests = {r.test_digest for r in reports}
    if len(digests) != 1:
        raise ProtocolViolation("reports were computed on different test sets")
    skews = list(skews) if skews is not None else [None] * len(reports)
    if len(skews) != len(reports):
        raise ValueError("one skew entry per report is required")
    best = max(r.sensitivity for r in reports)
    rows = [
        {
            "config": r.config_id,
            "SEN": r.sensitivity,
            "FN": r.FN,
            "skew": None if s is None else s.skew,
            "best": r.sensitivity == best,
        }
        for r, s in zip(reports, skews)
    ]
    return ComparisonTable(rows, digests.pop())
