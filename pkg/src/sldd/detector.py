"""Image-level gastritis decisions by patch voting, and Sen/Spe/HM."""

from __future__ import annotations

import csv
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .patches import IRRELEVANT, LABELS, NEGATIVE, POSITIVE

POLICIES = ("predict_negative", "error")


class NoEvidenceError(ValueError):
    """An image had no N or P patch and the policy forbids guessing."""


@dataclass(frozen=True)
class DetectConfig:
    __pydantic_config__ = {"extra": "forbid"}

    delta: float = 0.4
    zero_denominator_policy: str = "predict_negative"

    def __post_init__(self):
        if not 0 <= self.delta <= 1:
            raise ValueError(f"delta must be in [0, 1], got {self.delta}")
        if self.zero_denominator_policy not in POLICIES:
            raise ValueError(f"zero_denominator_policy must be one of {POLICIES}")


@dataclass(frozen=True)
class Vote:
    num_n: int
    num_p: int
    ratio: float
    y_test: int
    no_evidence: bool = False


def _as_class(p) -> int:
    if isinstance(p, str):
        try:
            return LABELS.index(p)
        except ValueError:
            raise ValueError(f"patch prediction {p!r} not in {LABELS}") from None
    p = int(p)
    if p not in (IRRELEVANT, NEGATIVE, POSITIVE):
        raise ValueError(f"patch prediction {p} not in 0..2")
    return p


def vote(predictions: Iterable, config: DetectConfig = DetectConfig()) -> Vote:
    """Positive iff P / (N + P) >= delta; I patches are ignored."""
    counts = Counter(_as_class(p) for p in predictions)
    n, p = counts[NEGATIVE], counts[POSITIVE]
    if n + p == 0:
        if config.zero_denominator_policy == "error":
            raise NoEvidenceError("no patch was predicted N or P")
        return Vote(0, 0, math.nan, 0, no_evidence=True)
    ratio = p / (n + p)
    return Vote(n, p, ratio, int(ratio >= config.delta))


def harmonic_mean(sen: float, spe: float) -> float:
    if math.isnan(sen) or math.isnan(spe):
        return math.nan
    if sen + spe == 0:
        return 0.0
    return 2 * sen * spe / (sen + spe)


@dataclass(frozen=True)
class Metrics:
    tp: int
    tn: int
    fp: int
    fn: int
    sen: float
    spe: float
    hm: float
    notes: tuple[str, ...] = ()

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def metrics(predicted: Sequence[int], truth: Sequence[int]) -> Metrics:
    """Confusion counts and Sen/Spe/HM; an undefined rate is NaN with a note."""
    pr = np.asarray(predicted, dtype=int)
    gt = np.asarray(truth, dtype=int)
    if pr.shape != gt.shape:
        raise ValueError("predicted and truth lengths differ")
    tp = int(np.sum((pr == 1) & (gt == 1)))
    tn = int(np.sum((pr == 0) & (gt == 0)))
    fp = int(np.sum((pr == 1) & (gt == 0)))
    fn = int(np.sum((pr == 0) & (gt == 1)))
    notes = []
    if tp + fn:
        sen = tp / (tp + fn)
    else:
        sen = math.nan
        notes.append(f"Sen undefined: 0 positive images among {len(gt)}")
    if tn + fp:
        spe = tn / (tn + fp)
    else:
        spe = math.nan
        notes.append(f"Spe undefined: 0 negative images among {len(gt)}")
    return Metrics(tp, tn, fp, fn, sen, spe, harmonic_mean(sen, spe), tuple(notes))


@dataclass
class DetectionReport:
    rows: list[tuple[str, int, int, float, int, int]] = field(default_factory=list)
    aggregate: Metrics | None = None
    warnings: list[str] = field(default_factory=list)

    def summary(self) -> str:
        m = self.aggregate
        text = (
            f"images={m.total} TP={m.tp} TN={m.tn} FP={m.fp} FN={m.fn} "
            f"Sen={m.sen:.3f} Spe={m.spe:.3f} HM={m.hm:.3f}"
        )
        for note in m.notes:
            text += f"\n  note: {note}"
        for w in self.warnings:
            text += f"\n  warning: {w}"
        return text

    def write_csv(self, path) -> None:
        """Per-image rows, then one aggregate row keyed ``__aggregate__``."""
        m = self.aggregate
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "num_n", "num_p", "ratio", "predicted", "truth", "tp", "tn", "fp", "fn", "sen", "spe", "hm"])
            for image_id, n, p, ratio, pred, truth in self.rows:
                w.writerow([image_id, n, p, _fmt(ratio), pred, truth, "", "", "", "", "", "", ""])
            w.writerow(["__aggregate__", "", "", "", "", "", m.tp, m.tn, m.fp, m.fn, _fmt(m.sen), _fmt(m.spe), _fmt(m.hm)])


def _fmt(x: float) -> str:
    return "nan" if x is None or math.isnan(x) else repr(float(x))


def detect(
    patch_predictions: Mapping[str, Sequence[int]],
    truth: Mapping[str, int],
    config: DetectConfig = DetectConfig(),
) -> DetectionReport:
    """Vote every image in ``truth`` and score against its label."""
    report = DetectionReport()
    preds, gts = [], []
    for image_id in sorted(truth):
        if image_id not in patch_predictions:
            raise KeyError(f"no patch predictions for image {image_id}")
        v = vote(patch_predictions[image_id], config)
        if v.no_evidence:
            msg = f"{image_id}: no N/P patches, predicted negative"
            report.warnings.append(msg)
            warnings.warn(msg, stacklevel=2)
        report.rows.append((image_id, v.num_n, v.num_p, v.ratio, v.y_test, int(truth[image_id])))
        preds.append(v.y_test)
        gts.append(int(truth[image_id]))
    report.aggregate = metrics(preds, gts)
    return report


def delta_sweep(
    patch_predictions: Mapping[str, Sequence[int]],
    truth: Mapping[str, int],
    deltas: Sequence[float],
    policy: str = "predict_negative",
) -> list[tuple[float, Metrics]]:
    out = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for d in deltas:
            out.append((float(d), detect(patch_predictions, truth, DetectConfig(d, policy)).aggregate))
    return out


def image_truth(dataset) -> dict[str, int]:
    """Image labels implied by annotated patches: positive iff any P patch."""
    truth: dict[str, int] = {}
    for image_id, label in zip(dataset.image_ids, dataset.labels):
        truth[image_id] = max(truth.get(image_id, 0), int(label == POSITIVE))
    return truth


def group_by_image(dataset, predictions) -> dict[str, list[int]]:
    grouped: dict[str, list[int]] = {}
    for image_id, p in zip(dataset.image_ids, predictions):
        grouped.setdefault(image_id, []).append(int(p))
    return grouped


def hm_metric(config: DetectConfig = DetectConfig()):
    """Snapshot-selection metric: image-level HM over a patch dataset."""

    def score(predictions, dataset) -> float:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            report = detect(group_by_image(dataset, predictions), image_truth(dataset), config)
        return report.aggregate.hm

    return score
