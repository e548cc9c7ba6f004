"""Speaker-independent evaluation: WAR/UAR, folds, cross-validation.

WAR (weighted average recall) is plain accuracy; UAR (unweighted average
recall) is the mean of per-category recalls, which is the headline metric
on emotion corpora because it ignores category imbalance. Folds hold out
one session each, so no speaker ever appears on both sides of a split.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .corpus import N_EMOTIONS, UtteranceRecord
from .errors import DataError, SerftError

logger = logging.getLogger(__name__)

N_FOLDS = 5


class EmptyMatrixError(DataError):
    """Metrics over zero samples are undefined."""


class WrongSessionCountError(DataError):
    """Cross-validation needs exactly 5 sessions."""


class SpeakerLeakError(DataError):
    """A speaker appears in more than one session."""


@dataclass
class ConfusionMatrix:
    """Counts with rows = true category, columns = predicted category."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise DataError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise DataError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_from_predictions(
    y_true: np.ndarray, y_pred: np.ndarray, n_classes: int = N_EMOTIONS
) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise DataError("label and prediction vectors differ in length")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts)


@dataclass
class MetricSummary:
    war: float
    uar: float
    per_category_recall: dict[int, float]


def compute_metrics(cm: ConfusionMatrix, warn_absent: bool = True) -> MetricSummary:
    """WAR = trace/total; UAR = unweighted mean of per-category recalls.

    Categories with zero true samples are excluded from the UAR average
    (logged unless ``warn_absent`` is off), since their recall is 0/0.
    """
    if cm.total == 0:
        raise EmptyMatrixError("confusion matrix has no samples")
    row_sums = cm.counts.sum(axis=1)
    present = np.flatnonzero(row_sums > 0)
    absent = np.flatnonzero(row_sums == 0)
    if absent.size and warn_absent:
        logger.warning("categories %s absent from evaluation; excluded from UAR", absent.tolist())
    recalls = {int(c): float(cm.counts[c, c] / row_sums[c]) for c in present}
    war = float(np.trace(cm.counts) / cm.total)
    uar = float(np.mean([recalls[int(c)] for c in present]))
    return MetricSummary(war=war, uar=uar, per_category_recall=recalls)


def recall_metrics(y_true: np.ndarray, y_pred: np.ndarray) -> tuple[float, float]:
    """(WAR, UAR) straight from label/prediction vectors.

    Meant for quick batch-level logging, so absent categories are dropped
    silently.
    """
    summary = compute_metrics(confusion_from_predictions(y_true, y_pred), warn_absent=False)
    return summary.war, summary.uar


@dataclass
class FoldSplit:
    """One session held out for test, the other four for training."""

    fold_id: int
    test_session: str
    train_records: list[UtteranceRecord]
    test_records: list[UtteranceRecord]


def make_folds(records: list[UtteranceRecord]) -> list[FoldSplit]:
    """Partition a 5-session corpus into 5 speaker-independent folds.

    Fold k holds out the k-th session (sorted order). Verifies that every
    speaker lives in exactly one session and that the folds are exhaustive
    before returning.
    """
    if not records:
        raise DataError("empty corpus")
    sessions = sorted({r.session_id for r in records})
    if len(sessions) != N_FOLDS:
        raise WrongSessionCountError(f"expected {N_FOLDS} sessions, found {len(sessions)}: {sessions}")
    speaker_sessions: dict[str, str] = {}
    for r in records:
        prior = speaker_sessions.setdefault(r.speaker_id, r.session_id)
        if prior != r.session_id:
            raise SpeakerLeakError(
                f"speaker {r.speaker_id!r} appears in sessions {prior!r} and {r.session_id!r}"
            )
    folds = []
    for k, session in enumerate(sessions, start=1):
        test = [r for r in records if r.session_id == session]
        train = [r for r in records if r.session_id != session]
        folds.append(FoldSplit(fold_id=k, test_session=session, train_records=train, test_records=test))
    return folds


@dataclass
class FoldResult:
    fold_id: int
    test_session: str
    confusion: ConfusionMatrix
    war: float
    uar: float


@dataclass
class EvalReport:
    """Per-fold confusions and metrics plus their cross-fold means."""

    folds: list[FoldResult]
    mean_war: float
    mean_uar: float
    extras: dict[str, str] = field(default_factory=dict)

    def summary_line(self) -> str:
        return f"MEAN UAR={self.mean_uar:.4f} WAR={self.mean_war:.4f}"

    def to_text(self) -> str:
        lines = []
        for fr in self.folds:
            lines.append(f"FOLD {fr.fold_id} test_session={fr.test_session}")
            for row in fr.confusion.counts:
                lines.append(" ".join(str(int(v)) for v in row))
            lines.append(f"WAR={fr.war:.4f} UAR={fr.uar:.4f}")
            lines.append("")
        lines.append(self.summary_line())
        return "\n".join(lines) + "\n"


def aggregate_folds(results: list[FoldResult]) -> EvalReport:
    return EvalReport(
        folds=results,
        mean_war=float(np.mean([fr.war for fr in results])),
        mean_uar=float(np.mean([fr.uar for fr in results])),
    )


FoldRunner = Callable[[FoldSplit], np.ndarray]


def run_crossval(records: list[UtteranceRecord], fold_runner: FoldRunner) -> EvalReport:
    """Run a fold-level predictor over all 5 folds and aggregate.

    ``fold_runner`` receives one FoldSplit and returns predicted emotion
    ids aligned with ``fold.test_records``. Stage errors propagate with
    the fold id prepended to the message.
    """
    results: list[FoldResult] = []
    for fold in make_folds(records):
        try:
            preds = fold_runner(fold)
        except SerftError as exc:
            raise type(exc)(f"fold {fold.fold_id} (test {fold.test_session}): {exc}") from exc
        y_true = np.array([r.emotion.value for r in fold.test_records], dtype=np.int64)
        preds = np.asarray(preds, dtype=np.int64)
        if preds.shape != y_true.shape:
            raise DataError(
                f"fold {fold.fold_id}: predictor returned {preds.shape}, expected {y_true.shape}"
            )
        cm = confusion_from_predictions(y_true, preds)
        summary = compute_metrics(cm)
        results.append(
            FoldResult(
                fold_id=fold.fold_id,
                test_session=fold.test_session,
                confusion=cm,
                war=summary.war,
                uar=summary.uar,
            )
        )
    return aggregate_folds(results)
