"""Metrics oracle checks, fold hygiene, and the cross-validation engine."""

import numpy as np
import pytest

from serft.corpus import EmotionLabel, FrameFeatureMatrix, GenderLabel, UtteranceRecord
from serft.evaluation import (
    ConfusionMatrix,
    EmptyMatrixError,
    SpeakerLeakError,
    WrongSessionCountError,
    compute_metrics,
    confusion_from_predictions,
    make_folds,
    recall_metrics,
    run_crossval,
)
from serft.errors import DataError


def brute_force_war_uar(y_true, y_pred):
    """Independent oracle: recall definitions computed with plain loops."""
    y_true = list(y_true)
    y_pred = list(y_pred)
    war = sum(t == p for t, p in zip(y_true, y_pred)) / len(y_true)
    recalls = []
    for c in sorted(set(y_true)):
        hits = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        total = sum(1 for t in y_true if t == c)
        recalls.append(hits / total)
    return war, sum(recalls) / len(recalls)


class TestMetrics:
    def test_hand_case(self):
        """labels AABBB / preds ABBBB -> recalls {A: .5, B: 1.0}, UAR .75, WAR .8"""
        y_true = [0, 0, 1, 1, 1]
        y_pred = [0, 1, 1, 1, 1]
        summary = compute_metrics(confusion_from_predictions(y_true, y_pred, n_classes=2))
        assert summary.per_category_recall == {0: 0.5, 1: 1.0}
        assert abs(summary.uar - 0.75) < 1e-12
        assert abs(summary.war - 0.8) < 1e-12

    def test_matches_brute_force_on_random_vectors(self, rng):
        for _ in range(200):
            n = int(rng.integers(4, 60))
            y_true = rng.integers(0, 4, n)
            y_pred = rng.integers(0, 4, n)
            war, uar = recall_metrics(y_true, y_pred)
            oracle_war, oracle_uar = brute_force_war_uar(y_true, y_pred)
            assert abs(war - oracle_war) < 1e-12
            assert abs(uar - oracle_uar) < 1e-12

    def test_diagonal_is_perfect(self):
        cm = ConfusionMatrix(np.diag([7, 3, 9, 2]))
        summary = compute_metrics(cm)
        assert summary.war == 1.0 and summary.uar == 1.0

    def test_majority_prediction_on_imbalanced_pair(self):
        y_true = [0] * 90 + [1] * 10
        y_pred = [0] * 100
        summary = compute_metrics(confusion_from_predictions(y_true, y_pred, n_classes=2))
        assert abs(summary.war - 0.9) < 1e-12
        assert abs(summary.uar - 0.5) < 1e-12

    def test_uar_equals_war_under_uniform_truth(self, rng):
        for _ in range(50):
            per_class = int(rng.integers(3, 30))
            y_true = np.repeat(np.arange(4), per_class)
            y_pred = rng.integers(0, 4, y_true.size)
            war, uar = recall_metrics(y_true, y_pred)
            assert abs(war - uar) < 1e-12

    def test_absent_category_excluded_with_warning(self, caplog):
        import logging

        y_true = [0, 0, 1]
        y_pred = [0, 1, 1]
        with caplog.at_level(logging.WARNING):
            summary = compute_metrics(confusion_from_predictions(y_true, y_pred))
        assert set(summary.per_category_recall) == {0, 1}
        assert any("absent" in rec.message for rec in caplog.records)

    def test_empty_matrix_rejected(self):
        with pytest.raises(EmptyMatrixError):
            compute_metrics(ConfusionMatrix(np.zeros((4, 4), dtype=int)))


def _record(i, session, speaker, emotion=EmotionLabel.ANGRY):
    return UtteranceRecord(
        id=f"u{i}",
        emotion=emotion,
        gender=GenderLabel.MALE,
        speaker_id=speaker,
        session_id=session,
        features=FrameFeatureMatrix(frames=np.zeros((3, 2), dtype=np.float32)),
    )


class TestFolds:
    def test_five_session_partition(self, tiny_corpus):
        folds = make_folds(tiny_corpus)
        assert [f.fold_id for f in folds] == [1, 2, 3, 4, 5]
        all_test_ids = []
        for fold in folds:
            test_speakers = {r.speaker_id for r in fold.test_records}
            train_speakers = {r.speaker_id for r in fold.train_records}
            assert len(test_speakers) == 2
            assert not test_speakers & train_speakers
            assert {r.session_id for r in fold.test_records} == {fold.test_session}
            assert len(fold.train_records) + len(fold.test_records) == len(tiny_corpus)
            all_test_ids.extend(r.id for r in fold.test_records)
        # Test sets are pairwise disjoint and exhaustive.
        assert sorted(all_test_ids) == sorted(r.id for r in tiny_corpus)

    def test_wrong_session_count(self):
        records = [_record(i, f"Ses0{1 + i % 4}", f"spk{i % 4}") for i in range(8)]
        with pytest.raises(WrongSessionCountError):
            make_folds(records)

    def test_speaker_leak_detected(self):
        records = [_record(i, f"Ses0{1 + i % 5}", f"spk{i % 5}") for i in range(10)]
        records.append(_record(99, "Ses02", "spk0"))  # spk0 belongs to Ses01
        with pytest.raises(SpeakerLeakError):
            make_folds(records)


class TestCrossval:
    def test_perfect_oracle_runner(self, tiny_corpus):
        def oracle(fold):
            return np.array([r.emotion.value for r in fold.test_records])

        report = run_crossval(tiny_corpus, oracle)
        assert report.mean_war == 1.0
        assert report.mean_uar == 1.0
        assert len(report.folds) == 5
        assert "MEAN UAR=1.0000 WAR=1.0000" == report.summary_line()

    def test_fold_errors_annotated(self, tiny_corpus):
        def broken(fold):
            if fold.fold_id == 3:
                raise DataError("boom")
            return np.array([r.emotion.value for r in fold.test_records])

        with pytest.raises(DataError, match="fold 3"):
            run_crossval(tiny_corpus, broken)

    def test_report_text_structure(self, tiny_corpus):
        def oracle(fold):
            return np.array([r.emotion.value for r in fold.test_records])

        text = run_crossval(tiny_corpus, oracle).to_text()
        assert text.count("FOLD") == 5
        assert text.strip().endswith("MEAN UAR=1.0000 WAR=1.0000")
