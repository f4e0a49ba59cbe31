"""Dataset schema, loaders, preprocessing, folds, synthesis, stats."""
import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crkt.data import (
    DataValidationError,
    DatasetBundle,
    InteractionRecord,
    QuestionMeta,
    StudentSequence,
    SynthConfig,
    dataset_stats,
    derive_unchosen,
    generate_synthetic,
    load_bundle,
    load_dataset,
    make_folds,
    preprocess,
    validate_bundle,
    write_dataset,
)


def make_question(qid, options=4, correct=0, concepts=(0,)):
    return QuestionMeta(qid, options, correct, frozenset(concepts))


def toy_bundle():
    questions = {
        0: make_question(0, options=4, correct=2, concepts=(0,)),
        1: make_question(1, options=3, correct=1, concepts=(1, 2)),
        2: make_question(2, options=2, correct=0, concepts=(2,)),
    }
    seq_a = StudentSequence(
        "a",
        (
            InteractionRecord(0, 2, True, 0),
            InteractionRecord(1, 0, False, 1),
            InteractionRecord(2, 0, True, 2),
        ),
    )
    seq_b = StudentSequence(
        "b",
        (
            InteractionRecord(1, 1, True, 0),
            InteractionRecord(0, 3, False, 1),
        ),
    )
    return DatasetBundle(questions=questions, sequences=[seq_a, seq_b], concept_count=3)


def write_files(tmp_path, rows, questions):
    inter = tmp_path / "interactions.csv"
    lines = ["student_id,position,question_id,chosen_option,correct"]
    lines += [",".join(str(v) for v in row) for row in rows]
    inter.write_text("\n".join(lines) + "\n")
    qfile = tmp_path / "questions.jsonl"
    qfile.write_text(
        "\n".join(
            json.dumps(
                {
                    "question_id": q.question_id,
                    "option_count": q.option_count,
                    "correct_option": q.correct_option,
                    "concept_ids": sorted(q.concept_ids),
                }
            )
            for q in questions
        )
        + "\n"
    )
    return str(inter), str(qfile)


class TestLoadDataset:
    def test_happy_path(self, tmp_path):
        inter, qfile = write_files(
            tmp_path,
            [("s1", 0, 0, 2, 1), ("s1", 1, 1, 0, 0), ("s2", 0, 1, 1, 1)],
            [make_question(0, 4, 2, (0,)), make_question(1, 3, 1, (1,))],
        )
        bundle = load_dataset(inter, qfile)
        assert len(bundle.sequences) == 2
        assert bundle.concept_count == 2
        s1 = next(s for s in bundle.sequences if s.student_id == "s1")
        assert [r.question_id for r in s1.interactions] == [0, 1]
        assert s1.interactions[0].correct is True

    def test_single_record_consistency(self, tmp_path):
        inter, qfile = write_files(
            tmp_path, [("s1", 0, 0, 2, 1)], [make_question(0, 4, 2, (0,))]
        )
        bundle = load_dataset(inter, qfile)
        assert len(bundle.sequences) == 1
        assert bundle.sequences[0].interactions[0].correct is True

    def test_empty_interactions(self, tmp_path):
        inter, qfile = write_files(tmp_path, [], [make_question(0, 4, 2, (0,))])
        bundle = load_dataset(inter, qfile)
        assert bundle.sequences == []
        stats = dataset_stats(bundle)
        assert stats.interactions == 0 and stats.students == 0

    def test_unknown_question(self, tmp_path):
        inter, qfile = write_files(
            tmp_path, [("s1", 0, 9, 0, 1)], [make_question(0, 4, 0, (0,))]
        )
        with pytest.raises(DataValidationError, match="unknown question_id 9"):
            load_dataset(inter, qfile)

    def test_option_out_of_range_reports_line(self, tmp_path):
        rows = [("s1", i, 0, 1, 0) for i in range(15)] + [("s1", 15, 0, 7, 0)]
        inter, qfile = write_files(tmp_path, rows, [make_question(0, 4, 0, (0,))])
        with pytest.raises(DataValidationError, match=":17:"):
            load_dataset(inter, qfile)

    def test_inconsistent_correct_flag(self, tmp_path):
        inter, qfile = write_files(
            tmp_path, [("s1", 0, 0, 1, 1)], [make_question(0, 4, 0, (0,))]
        )
        with pytest.raises(DataValidationError, match="inconsistent"):
            load_dataset(inter, qfile)

    def test_duplicate_position(self, tmp_path):
        inter, qfile = write_files(
            tmp_path,
            [("s1", 0, 0, 0, 1), ("s1", 0, 0, 0, 1)],
            [make_question(0, 4, 0, (0,))],
        )
        with pytest.raises(DataValidationError, match="duplicate"):
            load_dataset(inter, qfile)

    def test_malformed_row_reports_line(self, tmp_path):
        inter, qfile = write_files(
            tmp_path, [("s1", 0, 0, "x", 1)], [make_question(0, 4, 0, (0,))]
        )
        with pytest.raises(DataValidationError, match=":2:"):
            load_dataset(inter, qfile)

    def test_non_consecutive_positions(self, tmp_path):
        inter, qfile = write_files(
            tmp_path,
            [("s1", 0, 0, 0, 1), ("s1", 2, 0, 0, 1)],
            [make_question(0, 4, 0, (0,))],
        )
        with pytest.raises(DataValidationError, match="consecutive"):
            load_dataset(inter, qfile)


class TestDeriveUnchosen:
    def test_four_options(self):
        meta = make_question(0, options=4, correct=0)
        rec = InteractionRecord(0, 1, False, 0)
        assert derive_unchosen(rec, meta) == {0, 2, 3}

    def test_binaryefault(self):
        meta = make_question(0, options=2, correct=1)
        rec = InteractionRecord(0, 0, False, 0)
        assert derive_unchosen(rec, meta) == {1}

    def test_last_option(self):
        meta = make_question(0, options=5, correct=0)
        rec = InteractionRecord(0, 4, False, 0)
        assert derive_unchosen(rec, meta) == {0, 1, 2, 3}

    @given(st.integers(2, 8), st.data())
    @settings(max_examples=50, deadline=None)
    def test_union_with_chosen_is_full_set(self, option_count, data):
        chosen = data.draw(st.integers(0, option_count - 1))
        meta = make_question(0, options=option_count, correct=0)
        rec = InteractionRecord(0, chosen, chosen == 0, 0)
        unchosen = derive_unchosen(rec, meta)
        assert unchosen | {chosen} == set(range(option_count))
        assert len(unchosen) == option_count - 1


def _long_sequence(n, qid=0):
    return StudentSequence(
        "s", tuple(InteractionRecord(qid, 0, True, i) for i in range(n))
    )


class TestPreprocess:
    def _bundle(self, lengths):
        questions = {0: make_question(0, options=2, correct=0, concepts=(0,))}
        seqs = [
            dataclasses.replace(_long_sequence(n), student_id=f"s{i}")
            for i, n in enumerate(lengths)
        ]
        return DatasetBundle(questions=questions, sequences=seqs, concept_count=1)

    def test_short_removed(self):
        out = preprocess(self._bundle([4]), max_len=200, min_len=5)
        assert out.sequences == []

    def test_boundary_kept(self):
        out = preprocess(self._bundle([200]), max_len=200, min_len=5)
        assert len(out.sequences) == 1 and len(out.sequences[0]) == 200

    def test_windowing_403(self):
        out = preprocess(self._bundle([403]), max_len=200, min_len=5)
        assert [len(s) for s in out.sequences] == [200, 200]
        assert [s.window for s in out.sequences] == [0, 1]
        for s in out.sequences:
            assert [r.position for r in s.interactions] == list(range(len(s)))

    def test_idempotent(self):
        bundle = self._bundle([3, 17, 403, 200])
        once = preprocess(bundle)
        twice = preprocess(once)
        assert once == twice

    def test_validates_args(self):
        with pytest.raises(ValueError):
            preprocess(self._bundle([10]), max_len=2, min_len=5)


class TestMakeFolds:
    def _bundle(self, n_students):
        questions = {0: make_question(0, options=2, correct=0, concepts=(0,))}
        seqs = [
            StudentSequence(f"s{i}", (InteractionRecord(0, 0, True, 0),))
            for i in range(n_students)
        ]
        return DatasetBundle(questions=questions, sequences=seqs, concept_count=1)

    def test_partition_10_students(self):
        plan = make_folds(self._bundle(10), k=5, seed=0)
        tests = [set(f.test_students) for f in plan.folds]
        assert all(len(t) == 2 for t in tests)
        assert set().union(*tests) == {f"s{i}" for i in range(10)}
        assert sum(len(t) for t in tests) == 10

    def test_deterministic(self):
        b = self._bundle(30)
        assert make_folds(b, k=5, seed=3) == make_folds(b, k=5, seed=3)
        assert make_folds(b, k=5, seed=3) != make_folds(b, k=5, seed=4)

    def test_dbe_kt22_sizes(self):
        plan = make_folds(self._bundle(1264), k=5, seed=0)
        sizes = sorted(len(f.test_students) for f in plan.folds)
        assert sizes == [252, 253, 253, 253, 253]

    def test_train_val_test_disjoint(self):
        plan = make_folds(self._bundle(40), k=5, seed=1)
        for fold in plan.folds:
            tr, va, te = (
                set(fold.train_students),
                set(fold.val_students),
                set(fold.test_students),
            )
            assert not (tr & va) and not (tr & te) and not (va & te)
            assert len(tr | va | te) == 40

    def test_too_few_students(self):
        with pytest.raises(ValueError):
            make_folds(self._bundle(3), k=5, seed=0)


class TestSynthetic:
    def test_bundle_validates(self):
        cfg = SynthConfig(students=50, questions=40, concepts=10, options=4)
        bundle, truth = generate_synthetic(cfg, seed=7)
        validate_bundle(bundle)
        assert len(bundle.student_ids()) == 50
        assert len(bundle.questions) == 40
        assert truth.abilities.shape == (50, 10)

    def test_deterministic(self):
        cfg = SynthConfig(students=10, questions=8, concepts=4)
        b1, _ = generate_synthetic(cfg, seed=3)
        b2, _ = generate_synthetic(cfg, seed=3)
        assert b1.sequences == b2.sequences
        assert b1.questions == b2.questions
        b3, _ = generate_synthetic(cfg, seed=4)
        assert b1.sequences != b3.sequences

    def test_ability_equal_difficulty_rate_half(self):
        # mastery_prob 1 -> every ability = +scale; difficulties forced to the
        # same value makes sigmoid(0) = 0.5 the generating probability
        cfg = SynthConfig(
            students=200,
            questions=4,
            concepts=2,
            options=4,
            min_len=30,
            max_len=30,
            mastery_prob=1.0,
            ability_scale=0.7,
            difficulty_scale=0.0,
        )
        cfg.difficulty_scale = 0.0
        cfg.ability_scale = 0.0  # ability = difficulty = 0 everywhere
        bundle, truth = generate_synthetic(cfg, seed=1)
        rate = dataset_stats(bundle).correct_rate
        assert abs(rate - 0.5) < 0.02
        assert all(abs(p - 0.5) < 1e-12 for p in truth.probabilities.values())

    def test_empirical_rate_matches_generating_sigmoid(self):
        # >= 2000 samples per question: empirical per-question correct rate
        # within 0.03 of the generating probability (identical students)
        cfg = SynthConfig(
            students=400,
            questions=3,
            concepts=3,
            options=4,
            min_len=15,
            max_len=15,
            mastery_prob=1.0,  # all concepts mastered -> same ability everywhere
            edge_prob=0.0,
        )
        bundle, truth = generate_synthetic(cfg, seed=5)
        totals, corrects = {}, {}
        for seq in bundle.sequences:
            for rec in seq.interactions:
                totals[rec.question_id] = totals.get(rec.question_id, 0) + 1
                corrects[rec.question_id] = corrects.get(rec.question_id, 0) + rec.correct
        for qid in totals:
            assert totals[qid] >= 2000
            p_true = truth.probabilities[("s00000", qid)]
            assert abs(corrects[qid] / totals[qid] - p_true) < 0.03

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            generate_synthetic(SynthConfig(students=0), seed=0)
        with pytest.raises(ValueError):
            generate_synthetic(SynthConfig(options=1), seed=0)


class TestStats:
    def test_hand_counts(self):
        stats = dataset_stats(toy_bundle())
        assert stats.students == 2
        assert stats.questions == 3
        assert stats.concepts == 3
        assert stats.interactions == 5
        assert stats.options_min == 2 and stats.options_max == 4
        assert math.isclose(stats.avg_concepts_per_question, 4 / 3)
        assert math.isclose(stats.correct_rate, 3 / 5)
        # attempted distinct pairs: a->{0,1,2}, b->{0,1} = 5 of 6
        assert math.isclose(stats.sparsity, 1 / 6)

    def test_dense_single_student(self):
        questions = {q: make_question(q, 2, 0, (0,)) for q in range(3)}
        seq = StudentSequence(
            "s", tuple(InteractionRecord(q, 0, True, q) for q in range(3))
        )
        bundle = DatasetBundle(questions=questions, sequences=[seq], concept_count=1)
        assert dataset_stats(bundle).sparsity == 0.0


class TestRoundTrip:
    def test_write_then_load(self, tmp_path):
        bundle = toy_bundle()
        bundle.map_edges = [(0, 1), (1, 2)]
        write_dataset(bundle, str(tmp_path / "b"))
        loaded = load_bundle(str(tmp_path / "b"))
        assert loaded.concept_count == bundle.concept_count
        assert loaded.questions == bundle.questions
        assert sorted(loaded.map_edges) == sorted(bundle.map_edges)
        by_id = {s.student_id: s for s in loaded.sequences}
        for seq in bundle.sequences:
            assert by_id[seq.student_id].interactions == seq.interactions
