"""Dataset schema, loaders, preprocessing, fold splits and synthetic logs.

Canonical on-disk formats:
  * interactions: UTF-8 CSV, header ``student_id,position,question_id,
    chosen_option,correct`` with correct in {0,1}
  * questions: JSON-lines, one object per question with keys question_id,
    option_count, correct_option, concept_ids
  * concept-map edges (optional): CSV ``source_concept,target_concept``

Bundles and synthesis are pure functions of their inputs plus a seed, and
are treated as immutable once built.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

INTERACTIONS_HEADER = ["student_id", "position", "question_id", "chosen_option", "correct"]
BUNDLE_FORMAT = "crkt-bundle-v1"


class DataValidationError(ValueError):
    """Input data violated the schema; carries line-level diagnostics."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


@dataclass(frozen=True)
class QuestionMeta:
    """Static metadata of one question (its options and tagged concepts)."""

    question_id: int
    option_count: int
    correct_option: int
    concept_ids: frozenset

    def __post_init__(self):
        if self.option_count < 2:
            raise DataValidationError(
                f"question {self.question_id}: option_count must be >= 2"
            )
        if not 0 <= self.correct_option < self.option_count:
            raise DataValidationError(
                f"question {self.question_id}: correct_option out of range"
            )
        if not self.concept_ids:
            raise DataValidationError(
                f"question {self.question_id}: concept_ids must be non-empty"
            )
        object.__setattr__(self, "concept_ids", frozenset(int(c) for c in self.concept_ids))


@dataclass(frozen=True)
class InteractionRecord:
    """One student-question event at a 0-based position in the sequence."""

    question_id: int
    chosen_option: int
    correct: bool
    position: int


@dataclass(frozen=True)
class StudentSequence:
    student_id: str
    interactions: tuple
    window: int = 0

    def __len__(self):
        return len(self.interactions)


@dataclass
class DatasetBundle:
    questions: dict  # question_id -> QuestionMeta
    sequences: list  # of StudentSequence
    concept_count: int
    map_edges: list | None = None

    @property
    def n_interactions(self):
        return sum(len(s) for s in self.sequences)

    def student_ids(self):
        seen = {}
        for s in self.sequences:
            seen.setdefault(base_student_id(s.student_id), None)
        return list(seen)


@dataclass(frozen=True)
class FoldSplit:
    train_students: tuple
    val_students: tuple
    test_students: tuple


@dataclass(frozen=True)
class SplitPlan:
    folds: tuple  # of FoldSplit
    seed: int

    @property
    def k(self):
        return len(self.folds)


@dataclass
class SynthConfig:
    """Knobs for the synthetic-log generator (see generate_synthetic)."""

    students: int = 50
    questions: int = 40
    concepts: int = 10
    options: int = 4
    min_len: int = 10
    max_len: int = 30
    min_concepts_per_question: int = 1
    max_concepts_per_question: int = 3
    edge_prob: float = 0.15
    mastery_prob: float = 0.7
    ability_scale: float = 1.5
    difficulty_scale: float = 1.0
    distractor_link: float = 0.9

    def validate(self):
        for name in ("students", "questions", "concepts", "options", "min_len", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"SynthConfig.{name} must be positive")
        if self.options < 2:
            raise ValueError("SynthConfig.options must be >= 2")
        if self.min_len > self.max_len:
            raise ValueError("SynthConfig.min_len must be <= max_len")
        if not 1 <= self.min_concepts_per_question <= self.max_concepts_per_question:
            raise ValueError("require 1 <= min_concepts_per_question <= max_concepts_per_question")


@dataclass
class SynthGroundTruth:
    """Hidden generator state: what a perfect model could recover."""

    abilities: np.ndarray  # (students, concepts)
    difficulties: np.ndarray  # (questions,)
    probabilities: dict  # (student_id, question_id) -> generating sigmoid prob
    dag_edges: list


@dataclass
class StatsReport:
    students: int
    concepts: int
    questions: int
    interactions: int
    options_min: int
    options_max: int
    avg_concepts_per_question: float
    correct_rate: float
    sparsity: float

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


# ---------------------------------------------------------------------------
# loading & validation
# ---------------------------------------------------------------------------


def load_questions(path):
    """Parse the questions JSONL file into a question_id -> QuestionMeta dict."""
    questions = {}
    problems = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                meta = QuestionMeta(
                    question_id=int(obj["question_id"]),
                    option_count=int(obj["option_count"]),
                    correct_option=int(obj["correct_option"]),
                    concept_ids=frozenset(int(c) for c in obj["concept_ids"]),
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                problems.append(f"{path}:{lineno}: malformed question row: {exc}")
                continue
            if meta.question_id in questions:
                problems.append(f"{path}:{lineno}: duplicate question_id {meta.question_id}")
                continue
            questions[meta.question_id] = meta
    if problems:
        raise DataValidationError(problems)
    if not questions:
        raise DataValidationError(f"{path}: no questions found")
    return questions


def load_dataset(interactions_path, questions_path):
    """Load and validate a (interactions CSV, questions JSONL) pair.

    Interactions are grouped per student and sorted by position. Any schema
    violation is reported with its source line number.
    """
    questions = load_questions(questions_path)
    concept_ids = set()
    for meta in questions.values():
        concept_ids.update(meta.concept_ids)
    if min(concept_ids) < 0:
        raise DataValidationError(f"{questions_path}: negative concept id")
    concept_count = max(concept_ids) + 1

    problems = []
    per_student = {}
    seen_pos = set()
    with open(interactions_path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            header = None
        if header is not None and header != INTERACTIONS_HEADER:
            raise DataValidationError(
                f"{interactions_path}:1: bad header {header!r}, "
                f"expected {INTERACTIONS_HEADER!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                problems.append(f"{interactions_path}:{lineno}: expected 5 fields, got {len(row)}")
                continue
            sid = row[0]
            try:
                position = int(row[1])
                qid = int(row[2])
                chosen = int(row[3])
                correct_flag = int(row[4])
            except ValueError as exc:
                problems.append(f"{interactions_path}:{lineno}: malformed row: {exc}")
                continue
            if correct_flag not in (0, 1):
                problems.append(f"{interactions_path}:{lineno}: correct must be 0 or 1")
                continue
            meta = questions.get(qid)
            if meta is None:
                problems.append(f"{interactions_path}:{lineno}: unknown question_id {qid}")
                continue
            if not 0 <= chosen < meta.option_count:
                problems.append(
                    f"{interactions_path}:{lineno}: chosen_option {chosen} out of range "
                    f"for question {qid} (option_count {meta.option_count})"
                )
                continue
            derived = chosen == meta.correct_option
            if bool(correct_flag) != derived:
                problems.append(
                    f"{interactions_path}:{lineno}: correct flag {correct_flag} inconsistent "
                    f"with correct_option {meta.correct_option} of question {qid}"
                )
                continue
            if (sid, position) in seen_pos:
                problems.append(
                    f"{interactions_path}:{lineno}: duplicate (student_id, position) "
                    f"({sid}, {position})"
                )
                continue
            seen_pos.add((sid, position))
            per_student.setdefault(sid, []).append(
                InteractionRecord(qid, chosen, derived, position)
            )
    if problems:
        raise DataValidationError(problems)

    sequences = []
    for sid, recs in per_student.items():
        recs.sort(key=lambda r: r.position)
        for idx, rec in enumerate(recs):
            if rec.position != idx:
                problems.append(
                    f"student {sid}: positions not consecutive from 0 "
                    f"(found {rec.position} at index {idx})"
                )
                break
        else:
            sequences.append(StudentSequence(sid, tuple(recs)))
    if problems:
        raise DataValidationError(problems)
    return DatasetBundle(questions=questions, sequences=sequences, concept_count=concept_count)


def validate_bundle(bundle):
    """Re-check every bundle invariant; raises DataValidationError on failure."""
    problems = []
    for qid, meta in bundle.questions.items():
        if qid != meta.question_id:
            problems.append(f"question key {qid} != meta id {meta.question_id}")
        for c in meta.concept_ids:
            if not 0 <= c < bundle.concept_count:
                problems.append(f"question {qid}: concept {c} outside [0, {bundle.concept_count})")
    for seq in bundle.sequences:
        for idx, rec in enumerate(seq.interactions):
            meta = bundle.questions.get(rec.question_id)
            if meta is None:
                problems.append(f"student {seq.student_id}: unknown question {rec.question_id}")
                continue
            if not 0 <= rec.chosen_option < meta.option_count:
                problems.append(
                    f"student {seq.student_id} pos {rec.position}: chosen_option out of range"
                )
            if rec.correct != (rec.chosen_option == meta.correct_option):
                problems.append(
                    f"student {seq.student_id} pos {rec.position}: correctness inconsistent"
                )
            if rec.position != idx:
                problems.append(
                    f"student {seq.student_id}: positions not consecutive from 0"
                )
    if bundle.map_edges:
        for i, j in bundle.map_edges:
            if not (0 <= i < bundle.concept_count and 0 <= j < bundle.concept_count):
                problems.append(f"concept-map edge ({i}, {j}) out of range")
    if problems:
        raise DataValidationError(problems)
    return bundle


def derive_unchosen(record, meta):
    """Options of the question minus the chosen one."""
    return set(range(meta.option_count)) - {record.chosen_option}


# ---------------------------------------------------------------------------
# preprocessing & splits
# ---------------------------------------------------------------------------


def preprocess(bundle, max_len=200, min_len=5):
    """Drop sequences shorter than min_len; split longer ones into windows.

    Long sequences become consecutive non-overlapping windows of at most
    max_len interactions, each a sequence of its own (positions re-based to
    start at 0); a tail window shorter than min_len is dropped. Idempotent.
    """
    if not (max_len >= min_len >= 1):
        raise ValueError("require max_len >= min_len >= 1")
    out = []
    for seq in bundle.sequences:
        n = len(seq)
        if n < min_len:
            continue
        if n <= max_len:
            out.append(dataclasses.replace(seq))
            continue
        for w, start in enumerate(range(0, n, max_len)):
            chunk = seq.interactions[start : start + max_len]
            if len(chunk) < min_len:
                continue
            rebased = tuple(
                dataclasses.replace(rec, position=i) for i, rec in enumerate(chunk)
            )
            out.append(StudentSequence(seq.student_id, rebased, window=seq.window + w))
    return DatasetBundle(
        questions=bundle.questions,
        sequences=out,
        concept_count=bundle.concept_count,
        map_edges=bundle.map_edges,
    )


def make_folds(bundle, k=5, seed=0, val_fraction=0.125):
    """Deterministic k-fold split by student (never by interaction).

    Each fold reserves ~1/k of the students for test; of the remainder,
    `val_fraction` goes to validation (early stopping) and the rest to train.
    """
    students = sorted(bundle.student_ids())
    if len(students) < k:
        raise ValueError(f"need at least {k} students, got {len(students)}")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = [students[i] for i in rng.permutation(len(students))]
    test_chunks = np.array_split(np.arange(len(order)), k)
    folds = []
    for chunk in test_chunks:
        test = tuple(order[i] for i in chunk)
        rest = [s for s in order if s not in set(test)]
        n_val = max(1, int(round(len(rest) * val_fraction))) if len(rest) > 1 else 0
        val = tuple(rest[:n_val])
        train = tuple(rest[n_val:])
        folds.append(FoldSplit(train_students=train, val_students=val, test_students=test))
    return SplitPlan(folds=tuple(folds), seed=seed)


def base_student_id(sid):
    """Strip the window suffix added when a split sequence is written to disk."""
    return sid.split("#w", 1)[0]


def subset_sequences(bundle, student_ids):
    wanted = set(student_ids)
    return [s for s in bundle.sequences if base_student_id(s.student_id) in wanted]


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def generate_synthetic(config, seed):
    """Sample a ground-truth-known dataset: DAG concept map, latent abilities,
    question difficulties; correctness follows sigmoid(ability - difficulty)
    and wrong answers pick a distractor tied to the student's weakest relevant
    concept (so option identity carries signal about concept deficits).

    Returns (bundle, ground_truth).
    """
    config.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    C, Q, S = config.concepts, config.questions, config.students

    # random DAG over a shuffled topological order
    order = rng.permutation(C)
    dag_edges = []
    for a in range(C):
        for b in range(a + 1, C):
            if rng.random() < config.edge_prob:
                dag_edges.append((int(order[a]), int(order[b])))
    parents = {c: [] for c in range(C)}
    for i, j in dag_edges:
        parents[j].append(i)

    # questions: concepts round-robin first so every concept is covered
    questions = {}
    for q in range(Q):
        n_tags = int(
            rng.integers(config.min_concepts_per_question, config.max_concepts_per_question + 1)
        )
        tags = {q % C}
        while len(tags) < min(n_tags, C):
            tags.add(int(rng.integers(0, C)))
        correct_option = int(rng.integers(0, config.options))
        questions[q] = QuestionMeta(
            question_id=q,
            option_count=config.options,
            correct_option=correct_option,
            concept_ids=frozenset(tags),
        )
    difficulties = rng.uniform(-config.difficulty_scale, config.difficulty_scale, size=Q)

    # per-student mastery propagates down the DAG: a concept can only be
    # mastered when all its parents are
    abilities = np.empty((S, C))
    topo = list(order)
    for s in range(S):
        mastered = np.zeros(C, dtype=bool)
        for c in topo:
            ok = all(mastered[p] for p in parents[c])
            mastered[c] = ok and rng.random() < config.mastery_prob
        abilities[s] = np.where(mastered, config.ability_scale, -config.ability_scale)

    sequences = []
    probabilities = {}
    for s in range(S):
        sid = f"s{s:05d}"
        length = int(rng.integers(config.min_len, config.max_len + 1))
        recs = []
        for pos in range(length):
            q = int(rng.integers(0, Q))
            meta = questions[q]
            tags = sorted(meta.concept_ids)
            ability = float(np.mean([abilities[s, c] for c in tags]))
            p = _sigmoid(ability - float(difficulties[q]))
            probabilities[(sid, q)] = p
            if rng.random() < p:
                chosen = meta.correct_option
            else:
                distractors = [o for o in range(meta.option_count) if o != meta.correct_option]
                weakest = min(tags, key=lambda c: (abilities[s, c], c))
                if rng.random() < config.distractor_link:
                    chosen = distractors[weakest % len(distractors)]
                else:
                    chosen = distractors[int(rng.integers(0, len(distractors)))]
            recs.append(
                InteractionRecord(q, chosen, chosen == meta.correct_option, pos)
            )
        sequences.append(StudentSequence(sid, tuple(recs)))

    bundle = DatasetBundle(
        questions=questions,
        sequences=sequences,
        concept_count=C,
        map_edges=sorted(dag_edges),
    )
    truth = SynthGroundTruth(
        abilities=abilities,
        difficulties=difficulties,
        probabilities=probabilities,
        dag_edges=sorted(dag_edges),
    )
    return bundle, truth


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------


def dataset_stats(bundle):
    n_students = len(bundle.student_ids())
    n_questions = len(bundle.questions)
    n_inter = bundle.n_interactions
    n_correct = sum(rec.correct for s in bundle.sequences for rec in s.interactions)
    opt_counts = [m.option_count for m in bundle.questions.values()] or [0]
    avg_concepts = (
        float(np.mean([len(m.concept_ids) for m in bundle.questions.values()]))
        if bundle.questions
        else 0.0
    )
    attempted = {
        (s.student_id, rec.question_id)
        for s in bundle.sequences
        for rec in s.interactions
    }
    total_pairs = n_students * n_questions
    sparsity = 1.0 - len(attempted) / total_pairs if total_pairs else 0.0
    return StatsReport(
        students=n_students,
        concepts=bundle.concept_count,
        questions=n_questions,
        interactions=n_inter,
        options_min=min(opt_counts),
        options_max=max(opt_counts),
        avg_concepts_per_question=avg_concepts,
        correct_rate=n_correct / n_inter if n_inter else 0.0,
        sparsity=sparsity,
    )


# ---------------------------------------------------------------------------
# bundle persistence
# ---------------------------------------------------------------------------


def write_dataset(bundle, out_dir):
    """Write a bundle in the canonical on-disk layout; returns out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "interactions.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(INTERACTIONS_HEADER)
        for seq in bundle.sequences:
            sid = seq.student_id if seq.window == 0 else f"{seq.student_id}#w{seq.window}"
            for rec in seq.interactions:
                writer.writerow(
                    [sid, rec.position, rec.question_id, rec.chosen_option, int(rec.correct)]
                )
    with open(os.path.join(out_dir, "questions.jsonl"), "w", encoding="utf-8") as fh:
        for qid in sorted(bundle.questions):
            meta = bundle.questions[qid]
            fh.write(
                json.dumps(
                    {
                        "question_id": meta.question_id,
                        "option_count": meta.option_count,
                        "correct_option": meta.correct_option,
                        "concept_ids": sorted(meta.concept_ids),
                    }
                )
                + "\n"
            )
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump({"format": BUNDLE_FORMAT, "concept_count": bundle.concept_count}, fh)
    if bundle.map_edges is not None:
        with open(os.path.join(out_dir, "concept_map.csv"), "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["source_concept", "target_concept"])
            for i, j in bundle.map_edges:
                writer.writerow([i, j])
    return out_dir


def load_bundle(bundle_dir):
    """Load a bundle previously written by write_dataset."""
    meta_path = os.path.join(bundle_dir, "meta.json")
    bundle = load_dataset(
        os.path.join(bundle_dir, "interactions.csv"),
        os.path.join(bundle_dir, "questions.jsonl"),
    )
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
        if meta.get("format") != BUNDLE_FORMAT:
            raise DataValidationError(f"{meta_path}: unknown bundle format {meta.get('format')!r}")
        bundle.concept_count = int(meta["concept_count"])
    edges_path = os.path.join(bundle_dir, "concept_map.csv")
    if os.path.exists(edges_path):
        bundle.map_edges = read_edge_csv(edges_path)
    # windowed sequences were flattened into per-window student ids; keep as-is
    return validate_bundle(bundle)


def read_edge_csv(path):
    edges = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["source_concept", "target_concept"]:
            raise DataValidationError(f"{path}:1: bad edge header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                edges.append((int(row[0]), int(row[1])))
            except (ValueError, IndexError) as exc:
                raise DataValidationError(f"{path}:{lineno}: malformed edge row: {exc}")
    return edges
