"""Objective (prediction + concept-relevance + contrastive terms), the
correct-rate-aware response-flip augmentation, Adam, the training loop with
early stopping, and cross-validated runs.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import evaluation
from .autodiff import Tensor
from .data import StudentSequence, derive_unchosen, make_folds, subset_sequences
from .model import CrktModel, forward_batch, forward_states, make_batch, predict_sequences

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class LossConfig:
    alpha: float = 0.1  # coefficient of the top-k relevance loss
    beta: float = 0.1  # coefficient of the contrastive loss
    k: int = 10  # shared with the prediction head
    flip_rate: float = 0.8
    base_band: tuple = (0.40, 0.60)

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0.0 <= self.flip_rate <= 1.0:
            raise ValueError("flip_rate must be in [0, 1]")
        lo, hi = self.base_band
        if not lo < hi:
            raise ValueError("base_band lower bound must be below the upper bound")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    max_epochs: int = 200
    patience: int = 10
    batch_size: int = 32
    seed: int = 0
    val_fraction: float = 0.125  # of the train+val student block
    freeze_augmentation: bool = False

    def __post_init__(self):
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

_EPS = 1e-12


def loss_kt(y_hat, y, n_sequences=1):
    """Binary cross-entropy, summed over target positions, mean over batch."""
    y_hat = ad.as_tensor(y_hat)
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y_hat.data)):
        raise ValueError("non-finite prediction passed to loss_kt")
    p = ad.clip(y_hat, _EPS, 1.0 - _EPS)
    bce = -(y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p))
    return bce.sum() * (1.0 / n_sequences)


def positive_weight(concept_count, tagged_count, k):
    """Weight for positive labels in the relevance loss: (|C| - |C_q|) / k."""
    return (concept_count - tagged_count) / k


def loss_topk(r, tagged, concept_count, k, n_sequences=1):
    """Weighted BCE pushing relevance scores toward the question's tags.

    `r` holds sigmoid relevance scores, shape (..., C); `tagged` is the 0/1
    indicator of the question's concept set. The positive-class weight
    (|C| - |C_q|)/k counters the label imbalance.
    """
    r = ad.as_tensor(r)
    g = np.asarray(tagged, dtype=np.float64)
    if g.shape != r.shape:
        raise ValueError("relevance/tag shape mismatch")
    w = positive_weight(concept_count, g.sum(axis=-1, keepdims=True), k)
    p = ad.clip(r, _EPS, 1.0 - _EPS)
    bce = -(w * g * ad.log(p) + (1.0 - g) * ad.log(1.0 - p))
    return bce.sum() * (1.0 / n_sequences)


def _cosine(a, b):
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm vectors")
    dot = (a * b).sum()
    return dot * (((a * a).sum() ** 0.5 * (b * b).sum() ** 0.5) ** -1.0)


def loss_cl(h, h_pos, negatives):
    """InfoNCE-style contrastive loss over cosine similarities."""
    if not negatives:
        raise ValueError("loss_cl requires at least one negative")
    h = ad.as_tensor(h)
    pos = ad.exp(_cosine(h, ad.as_tensor(h_pos)))
    denom = pos
    for hn in negatives:
        denom = denom + ad.exp(_cosine(h, ad.as_tensor(hn)))
    return -ad.log(pos / denom)


def _unit_rows(x):
    norms = np.linalg.norm(x.data, axis=-1)
    if (norms == 0.0).any():
        raise ValueError("cosine similarity undefined for zero-norm vectors")
    return x * ((x * x).sum(axis=-1, keepdims=True) ** -0.5)


def loss_cl_batch(h, h_pos, h_neg):
    """Vectorized mean of loss_cl over a batch of students.

    Row i of h/h_pos is one student's original/positive state; every row of
    h_neg (the student's own plus the other in-batch students') serves as a
    negative for each student.
    """
    hn = _unit_rows(ad.as_tensor(h))
    pn = _unit_rows(ad.as_tensor(h_pos))
    gn = _unit_rows(ad.as_tensor(h_neg))
    pos = ad.exp((hn * pn).sum(axis=-1))  # (m,)
    neg = ad.exp(hn @ gn.swapaxes(0, 1))  # (m, m)
    return (ad.log(pos + neg.sum(axis=-1)) - ad.log(pos)).mean()


def total_loss(components, config):
    """L = L_KT + alpha * L_topK + beta * L_CL."""
    l_kt, l_topk, l_cl = components
    for part in components:
        value = part.data if isinstance(part, Tensor) else part
        if not np.all(np.isfinite(value)):
            raise ValueError("non-finite loss component")
    return ad.as_tensor(l_kt) + config.alpha * ad.as_tensor(l_topk) + config.beta * ad.as_tensor(l_cl)


# ---------------------------------------------------------------------------
# question statistics & augmentation
# ---------------------------------------------------------------------------


@dataclass
class QuestionStats:
    """Per-question average correct rate, computed on the training split only."""

    rates: dict  # question_id -> rate in [0, 1]

    def rate(self, question_id):
        """Rate, or None for questions unseen in the training split."""
        return self.rates.get(question_id)

    def in_band(self, question_id, band):
        r = self.rates.get(question_id)
        return r is not None and band[0] <= r <= band[1]


def compute_question_stats(sequences):
    totals = {}
    corrects = {}
    for seq in sequences:
        for rec in seq.interactions:
            totals[rec.question_id] = totals.get(rec.question_id, 0) + 1
            corrects[rec.question_id] = corrects.get(rec.question_id, 0) + int(rec.correct)
    return QuestionStats(rates={q: corrects[q] / totals[q] for q in totals})


@dataclass
class AugmentedTriple:
    original: StudentSequence
    positive: StudentSequence
    negative: StudentSequence
    has_base: bool
    flipped_positive: tuple = ()
    flipped_negative: tuple = ()


def flip_augment(sequence, stats, questions, flip_rate, rng, base_band=(0.40, 0.60)):
    """Correct-rate-aware response flips yielding (positive, negative) copies.

    Base questions are the positions whose question correct rate lies in
    `base_band`. A position is related when it shares a concept with a base
    question at another position; its governing base is the most recently
    answered one. With a correctly answered base, related questions with a
    lower rate flip to correct in the positive copy and higher-rate ones flip
    to wrong in the negative copy; a wrong base inverts which copy gets which
    flip. Each eligible position actually flips with probability flip_rate.
    Sequences with no base question return the original as all three members.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.Generator(np.random.PCG64(int(rng)))
    recs = sequence.interactions
    base_positions = [
        p for p, rec in enumerate(recs) if stats.in_band(rec.question_id, base_band)
    ]
    if not base_positions:
        return AugmentedTriple(sequence, sequence, sequence, has_base=False)

    concepts = [questions[rec.question_id].concept_ids for rec in recs]
    pos_recs = list(recs)
    neg_recs = list(recs)
    flipped_pos, flipped_neg = [], []
    for p, rec in enumerate(recs):
        governors = [
            b for b in base_positions if b != p and concepts[b] & concepts[p]
        ]
        if not governors:
            continue
        b = max(governors)  # most recently answered base in the concept group
        rate_p = stats.rate(rec.question_id)
        rate_b = stats.rate(recs[b].question_id)
        if rate_p is None or rate_p == rate_b:
            continue
        base_correct = recs[b].correct
        # "upgrade" = lower-rate related answered wrong -> correct;
        # "downgrade" = higher-rate related answered correct -> wrong
        if rate_p < rate_b and not rec.correct:
            target_list, flipped, to_correct = (
                (pos_recs, flipped_pos, True) if base_correct else (neg_recs, flipped_neg, True)
            )
        elif rate_p > rate_b and rec.correct:
            target_list, flipped, to_correct = (
                (neg_recs, flipped_neg, False) if base_correct else (pos_recs, flipped_pos, False)
            )
        else:
            continue
        if rng.random() >= flip_rate:
            continue
        meta = questions[rec.question_id]
        if to_correct:
            new_rec = dataclasses.replace(
                rec, chosen_option=meta.correct_option, correct=True
            )
        else:
            # record was correct, so its unchosen set is exactly the distractors
            distractors = sorted(derive_unchosen(rec, meta))
            choice = distractors[int(rng.integers(0, len(distractors)))]
            new_rec = dataclasses.replace(rec, chosen_option=choice, correct=False)
        target_list[p] = new_rec
        flipped.append(p)

    positive = StudentSequence(sequence.student_id, tuple(pos_recs), sequence.window)
    negative = StudentSequence(sequence.student_id, tuple(neg_recs), sequence.window)
    return AugmentedTriple(
        original=sequence,
        positive=positive,
        negative=negative,
        has_base=True,
        flipped_positive=tuple(flipped_pos),
        flipped_negative=tuple(flipped_neg),
    )


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            m_hat = self.m[name] / (1 - self.b1**self.t)
            v_hat = self.v[name] / (1 - self.b2**self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: CrktModel
    history: list  # dicts with epoch/train_loss/val_loss/val_acc/val_auc
    best_epoch: int
    question_stats: QuestionStats


def _tags_matrix(bundle, config):
    tags = np.zeros((config.n_questions, config.n_concepts), dtype=np.float64)
    for row, qid in enumerate(config.question_ids):
        for c in bundle.questions[qid].concept_ids:
            tags[row, c] = 1.0
    return tags


def _batch_losses(model, cmap, batch, tags_by_row, loss_cfg, aug_triples):
    """Forward one batch and assemble the three loss terms."""
    cfg = model.config
    out = forward_batch(model, batch, cmap)
    B = batch.batch_size
    l_kt = loss_kt(out.y_hat, out.targets.y_true, n_sequences=B)
    l_topk = loss_topk(
        out.r_sig, tags_by_row[out.targets.q_rows], cfg.n_concepts, loss_cfg.k, n_sequences=B
    )
    with_base = [i for i, tr in enumerate(aug_triples) if tr.has_base]
    if with_base and loss_cfg.beta > 0:
        pos_batch = make_batch(model, [aug_triples[i].positive for i in with_base])
        neg_batch = make_batch(model, [aug_triples[i].negative for i in with_base])
        _, _, h_pos = forward_states(model, pos_batch)
        _, _, h_neg = forward_states(model, neg_batch)
        h_orig = ad.rows(out.h_last, np.asarray(with_base))
        l_cl = loss_cl_batch(h_orig, h_pos, h_neg)
    else:
        l_cl = ad.as_tensor(0.0)
    return total_loss((l_kt, l_topk, l_cl), loss_cfg), l_kt, l_topk, l_cl


def _eval_split(model, cmap, sequences, tags_by_row, loss_cfg, batch_size):
    """Validation loss (prediction + relevance terms; augmentation is a
    training-only stochastic element) plus accuracy and AUC."""
    total = 0.0
    y_hat_all, y_all = [], []
    with ad.no_grad():
        for start in range(0, len(sequences), batch_size):
            chunk = sequences[start : start + batch_size]
            batch = make_batch(model, chunk)
            out = forward_batch(model, batch, cmap)
            l_kt = loss_kt(out.y_hat, out.targets.y_true, n_sequences=1)
            l_topk = loss_topk(
                out.r_sig,
                tags_by_row[out.targets.q_rows],
                model.config.n_concepts,
                loss_cfg.k,
                n_sequences=1,
            )
            total += float(l_kt.data) + loss_cfg.alpha * float(l_topk.data)
            y_hat_all.append(out.y_hat.data)
            y_all.append(out.targets.y_true)
    y_hat = np.concatenate(y_hat_all)
    y = np.concatenate(y_all)
    acc = evaluation.accuracy(y_hat, y)
    auc = evaluation.auc(y_hat, y)
    return total / len(sequences), acc, auc


def train(
    bundle,
    cmap,
    model_config,
    train_config,
    loss_config,
    train_students=None,
    val_students=None,
):
    """Adam on the combined objective with early stopping on validation loss.

    Returns the best-validation checkpoint and the per-epoch history; fully
    deterministic under a fixed seed.
    """
    rng = np.random.Generator(np.random.PCG64(train_config.seed))
    if train_students is None or val_students is None:
        students = sorted(bundle.student_ids())
        order = [students[i] for i in rng.permutation(len(students))]
        n_val = max(1, int(round(len(order) * train_config.val_fraction)))
        val_students = tuple(order[:n_val])
        train_students = tuple(order[n_val:])
    train_seqs = subset_sequences(bundle, train_students)
    val_seqs = subset_sequences(bundle, val_students)
    if not train_seqs or not val_seqs:
        raise ValueError("empty train or validation split")

    stats = compute_question_stats(train_seqs)
    model = CrktModel(model_config, seed=train_config.seed)
    tags_by_row = _tags_matrix(bundle, model_config)
    opt = Adam(model.params, lr=train_config.lr)

    history = []
    best_val = math.inf
    best_epoch = -1
    best_params = None
    bad_epochs = 0
    for epoch in range(train_config.max_epochs):
        aug_seed = train_config.seed if train_config.freeze_augmentation else (
            train_config.seed * 1_000_003 + epoch
        )
        aug_rng = np.random.Generator(np.random.PCG64(aug_seed))
        order = rng.permutation(len(train_seqs))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), train_config.batch_size):
            chunk = [train_seqs[i] for i in order[start : start + train_config.batch_size]]
            batch = make_batch(model, chunk)
            triples = (
                [
                    flip_augment(
                        seq, stats, bundle.questions, loss_config.flip_rate, aug_rng,
                        loss_config.base_band,
                    )
                    for seq in chunk
                ]
                if loss_config.beta > 0
                else [AugmentedTriple(s, s, s, has_base=False) for s in chunk]
            )
            total, l_kt, l_topk, l_cl = _batch_losses(
                model, cmap, batch, tags_by_row, loss_config, triples
            )
            if not np.isfinite(total.data):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} batch {n_batches}: "
                    f"kt={float(l_kt.data)!r} topk={float(l_topk.data)!r} "
                    f"cl={float(l_cl.data)!r}"
                )
            model.zero_grad()
            total.backward()
            opt.step()
            epoch_loss += float(total.data)
            n_batches += 1
        val_loss, val_acc, val_auc = _eval_split(
            model, cmap, val_seqs, tags_by_row, loss_config, train_config.batch_size
        )
        history.append(
            {
                "epoch": epoch,
                "train_loss": epoch_loss / max(n_batches, 1),
                "val_loss": val_loss,
                "val_acc": val_acc,
                "val_auc": val_auc if val_auc is not None else float("nan"),
            }
        )
        logger.info(
            "epoch %d train_loss %.5f val_loss %.5f val_acc %.4f",
            epoch, history[-1]["train_loss"], val_loss, val_acc,
        )
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in model.params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= train_config.patience:
                break
    if best_params is not None:
        for k, p in model.params.items():
            p.data = best_params[k]
    return TrainResult(model=model, history=history, best_epoch=best_epoch, question_stats=stats)


def write_history_csv(history, path):
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_acc", "val_auc"])
        for row in history:
            writer.writerow(
                [row["epoch"], row["train_loss"], row["val_loss"], row["val_acc"], row["val_auc"]]
            )
    return path


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


@dataclass
class CvResult:
    rows: list  # per-fold dicts: fold, acc, auc (or error)
    mean_acc: float
    std_acc: float
    mean_auc: float
    std_auc: float

    def aggregate_label(self):
        return (
            f"{100 * self.mean_acc:.2f}±{100 * self.std_acc:.2f}",
            f"{100 * self.mean_auc:.2f}±{100 * self.std_auc:.2f}",
        )


def _run_fold(args):
    (bundle, cmap, model_config, train_config, loss_config, fold, fold_idx, out_dir,
     model_name) = args
    result = train(
        bundle,
        cmap,
        model_config,
        dataclasses.replace(train_config, seed=train_config.seed + fold_idx),
        loss_config,
        train_students=fold.train_students,
        val_students=fold.val_students,
    )
    test_seqs = subset_sequences(bundle, fold.test_students)
    preds = predict_sequences(result.model, test_seqs, cmap)
    acc = evaluation.accuracy(preds["y_hat"], preds["y_true"])
    auc = evaluation.auc(preds["y_hat"], preds["y_true"])
    ckpt = None
    if out_dir is not None:
        import os

        ckpt = os.path.join(out_dir, f"fold{fold_idx}-best.crkt.zip")
        result.model.save(ckpt)
        write_history_csv(result.history, os.path.join(out_dir, f"fold{fold_idx}-history.csv"))
    return {
        "fold": fold_idx,
        "acc": acc,
        "auc": auc,
        "best_epoch": result.best_epoch,
        "checkpoint": ckpt,
    }


def run_cv(
    bundle,
    cmap,
    model_config,
    train_config,
    loss_config,
    k=5,
    seed=0,
    out_dir=None,
    jobs=1,
    model_name="crkt",
):
    """Train/evaluate each fold; fold errors are recorded, not fatal."""
    plan = make_folds(bundle, k=k, seed=seed)
    jobs_args = [
        (bundle, cmap, model_config, train_config, loss_config, fold, i, out_dir, model_name)
        for i, fold in enumerate(plan.folds)
    ]
    rows = []
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = list(pool.map(_safe_run_fold, jobs_args))
        rows = sorted(futures, key=lambda r: r["fold"])
    else:
        for args in jobs_args:
            rows.append(_safe_run_fold(args))
    ok = [r for r in rows if "error" not in r]
    accs = np.asarray([r["acc"] for r in ok])
    aucs = np.asarray([r["auc"] for r in ok if r["auc"] is not None])
    return CvResult(
        rows=rows,
        mean_acc=float(accs.mean()) if len(accs) else float("nan"),
        std_acc=float(accs.std()) if len(accs) else float("nan"),
        mean_auc=float(aucs.mean()) if len(aucs) else float("nan"),
        std_auc=float(aucs.std()) if len(aucs) else float("nan"),
    )


def _safe_run_fold(args):
    fold_idx = args[6]
    try:
        return _run_fold(args)
    except Exception as exc:  # keep remaining folds running
        logger.exception("fold %d failed", fold_idx)
        return {"fold": fold_idx, "error": f"{type(exc).__name__}: {exc}"}
