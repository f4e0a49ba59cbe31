"""Metrics (ACC, rank-statistic AUC), correct-rate bucket analysis, ablation
variants, and the interpretability report around one prediction.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import concept_map as cmap_mod
from .model import forward


def accuracy(y_hat, y, threshold=0.5):
    """Fraction of correct decisions; a score equal to the threshold counts
    as a positive prediction (fixed tie convention for reproducibility)."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.size == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    return float(np.mean((y_hat >= threshold) == (y > 0.5)))


def _tied_ranks(x):
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(y_hat, y):
    """Mann-Whitney AUC: probability a random positive outranks a random
    negative, ties counted half. Returns None when only one class is present."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64) > 0.5
    n_pos = int(y.sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _tied_ranks(y_hat)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricReport:
    acc: float
    auc: float | None
    n: int
    per_fold: list = dataclasses.field(default_factory=list)

    def to_dict(self):
        return {"acc": self.acc, "auc": self.auc, "n": self.n, "per_fold": self.per_fold}


def metric_report(y_hat, y):
    return MetricReport(acc=accuracy(y_hat, y), auc=auc(y_hat, y), n=len(np.asarray(y_hat)))


# ---------------------------------------------------------------------------
# correct-rate buckets
# ---------------------------------------------------------------------------


@dataclass
class BucketReport:
    bands: list  # (lo, hi) pairs
    accuracy: list  # per band, None when empty
    share: list  # per band fraction of bucketed interactions
    counts: list
    unassigned: int  # targets whose question has no known rate

    def to_dict(self):
        return {
            "bands": [list(b) for b in self.bands],
            "accuracy": self.accuracy,
            "share": self.share,
            "counts": self.counts,
            "unassigned": self.unassigned,
        }


def decile_bands():
    edges = np.linspace(0.0, 1.0, 11)
    return [(float(edges[i]), float(edges[i + 1])) for i in range(10)]


def bucket_by_correct_rate(y_hat, y, question_ids, stats, bands=None, threshold=0.5):
    """Per-band accuracy over targets grouped by their question's average
    correct rate, plus each band's share of the bucketed interactions.

    Band membership is lo <= rate < hi, with the final band closed above so
    that bands partitioning [0, 1] cover rate = 1.
    """
    bands = bands if bands is not None else decile_bands()
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    question_ids = np.asarray(question_ids)
    rates = np.array(
        [stats.rate(int(q)) if stats.rate(int(q)) is not None else np.nan for q in question_ids]
    )
    known = ~np.isnan(rates)
    counts, accs = [], []
    hi_max = max(b[1] for b in bands)
    for lo, hi in bands:
        in_band = known & (rates >= lo) & ((rates < hi) | ((hi == hi_max) & (rates == hi)))
        n = int(in_band.sum())
        counts.append(n)
        accs.append(accuracy(y_hat[in_band], y[in_band], threshold) if n else None)
    total = sum(counts)
    share = [c / total if total else 0.0 for c in counts]
    return BucketReport(
        bands=list(bands),
        accuracy=accs,
        share=share,
        counts=counts,
        unassigned=int((~known).sum()),
    )


# ---------------------------------------------------------------------------
# ablation variants
# ---------------------------------------------------------------------------

VARIANT_KINDS = ("noOpt", "noUnc", "noMap", "noTopK")


@dataclass(frozen=True)
class AblationVariant:
    """Exactly the documented configuration delta, nothing else."""

    kind: str

    def apply(self, model_config):
        if self.kind == "noOpt":
            # binary responses via two shared correct/wrong embeddings;
            # the unchosen path is disabled with the option table
            return dataclasses.replace(model_config, use_options=False)
        if self.kind == "noUnc":
            return dataclasses.replace(model_config, lam=0.0)
        if self.kind == "noMap":
            return dataclasses.replace(model_config, use_map=False)
        if self.kind == "noTopK":
            return dataclasses.replace(model_config, top_k=model_config.n_concepts)
        raise ValueError(f"unknown ablation kind {self.kind!r}")


def build_variant(kind):
    if kind not in VARIANT_KINDS:
        raise ValueError(f"unknown ablation kind {kind!r}; expected one of {VARIANT_KINDS}")
    return AblationVariant(kind=kind)


# ---------------------------------------------------------------------------
# interpretability report
# ---------------------------------------------------------------------------


@dataclass
class ExplainReport:
    target_question: int
    y_hat: float
    ability: float
    difficulty: float
    selected_concepts: list
    relevance: list  # (concept, weight) over the selected set
    mastery: list  # per-concept scalar, full vector
    question_concepts: list  # tagged concept set of the target
    neighborhood_edges: list  # concept-map edges touching the selected set

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def explain(model, sequence, target_question, cmap, question_meta=None, prefix_len=None):
    """Full IRT decomposition of one prediction plus the concept-map
    neighborhood of the selected concepts."""
    pred, state = forward(
        sequence, target_question, model, cmap, prefix_len=prefix_len, return_state=True
    )
    tagged = sorted(question_meta.concept_ids) if question_meta is not None else []
    relevance = [
        (int(c), float(pred.relevance[c])) for c in pred.selected_concepts
    ]
    return ExplainReport(
        target_question=int(target_question),
        y_hat=pred.y_hat,
        ability=pred.ability,
        difficulty=pred.difficulty,
        selected_concepts=list(pred.selected_concepts),
        relevance=relevance,
        mastery=[float(v) for v in state.mastery],
        question_concepts=[int(c) for c in tagged],
        neighborhood_edges=[list(e) for e in cmap.neighborhood(pred.selected_concepts)],
    )


def _mastery_color(value, lo, hi):
    """Map a mastery scalar onto a red -> white -> green hex color."""
    span = max(hi - lo, 1e-9)
    t = min(max((value - lo) / span, 0.0), 1.0)
    if t < 0.5:
        r, g, b = 255, int(255 * (2 * t)), int(255 * (2 * t))
    else:
        r, g, b = int(255 * (2 - 2 * t)), 255, int(255 * (2 - 2 * t))
    return f"#{r:02x}{g:02x}{b:02x}"


def explain_to_dot(report, cmap):
    """DOT rendering of the selected-concept neighborhood, nodes colored by
    mastery and the target question's tagged concepts highlighted."""
    nodes = set(report.selected_concepts)
    for i, j in report.neighborhood_edges:
        nodes.update((i, j))
    mastery = report.mastery
    lo, hi = (min(mastery), max(mastery)) if mastery else (0.0, 1.0)
    colors = {n: _mastery_color(mastery[n], lo, hi) for n in nodes}
    labels = {
        n: f"c{n}\\nm={mastery[n]:.2f}" for n in nodes
    }
    sub = cmap_mod.ConceptMap(
        concept_count=cmap.concept_count,
        edges=tuple(sorted(tuple(e) for e in report.neighborhood_edges)),
        source=cmap.source,
    )
    return cmap_mod.to_dot(
        sub, node_labels=labels, node_colors=colors, highlight=report.question_concepts
    )


def render_explain_png(report, cmap, path):
    """Draw the neighborhood with matplotlib (circular layout) to a PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    nodes = sorted(
        set(report.selected_concepts)
        | {i for e in report.neighborhood_edges for i in e}
    )
    if not nodes:
        nodes = list(report.question_concepts) or [0]
    angle = {n: 2 * np.pi * i / len(nodes) for i, n in enumerate(nodes)}
    xy = {n: (np.cos(a), np.sin(a)) for n, a in angle.items()}
    mastery = report.mastery
    lo, hi = (min(mastery), max(mastery)) if mastery else (0.0, 1.0)
    fig, ax = plt.subplots(figsize=(6, 6))
    for i, j in report.neighborhood_edges:
        if i in xy and j in xy:
            ax.annotate(
                "",
                xy=xy[j],
                xytext=xy[i],
                arrowprops=dict(arrowstyle="-|>", color="gray", lw=1.0),
            )
    for n in nodes:
        x, y = xy[n]
        edge = "goldenrod" if n in report.question_concepts else "black"
        ax.scatter(
            [x], [y], s=900, c=[_mastery_color(mastery[n], lo, hi)],
            edgecolors=edge, linewidths=2, zorder=3,
        )
        ax.text(x, y, f"c{n}\n{mastery[n]:.2f}", ha="center", va="center", fontsize=8, zorder=4)
    ax.set_title(
        f"target q{report.target_question}: y_hat={report.y_hat:.3f} "
        f"(ability {report.ability:.3f}, difficulty {report.difficulty:.3f})"
    )
    ax.set_xlim(-1.4, 1.4)
    ax.set_ylim(-1.4, 1.4)
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def paired_ttest(a, b):
    """Two-sided paired t-test; returns (statistic, p_value)."""
    from scipy import stats as scipy_stats

    res = scipy_stats.ttest_rel(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    return float(res.statistic), float(res.pvalue)
