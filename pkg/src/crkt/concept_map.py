"""Directed concept graph: construction, statistical inference, normalization.

The graph can be authored (edge list from content managers) or inferred from
logs: count how often a question tagged with concept i immediately precedes a
*correctly answered* question tagged with concept j, row-normalize the counts
(correct matrix V), min-max normalize globally (transition matrix V'), and
keep edges whose V' entry exceeds the mean of all |C|^2 entries.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConceptMap:
    concept_count: int
    edges: tuple  # sorted tuple of (src, dst), no self-loops
    source: str = "authored"  # authored | inferred

    @property
    def n_edges(self):
        return len(self.edges)

    def edge_arrays(self):
        """Edges as (src, dst) int64 arrays (empty arrays when edgeless)."""
        if not self.edges:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        arr = np.asarray(self.edges, dtype=np.int64)
        return arr[:, 0], arr[:, 1]

    def neighborhood(self, concepts):
        """Edges touching any of the given concepts."""
        wanted = set(concepts)
        return [e for e in self.edges if e[0] in wanted or e[1] in wanted]


@dataclass
class TransitionStats:
    counts: np.ndarray  # n_ij, (C, C) non-negative ints
    correct_matrix: np.ndarray  # V, row-normalized counts
    transition_matrix: np.ndarray  # V', global min-max normalization of V
    threshold: float  # mean over all C^2 entries of V'
    degenerate: bool = False
    diagnostic: str = ""

    def to_dict(self):
        return {
            "counts": self.counts.tolist(),
            "correct_matrix": self.correct_matrix.tolist(),
            "transition_matrix": self.transition_matrix.tolist(),
            "threshold": self.threshold,
            "degenerate": self.degenerate,
            "diagnostic": self.diagnostic,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


@dataclass
class WeightedAdjacency:
    matrix: np.ndarray
    normalized: bool = False


def build_from_edges(concept_count, edge_list, source="authored"):
    """Deduplicate a directed edge list; self-loops are dropped with a warning."""
    edges = set()
    for i, j in edge_list:
        i, j = int(i), int(j)
        if not (0 <= i < concept_count and 0 <= j < concept_count):
            raise ValueError(f"edge ({i}, {j}) outside [0, {concept_count})")
        if i == j:
            logger.warning("dropping self-loop edge (%d, %d)", i, j)
            continue
        edges.add((i, j))
    return ConceptMap(concept_count=concept_count, edges=tuple(sorted(edges)), source=source)


def transition_counts(bundle):
    """n_ij: adjacent pairs within a sequence where the later answer is correct.

    For each consecutive (t, t+1) with interaction t+1 correct, every concept
    of question_t crossed with every concept of question_{t+1} is counted;
    the earlier answer's correctness does not matter.
    """
    C = bundle.concept_count
    counts = np.zeros((C, C), dtype=np.int64)
    for seq in bundle.sequences:
        recs = seq.interactions
        for a, b in zip(recs, recs[1:]):
            if not b.correct:
                continue
            for ci in bundle.questions[a.question_id].concept_ids:
                for cj in bundle.questions[b.question_id].concept_ids:
                    counts[ci, cj] += 1
    return counts


def infer_statistical_map(bundle):
    """Infer a concept map from the logs; returns (ConceptMap, TransitionStats)."""
    if not any(len(s) >= 2 for s in bundle.sequences):
        raise ValueError("need at least one sequence with >= 2 interactions")
    counts = transition_counts(bundle)
    C = bundle.concept_count
    row_sums = counts.sum(axis=1, keepdims=True)
    V = np.divide(
        counts, row_sums, out=np.zeros((C, C), dtype=np.float64), where=row_sums > 0
    )
    vmin, vmax = V.min(), V.max()
    if vmax == vmin:
        diag = (
            "degenerate min-max normalization: max(V) == min(V) "
            f"(= {vmax}); no edges inferred"
        )
        logger.warning(diag)
        stats = TransitionStats(
            counts=counts,
            correct_matrix=V,
            transition_matrix=np.zeros((C, C)),
            threshold=0.0,
            degenerate=True,
            diagnostic=diag,
        )
        return ConceptMap(C, edges=(), source="inferred"), stats
    Vp = (V - vmin) / (vmax - vmin)
    threshold = float(Vp.mean())
    src, dst = np.nonzero(Vp > threshold)
    edges = tuple(sorted((int(i), int(j)) for i, j in zip(src, dst) if i != j))
    stats = TransitionStats(
        counts=counts,
        correct_matrix=V,
        transition_matrix=Vp,
        threshold=threshold,
    )
    return ConceptMap(C, edges=edges, source="inferred"), stats


def question_edge_weights(target_question_emb, concept_embs, cmap, f_intensity):
    """Per-edge non-negative weights conditioned on the target question.

    For each stored edge (i, j): A_ij = ReLU(f_intensity([q (+) c_i (+) c_j]));
    all entries off the edge set stay 0. `f_intensity` maps a batch of
    concatenated (d_q + 2*d_c) vectors to scalars.
    """
    target_question_emb = np.asarray(target_question_emb, dtype=np.float64)
    concept_embs = np.asarray(concept_embs, dtype=np.float64)
    C = cmap.concept_count
    A = np.zeros((C, C))
    if not cmap.edges:
        return WeightedAdjacency(matrix=A, normalized=False)
    src, dst = cmap.edge_arrays()
    feats = np.concatenate(
        [
            np.broadcast_to(target_question_emb, (len(src), target_question_emb.shape[-1])),
            concept_embs[src],
            concept_embs[dst],
        ],
        axis=1,
    )
    scores = np.asarray(f_intensity(feats), dtype=np.float64).reshape(len(src))
    A[src, dst] = np.maximum(scores, 0.0)
    return WeightedAdjacency(matrix=A, normalized=False)


def normalize_adjacency(adj):
    """Symmetric degree normalization with self-connections.

    A_hat = A + I; D_hat = diag(row sums of A_hat); returns
    D_hat^{-1/2} A_hat D_hat^{-1/2} (row sums are >= 1, never zero).
    """
    if adj.normalized:
        raise ValueError("adjacency already normalized")
    A = np.asarray(adj.matrix, dtype=np.float64)
    if (A < 0).any():
        raise ValueError("adjacency must be non-negative")
    A_hat = A + np.eye(A.shape[0])
    dinv = A_hat.sum(axis=1) ** -0.5
    normalized = A_hat * dinv[:, None] * dinv[None, :]
    return WeightedAdjacency(matrix=normalized, normalized=True)


# ---------------------------------------------------------------------------
# persistence / export
# ---------------------------------------------------------------------------


def write_edge_csv(cmap, path):
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source_concept", "target_concept"])
        for i, j in cmap.edges:
            writer.writerow([i, j])
    return path


def to_dot(cmap, node_labels=None, node_colors=None, highlight=()):
    """Render the graph (or a sub-graph) as a DOT document string."""
    node_labels = node_labels or {}
    node_colors = node_colors or {}
    highlight = set(highlight)
    nodes = set()
    for i, j in cmap.edges:
        nodes.update((i, j))
    nodes.update(node_labels)
    nodes.update(node_colors)
    lines = ["digraph concept_map {", "  rankdir=LR;"]
    for n in sorted(nodes):
        attrs = [f'label="{node_labels.get(n, f"c{n}")}"']
        if n in node_colors:
            attrs.append(f'style=filled fillcolor="{node_colors[n]}"')
        if n in highlight:
            attrs.append("penwidth=2 color=goldenrod")
        lines.append(f"  c{n} [{' '.join(attrs)}];")
    for i, j in sorted(cmap.edges):
        lines.append(f"  c{i} -> c{j};")
    lines.append("}")
    return "\n".join(lines)
