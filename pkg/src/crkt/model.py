"""Model core: disentangled response encoding, temporal maxout attention,
concept-map GNN, and IRT-style prediction, with O(t)-per-step cached inference.

The pipeline per target question: encode chosen/unchosen responses ->
causal maxout attention over questions and responses (knowledge retriever) ->
per-concept states -> question-conditioned edge weights + normalized
adjacency -> GNN down to one scalar mastery per concept -> top-k relevance
softmax against the target question -> sigmoid(ability - difficulty).

Parameters live in a flat name -> Tensor dict; training differentiates
through the whole pipeline via the autodiff engine, while InferenceSession
mirrors the forward math in plain numpy over cached attention rows.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import concept_map as cmap_mod
from . import kernels
from .autodiff import Tensor, stable_sigmoid

CHECKPOINT_VERSION = 1

_DISTANCE_FNS = {
    "pos_abs": lambda T: np.abs(
        np.arange(T, dtype=np.float64)[:, None] - np.arange(T, dtype=np.float64)[None, :]
    ),
    "zero": lambda T: np.zeros((T, T)),
}


def distance_matrix(name, T):
    try:
        return _DISTANCE_FNS[name](T)
    except KeyError:
        raise ValueError(f"unknown distance function {name!r}") from None


def distance_row(name, t):
    """Distances from step t to steps 0..t (one new attention row)."""
    return distance_matrix(name, t + 1)[t]


@dataclass
class ModelConfig:
    question_ids: tuple
    option_counts: tuple
    n_concepts: int
    d_q: int = 32
    d_c: int = 32
    d_g: int = 32
    n_heads: int = 1
    gnn_layers: int = 2
    top_k: int = 10
    lam: float = 0.5
    distance: str = "pos_abs"
    use_options: bool = True
    use_map: bool = True
    gnn_final_sigmoid: bool = False

    def __post_init__(self):
        self.question_ids = tuple(int(q) for q in self.question_ids)
        self.option_counts = tuple(int(c) for c in self.option_counts)
        if len(self.question_ids) != len(self.option_counts):
            raise ValueError("question_ids and option_counts must align")
        if not 1 <= self.top_k <= self.n_concepts:
            raise ValueError("require 1 <= top_k <= n_concepts")
        if self.gnn_layers < 1:
            raise ValueError("require gnn_layers >= 1")
        if self.d_q % self.n_heads != 0:
            raise ValueError("d_q must be divisible by n_heads")
        if not 0.0 <= self.lam < 1.0:
            raise ValueError("require 0 <= lambda < 1 (0 only for the no-unchosen ablation)")
        if self.distance not in _DISTANCE_FNS:
            raise ValueError(f"unknown distance function {self.distance!r}")

    @property
    def n_questions(self):
        return len(self.question_ids)

    @classmethod
    def from_bundle(cls, bundle, **overrides):
        qids = tuple(sorted(bundle.questions))
        counts = tuple(bundle.questions[q].option_count for q in qids)
        kw = dict(question_ids=qids, option_counts=counts, n_concepts=bundle.concept_count)
        kw.update(overrides)
        if kw.get("top_k", 10) > bundle.concept_count:
            kw["top_k"] = bundle.concept_count
        return cls(**kw)

    def to_dict(self):
        return {
            "question_ids": list(self.question_ids),
            "option_counts": list(self.option_counts),
            "n_concepts": self.n_concepts,
            "d_q": self.d_q,
            "d_c": self.d_c,
            "d_g": self.d_g,
            "n_heads": self.n_heads,
            "gnn_layers": self.gnn_layers,
            "top_k": self.top_k,
            "lam": self.lam,
            "distance": self.distance,
            "use_options": self.use_options,
            "use_map": self.use_map,
            "gnn_final_sigmoid": self.gnn_final_sigmoid,
        }


@dataclass(frozen=True)
class PredictionOutput:
    """One prediction with its full IRT decomposition."""

    y_hat: float
    relevance: np.ndarray  # (C,), zero outside selected_concepts, sums to 1
    ability: float
    difficulty: float
    selected_concepts: tuple

    def to_dict(self):
        return {
            "y_hat": self.y_hat,
            "relevance": self.relevance.tolist(),
            "ability": self.ability,
            "difficulty": self.difficulty,
            "selected_concepts": list(self.selected_concepts),
        }


@dataclass(frozen=True)
class KnowledgeState:
    """Internals behind one prediction: latent h, concept states, mastery."""

    h: np.ndarray  # (d_q,)
    concept_states: np.ndarray  # (C, d_g), pre-GNN
    mastery: np.ndarray  # (C,), scalar per concept


def _prediction_output(m_hat, relevance, theta):
    m_hat = np.asarray(m_hat, dtype=np.float64)
    relevance = np.asarray(relevance, dtype=np.float64)
    ability = float(relevance @ m_hat)
    difficulty = float(theta)
    y_hat = float(stable_sigmoid(np.float64(ability - difficulty)))
    selected = tuple(int(i) for i in np.nonzero(relevance > 0.0)[0])
    return PredictionOutput(
        y_hat=y_hat,
        relevance=relevance,
        ability=ability,
        difficulty=difficulty,
        selected_concepts=selected,
    )


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _mlp_specs(cfg):
    return {
        "enc_correct": (cfg.d_q, cfg.d_q, cfg.d_q),
        "enc_wrong": (cfg.d_q, cfg.d_q, cfg.d_q),
        "enc_unchosen": (cfg.d_q, cfg.d_q, cfg.d_q),
        "concept": (cfg.d_q + cfg.d_c, cfg.d_g, cfg.d_g),
        "intensity": (cfg.d_q + 2 * cfg.d_c, cfg.d_c, 1),
        "difficulty": (cfg.d_q, cfg.d_q, 1),
    }


class CrktModel:
    """Parameter container plus vocabulary index maps."""

    def __init__(self, config, seed=0, params=None):
        self.config = config
        self.qid_to_row = {q: i for i, q in enumerate(config.question_ids)}
        counts = np.asarray(config.option_counts, dtype=np.int64)
        self.opt_offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.option_counts = counts
        self.n_option_rows = int(counts.sum())
        self.opt_owner = np.repeat(np.arange(len(counts)), counts)
        self.params = params if params is not None else self._init_params(seed)

    # -- init ---------------------------------------------------------------

    def _init_params(self, seed):
        cfg = self.config
        rng = np.random.Generator(np.random.PCG64(seed))

        def emb(n, d):
            return Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=(n, d)), requires_grad=True)

        def weight(shape):
            fan_in = shape[0]
            return Tensor(
                rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape), requires_grad=True
            )

        params = {}
        params["question_emb"] = emb(cfg.n_questions, cfg.d_q)
        params["concept_emb"] = emb(cfg.n_concepts, cfg.d_c)
        if cfg.use_options:
            params["option_emb"] = emb(self.n_option_rows, cfg.d_q)
        else:
            params["binary_emb"] = emb(2, cfg.d_q)
        for name, (din, dh, dout) in _mlp_specs(cfg).items():
            if name == "enc_unchosen" and not cfg.use_options:
                continue
            params[f"{name}_w1"] = weight((din, dh))
            params[f"{name}_b1"] = Tensor(np.zeros(dh), requires_grad=True)
            params[f"{name}_w2"] = weight((dh, dout))
            params[f"{name}_b2"] = Tensor(np.zeros(dout), requires_grad=True)
        for prefix in ("attn1", "attn2", "attn3"):
            for mat in ("wq", "wk", "wv"):
                params[f"{prefix}_{mat}"] = weight((cfg.d_q, cfg.d_q))
        params["eta_raw"] = Tensor(np.float64(-2.0), requires_grad=True)
        if cfg.use_map:
            for layer in range(cfg.gnn_layers):
                dout = 1 if layer == cfg.gnn_layers - 1 else cfg.d_g
                params[f"gnn_w{layer}"] = weight((cfg.d_g, dout))
        else:
            params["nomap_head"] = weight((cfg.d_g, 1))
        params["w_r"] = weight((cfg.d_q, cfg.d_c))
        return params

    # -- bookkeeping ----------------------------------------------------------

    def parameters(self):
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def question_row(self, question_id):
        try:
            return self.qid_to_row[int(question_id)]
        except KeyError:
            raise ValueError(f"unknown question id {question_id}") from None

    def option_row(self, question_row, option):
        return int(self.opt_offsets[question_row]) + int(option)

    def eta(self):
        """Non-negative temporal decay strength (softplus of the raw scalar)."""
        return ad.softplus(self.params["eta_raw"])

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        manifest = {
            "format_version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "params": sorted(self.params),
        }
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("manifest.json", json.dumps(manifest, indent=2))
            for name in sorted(self.params):
                buf = io.BytesIO()
                np.save(buf, self.params[name].data.astype("<f4"), allow_pickle=False)
                zf.writestr(f"params/{name}.npy", buf.getvalue())
        return path

    @classmethod
    def load(cls, path):
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            version = manifest.get("format_version")
            if version != CHECKPOINT_VERSION:
                raise ValueError(
                    f"unsupported checkpoint format version {version!r} "
                    f"(expected {CHECKPOINT_VERSION})"
                )
            config = ModelConfig(**manifest["config"])
            params = {}
            for name in manifest["params"]:
                arr = np.load(io.BytesIO(zf.read(f"params/{name}.npy")), allow_pickle=False)
                params[name] = Tensor(arr.astype(np.float64), requires_grad=True)
        return cls(config, params=params)


# ---------------------------------------------------------------------------
# building blocks (single-sequence surfaces; the batched path composes the
# same math vectorized)
# ---------------------------------------------------------------------------


def mlp2(params, name, x):
    """Two-layer MLP with ReLU between the layers."""
    x = ad.as_tensor(x)
    h = ad.relu(x @ params[f"{name}_w1"] + params[f"{name}_b1"])
    return h @ params[f"{name}_w2"] + params[f"{name}_b2"]


def encode_chosen(option_vec, correct, params):
    """Correctness-aware encoding: route through the correct or wrong MLP."""
    x = ad.as_tensor(option_vec)
    flat = x.reshape(1, -1) if x.ndim == 1 else x
    out = mlp2(params, "enc_correct" if correct else "enc_wrong", flat)
    return out.reshape(-1) if x.ndim == 1 else out


def encode_unchosen(unchosen_vecs, params):
    """Encode the mean embedding of the unchosen options (zero if none)."""
    vecs = [np.asarray(v, dtype=np.float64) for v in unchosen_vecs]
    if vecs:
        mean = np.mean(vecs, axis=0)
    else:
        mean = np.zeros(params["enc_unchosen_w1"].shape[0])
    out = mlp2(params, "enc_unchosen", ad.as_tensor(mean).reshape(1, -1))
    return out.reshape(-1)


def disentangle(chosen_enc, unchosen_enc, lam):
    """Chosen minus lambda times unchosen."""
    return ad.as_tensor(chosen_enc) - float(lam) * ad.as_tensor(unchosen_enc)


def maxout(scores):
    """Softmax divided by its own maximum: the top weight is exactly 1."""
    scores = ad.as_tensor(scores)
    if scores.size == 0:
        raise ValueError("maxout requires a non-empty input")
    p = ad.softmax(scores, axis=-1)
    return p / p.max(axis=-1, keepdims=True)


def _causal_mask(T):
    return np.tril(np.ones((T, T), dtype=bool))


def attention_max(Q, K, V, positions=None, eta=0.0, causal_mask=None):
    """Temporal maxout attention over one sequence (T x d inputs).

    Raw score = (q . k / sqrt(d_k)) * exp(-eta * |pos_i - pos_j|) over
    unmasked keys; per-row weights are maxout-normalized (they need not sum
    to 1). The mask must be causal; None means the standard lower triangle.
    """
    Q, K, V = ad.as_tensor(Q), ad.as_tensor(K), ad.as_tensor(V)
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ValueError("attention_max expects 2-D Q, K, V")
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise ValueError("attention_max dimension mismatch")
    T = Q.shape[0]
    if positions is None:
        positions = np.arange(T)
    positions = np.asarray(positions, dtype=np.float64)
    dist = np.abs(positions[:, None] - positions[None, :])
    if causal_mask is None:
        causal_mask = _causal_mask(T)
    causal_mask = np.asarray(causal_mask, dtype=bool)
    if causal_mask.shape != (T, T):
        raise ValueError("mask shape mismatch")
    if causal_mask[~_causal_mask(T)].any():
        raise ValueError("mask must be causal: no attention to future keys")
    eta_t = ad.as_tensor(eta)
    out = _attention_op(
        Q.reshape(1, 1, T, -1),
        K.reshape(1, 1, T, -1),
        V.reshape(1, 1, T, -1),
        eta_t,
        dist,
        causal_mask[None, :, :],
    )
    return out.reshape(T, -1)


def _attention_op(q, k, v, eta, dist, mask):
    """Autodiff node around the (numba|numpy) attention kernels."""
    out, _, p = kernels.attention_forward(q.data, k.data, v.data, float(eta.data), dist, mask)

    def vjp(g):
        dq, dk, dv, deta = kernels.attention_backward(
            q.data, k.data, v.data, float(eta.data), dist, mask, p, g
        )
        return dq, dk, dv, np.float64(deta)

    return Tensor._make(out, (q, k, v, eta), vjp)


def _split_heads(x, n_heads):
    B, T, D = x.shape
    return x.reshape(B, T, n_heads, D // n_heads).swapaxes(1, 2)


def _merge_heads(x):
    B, H, T, dh = x.shape
    return x.swapaxes(1, 2).reshape(B, T, H * dh)


def _attn_apply(params, prefix, xq, xk, xv, eta, dist, mask, n_heads):
    Q = xq @ params[f"{prefix}_wq"]
    K = xk @ params[f"{prefix}_wk"]
    V = xv @ params[f"{prefix}_wv"]
    out = _attention_op(
        _split_heads(Q, n_heads), _split_heads(K, n_heads), _split_heads(V, n_heads),
        eta, dist, mask,
    )
    return _merge_heads(out)


def knowledge_retriever(question_embs, response_embs, model):
    """Causal retrieval over one sequence: returns (context questions, h).

    Self-attention over questions gives q_hat, over responses gives d_hat;
    h_t attends q_hat (query, key) against d_hat (value), all causal.
    """
    q = ad.as_tensor(question_embs)
    d = ad.as_tensor(response_embs)
    if q.shape[0] != d.shape[0]:
        raise ValueError("question/response sequence length mismatch")
    T = q.shape[0]
    cfg = model.config
    dist = distance_matrix(cfg.distance, T)
    mask = _causal_mask(T)[None, :, :]
    eta = model.eta()
    q3 = q.reshape(1, T, -1)
    d3 = d.reshape(1, T, -1)
    qhat = _attn_apply(model.params, "attn1", q3, q3, q3, eta, dist, mask, cfg.n_heads)
    dhat = _attn_apply(model.params, "attn2", d3, d3, d3, eta, dist, mask, cfg.n_heads)
    h = _attn_apply(model.params, "attn3", qhat, qhat, dhat, eta, dist, mask, cfg.n_heads)
    return qhat.reshape(T, -1), h.reshape(T, -1)


def concept_states(h_t, concept_embs, params):
    """Row i = f_concept([h_t (+) c_i]) -> (C, d_g)."""
    h = ad.as_tensor(h_t).reshape(1, -1)
    c = ad.as_tensor(concept_embs)
    C = c.shape[0]
    joined = ad.concat([ad.broadcast_to(h, (C, h.shape[1])), c], axis=1)
    return mlp2(params, "concept", joined)


def gnn_propagate(M0, A_norm, weights, final_sigmoid=False):
    """L-layer propagation M <- act(A_norm M W); the last layer has width 1.

    Hidden activations are ReLU; the final layer is identity (mastery values
    stay unbounded) unless final_sigmoid is set.
    """
    if not A_norm.normalized:
        raise ValueError("adjacency must be normalized first")
    A = ad.as_tensor(A_norm.matrix)
    M = ad.as_tensor(M0)
    for layer, W in enumerate(weights):
        W = ad.as_tensor(W)
        if layer > 0 and weights[layer - 1].shape[-1] != W.shape[0]:
            raise ValueError("GNN layer width chain mismatch")
        M = A @ M @ W
        last = layer == len(weights) - 1
        if not last:
            M = ad.relu(M)
        elif final_sigmoid:
            M = ad.sigmoid(M)
    if M.shape[-1] != 1:
        raise ValueError("final GNN layer must have output width 1")
    return M.reshape(-1)


def relevance_scores(target_q, concept_embs, w_r):
    """r_i = sigmoid(q^T W_r c_i) in (0, 1)."""
    q = ad.as_tensor(target_q).reshape(1, -1)
    c = ad.as_tensor(concept_embs)
    w_r = ad.as_tensor(w_r)
    return ad.sigmoid((q @ w_r) @ c.swapaxes(0, 1)).reshape(-1)


def topk_support_mask(r_values, k):
    """Boolean mask of entries >= the k-th largest (ties at the bound kept)."""
    r_values = np.asarray(r_values, dtype=np.float64)
    C = r_values.shape[-1]
    if not 1 <= k <= C:
        raise ValueError("require 1 <= k <= number of concepts")
    kth = np.partition(r_values, C - k, axis=-1)[..., C - k]
    return r_values >= kth[..., None]


def topk_relevance(r, k):
    """Softmax over the top-k relevance scores; masked entries get exactly 0."""
    r = ad.as_tensor(r)
    mask = topk_support_mask(r.data, k)
    return ad.softmax(ad.where_mask(mask, r, -np.inf), axis=-1)


def question_difficulty(target_q, params):
    """theta = sigmoid(f_difficulty(q)), strictly inside (0, 1)."""
    q = ad.as_tensor(target_q).reshape(1, -1)
    return ad.sigmoid(mlp2(params, "difficulty", q)).reshape(())


def predict(m_hat, relevance_topk, theta):
    """IRT step: ability = relevance . mastery; y = sigmoid(ability - theta)."""
    m_hat = m_hat.data if isinstance(m_hat, Tensor) else m_hat
    rel = relevance_topk.data if isinstance(relevance_topk, Tensor) else relevance_topk
    theta = float(theta.data) if isinstance(theta, Tensor) else float(theta)
    return _prediction_output(m_hat, rel, theta)


# ---------------------------------------------------------------------------
# batched forward
# ---------------------------------------------------------------------------


@dataclass
class SequenceBatch:
    q_rows: np.ndarray  # (B, T) question table rows, 0 on padding
    opt_rows: np.ndarray  # (B, T) option table rows, 0 on padding
    y: np.ndarray  # (B, T) float 0/1
    lengths: np.ndarray  # (B,)
    sequences: list  # originating StudentSequence objects

    @property
    def batch_size(self):
        return self.q_rows.shape[0]

    @property
    def max_len(self):
        return self.q_rows.shape[1]


def make_batch(model, sequences):
    B = len(sequences)
    T = max(len(s) for s in sequences)
    q_rows = np.zeros((B, T), dtype=np.int64)
    opt_rows = np.zeros((B, T), dtype=np.int64)
    y = np.zeros((B, T), dtype=np.float64)
    lengths = np.zeros(B, dtype=np.int64)
    for b, seq in enumerate(sequences):
        lengths[b] = len(seq)
        for t, rec in enumerate(seq.interactions):
            row = model.question_row(rec.question_id)
            q_rows[b, t] = row
            opt_rows[b, t] = model.option_row(row, rec.chosen_option)
            y[b, t] = 1.0 if rec.correct else 0.0
    return SequenceBatch(q_rows=q_rows, opt_rows=opt_rows, y=y, lengths=lengths, sequences=sequences)


@dataclass
class TargetSpec:
    seq_idx: np.ndarray  # (N,) row in the batch
    state_pos: np.ndarray  # (N,) h row used as knowledge state
    q_rows: np.ndarray  # (N,) target question table rows
    y_true: np.ndarray | None = None  # (N,) labels when targets are interactions
    positions: np.ndarray | None = None  # (N,) target positions (for reporting)


def next_step_targets(batch):
    """Training targets: position t >= 1 predicted from prefix 0..t-1."""
    seq_idx, state_pos, q_rows, y_true, positions = [], [], [], [], []
    for b in range(batch.batch_size):
        for t in range(1, int(batch.lengths[b])):
            seq_idx.append(b)
            state_pos.append(t - 1)
            q_rows.append(batch.q_rows[b, t])
            y_true.append(batch.y[b, t])
            positions.append(t)
    return TargetSpec(
        seq_idx=np.asarray(seq_idx, dtype=np.int64),
        state_pos=np.asarray(state_pos, dtype=np.int64),
        q_rows=np.asarray(q_rows, dtype=np.int64),
        y_true=np.asarray(y_true, dtype=np.float64),
        positions=np.asarray(positions, dtype=np.int64),
    )


@dataclass
class ForwardOutput:
    y_hat: Tensor  # (N,)
    r_sig: Tensor  # (N, C) pre-top-k relevance sigmoids
    rel: Tensor  # (N, C) top-k softmax relevance
    m_hat: Tensor  # (N, C) mastery
    m0: Tensor  # (N, C, d_g) pre-GNN concept states
    ability: Tensor  # (N,)
    theta: Tensor  # (N,)
    h_all: Tensor  # (B, T, d_q)
    h_last: Tensor  # (B, d_q)
    targets: TargetSpec


def _encode_batch(model, batch):
    """Disentangled response representations d_t and question embeddings."""
    cfg = model.config
    P = model.params
    q_e = ad.rows(P["question_emb"], batch.q_rows)  # (B,T,dq)
    ymask = batch.y[..., None]
    if cfg.use_options:
        o_e = ad.rows(P["option_emb"], batch.opt_rows)
        chosen = mlp2(P, "enc_correct", o_e) * ymask + mlp2(P, "enc_wrong", o_e) * (1.0 - ymask)
        # mean unchosen embedding: (sum over the question's options - chosen) / (m - 1)
        qsum = ad.segment_sum(P["option_emb"], model.opt_owner, cfg.n_questions)
        counts = model.option_counts[batch.q_rows][..., None].astype(np.float64)
        ubar = (ad.rows(qsum, batch.q_rows) - o_e) * (1.0 / np.maximum(counts - 1.0, 1.0))
        ubar = ubar * (counts > 1.0)  # empty unchosen set -> zero vector
        d = chosen - cfg.lam * mlp2(P, "enc_unchosen", ubar)
    else:
        o_e = ad.rows(P["binary_emb"], batch.y.astype(np.int64))
        d = mlp2(P, "enc_correct", o_e) * ymask + mlp2(P, "enc_wrong", o_e) * (1.0 - ymask)
    return q_e, d


def _batch_mask(batch):
    T = batch.max_len
    causal = _causal_mask(T)[None, :, :]
    valid = np.arange(T)[None, :] < batch.lengths[:, None]  # (B,T)
    return causal & valid[:, None, :] & valid[:, :, None]


def forward_states(model, batch):
    """Encoder + retriever only: h rows for every position (and the last row)."""
    cfg = model.config
    q_e, d = _encode_batch(model, batch)
    dist = distance_matrix(cfg.distance, batch.max_len)
    mask = _batch_mask(batch)
    eta = model.eta()
    qhat = _attn_apply(model.params, "attn1", q_e, q_e, q_e, eta, dist, mask, cfg.n_heads)
    dhat = _attn_apply(model.params, "attn2", d, d, d, eta, dist, mask, cfg.n_heads)
    h_all = _attn_apply(model.params, "attn3", qhat, qhat, dhat, eta, dist, mask, cfg.n_heads)
    B, T = batch.batch_size, batch.max_len
    flat = h_all.reshape(B * T, cfg.d_q)
    h_last = ad.rows(flat, np.arange(B) * T + (batch.lengths - 1))
    return q_e, h_all, h_last


def forward_batch(model, batch, cmap, targets=None):
    """Full pipeline for a batch; one prediction per target."""
    cfg = model.config
    P = model.params
    if targets is None:
        targets = next_step_targets(batch)
    q_e, h_all, h_last = forward_states(model, batch)
    N = len(targets.seq_idx)
    C = cfg.n_concepts
    B, T = batch.batch_size, batch.max_len

    h_flat = h_all.reshape(B * T, cfg.d_q)
    h_sel = ad.rows(h_flat, targets.seq_idx * T + targets.state_pos)  # (N, dq)
    qt = ad.rows(P["question_emb"], targets.q_rows)  # (N, dq)

    # concept-level states m_{t,i} = f_concept([h (+) c_i])
    hN = ad.broadcast_to(h_sel.reshape(N, 1, cfg.d_q), (N, C, cfg.d_q))
    cN = ad.broadcast_to(P["concept_emb"].reshape(1, C, cfg.d_c), (N, C, cfg.d_c))
    m0 = mlp2(P, "concept", ad.concat([hN, cN], axis=2))  # (N, C, d_g)

    if cfg.use_map:
        src, dst = cmap.edge_arrays()
        E = len(src)
        if E > 0:
            qE = ad.broadcast_to(qt.reshape(N, 1, cfg.d_q), (N, E, cfg.d_q))
            ci = ad.broadcast_to(
                ad.rows(P["concept_emb"], src).reshape(1, E, cfg.d_c), (N, E, cfg.d_c)
            )
            cj = ad.broadcast_to(
                ad.rows(P["concept_emb"], dst).reshape(1, E, cfg.d_c), (N, E, cfg.d_c)
            )
            escore = ad.relu(mlp2(P, "intensity", ad.concat([qE, ci, cj], axis=2)))
            A = ad.scatter_edges(escore.reshape(N, E), src, dst, C)
        else:
            A = ad.as_tensor(np.zeros((N, C, C)))
        A_hat = A + np.eye(C)
        dinv = A_hat.sum(axis=2) ** -0.5  # row sums >= 1
        A_norm = A_hat * dinv.reshape(N, C, 1) * dinv.reshape(N, 1, C)
        M = m0
        for layer in range(cfg.gnn_layers):
            M = A_norm @ M @ P[f"gnn_w{layer}"]
            if layer < cfg.gnn_layers - 1:
                M = ad.relu(M)
            elif cfg.gnn_final_sigmoid:
                M = ad.sigmoid(M)
        m_hat = M.reshape(N, C)
    else:
        m_hat = (m0 @ P["nomap_head"]).reshape(N, C)

    r_sig = ad.sigmoid((qt @ P["w_r"]) @ P["concept_emb"].swapaxes(0, 1))  # (N, C)
    rel = ad.softmax(
        ad.where_mask(topk_support_mask(r_sig.data, cfg.top_k), r_sig, -np.inf), axis=-1
    )
    theta = ad.sigmoid(mlp2(P, "difficulty", qt)).reshape(N)
    ability = (rel * m_hat).sum(axis=1)
    y_hat = ad.sigmoid(ability - theta)
    return ForwardOutput(
        y_hat=y_hat,
        r_sig=r_sig,
        rel=rel,
        m_hat=m_hat,
        m0=m0,
        ability=ability,
        theta=theta,
        h_all=h_all,
        h_last=h_last,
        targets=targets,
    )


def forward(sequence, target_question, model, cmap, prefix_len=None, return_state=False):
    """Predict the target question after a sequence prefix (evaluation mode)."""
    interactions = getattr(sequence, "interactions", sequence)
    if prefix_len is not None:
        interactions = interactions[:prefix_len]
    if len(interactions) == 0:
        raise ValueError("forward requires a non-empty prefix")
    target_row = model.question_row(target_question)
    from .data import StudentSequence  # local import to avoid a cycle

    seq = StudentSequence("_prefix", tuple(interactions))
    with ad.no_grad():
        batch = make_batch(model, [seq])
        targets = TargetSpec(
            seq_idx=np.zeros(1, dtype=np.int64),
            state_pos=np.asarray([len(interactions) - 1], dtype=np.int64),
            q_rows=np.asarray([target_row], dtype=np.int64),
        )
        out = forward_batch(model, batch, cmap, targets)
    result = _prediction_output(out.m_hat.data[0], out.rel.data[0], float(out.theta.data[0]))
    if return_state:
        state = KnowledgeState(
            h=out.h_all.data[0, len(interactions) - 1].copy(),
            concept_states=out.m0.data[0].copy(),
            mastery=out.m_hat.data[0].copy(),
        )
        return result, state
    return result


def predict_sequences(model, sequences, cmap, batch_size=64):
    """Next-step predictions for every position >= 1 of every sequence.

    Returns flat numpy arrays: y_hat, y_true, question_id, seq_index, position.
    """
    y_hat, y_true, qids, seq_index, positions = [], [], [], [], []
    row_to_qid = np.asarray(model.config.question_ids, dtype=np.int64)
    with ad.no_grad():
        for start in range(0, len(sequences), batch_size):
            chunk = sequences[start : start + batch_size]
            batch = make_batch(model, chunk)
            out = forward_batch(model, batch, cmap)
            y_hat.append(out.y_hat.data)
            y_true.append(out.targets.y_true)
            qids.append(row_to_qid[out.targets.q_rows])
            seq_index.append(out.targets.seq_idx + start)
            positions.append(out.targets.positions)
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)
    return {
        "y_hat": cat(y_hat),
        "y_true": cat(y_true),
        "question_id": cat(qids).astype(np.int64) if qids else np.zeros(0, dtype=np.int64),
        "seq_index": cat(seq_index).astype(np.int64) if seq_index else np.zeros(0, dtype=np.int64),
        "position": cat(positions).astype(np.int64) if positions else np.zeros(0, dtype=np.int64),
    }


# ---------------------------------------------------------------------------
# incremental inference (plain numpy, cached attention rows)
# ---------------------------------------------------------------------------


def _np(params, name):
    return params[name].data


def _np_mlp2(params, name, x):
    h = np.maximum(x @ _np(params, f"{name}_w1") + _np(params, f"{name}_b1"), 0.0)
    return h @ _np(params, f"{name}_w2") + _np(params, f"{name}_b2")


def _np_softplus(x):
    return float(np.logaddexp(0.0, x))


class InferenceSession:
    """One student's cached inference state.

    Caches the projected keys/values of all three attention calls plus the
    context rows q_hat/d_hat, so each new step costs O(t * d) for attention
    and O(|C|^2) for the (per-question cached) concept-map head, instead of
    recomputing the full O(t^2) forward.
    """

    def __init__(self, model, cmap):
        self.model = model
        self.cmap = cmap
        cfg = model.config
        self.eta = _np_softplus(_np(model.params, "eta_raw"))
        self.H = cfg.n_heads
        self.dh = cfg.d_q // cfg.n_heads
        self._k = {name: [] for name in ("attn1", "attn2", "attn3")}
        self._v = {name: [] for name in ("attn1", "attn2", "attn3")}
        self._qhat_last = None
        self._h_last = None
        self._adj_cache = {}
        self._len = 0
        if cfg.use_options:
            P = model.params
            self._qsum = np.zeros((cfg.n_questions, cfg.d_q))
            np.add.at(self._qsum, model.opt_owner, _np(P, "option_emb"))

    def __len__(self):
        return self._len

    def _project(self, prefix, kind, x):
        return (x @ _np(self.model.params, f"{prefix}_{kind}")).reshape(self.H, self.dh)

    def _attend_row(self, prefix, q_row):
        t = self._len
        drow = distance_row(self.model.config.distance, t - 1)
        K = np.asarray(self._k[prefix])  # (t, H, dh)
        V = np.asarray(self._v[prefix])
        outs = []
        for h in range(self.H):
            out, _ = kernels.attention_step(
                q_row[h], np.ascontiguousarray(K[:, h]), np.ascontiguousarray(V[:, h]),
                self.eta, drow,
            )
            outs.append(out)
        return np.concatenate(outs)

    def append(self, interaction):
        """Ingest one interaction; updates all caches in O(t)."""
        model, cfg = self.model, self.model.config
        P = model.params
        qrow = model.question_row(interaction.question_id)
        y = bool(interaction.correct)
        q_e = _np(P, "question_emb")[qrow]
        if cfg.use_options:
            orow = model.option_row(qrow, interaction.chosen_option)
            o_e = _np(P, "option_emb")[orow]
            chosen = _np_mlp2(P, "enc_correct" if y else "enc_wrong", o_e[None])[0]
            m = int(model.option_counts[qrow])
            ubar = (self._qsum[qrow] - o_e) / max(m - 1, 1) if m > 1 else np.zeros(cfg.d_q)
            d = chosen - cfg.lam * _np_mlp2(P, "enc_unchosen", ubar[None])[0]
        else:
            o_e = _np(P, "binary_emb")[int(y)]
            d = _np_mlp2(P, "enc_correct" if y else "enc_wrong", o_e[None])[0]

        self._k["attn1"].append(self._project("attn1", "wk", q_e))
        self._v["attn1"].append(self._project("attn1", "wv", q_e))
        self._k["attn2"].append(self._project("attn2", "wk", d))
        self._v["attn2"].append(self._project("attn2", "wv", d))
        self._len += 1
        qhat = self._attend_row("attn1", self._project("attn1", "wq", q_e))
        dhat = self._attend_row("attn2", self._project("attn2", "wq", d))
        self._k["attn3"].append(self._project("attn3", "wk", qhat))
        self._v["attn3"].append(self._project("attn3", "wv", dhat))
        self._qhat_last = qhat
        self._h_last = self._attend_row("attn3", self._project("attn3", "wq", qhat))

    def _normalized_adjacency(self, qrow):
        cached = self._adj_cache.get(qrow)
        if cached is not None:
            return cached
        P = self.model.params
        q_e = _np(P, "question_emb")[qrow]
        adj = cmap_mod.question_edge_weights(
            q_e,
            _np(P, "concept_emb"),
            self.cmap,
            lambda feats: _np_mlp2(P, "intensity", feats),
        )
        norm = cmap_mod.normalize_adjacency(adj).matrix
        self._adj_cache[qrow] = norm
        return norm

    def predict(self, target_question):
        """PredictionOutput for the target given everything appended so far."""
        if self._len == 0:
            raise ValueError("session has no interactions yet")
        model, cfg = self.model, self.model.config
        P = model.params
        qrow = model.question_row(target_question)
        h = self._h_last
        c_all = _np(P, "concept_emb")
        joined = np.concatenate(
            [np.broadcast_to(h, (cfg.n_concepts, cfg.d_q)), c_all], axis=1
        )
        m0 = _np_mlp2(P, "concept", joined)  # (C, d_g)
        if cfg.use_map:
            A_norm = self._normalized_adjacency(qrow)
            M = m0
            for layer in range(cfg.gnn_layers):
                M = A_norm @ M @ _np(P, f"gnn_w{layer}")
                if layer < cfg.gnn_layers - 1:
                    M = np.maximum(M, 0.0)
                elif cfg.gnn_final_sigmoid:
                    M = stable_sigmoid(M)
            m_hat = M[:, 0]
        else:
            m_hat = (m0 @ _np(P, "nomap_head"))[:, 0]
        q_e = _np(P, "question_emb")[qrow]
        r = stable_sigmoid((q_e @ _np(P, "w_r")) @ c_all.T)
        mask = topk_support_mask(r, cfg.top_k)
        masked = np.where(mask, r, -np.inf)
        e = np.exp(masked - masked.max())
        rel = e / e.sum()
        theta = float(stable_sigmoid(_np_mlp2(P, "difficulty", q_e[None])[0, 0]))
        return _prediction_output(m_hat, rel, theta)


def infer_incremental(session, new_interaction, target_question):
    """Append one interaction and predict the target; equals forward() on the
    full prefix within 1e-6 per output field."""
    session.append(new_interaction)
    return session.predict(target_question)
