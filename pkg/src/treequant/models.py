"""Three ID-only recommenders with optional cascaded-quantizer integration.

* CfModel: pairwise-ranking matrix factorization (BPR).
* CtrModel: pointwise MLP scorer over concatenated user/item vectors.
* SeqModel: mean-pool next-item predictor with per-level tree-classification
  heads driven by the quantizer's code indices as pseudo-labels.

Each ``*_step`` function runs forward + backward over a mini-batch and applies
the model's Adam optimizer.  With the quantizers absent (or alpha, omega_q,
omega_c all zero) every model degrades bit-exactly to its plain backbone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (Adam, Parameter, bce_with_logits_batch, mlp_apply,
                   mlp_backward, mlp_init, softmax_xent_batch)
from .errors import DimensionError
from .quantizer import (CascadedQuantizer, batch_cage_loss_sum, quantize_batch,
                        ste_backward_batch)
from .rng import SeededRng, rng_normal_init


@dataclass
class EmbeddingTable:
    count: int
    dim: int
    rows: Parameter
    role: str

    @classmethod
    def create(cls, rng: SeededRng, count: int, dim: int, role: str, init_std: float = 0.01):
        values = rng_normal_init(rng, count, dim, init_std, name=f"init/{role}_table")
        return cls(count=count, dim=dim, rows=Parameter(values, name=f"{role}_table"), role=role)


def _check_indices(idx: np.ndarray, limit: int, what: str):
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= limit):
        raise IndexError(f"{what} index out of range [0, {limit})")
    return idx.astype(np.int64).reshape(-1)


def _fused(cage: CascadedQuantizer | None, emb: np.ndarray):
    if cage is None:
        return emb, None
    trace = quantize_batch(cage, emb)
    return trace.fused, trace


def _rank(candidates: np.ndarray, scores: np.ndarray, k: int):
    """Descending score, ties by ascending candidate index."""
    order = np.lexsort((candidates, -scores.astype(np.float64)))
    return [int(c) for c in candidates[order[:k]]]


class _Model:
    """Shared parameter bookkeeping."""

    def parameters(self) -> list:
        raise NotImplementedError

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}


# ---------------------------------------------------------------------------
# Collaborative filtering (BPR)
# ---------------------------------------------------------------------------


class CfModel(_Model):
    def __init__(self, users: EmbeddingTable, items: EmbeddingTable,
                 user_cage: CascadedQuantizer | None = None,
                 item_cage: CascadedQuantizer | None = None,
                 omega_q: float = 1.0, lr: float = 0.01):
        if omega_q < 0:
            raise ValueError("omega_q must be >= 0")
        for cage in (user_cage, item_cage):
            if cage is not None and cage.dim != items.dim:
                raise DimensionError("quantizer dim does not match embedding dim")
        self.users = users
        self.items = items
        self.user_cage = user_cage
        self.item_cage = item_cage
        self.omega_q = float(omega_q)
        self.optimizer = Adam(self.parameters(), lr=lr)

    @property
    def n_items(self) -> int:
        return self.items.count

    def parameters(self) -> list:
        params = [self.users.rows, self.items.rows]
        for cage in (self.user_cage, self.item_cage):
            if cage is not None:
                params.extend(cage.parameters())
        return params

    def fused_user(self, user_idx):
        return _fused(self.user_cage, self.users.rows.value[np.asarray(user_idx)])

    def fused_item(self, item_idx):
        return _fused(self.item_cage, self.items.rows.value[np.asarray(item_idx)])

    def predict_topk(self, user: int, candidates, k: int):
        candidates = _check_indices(np.asarray(candidates), self.n_items, "item")
        if candidates.size == 0:
            raise ValueError("candidates must be nonempty")
        if k < 1:
            raise ValueError("k must be >= 1")
        z_u, _ = self.fused_user([user])
        z_c, _ = self.fused_item(candidates)
        scores = z_c @ z_u[0]
        return _rank(candidates, scores, k)


def cf_bpr_step(model: CfModel, users, pos_items, neg_items) -> dict:
    """One BPR step over a batch of (user, positive, negative) triples."""
    u = _check_indices(users, model.users.count, "user")
    p = _check_indices(pos_items, model.n_items, "item")
    n = _check_indices(neg_items, model.n_items, "item")
    if not (u.shape == p.shape == n.shape):
        raise DimensionError("triple arrays must have equal length")
    if np.any(p == n):
        raise ValueError("positive and negative item must differ")
    batch = u.shape[0]

    z_u, tr_u = model.fused_user(u)
    z_p, tr_p = model.fused_item(p)
    z_n, tr_n = model.fused_item(n)

    margin = ((z_u * z_p).sum(axis=1) - (z_u * z_n).sum(axis=1)).astype(np.float64)
    l_rec = float(np.mean(np.logaddexp(0.0, -margin)))
    # d l_rec / d margin, including the 1/B of the mean
    dm = ((1.0 / (1.0 + np.exp(-margin)) - 1.0) / batch).astype(np.float32)[:, None]

    grad_zu = dm * (z_p - z_n)
    grad_zp = dm * z_u
    grad_zn = -dm * z_u

    l_cage = 0.0
    scale = model.omega_q / batch
    for cage, trace, grad_z, table, idx in (
        (model.user_cage, tr_u, grad_zu, model.users, u),
        (model.item_cage, tr_p, grad_zp, model.items, p),
        (model.item_cage, tr_n, grad_zn, model.items, n),
    ):
        if cage is None:
            np.add.at(table.rows.grad, idx, grad_z)
        else:
            l_cage += batch_cage_loss_sum(trace, cage.beta)
            grad_e = ste_backward_batch(cage, trace, grad_z, weight_cage=scale)
            np.add.at(table.rows.grad, idx, grad_e)
    l_cage /= batch

    model.optimizer.step()
    return {"l_rec": l_rec, "l_cage": l_cage, "l_total": l_rec + model.omega_q * l_cage}


# ---------------------------------------------------------------------------
# CTR prediction (pointwise MLP)
# ---------------------------------------------------------------------------


class CtrModel(_Model):
    def __init__(self, users: EmbeddingTable, items: EmbeddingTable, mlp_params: list,
                 user_cage: CascadedQuantizer | None = None,
                 item_cage: CascadedQuantizer | None = None,
                 omega_q: float = 1.0, lr: float = 0.001):
        if mlp_params[0][0].value.shape[0] != 2 * items.dim:
            raise DimensionError("MLP input width must be 2 * embedding dim")
        self.users = users
        self.items = items
        self.mlp_params = mlp_params  # list of (Parameter W, Parameter b)
        self.user_cage = user_cage
        self.item_cage = item_cage
        self.omega_q = float(omega_q)
        self.optimizer = Adam(self.parameters(), lr=lr)

    @property
    def n_items(self) -> int:
        return self.items.count

    def parameters(self) -> list:
        params = [self.users.rows, self.items.rows]
        for w, b in self.mlp_params:
            params.extend([w, b])
        for cage in (self.user_cage, self.item_cage):
            if cage is not None:
                params.extend(cage.parameters())
        return params

    def _mlp_layers(self):
        return [(w.value, b.value) for w, b in self.mlp_params]

    def score(self, user_idx, item_idx):
        """Logits for aligned (user, item) index arrays, plus traces and tape."""
        u = np.asarray(user_idx)
        i = np.asarray(item_idx)
        z_u, tr_u = _fused(self.user_cage, self.users.rows.value[u])
        z_i, tr_i = _fused(self.item_cage, self.items.rows.value[i])
        x = np.concatenate([z_u, z_i], axis=1)
        logits, tape = mlp_apply(self._mlp_layers(), x)
        return logits[:, 0], tr_u, tr_i, tape

    def predict_topk(self, user: int, candidates, k: int):
        candidates = _check_indices(np.asarray(candidates), self.n_items, "item")
        if candidates.size == 0:
            raise ValueError("candidates must be nonempty")
        if k < 1:
            raise ValueError("k must be >= 1")
        users = np.full(candidates.shape, user, dtype=np.int64)
        scores, _, _, _ = self.score(users, candidates)
        return _rank(candidates, scores, k)


def ctr_step(model: CtrModel, users, items, labels) -> dict:
    """One pointwise BCE step over a batch of labelled (user, item) pairs."""
    u = _check_indices(users, model.users.count, "user")
    i = _check_indices(items, model.n_items, "item")
    y = np.asarray(labels).reshape(-1)
    if not (u.shape == i.shape == y.shape):
        raise DimensionError("batch arrays must have equal length")
    batch = u.shape[0]

    logits, tr_u, tr_i, tape = model.score(u, i)
    losses, grad_logit = bce_with_logits_batch(logits, y)
    l_rec = float(losses.mean())
    grad_out = (grad_logit / batch)[:, None]

    param_grads, grad_x = mlp_backward(tape, grad_out)
    for (w, b), (gw, gb) in zip(model.mlp_params, param_grads):
        w.grad += gw
        b.grad += gb
    d = model.items.dim
    grad_zu, grad_zi = grad_x[:, :d], grad_x[:, d:]

    l_cage = 0.0
    scale = model.omega_q / batch
    for cage, trace, grad_z, table, idx in (
        (model.user_cage, tr_u, grad_zu, model.users, u),
        (model.item_cage, tr_i, grad_zi, model.items, i),
    ):
        if cage is None:
            np.add.at(table.rows.grad, idx, grad_z)
        else:
            l_cage += batch_cage_loss_sum(trace, cage.beta)
            grad_e = ste_backward_batch(cage, trace, grad_z, weight_cage=scale)
            np.add.at(table.rows.grad, idx, grad_e)
    l_cage /= batch

    model.optimizer.step()
    return {"l_rec": l_rec, "l_cage": l_cage, "l_total": l_rec + model.omega_q * l_cage}


# ---------------------------------------------------------------------------
# List completion (mean-pool next-item predictor)
# ---------------------------------------------------------------------------


class SeqModel(_Model):
    def __init__(self, items: EmbeddingTable, encoder_params: list,
                 item_cage: CascadedQuantizer | None = None,
                 tree_heads: list | None = None,
                 omega_c: float = 1.0, omega_q: float = 1.0, lr: float = 0.001):
        self.items = items
        self.encoder_params = encoder_params
        self.item_cage = item_cage
        self.tree_heads = tree_heads or []
        if item_cage is not None:
            if len(self.tree_heads) != item_cage.depth:
                raise DimensionError("need one tree head per quantizer level")
            for (w, _), size in zip(self.tree_heads, item_cage.level_sizes):
                if w.value.shape != (items.dim, size):
                    raise DimensionError(f"tree head width {w.value.shape[1]} != codebook size {size}")
        self.omega_c = float(omega_c)
        self.omega_q = float(omega_q)
        self.optimizer = Adam(self.parameters(), lr=lr)

    @property
    def n_items(self) -> int:
        return self.items.count

    def parameters(self) -> list:
        params = [self.items.rows]
        for w, b in self.encoder_params:
            params.extend([w, b])
        for w, b in self.tree_heads:
            params.extend([w, b])
        if self.item_cage is not None:
            params.extend(self.item_cage.parameters())
        return params

    def _encoder_layers(self):
        return [(w.value, b.value) for w, b in self.encoder_params]

    def encode(self, prefixes):
        """Mean-pooled fused prefix embeddings through the encoder MLP.

        Returns (prediction vectors (B, d), flat item index array, segment
        lengths, flat batch trace or None, encoder tape).
        """
        if any(len(p) == 0 for p in prefixes):
            raise ValueError("prefixes must be nonempty")
        lens = np.array([len(p) for p in prefixes], dtype=np.int64)
        flat = _check_indices(np.concatenate([np.asarray(p) for p in prefixes]), self.n_items, "item")
        z_all, trace = _fused(self.item_cage, self.items.rows.value[flat])
        starts = np.concatenate([[0], np.cumsum(lens)[:-1]])
        pooled = np.add.reduceat(z_all.astype(np.float64), starts, axis=0) / lens[:, None]
        z_bar, tape = mlp_apply(self._encoder_layers(), pooled.astype(np.float32))
        return z_bar, flat, lens, trace, tape

    def predict_completion(self, prefix, k: int, exclude=()):
        if len(prefix) == 0:
            raise ValueError("prefix must be nonempty")
        exclude = set(int(e) for e in exclude)
        if k > self.n_items - len(exclude):
            raise ValueError(f"k={k} exceeds the {self.n_items - len(exclude)} rankable items")
        z_bar, _, _, _, _ = self.encode([list(prefix)])
        scores = (z_bar[0] @ self.items.rows.value.T).astype(np.float64)
        if exclude:
            scores[list(exclude)] = -np.inf
        return _rank(np.arange(self.n_items, dtype=np.int64), scores, k)


def seq_step(model: SeqModel, prefixes, targets) -> dict:
    """One step of next-item prediction with auxiliary tree classification.

    The target's code indices (recomputed from its current raw embedding,
    detached) act as per-level classification labels.
    """
    t = _check_indices(targets, model.n_items, "item")
    if len(prefixes) != t.shape[0]:
        raise DimensionError("prefixes and targets must align")
    batch = t.shape[0]

    z_bar, flat, lens, trace_pref, tape = model.encode(prefixes)
    table = model.items.rows.value

    logits = z_bar @ table.T
    item_losses, grad_logits = softmax_xent_batch(logits, t)
    l_item = float(item_losses.mean())
    grad_logits /= np.float32(batch)
    grad_zbar = grad_logits @ table
    model.items.rows.grad += grad_logits.T @ z_bar  # tied output projection

    l_tree = 0.0
    trace_t = None
    if model.item_cage is not None:
        trace_t = quantize_batch(model.item_cage, table[t])
        h = model.item_cage.depth
        head_scale = np.float32(model.omega_c / (h * batch))
        tree_total = 0.0
        for level, (w, b) in enumerate(model.tree_heads):
            head_logits = z_bar @ w.value + b.value[None, :]
            losses, grads = softmax_xent_batch(head_logits, trace_t.indices[level])
            tree_total += float(losses.sum())
            grads = grads * head_scale
            w.grad += z_bar.T @ grads
            b.grad += grads.sum(axis=0)
            grad_zbar = grad_zbar + grads @ w.value.T
        l_tree = tree_total / (h * batch)

    param_grads, grad_x = mlp_backward(tape, grad_zbar)
    for (w, b), (gw, gb) in zip(model.encoder_params, param_grads):
        w.grad += gw
        b.grad += gb

    grad_pref = np.repeat(grad_x / lens[:, None].astype(np.float32), lens, axis=0)
    l_cage = 0.0
    scale = model.omega_q / batch
    if model.item_cage is None:
        np.add.at(model.items.rows.grad, flat, grad_pref)
    else:
        cage = model.item_cage
        l_cage += batch_cage_loss_sum(trace_pref, cage.beta)
        grad_e = ste_backward_batch(cage, trace_pref, grad_pref, weight_cage=scale)
        np.add.at(model.items.rows.grad, flat, grad_e)
        # target trace: quantizer penalties only, no task gradient
        l_cage += batch_cage_loss_sum(trace_t, cage.beta)
        grad_e_t = ste_backward_batch(cage, trace_t, np.zeros_like(trace_t.input), weight_cage=scale)
        np.add.at(model.items.rows.grad, t, grad_e_t)
    l_cage /= batch

    model.optimizer.step()
    l_rec = l_item + model.omega_c * l_tree
    return {
        "l_item": l_item,
        "l_tree": l_tree,
        "l_rec": l_rec,
        "l_cage": l_cage,
        "l_total": l_rec + model.omega_q * l_cage,
    }


# ---------------------------------------------------------------------------
# Constructors
# ---------------------------------------------------------------------------


def make_tree_heads(rng: SeededRng, dim: int, sizes) -> list:
    heads = []
    gen = rng.stream("init/tree_heads")
    for i, v in enumerate(sizes, start=1):
        std = float(np.sqrt(2.0 / dim))
        w = Parameter(gen.normal(0.0, std, size=(dim, v)).astype(np.float32), name=f"tree_head{i}.weight")
        b = Parameter(np.zeros(v, dtype=np.float32), name=f"tree_head{i}.bias")
        heads.append((w, b))
    return heads


def make_mlp_params(rng: SeededRng, sizes, name: str) -> list:
    layers = mlp_init(rng.stream(f"init/{name}"), sizes)
    return [
        (Parameter(w, name=f"{name}.layer{i}.weight"), Parameter(b, name=f"{name}.layer{i}.bias"))
        for i, (w, b) in enumerate(layers)
    ]


def predict_topk(model, user: int, candidates, k: int):
    return model.predict_topk(user, candidates, k)


def predict_completion(model: SeqModel, prefix, k: int, exclude=()):
    return model.predict_completion(prefix, k, exclude)
