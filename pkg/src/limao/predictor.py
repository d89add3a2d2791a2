"""Per-query composed cost network.

For each query, Feature A runs once through the shared input stack; each
task's tree shape is rebuilt from Feature C with every node carrying the
same concat(A-embedding, Feature B) vector; each tree is processed by the
module selected for the task; an additive-attention merger softmax-weights
the module representations; and the shared output stack maps the merged
vector to a scalar cost in log(1+latency) units.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .decompose import Task
from .encoding import TaskEncoding
from .neural import (LossEval, ModuleParams, NeuralError, ParamRecord,
                     SharedParams, VecTree, a_stack_backward, a_stack_forward,
                     lrelu, lrelu_grad, tree_module_backward,
                     tree_module_forward)

# Operator one-hot vocabulary for the optional per-node identity ablation.
OP_SLOTS = ("HashJoin", "MergeJoin", "NestedLoop", "SeqScan", "IndexScan",
            "Aggregate", "Sort", "GroupBy", "Other")


class PredictorError(ValueError):
    pass


@dataclass(frozen=True)
class Selection:
    """Module routed to one task of a query."""

    task_index: int
    hub_kind: str
    prototype_index: int
    module_uid: str


@dataclass(frozen=True)
class CostEstimate:
    value: float  # log(1 + latency) units

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise PredictorError(f"non-finite cost estimate: {self.value}")


@dataclass
class CostModel:
    """A trainable bundle: shared stacks plus every module's parameters."""

    shared: SharedParams
    modules: dict[str, ModuleParams]

    def deep_copy(self) -> "CostModel":
        return CostModel(self.shared.deep_copy(),
                         {uid: mp.deep_copy() for uid, mp in self.modules.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.shared.p.checksum().encode())
        for uid in sorted(self.modules):
            h.update(uid.encode())
            h.update(self.modules[uid].p.checksum().encode())
        return h.hexdigest()

    def to_payload(self) -> dict:
        return {
            "a_widths": list(self.shared.a_widths),
            "shared": self.shared.p.to_payload(),
            "modules": {uid: mp.p.to_payload() for uid, mp in sorted(self.modules.items())},
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "CostModel":
        shared = SharedParams(ParamRecord.from_payload(payload["shared"]),
                              tuple(payload["a_widths"]))
        modules = {uid: ModuleParams(uid, ParamRecord.from_payload(p))
                   for uid, p in payload["modules"].items()}
        return cls(shared, modules)


@dataclass
class ComposedPredictor:
    """The per-query network: shared params plus one module per task."""

    shared: SharedParams
    selections: tuple[Selection, ...]
    modules: dict[str, ModuleParams]
    node_onehot: bool = False

    def __post_init__(self):
        seen = [s.task_index for s in self.selections]
        if seen != list(range(len(seen))):
            raise PredictorError(f"selections must cover tasks 0..k-1 in order, got {seen}")


def compose(model: CostModel, selections: tuple[Selection, ...],
            node_onehot: bool = False) -> ComposedPredictor:
    modules = {}
    for sel in selections:
        if sel.module_uid not in model.modules:
            raise PredictorError(f"unknown module uid {sel.module_uid!r}")
        modules[sel.module_uid] = model.modules[sel.module_uid]
    return ComposedPredictor(model.shared, selections, modules, node_onehot)


def _op_onehot(op_tag: str) -> np.ndarray:
    v = np.zeros(len(OP_SLOTS))
    v[OP_SLOTS.index(op_tag if op_tag in OP_SLOTS else "Other")] = 1.0
    return v


def build_node_tree(task: Task, enc: TaskEncoding, a_embed: np.ndarray,
                    node_onehot: bool = False) -> VecTree:
    """Rebuild the task's tree shape from Feature C; every node carries
    concat(a_embed, Feature B), optionally extended with an operator
    one-hot."""
    triples = enc.triples()
    index = {int(t[0]): i for i, t in enumerate(triples)}
    n = len(triples)
    left = np.full(n, -1, dtype=np.int64)
    right = np.full(n, -1, dtype=np.int64)
    order = task.subtree.preorder_ids()
    if len(order) != n:
        raise PredictorError("structure encoding inconsistent with task subtree")
    for i, (nid, lid, rid) in enumerate((int(a), int(b), int(c)) for a, b, c in triples):
        if nid != order[i]:
            raise PredictorError("structure encoding inconsistent with task subtree")
        if lid:
            left[i] = index[lid]
        if rid:
            right[i] = index[rid]
    base = np.concatenate([a_embed, enc.b.astype(np.float64)])
    if node_onehot:
        x = np.stack([
            np.concatenate([base, _op_onehot(task.subtree.nodes[nid].op.tag)])
            for nid in order
        ])
    else:
        x = np.tile(base, (n, 1))
    return VecTree(x, left, right)


def node_vector_dim(n_tables: int, embed_dim: int, node_onehot: bool = False) -> int:
    return embed_dim + 3 + 2 * n_tables + (len(OP_SLOTS) if node_onehot else 0)


# ---------------------------------------------------------------------------
# Attention merger
# ---------------------------------------------------------------------------


def attention_merge(reps: np.ndarray, att_w: np.ndarray, att_u: np.ndarray):
    """Additive attention: score s_i = u . tanh(W w_i), softmax over scores,
    output the weighted sum of representations. ``reps`` is (k, r)."""
    if reps.ndim != 2 or reps.shape[0] < 1:
        raise PredictorError("attention requires at least one representation")
    t = np.tanh(reps @ att_w.T)          # (k, att_dim)
    s = t @ att_u                        # (k,)
    shifted = s - s.max()
    e = np.exp(shifted)
    alpha = e / e.sum()
    merged = alpha @ reps
    return merged, (reps, t, s, alpha, att_w, att_u)


def attention_backward(cache, d_merged: np.ndarray):
    reps, t, s, alpha, att_w, att_u = cache
    d_alpha = reps @ d_merged                       # (k,)
    ds = alpha * (d_alpha - float(alpha @ d_alpha))  # softmax jacobian
    d_u = t.T @ ds
    gate = (1.0 - t * t) * att_u                    # (k, att_dim)
    d_w = (ds[:, None] * gate).T @ reps
    d_reps = alpha[:, None] * d_merged[None, :] + (ds[:, None] * gate) @ att_w
    return d_w, d_u, d_reps


# ---------------------------------------------------------------------------
# End-to-end forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    a_cache: tuple
    tree_caches: list
    att_cache: tuple
    out_cache: tuple
    attention_weights: np.ndarray
    value: float

    def kink_signs(self) -> np.ndarray:
        xs, zs = self.a_cache
        parts = [np.concatenate([z.ravel() for z in zs])]
        for _, z, _ in self.tree_caches:
            parts.append(z.ravel())
        parts.append(self.out_cache[1].ravel())
        return np.concatenate(parts) > 0


def forward(predictor: ComposedPredictor, a: np.ndarray, tasks: list[Task],
            encs: list[TaskEncoding]) -> tuple[float, ForwardCache]:
    if len(tasks) != len(predictor.selections):
        raise PredictorError(f"{len(predictor.selections)} selections for {len(tasks)} tasks")
    shared = predictor.shared
    a_embed, a_cache = a_stack_forward(shared, a)
    reps = []
    tree_caches = []
    for sel in predictor.selections:
        vt = build_node_tree(tasks[sel.task_index], encs[sel.task_index],
                             a_embed, predictor.node_onehot)
        w, cache = tree_module_forward(predictor.modules[sel.module_uid], vt)
        reps.append(w)
        tree_caches.append(cache)
    reps = np.stack(reps)
    merged, att_cache = attention_merge(reps, shared.p["att_w"], shared.p["att_u"])
    z1 = shared.p["out1_w"] @ merged + shared.p["out1_b"]
    h1 = lrelu(z1)
    y = float(shared.p["out2_w"] @ h1 + shared.p["out2_b"])
    out_cache = (merged, z1, h1)
    return y, ForwardCache(a_cache, tree_caches, att_cache, out_cache,
                           att_cache[3].copy(), y)


@dataclass
class Grads:
    shared: dict[str, np.ndarray]
    modules: dict[str, dict[str, np.ndarray]]


def backward(predictor: ComposedPredictor, cache: ForwardCache,
             d_value: float) -> Grads:
    shared = predictor.shared
    merged, z1, h1 = cache.out_cache
    dy = np.array([d_value])
    shared_grads: dict[str, np.ndarray] = {
        "out2_w": np.outer(dy, h1),
        "out2_b": dy.copy(),
    }
    dh1 = shared.p["out2_w"].T @ dy
    dz1 = dh1 * lrelu_grad(z1)
    shared_grads["out1_w"] = np.outer(dz1, merged)
    shared_grads["out1_b"] = dz1
    d_merged = shared.p["out1_w"].T @ dz1

    d_att_w, d_att_u, d_reps = attention_backward(cache.att_cache, d_merged)
    shared_grads["att_w"] = d_att_w
    shared_grads["att_u"] = d_att_u

    embed_dim = shared.embed_dim
    d_a_embed = np.zeros(embed_dim)
    module_grads: dict[str, dict[str, np.ndarray]] = {}
    for i, sel in enumerate(predictor.selections):
        mp = predictor.modules[sel.module_uid]
        grads, d_x = tree_module_backward(mp, cache.tree_caches[i], d_reps[i])
        acc = module_grads.setdefault(sel.module_uid, {})
        for name, g in grads.items():
            if name in acc:
                acc[name] += g
            else:
                acc[name] = g
        d_a_embed += d_x[:, :embed_dim].sum(axis=0)

    shared_grads.update(a_stack_backward(shared, cache.a_cache, d_a_embed))
    return Grads(shared_grads, module_grads)


def predict_cost(predictor: ComposedPredictor, a: np.ndarray,
                 tasks: list[Task], encs: list[TaskEncoding]) -> CostEstimate:
    value, _ = forward(predictor, a, tasks, encs)
    return CostEstimate(value)


def squared_error_eval(predictor: ComposedPredictor, a: np.ndarray,
                       tasks: list[Task], encs: list[TaskEncoding],
                       target: float) -> tuple[LossEval, Grads]:
    """(pred - target)^2 with gradients for every involved tensor."""
    value, cache = forward(predictor, a, tasks, encs)
    resid = value - target
    grads = backward(predictor, cache, 2.0 * resid)
    return LossEval(resid * resid, kink_signs=cache.kink_signs()), grads
