"""Minimal differentiable-network substrate: named float64 tensors, dense
stacks, a recursive tree module, an adaptive optimizer, and finite-difference
gradient verification. No external ML framework; every backward pass is
hand-derived and checkable against central differences.

The nonlinearity is a leaky rectifier (slope 0.01). Finite-difference checks
can straddle its kink, so forward passes expose the sign pattern of all
pre-activations; a coordinate whose perturbed evaluations disagree on that
pattern is skipped by grad_check rather than mis-scored.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

LEAK = 0.01


class NeuralError(ValueError):
    pass


def lrelu(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, LEAK * z)


def lrelu_grad(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, 1.0, LEAK)


# ---------------------------------------------------------------------------
# Parameter records
# ---------------------------------------------------------------------------


class ParamRecord:
    """Named float64 tensors with an immutable shape manifest."""

    def __init__(self, tensors: dict[str, np.ndarray]):
        self._tensors: dict[str, np.ndarray] = {}
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise NeuralError(f"tensor {name!r} contains non-finite values")
            self._tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if name not in self._tensors:
            raise NeuralError(f"unknown tensor {name!r} (shapes are fixed at creation)")
        if arr.shape != self._tensors[name].shape:
            raise NeuralError(f"tensor {name!r}: shape {arr.shape} != {self._tensors[name].shape}")
        self._tensors[name] = arr

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    @property
    def names(self) -> list[str]:
        return list(self._tensors)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._tensors.items()}

    def size(self) -> int:
        return int(sum(v.size for v in self._tensors.values()))

    def deep_copy(self) -> "ParamRecord":
        return ParamRecord({k: v.copy() for k, v in self._tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self._tensors.items()}

    def equals(self, rhs: "ParamRecord") -> bool:
        return (self.names == rhs.names and
                all(np.array_equal(self[k], rhs[k]) for k in self.names))

    def flat(self) -> np.ndarray:
        return np.concatenate([self._tensors[k].ravel() for k in self.names]) \
            if self._tensors else np.zeros(0)

    def with_flat(self, vec: np.ndarray) -> "ParamRecord":
        out = {}
        pos = 0
        for k in self.names:
            n = self._tensors[k].size
            out[k] = vec[pos:pos + n].reshape(self._tensors[k].shape).copy()
            pos += n
        if pos != vec.size:
            raise NeuralError(f"flat vector length {vec.size} != parameter count {pos}")
        return ParamRecord(out)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in self.names:
            arr = self._tensors[k]
            h.update(k.encode())
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def to_payload(self) -> dict:
        return {k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                for k, v in self._tensors.items()}

    @classmethod
    def from_payload(cls, payload: dict) -> "ParamRecord":
        tensors = {}
        for name, entry in payload.items():
            arr = np.array(entry["values"], dtype=np.float64)
            tensors[name] = arr.reshape(tuple(entry["shape"]))
        return cls(tensors)


def xavier(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    scale = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-scale, scale, size=(fan_out, fan_in))


@dataclass
class ModuleParams:
    """Parameters of one tree module: per-node transform, child aggregation,
    and the projection to the shared representation dimension."""

    uid: str
    p: ParamRecord

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, hidden: int,
             rep_dim: int, uid: str) -> "ModuleParams":
        return cls(uid, ParamRecord({
            "w_self": xavier(rng, hidden, in_dim),
            "w_left": xavier(rng, hidden, hidden),
            "w_right": xavier(rng, hidden, hidden),
            "bias": np.zeros(hidden),
            "proj": xavier(rng, rep_dim, hidden),
            "proj_b": np.zeros(rep_dim),
        }))

    @property
    def hidden(self) -> int:
        return self.p["bias"].shape[0]

    @property
    def rep_dim(self) -> int:
        return self.p["proj_b"].shape[0]

    def clone(self, uid: str) -> "ModuleParams":
        return ModuleParams(uid, self.p.deep_copy())

    def deep_copy(self) -> "ModuleParams":
        return self.clone(self.uid)


@dataclass
class SharedParams:
    """Input stack over Feature A, attention scorer, and output stack."""

    p: ParamRecord
    a_widths: tuple[int, ...]

    @classmethod
    def init(cls, rng: np.random.Generator, n_tables: int,
             a_widths: tuple[int, ...], rep_dim: int, att_dim: int,
             out_hidden: int) -> "SharedParams":
        if any(a <= b for a, b in zip(a_widths, a_widths[1:])):
            raise NeuralError(f"input stack widths must strictly decrease: {a_widths}")
        tensors: dict[str, np.ndarray] = {}
        fan_in = n_tables
        for i, width in enumerate(a_widths, start=1):
            tensors[f"a{i}_w"] = xavier(rng, width, fan_in)
            tensors[f"a{i}_b"] = np.zeros(width)
            fan_in = width
        tensors["att_w"] = xavier(rng, att_dim, rep_dim)
        tensors["att_u"] = xavier(rng, att_dim, 1).ravel()
        tensors["out1_w"] = xavier(rng, out_hidden, rep_dim)
        tensors["out1_b"] = np.zeros(out_hidden)
        tensors["out2_w"] = xavier(rng, 1, out_hidden)
        tensors["out2_b"] = np.zeros(1)
        return cls(ParamRecord(tensors), tuple(a_widths))

    @property
    def embed_dim(self) -> int:
        return self.a_widths[-1]

    def deep_copy(self) -> "SharedParams":
        return SharedParams(self.p.deep_copy(), self.a_widths)


def deep_copy(model):
    """Value-independent duplicate; mutating either side never affects the
    other. Works for anything exposing a deep_copy() method."""
    return model.deep_copy()


# ---------------------------------------------------------------------------
# Dense stack over Feature A
# ---------------------------------------------------------------------------


def a_stack_forward(shared: SharedParams, a: np.ndarray):
    """Three dense+lrelu layers of decreasing width; returns (embed, cache)."""
    x = np.asarray(a, dtype=np.float64)
    zs, xs = [], [x]
    for i in range(1, len(shared.a_widths) + 1):
        z = shared.p[f"a{i}_w"] @ xs[-1] + shared.p[f"a{i}_b"]
        zs.append(z)
        xs.append(lrelu(z))
    return xs[-1], (xs, zs)


def a_stack_backward(shared: SharedParams, cache, d_out: np.ndarray) -> dict[str, np.ndarray]:
    xs, zs = cache
    grads: dict[str, np.ndarray] = {}
    delta = d_out
    for i in range(len(zs), 0, -1):
        dz = delta * lrelu_grad(zs[i - 1])
        grads[f"a{i}_w"] = np.outer(dz, xs[i - 1])
        grads[f"a{i}_b"] = dz
        delta = shared.p[f"a{i}_w"].T @ dz
    return grads


# ---------------------------------------------------------------------------
# Tree module
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VecTree:
    """Node-vector tree in pre-order: per-node input vectors plus local
    (left, right) child indexes, -1 marking an absent child."""

    x: np.ndarray          # (n_nodes, in_dim)
    left: np.ndarray       # (n_nodes,) int, -1 absent
    right: np.ndarray      # (n_nodes,) int, -1 absent

    @property
    def n_nodes(self) -> int:
        return self.x.shape[0]


def tree_module_forward(mp: ModuleParams, vt: VecTree):
    """Bottom-up recursion h(v) = lrelu(W_self x(v) + W_l h(left) +
    W_r h(right) + bias); output is the projected root state."""
    p = mp.p
    if vt.x.shape[1] != p["w_self"].shape[1]:
        raise NeuralError(f"node vector dim {vt.x.shape[1]} != module input dim "
                          f"{p['w_self'].shape[1]}")
    n = vt.n_nodes
    base = vt.x @ p["w_self"].T + p["bias"]
    z = np.empty((n, mp.hidden))
    h = np.empty((n, mp.hidden))
    # Pre-order puts children after their parent, so the reversed order
    # visits children first.
    for i in range(n - 1, -1, -1):
        zi = base[i]
        if vt.left[i] >= 0:
            zi = zi + p["w_left"] @ h[vt.left[i]]
        if vt.right[i] >= 0:
            zi = zi + p["w_right"] @ h[vt.right[i]]
        z[i] = zi
        h[i] = lrelu(zi)
    out = p["proj"] @ h[0] + p["proj_b"]
    return out, (vt, z, h)


def tree_module_backward(mp: ModuleParams, cache, d_out: np.ndarray):
    """Returns (grads dict, d_x of shape (n_nodes, in_dim))."""
    vt, z, h = cache
    p = mp.p
    n = vt.n_nodes
    grads = {
        "proj": np.outer(d_out, h[0]),
        "proj_b": d_out.copy(),
        "w_self": np.zeros_like(p["w_self"]),
        "w_left": np.zeros_like(p["w_left"]),
        "w_right": np.zeros_like(p["w_right"]),
        "bias": np.zeros_like(p["bias"]),
    }
    dh = np.zeros_like(h)
    dh[0] = p["proj"].T @ d_out
    dz = np.zeros_like(z)
    for i in range(n):
        dz[i] = dh[i] * lrelu_grad(z[i])
        if vt.left[i] >= 0:
            grads["w_left"] += np.outer(dz[i], h[vt.left[i]])
            dh[vt.left[i]] += p["w_left"].T @ dz[i]
        if vt.right[i] >= 0:
            grads["w_right"] += np.outer(dz[i], h[vt.right[i]])
            dh[vt.right[i]] += p["w_right"].T @ dz[i]
    grads["w_self"] = dz.T @ vt.x
    grads["bias"] = dz.sum(axis=0)
    d_x = dz @ p["w_self"]
    return grads, d_x


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-tensor first/second moment estimates."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: ParamRecord) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like())


def optimizer_step(params: ParamRecord, grads: dict[str, np.ndarray],
                   state: AdamState, step_size: float,
                   beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> None:
    """One bias-corrected adaptive step, in place. Rejects non-finite
    gradients before touching any parameter."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NeuralError(f"non-finite gradient for tensor {name!r}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        m = state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1 - beta2) * (g * g)
        params[name] = params[name] - step_size * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


@dataclass
class LossEval:
    """One evaluation of a loss: value, analytic grads, and optionally the
    pre-activation sign pattern used to detect kink straddling."""

    loss: float
    grads: dict[str, np.ndarray] | None = None
    kink_signs: np.ndarray | None = None


def grad_check(loss_fn, params: ParamRecord, epsilon: float = 1e-5,
               sample: int | None = None, seed: int = 0,
               rel_floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params) -> LossEval``. Checks every coordinate, or a seeded
    subsample of ``sample`` coordinates spread over all tensors. Coordinates
    whose +/-epsilon evaluations land on different sides of a rectifier kink
    are skipped (the numerical quotient is meaningless there).
    """
    center = loss_fn(params)
    if not math.isfinite(center.loss):
        raise NeuralError(f"loss is not finite: {center.loss}")
    if center.grads is None:
        raise NeuralError("loss_fn must supply analytic gradients")
    flat = params.flat()
    analytic = np.concatenate([
        np.asarray(center.grads[k]).ravel() for k in params.names
    ]) if params.names else np.zeros(0)
    total = flat.size
    if sample is not None and sample < total:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(total, size=sample, replace=False))
    else:
        idx = np.arange(total)
    worst = 0.0
    for i in idx:
        bumped = flat.copy()
        bumped[i] = flat[i] + epsilon
        hi = loss_fn(params.with_flat(bumped))
        bumped[i] = flat[i] - epsilon
        lo = loss_fn(params.with_flat(bumped))
        if (hi.kink_signs is not None and lo.kink_signs is not None
                and not np.array_equal(hi.kink_signs, lo.kink_signs)):
            continue
        numeric = (hi.loss - lo.loss) / (2.0 * epsilon)
        denom = max(abs(analytic[i]), abs(numeric), rel_floor)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
