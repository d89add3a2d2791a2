"""Module hubs: per-break-kind prototype clusters over task encodings.

Each hub keeps K prototypes. A prototype pairs a mixed-type centroid
(numeric Feature A; categorical B, C, D) with one neural module's
parameters. Tasks route to the prototype minimizing

    d = euclidean(a, centroid_a) + gamma * mismatches(b, c, d)

where structure triples mismatch all-or-nothing. Fitting is a Lloyd-style
loop (argmin assignment, mean/mode centroid updates); maintenance can grow
a cluster for far-away tasks and prunes under-populated ones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoding import TaskEncoding


class HubError(ValueError):
    pass


@dataclass(eq=False)
class ClusterPrototype:
    centroid_a: np.ndarray
    centroid_b: np.ndarray
    centroid_c: np.ndarray  # (c_max, 3)
    centroid_d: np.ndarray
    module_uid: str
    member_count: int = 0

    @classmethod
    def from_encoding(cls, enc: TaskEncoding, module_uid: str,
                      member_count: int = 0) -> "ClusterPrototype":
        return cls(enc.a.astype(np.float64).copy(), enc.b.copy(),
                   enc.c.copy(), enc.d.copy(), module_uid, member_count)

    def to_payload(self) -> dict:
        return {
            "a": self.centroid_a.tolist(),
            "b": self.centroid_b.tolist(),
            "c": self.centroid_c.tolist(),
            "d": self.centroid_d.tolist(),
            "module_uid": self.module_uid,
            "member_count": self.member_count,
        }

    @classmethod
    def from_payload(cls, p: dict) -> "ClusterPrototype":
        return cls(np.array(p["a"], dtype=np.float64),
                   np.array(p["b"], dtype=np.int64),
                   np.array(p["c"], dtype=np.int64),
                   np.array(p["d"], dtype=np.int64),
                   p["module_uid"], int(p["member_count"]))


def dissimilarity(x: TaskEncoding, c: ClusterPrototype, gamma: float,
                  b_as_numeric: bool = False) -> float:
    """Mixed-type distance: Euclidean on A plus gamma-weighted mismatch
    counts on B, C (per triple, any differing component counts once), D."""
    if x.a.shape != c.centroid_a.shape or x.b.shape != c.centroid_b.shape \
            or x.c.shape != c.centroid_c.shape or x.d.shape != c.centroid_d.shape:
        raise HubError("encoding/prototype shape mismatch")
    if gamma < 0:
        raise HubError("gamma must be nonnegative")
    num = float(np.linalg.norm(x.a - c.centroid_a))
    cat = int(np.any(x.c != c.centroid_c, axis=1).sum()) + int((x.d != c.centroid_d).sum())
    if b_as_numeric:
        num += float(np.linalg.norm(x.b - c.centroid_b))
    else:
        cat += int((x.b != c.centroid_b).sum())
    return num + gamma * cat


@dataclass
class ModuleHub:
    """K prototypes for one task kind (a break-operator spelling or OTH)."""

    hub_kind: str
    prototypes: list[ClusterPrototype]
    gamma: float = 0.5
    theta_new: float = math.inf
    m_min: int = 2
    b_as_numeric: bool = False
    created: int = 0  # creation counter feeding module uids

    def __post_init__(self):
        if not self.prototypes:
            raise HubError("hub must hold at least one prototype")
        if self.gamma < 0:
            raise HubError("gamma must be nonnegative")

    @property
    def k(self) -> int:
        return len(self.prototypes)

    def dissimilarities(self, x: TaskEncoding) -> np.ndarray:
        return np.array([dissimilarity(x, p, self.gamma, self.b_as_numeric)
                         for p in self.prototypes])

    def to_payload(self) -> dict:
        return {
            "hub_kind": self.hub_kind,
            "gamma": self.gamma,
            "theta_new": None if math.isinf(self.theta_new) else self.theta_new,
            "m_min": self.m_min,
            "b_as_numeric": self.b_as_numeric,
            "created": self.created,
            "prototypes": [p.to_payload() for p in self.prototypes],
        }

    @classmethod
    def from_payload(cls, p: dict) -> "ModuleHub":
        theta = p["theta_new"]
        return cls(p["hub_kind"],
                   [ClusterPrototype.from_payload(q) for q in p["prototypes"]],
                   gamma=p["gamma"],
                   theta_new=math.inf if theta is None else float(theta),
                   m_min=int(p["m_min"]),
                   b_as_numeric=bool(p["b_as_numeric"]),
                   created=int(p["created"]))


def select_module(hub: ModuleHub, x: TaskEncoding) -> tuple[int, str]:
    """Argmin-dissimilarity prototype (ties -> lowest index); returns the
    prototype index and its module-parameter handle."""
    idx = int(np.argmin(hub.dissimilarities(x)))
    return idx, hub.prototypes[idx].module_uid


def _mode_columns(values: np.ndarray) -> np.ndarray:
    """Per-column most frequent value; ties -> smallest value."""
    out = np.empty(values.shape[1], dtype=values.dtype)
    for j in range(values.shape[1]):
        uniq, counts = np.unique(values[:, j], return_counts=True)
        out[j] = uniq[np.argmax(counts)]
    return out


def _mode_triples(stack: np.ndarray) -> np.ndarray:
    """Per-position most frequent triple; ties -> lexicographically
    smallest. ``stack`` is (members, c_max, 3)."""
    members, c_max, _ = stack.shape
    out = np.empty((c_max, 3), dtype=stack.dtype)
    for pos in range(c_max):
        uniq, counts = np.unique(stack[:, pos, :], axis=0, return_counts=True)
        out[pos] = uniq[np.argmax(counts)]
    return out


@dataclass
class FitResult:
    assignments: list[int]
    objective_trace: list[float]
    iterations: int


def hub_objective(hub: ModuleHub, tasks: list[TaskEncoding],
                  assignments: list[int]) -> float:
    return sum(dissimilarity(x, hub.prototypes[k], hub.gamma, hub.b_as_numeric)
               for x, k in zip(tasks, assignments))


def fit(hub: ModuleHub, tasks: list[TaskEncoding], max_iters: int = 20) -> FitResult:
    """Lloyd loop: assign to argmin prototype, update centroids (numeric
    mean on A, per-position mode on B/C/D), until assignments stabilize."""
    if not tasks:
        raise HubError("cannot fit a hub on an empty task list")
    prev: list[int] | None = None
    trace: list[float] = []
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        assign = [int(np.argmin(hub.dissimilarities(x))) for x in tasks]
        trace.append(hub_objective(hub, tasks, assign))
        if assign == prev:
            break
        prev = assign
        for k, proto in enumerate(hub.prototypes):
            members = [x for x, a in zip(tasks, assign) if a == k]
            proto.member_count = len(members)
            if not members:
                continue  # empty cluster keeps its old centroid
            proto.centroid_a = np.mean([m.a for m in members], axis=0)
            proto.centroid_b = _mode_columns(np.stack([m.b for m in members]))
            proto.centroid_c = _mode_triples(np.stack([m.c for m in members]))
            proto.centroid_d = _mode_columns(np.stack([m.d for m in members]))
    return FitResult(prev or [], trace, iterations)


def init_prototypes(tasks: list[TaskEncoding], k: int, rng: np.random.Generator,
                    module_uids: list[str], method: str = "farthest_point",
                    gamma: float = 0.5) -> list[ClusterPrototype]:
    """Seed K centroids from training tasks: either a farthest-point sweep
    (deterministic spread) or a uniform random draw."""
    if len(module_uids) != k:
        raise HubError("need one module uid per prototype")
    if not tasks:
        raise HubError("cannot initialize prototypes without tasks")
    if method == "random":
        picks = list(rng.choice(len(tasks), size=min(k, len(tasks)), replace=False))
    elif method == "farthest_point":
        picks = [int(rng.integers(len(tasks)))]
        while len(picks) < min(k, len(tasks)):
            best, best_d = None, -1.0
            for i, x in enumerate(tasks):
                if i in picks:
                    continue
                d = min(dissimilarity(x, ClusterPrototype.from_encoding(tasks[j], ""), gamma)
                        for j in picks)
                if d > best_d:
                    best, best_d = i, d
            picks.append(best)
    else:
        raise HubError(f"unknown initialization method {method!r}")
    protos = [ClusterPrototype.from_encoding(tasks[i], module_uids[j])
              for j, i in enumerate(picks)]
    # Fewer distinct tasks than K: reuse the last pick so the hub still
    # exposes K modules.
    while len(protos) < k:
        protos.append(ClusterPrototype.from_encoding(tasks[picks[-1]],
                                                     module_uids[len(protos)]))
    return protos


def calibrate_threshold(hub: ModuleHub, tasks: list[TaskEncoding],
                        percentile: float = 95.0) -> float:
    """New-cluster threshold: a percentile of the training tasks'
    min-dissimilarities, computed once after the initial fit."""
    if not tasks:
        return math.inf
    mins = [float(hub.dissimilarities(x).min()) for x in tasks]
    return float(np.percentile(mins, percentile))


@dataclass(frozen=True)
class MaintenanceAction:
    created: bool
    prototype_index: int | None = None
    nearest_index: int | None = None
    min_dissimilarity: float = 0.0


def maintain(hub: ModuleHub, x: TaskEncoding, make_module,
             max_prototypes: int | None = None) -> MaintenanceAction:
    """Create a prototype for ``x`` when it is farther than theta_new from
    every existing one. ``make_module(nearest_uid, new_uid) -> ModuleParams``
    supplies the new module (clone of the nearest, or fresh)."""
    dis = hub.dissimilarities(x)
    nearest = int(np.argmin(dis))
    d_min = float(dis[nearest])
    if d_min <= hub.theta_new:
        return MaintenanceAction(False, None, nearest, d_min)
    if max_prototypes is not None and hub.k >= max_prototypes:
        return MaintenanceAction(False, None, nearest, d_min)
    hub.created += 1
    new_uid = f"{hub.hub_kind}-n{hub.created}"
    make_module(hub.prototypes[nearest].module_uid, new_uid)
    hub.prototypes.append(ClusterPrototype.from_encoding(x, new_uid, member_count=1))
    return MaintenanceAction(True, hub.k - 1, nearest, d_min)


def sweep(hub: ModuleHub, tasks: list[TaskEncoding]) -> list[str]:
    """Remove prototypes serving fewer than m_min of ``tasks`` (never the
    last one), then reassign and recount. Returns removed module uids."""
    counts = [0] * hub.k
    for x in tasks:
        counts[int(np.argmin(hub.dissimilarities(x)))] += 1
    for proto, c in zip(hub.prototypes, counts):
        proto.member_count = c
    keep = [p for p, c in zip(hub.prototypes, counts) if c >= hub.m_min]
    if not keep:
        best = int(np.argmax(counts))
        keep = [hub.prototypes[best]]
    removed = [p.module_uid for p in hub.prototypes if p not in keep]
    if not removed:
        return []
    hub.prototypes = keep
    for p in hub.prototypes:
        p.member_count = 0
    for x in tasks:
        hub.prototypes[int(np.argmin(hub.dissimilarities(x)))].member_count += 1
    return removed
