"""Two-phase lifelong training loop.

Each iteration first performs the offline update (replacing the served
model M with last iteration's episodically-trained copy M', retraining it
on the replay buffer picked by the drift branch, and running hub
maintenance), then takes a fresh copy M', splits the iteration's queries
into episodes, and serves/executes/lightly-trains through them. Feedback
accumulates in b_episode -> b_last -> b_all. M is never touched during the
online phase; hub creations triggered online are queued and applied
offline.
"""
from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .decompose import BreakOperatorSet, Task, decompose
from .encoding import TaskEncoding, encode_tasks, mapping_selectivities
from .hub import ModuleHub, maintain, select_module, sweep
from .neural import AdamState, ModuleParams, SharedParams, deep_copy, optimizer_step
from .plans import PlanTree, QueryProps, WorkloadSchema
from .predictor import CostModel, Selection, compose, forward, squared_error_eval

logger = logging.getLogger("limao.trainer")


class TrainerError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    a_widths: tuple[int, ...] = (32, 16, 8)
    module_hidden: int = 32
    rep_dim: int = 32
    att_dim: int = 16
    out_hidden: int = 16
    node_onehot: bool = False
    c_max: int = 64


@dataclass(frozen=True)
class TrainerConfig:
    iterations: int = 10
    episode_size: int = 10
    online_epochs: int = 3
    offline_epochs: int = 30
    learning_rate: float = 3e-3
    drift_detector: str = "oracle"  # "oracle" | "loss_shift"
    replay_on_drift: bool = True
    online_seconds_cap: float = 3.0
    b_all_cap: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.episode_size < 1:
            raise TrainerError("episode_size must be >= 1")
        if self.drift_detector not in ("oracle", "loss_shift"):
            raise TrainerError(f"unknown drift detector {self.drift_detector!r}")


@dataclass(frozen=True)
class QueryCase:
    """One query as the trainer sees it: fixed candidate plans plus the
    query-level features needed for encoding."""

    qid: str
    workload_id: str
    candidates: tuple[PlanTree, ...]
    selectivities: Mapping[str, float]
    props: QueryProps


@dataclass
class ExperienceRecord:
    qid: str
    workload_id: str
    candidate_index: int
    latency: float
    timed_out: bool
    iteration: int
    episode: int
    selections: tuple[Selection, ...]
    tasks: tuple[Task, ...] | None = None
    encodings: tuple[TaskEncoding, ...] | None = None

    @property
    def target(self) -> float:
        return math.log1p(self.latency)

    def to_payload(self) -> dict:
        return {
            "qid": self.qid,
            "workload_id": self.workload_id,
            "candidate_index": self.candidate_index,
            "latency": self.latency,
            "timed_out": self.timed_out,
            "iteration": self.iteration,
            "episode": self.episode,
            "selections": [[s.task_index, s.hub_kind, s.prototype_index, s.module_uid]
                           for s in self.selections],
        }

    @classmethod
    def from_payload(cls, p: dict) -> "ExperienceRecord":
        return cls(p["qid"], p["workload_id"], int(p["candidate_index"]),
                   float(p["latency"]), bool(p["timed_out"]),
                   int(p["iteration"]), int(p["episode"]),
                   tuple(Selection(int(a), b, int(c), d) for a, b, c, d in p["selections"]))


@dataclass
class Buffers:
    b_episode: list[ExperienceRecord] = field(default_factory=list)
    b_last: list[ExperienceRecord] = field(default_factory=list)
    b_all: list[ExperienceRecord] = field(default_factory=list)
    seen_total: int = 0  # records offered to b_all (drives the reservoir)

    def fold_episode(self) -> None:
        self.b_last.extend(self.b_episode)
        self.b_episode = []

    def finish_iteration(self, cap: int | None, rng: np.random.Generator) -> None:
        for rec in self.b_last:
            self.seen_total += 1
            if cap is None or len(self.b_all) < cap:
                self.b_all.append(rec)
            else:
                j = int(rng.integers(self.seen_total))
                if j < cap:
                    self.b_all[j] = rec

    def to_payload(self) -> dict:
        return {
            "b_episode": [r.to_payload() for r in self.b_episode],
            "b_last": [r.to_payload() for r in self.b_last],
            "b_all": [r.to_payload() for r in self.b_all],
            "seen_total": self.seen_total,
        }

    @classmethod
    def from_payload(cls, p: dict) -> "Buffers":
        return cls([ExperienceRecord.from_payload(r) for r in p["b_episode"]],
                   [ExperienceRecord.from_payload(r) for r in p["b_last"]],
                   [ExperienceRecord.from_payload(r) for r in p["b_all"]],
                   int(p["seen_total"]))


@dataclass
class TrainerState:
    config: TrainerConfig
    network: NetworkConfig
    schema: WorkloadSchema
    breaks: BreakOperatorSet | None
    hubs: dict[str, ModuleHub]
    model: CostModel
    model_copy: CostModel | None = None
    buffers: Buffers = field(default_factory=Buffers)
    iteration: int = 0
    online_error_history: list[float] = field(default_factory=list)
    pending_creations: list[tuple[str, TaskEncoding]] = field(default_factory=list)
    hub_max_prototypes: int | None = 8
    hub_warm_start: bool = True
    registry: dict[tuple[str, str], QueryCase] = field(default_factory=dict)
    _features: dict[tuple[str, str, int], tuple] = field(default_factory=dict)

    def features(self, q: QueryCase, idx: int) -> tuple[tuple[Task, ...], tuple[TaskEncoding, ...]]:
        key = (q.workload_id, q.qid, idx)
        hit = self._features.get(key)
        if hit is None:
            plan = q.candidates[idx]
            tasks = tuple(decompose(plan, self.breaks, origin=q.qid))
            sel = mapping_selectivities(q.selectivities)
            encs = tuple(encode_tasks(list(tasks), self.schema, sel, q.props,
                                      query_plan=plan, c_max=self.network.c_max))
            hit = (tasks, encs)
            self._features[key] = hit
        return hit

    def register(self, queries: Sequence[QueryCase]) -> None:
        for q in queries:
            self.registry[(q.workload_id, q.qid)] = q

    def hydrate(self, rec: ExperienceRecord) -> ExperienceRecord:
        if rec.encodings is None:
            q = self.registry.get((rec.workload_id, rec.qid))
            if q is None:
                raise TrainerError(f"cannot hydrate record for unknown query {rec.qid!r}")
            rec.tasks, rec.encodings = self.features(q, rec.candidate_index)
        return rec


# ---------------------------------------------------------------------------
# Model / hub construction
# ---------------------------------------------------------------------------


def module_input_dim(schema: WorkloadSchema, network: NetworkConfig) -> int:
    from .predictor import node_vector_dim

    return node_vector_dim(schema.n, network.a_widths[-1], network.node_onehot)


def build_state(config: TrainerConfig, network: NetworkConfig,
                schema: WorkloadSchema, breaks: BreakOperatorSet | None,
                hub_sizes: Mapping[str, int], init_tasks: Mapping[str, list[TaskEncoding]],
                gamma: float = 0.5, theta_new: float | None = None,
                theta_percentile: float = 95.0, m_min: int = 2,
                hub_init: str = "farthest_point", b_as_numeric: bool = False,
                hub_warm_start: bool = True,
                hub_max_prototypes: int | None = 8) -> TrainerState:
    """Initialize shared stacks, one hub per task kind with K modules each,
    fit hubs on the provided bootstrap tasks, and calibrate theta_new."""
    from .hub import ClusterPrototype, calibrate_threshold, fit, init_prototypes

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xA11CE]))
    in_dim = module_input_dim(schema, network)
    shared = SharedParams.init(rng, schema.n, network.a_widths,
                               network.rep_dim, network.att_dim, network.out_hidden)
    modules: dict[str, ModuleParams] = {}
    hubs: dict[str, ModuleHub] = {}
    kinds = (breaks.names() if breaks is not None else []) + ["OTH"]
    for kind in kinds:
        k = int(hub_sizes.get(kind, 1))
        uids = [f"{kind}-{i}" for i in range(k)]
        for uid in uids:
            modules[uid] = ModuleParams.init(rng, in_dim, network.module_hidden,
                                             network.rep_dim, uid)
        tasks = list(init_tasks.get(kind, []))
        if tasks:
            protos = init_prototypes(tasks, k, rng, uids, method=hub_init, gamma=gamma)
        else:
            blank = _blank_encoding(schema, network.c_max)
            protos = [ClusterPrototype.from_encoding(blank, uid) for uid in uids]
        hub = ModuleHub(kind, protos, gamma=gamma, m_min=m_min,
                        b_as_numeric=b_as_numeric)
        if tasks:
            fit(hub, tasks)
            hub.theta_new = (calibrate_threshold(hub, tasks, theta_percentile)
                             if theta_new is None else theta_new)
        elif theta_new is not None:
            hub.theta_new = theta_new
        hubs[kind] = hub
    state = TrainerState(config, network, schema, breaks, hubs,
                         CostModel(shared, modules),
                         hub_warm_start=hub_warm_start,
                         hub_max_prototypes=hub_max_prototypes)
    return state


def _blank_encoding(schema: WorkloadSchema, c_max: int) -> TaskEncoding:
    return TaskEncoding(np.zeros(schema.n), np.zeros(3 + 2 * schema.n, dtype=np.int64),
                        np.zeros((c_max, 3), dtype=np.int64),
                        np.zeros(4, dtype=np.int64), 0)


# ---------------------------------------------------------------------------
# Prediction / selection
# ---------------------------------------------------------------------------


def select_for_tasks(state: TrainerState, tasks: Sequence[Task],
                     encs: Sequence[TaskEncoding]) -> tuple[Selection, ...]:
    out = []
    for i, (task, enc) in enumerate(zip(tasks, encs)):
        hub = state.hubs[task.hub_kind]
        idx, uid = select_module(hub, enc)
        out.append(Selection(i, task.hub_kind, idx, uid))
    return tuple(out)


def predict_candidates(state: TrainerState, model: CostModel,
                       q: QueryCase) -> tuple[list[float], list[tuple[Selection, ...]]]:
    preds, all_sels = [], []
    for i in range(len(q.candidates)):
        tasks, encs = state.features(q, i)
        sels = select_for_tasks(state, tasks, encs)
        pred = compose(model, sels, state.network.node_onehot)
        value, _ = forward(pred, encs[0].a, list(tasks), list(encs))
        preds.append(value)
        all_sels.append(sels)
    return preds, all_sels


# ---------------------------------------------------------------------------
# Training passes
# ---------------------------------------------------------------------------


@dataclass
class TrainStats:
    steps: int = 0
    epochs_run: int = 0
    first_epoch_loss: float = float("nan")
    last_epoch_loss: float = float("nan")
    truncated: bool = False


def train_pass(state: TrainerState, model: CostModel,
               records: Sequence[ExperienceRecord], epochs: int,
               rng: np.random.Generator,
               seconds_cap: float | None = None) -> TrainStats:
    """Epochs of per-record adaptive steps on squared error in
    log(1+latency) space. Fresh optimizer state per call; the wall-clock
    cap truncates whole epochs."""
    stats = TrainStats()
    if not records or epochs <= 0:
        return stats
    lr = state.config.learning_rate
    opt_shared = AdamState.for_params(model.shared.p)
    opt_modules: dict[str, AdamState] = {}
    started = time.monotonic()
    for epoch in range(epochs):
        order = rng.permutation(len(records))
        total = 0.0
        for j in order:
            rec = state.hydrate(records[j])
            pred = compose(model, rec.selections, state.network.node_onehot)
            ev, grads = squared_error_eval(pred, rec.encodings[0].a,
                                           list(rec.tasks), list(rec.encodings),
                                           rec.target)
            total += ev.loss
            optimizer_step(model.shared.p, grads.shared, opt_shared, lr)
            for uid, g in grads.modules.items():
                opt = opt_modules.get(uid)
                if opt is None:
                    opt = opt_modules[uid] = AdamState.for_params(model.modules[uid].p)
                optimizer_step(model.modules[uid].p, g, opt, lr)
            stats.steps += 1
        epoch_loss = total / len(records)
        if epoch == 0:
            stats.first_epoch_loss = epoch_loss
        stats.last_epoch_loss = epoch_loss
        stats.epochs_run = epoch + 1
        if seconds_cap is not None and time.monotonic() - started > seconds_cap:
            stats.truncated = stats.epochs_run < epochs
            break
    return stats


def online_light_train(state: TrainerState, model_copy: CostModel,
                       records: Sequence[ExperienceRecord],
                       rng: np.random.Generator) -> TrainStats:
    return train_pass(state, model_copy, records, state.config.online_epochs,
                      rng, seconds_cap=state.config.online_seconds_cap)


def offline_update(state: TrainerState, drift: bool,
                   rng: np.random.Generator) -> tuple[CostModel, int]:
    """M <- deep_copy(M'), retrained on b_all (drift) or b_last; hub sweep
    and queued creations run here. Returns (new M, records trained on)."""
    if state.model_copy is None:
        raise TrainerError("offline update requires a model copy from a prior iteration")
    model = deep_copy(state.model_copy)
    use_all = drift and state.config.replay_on_drift
    data = state.buffers.b_all if use_all else state.buffers.b_last
    trained_on = len(data)
    if not data:
        logger.warning("offline update at iteration %d: selected buffer empty, "
                       "skipping training", state.iteration)
    else:
        train_pass(state, model, data, state.config.offline_epochs, rng)
    _run_maintenance(state, model)
    return model, trained_on


def _run_maintenance(state: TrainerState, model: CostModel) -> None:
    # Prune sparsely-used prototypes against the full history, then apply
    # creations queued during the online phase. Orphaned module params stay
    # in the model so old records remain trainable.
    by_kind: dict[str, list[TaskEncoding]] = {}
    for rec in state.buffers.b_all:
        state.hydrate(rec)
        for task, enc in zip(rec.tasks, rec.encodings):
            by_kind.setdefault(task.hub_kind, []).append(enc)
    for kind, hub in state.hubs.items():
        tasks = by_kind.get(kind)
        if tasks:
            sweep(hub, tasks)
    for kind, enc in state.pending_creations:
        hub = state.hubs[kind]

        def make_module(nearest_uid: str, new_uid: str) -> None:
            if state.hub_warm_start:
                model.modules[new_uid] = model.modules[nearest_uid].clone(new_uid)
            else:
                digest = hashlib.sha256(new_uid.encode()).digest()
                rng = np.random.default_rng(np.random.SeedSequence(
                    [state.config.seed, int.from_bytes(digest[:4], "little")]))
                model.modules[new_uid] = ModuleParams.init(
                    rng, module_input_dim(state.schema, state.network),
                    state.network.module_hidden, state.network.rep_dim, new_uid)

        maintain(hub, enc, make_module, state.hub_max_prototypes)
    state.pending_creations = []


def detect_drift(state: TrainerState, env) -> bool:
    """Oracle mode asks the environment for the ground-truth switch flag;
    loss-shift mode compares the last iteration's mean online error against
    the trailing 3-iteration mean."""
    if state.iteration == 0:
        return False
    if state.config.drift_detector == "oracle":
        return bool(env.drift_flag(state.iteration))
    history = state.online_error_history
    if len(history) < 4:
        return False
    last = history[-1]
    trailing = history[-4:-1]
    return last >= 1.5 * (sum(trailing) / 3.0)


# ---------------------------------------------------------------------------
# The iteration loop
# ---------------------------------------------------------------------------


@dataclass
class IterationReport:
    iteration: int
    workload_id: str
    volume_factor: float
    drift: bool
    offline_trained_on: int
    total_latency: float
    latencies: list[float]
    predictions: list[float]
    timeout_count: int
    episodes: int
    online_mean_error: float
    b_last_size: int
    b_all_size: int
    test_mse: float
    test_total_latency: float
    prototype_counts: dict[str, int]
    m_checksum_post_copy: str
    m_checksum_end_online: str
    offline_seconds: float
    online_seconds: float


def run_iteration(state: TrainerState, queries: Sequence[QueryCase], env) -> IterationReport:
    """One Algorithm-1 iteration against ``env`` (see SimEnvironment for the
    expected surface: execute, drift_flag, active, test_queries,
    evaluate_latency, failure_latency)."""
    cfg = state.config
    state.register(queries)
    it = state.iteration
    seed_seq = np.random.SeedSequence([cfg.seed, 0x17E4, it])
    rng_offline, rng_online, rng_buffer = (np.random.default_rng(s)
                                           for s in seed_seq.spawn(3))

    drift = detect_drift(state, env)
    offline_started = time.monotonic()
    trained_on = 0
    if it > 0:
        state.model, trained_on = offline_update(state, drift, rng_offline)
    offline_seconds = time.monotonic() - offline_started

    state.model_copy = deep_copy(state.model)
    state.buffers.b_last = []
    checksum_post_copy = state.model.checksum()

    episodes = [queries[i:i + cfg.episode_size]
                for i in range(0, len(queries), cfg.episode_size)]
    latencies: list[float] = []
    predictions: list[float] = []
    abs_errors: list[float] = []
    timeout_count = 0
    online_seconds = 0.0
    for ep_index, episode in enumerate(episodes):
        for q in episode:
            preds, sels = predict_candidates(state, state.model_copy, q)
            chosen = int(np.argmin(preds))
            try:
                latency, timed_out = env.execute(q, q.candidates[chosen])
            except Exception:
                logger.warning("executor failure for query %s; recording a "
                               "timeout-cost experience", q.qid)
                latency, timed_out = env.failure_latency(q)
            tasks, encs = state.features(q, chosen)
            rec = ExperienceRecord(q.qid, q.workload_id, chosen, latency,
                                   timed_out, it, ep_index, sels[chosen],
                                   tasks, encs)
            state.buffers.b_episode.append(rec)
            latencies.append(latency)
            predictions.append(preds[chosen])
            abs_errors.append(abs(preds[chosen] - rec.target))
            if timed_out:
                timeout_count += 1
            _queue_creations(state, tasks, encs)
        t0 = time.monotonic()
        online_light_train(state, state.model_copy, state.buffers.b_episode, rng_online)
        online_seconds += time.monotonic() - t0
        state.buffers.fold_episode()
    state.buffers.finish_iteration(cfg.b_all_cap, rng_buffer)
    checksum_end_online = state.model.checksum()

    test_mse, test_latency = evaluate(state, state.model, env)
    wid, vf = env.active(it)
    report = IterationReport(
        iteration=it,
        workload_id=wid,
        volume_factor=vf,
        drift=drift,
        offline_trained_on=trained_on,
        total_latency=float(sum(latencies)),
        latencies=latencies,
        predictions=predictions,
        timeout_count=timeout_count,
        episodes=len(episodes),
        online_mean_error=float(np.mean(abs_errors)) if abs_errors else 0.0,
        b_last_size=len(state.buffers.b_last),
        b_all_size=len(state.buffers.b_all),
        test_mse=test_mse,
        test_total_latency=test_latency,
        prototype_counts={k: h.k for k, h in sorted(state.hubs.items())},
        m_checksum_post_copy=checksum_post_copy,
        m_checksum_end_online=checksum_end_online,
        offline_seconds=offline_seconds,
        online_seconds=online_seconds,
    )
    state.online_error_history.append(report.online_mean_error)
    state.iteration += 1
    return report


def _queue_creations(state: TrainerState, tasks: Sequence[Task],
                     encs: Sequence[TaskEncoding]) -> None:
    # The online phase is read-only on hubs; remember far-away tasks and
    # let the offline phase decide.
    for task, enc in zip(tasks, encs):
        hub = state.hubs[task.hub_kind]
        if math.isinf(hub.theta_new):
            continue
        if float(hub.dissimilarities(enc).min()) > hub.theta_new:
            state.pending_creations.append((task.hub_kind, enc))


def evaluate(state: TrainerState, model: CostModel, env) -> tuple[float, float]:
    """Side-effect-free test-set evaluation of M: mean squared prediction
    error over every candidate plus the total latency of argmin choices.
    Test executions never enter the buffers."""
    test = env.test_queries(state.iteration)
    if not test:
        return float("nan"), 0.0
    state.register(test)
    sq_errors = []
    total_latency = 0.0
    for q in test:
        preds, _ = predict_candidates(state, model, q)
        for i, value in enumerate(preds):
            true_latency = env.evaluate_latency(q, q.candidates[i])
            sq_errors.append((value - math.log1p(true_latency)) ** 2)
        chosen = int(np.argmin(preds))
        total_latency += env.evaluate_latency(q, q.candidates[chosen])
    return float(np.mean(sq_errors)), float(total_latency)


# ---------------------------------------------------------------------------
# State persistence
# ---------------------------------------------------------------------------


def state_to_payload(state: TrainerState) -> dict:
    return {
        "iteration": state.iteration,
        "hubs": {k: h.to_payload() for k, h in sorted(state.hubs.items())},
        "model": state.model.to_payload(),
        "model_copy": None if state.model_copy is None else state.model_copy.to_payload(),
        "buffers": state.buffers.to_payload(),
        "online_error_history": list(state.online_error_history),
        "pending_creations": [
            {"kind": kind, "enc": {
                "a": enc.a.tolist(), "b": enc.b.tolist(),
                "c": enc.c.tolist(), "d": enc.d.tolist(), "n_nodes": enc.n_nodes}}
            for kind, enc in state.pending_creations
        ],
    }


def state_from_payload(state: TrainerState, payload: dict) -> TrainerState:
    """Restore the mutable parts of a freshly built state from a payload."""
    state.iteration = int(payload["iteration"])
    state.hubs = {k: ModuleHub.from_payload(p) for k, p in payload["hubs"].items()}
    state.model = CostModel.from_payload(payload["model"])
    state.model_copy = (None if payload["model_copy"] is None
                        else CostModel.from_payload(payload["model_copy"]))
    state.buffers = Buffers.from_payload(payload["buffers"])
    state.online_error_history = [float(v) for v in payload["online_error_history"]]
    state.pending_creations = [
        (e["kind"], TaskEncoding(
            np.array(e["enc"]["a"], dtype=np.float64),
            np.array(e["enc"]["b"], dtype=np.int64),
            np.array(e["enc"]["c"], dtype=np.int64),
            np.array(e["enc"]["d"], dtype=np.int64),
            int(e["enc"]["n_nodes"])))
        for e in payload["pending_creations"]
    ]
    return state
