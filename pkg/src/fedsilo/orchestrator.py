"""Experiment lifecycle: configure, launch, drive rounds, report.

One supervisor thread per running experiment owns that experiment's
aggregator state and is the only writer of its record; API reads are
snapshots. Synchronous experiments dispatch a full round to the roster
and wait for a quorum; asynchronous ones keep every client busy and
aggregate results as they arrive, discounted by staleness.

Records are persisted after every round, so a killed server comes back
with rounds 1..k intact. Synchronous experiments then resume at round
k+1 (the interrupted round restarts under fresh task ids); asynchronous
experiments are marked failed because the in-memory buffer state is
gone. That policy is asserted by tests, not just documented.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import queue
import secrets
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from .aggregation import (
    Algorithm,
    AggregatorHyper,
    AggregatorState,
    ClientUpdate,
    TrainingMetrics,
    aggregate,
    step_fedasync,
    step_fedbuff,
)
from .dispatch import DispatchService, TaskEnvelope, TaskResult, new_task_id
from .errors import (
    EndpointOffline,
    InvalidConfig,
    NoSuchExperiment,
    QuorumNotReached,
)
from .iam import IamService
from .models import ModelSpec, init_params
from .params import ParameterVector, deserialize, serialize
from .privacy import PrivacyConfig
from .store import DataDir, atomic_write_json

LOSSES = ("cross_entropy", "mse")
DEFAULT_ROUND_TIMEOUT_S = 300.0


@dataclass(frozen=True)
class ExperimentConfig:
    federation_id: str
    name: str
    algorithm: Algorithm
    model_spec: ModelSpec
    roster: tuple[str, ...]
    loss: str = "cross_entropy"
    rounds: int = 10
    local_epochs: int = 2
    batch_size: int = 64
    client_lr: float = 0.01
    lr_decay: float = 1.0
    aggregator_hyper: AggregatorHyper = field(default_factory=AggregatorHyper)
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    quorum_fraction: float = 1.0
    round_timeout_s: float = DEFAULT_ROUND_TIMEOUT_S
    seed: int = 0
    collect_data_distribution: bool = False

    def to_dict(self) -> dict:
        return {
            "federation_id": self.federation_id,
            "name": self.name,
            "algorithm": self.algorithm.value,
            "model_spec": self.model_spec.to_dict(),
            "roster": list(self.roster),
            "loss": self.loss,
            "rounds": self.rounds,
            "local_epochs": self.local_epochs,
            "batch_size": self.batch_size,
            "client_lr": self.client_lr,
            "lr_decay": self.lr_decay,
            "aggregator_hyper": self.aggregator_hyper.to_dict(),
            "privacy": self.privacy.to_dict(),
            "quorum_fraction": self.quorum_fraction,
            "round_timeout_s": self.round_timeout_s,
            "seed": self.seed,
            "collect_data_distribution": self.collect_data_distribution,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        errors: dict[str, str] = {}

        def take(name, conv, default=None, required=False):
            if name not in d or d[name] is None:
                if required:
                    errors[name] = "required"
                return default
            try:
                return conv(d[name])
            except Exception as exc:
                errors[name] = str(exc)
                return default

        algorithm = take("algorithm", Algorithm, required=True)
        model_spec = take("model_spec", ModelSpec.from_dict, required=True)
        hyper = take("aggregator_hyper", AggregatorHyper.from_dict, AggregatorHyper())
        privacy = take("privacy", PrivacyConfig.from_dict, PrivacyConfig())
        cfg_kwargs = dict(
            federation_id=take("federation_id", str, required=True) or "",
            name=take("name", str, "unnamed"),
            roster=tuple(take("roster", list, required=True) or ()),
            loss=take("loss", str, "cross_entropy"),
            rounds=take("rounds", int, 10),
            local_epochs=take("local_epochs", int, 2),
            batch_size=take("batch_size", int, 64),
            client_lr=take("client_lr", float, 0.01),
            lr_decay=take("lr_decay", float, 1.0),
            quorum_fraction=take("quorum_fraction", float, 1.0),
            round_timeout_s=take("round_timeout_s", float, DEFAULT_ROUND_TIMEOUT_S),
            seed=take("seed", int, 0),
            collect_data_distribution=take("collect_data_distribution", bool, False),
        )
        if errors:
            raise InvalidConfig(errors)
        cfg = cls(
            algorithm=algorithm,
            model_spec=model_spec,
            aggregator_hyper=hyper,
            privacy=privacy,
            **cfg_kwargs,
        )
        cfg.validate_fields()
        return cfg

    def validate_fields(self) -> None:
        errors = {}
        if not self.roster:
            errors["roster"] = "roster must not be empty"
        if len(set(self.roster)) != len(self.roster):
            errors["roster"] = "roster contains duplicate endpoints"
        if self.rounds < 1:
            errors["rounds"] = "must be >= 1"
        if self.local_epochs < 1:
            errors["local_epochs"] = "must be >= 1"
        if self.batch_size < 1:
            errors["batch_size"] = "must be >= 1"
        if self.client_lr <= 0:
            errors["client_lr"] = "must be > 0"
        if not 0.0 < self.lr_decay <= 1.0:
            errors["lr_decay"] = "must lie in (0, 1]"
        if not 0.0 < self.quorum_fraction <= 1.0:
            errors["quorum_fraction"] = "must lie in (0, 1]"
        if self.round_timeout_s <= 0:
            errors["round_timeout_s"] = "must be > 0"
        if self.loss not in LOSSES:
            errors["loss"] = f"must be one of {LOSSES}"
        if errors:
            raise InvalidConfig(errors)


def client_lr_for_round(config: ExperimentConfig, round_index: int) -> float:
    """Decayed learning rate for a 1-based round index."""
    return config.client_lr * config.lr_decay ** (round_index - 1)


def derive_seed(base: int, *parts) -> int:
    """Stable per-task seed from the experiment seed and task coordinates."""
    text = ":".join([str(base), *map(str, parts)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


class _Runtime:
    """In-memory side of one experiment: queues, locks, supervisor."""

    def __init__(self, record: dict, log):
        self.record = record
        self.log = log
        self.lock = threading.RLock()
        self.results: "queue.Queue[tuple[TaskEnvelope, Optional[TaskResult]]]" = queue.Queue()
        self.pending_train: list[tuple[TaskEnvelope, Optional[TaskResult]]] = []
        self.cancel = threading.Event()
        self.thread: Optional[threading.Thread] = None


class Orchestrator:
    def __init__(
        self,
        data: DataDir,
        iam: IamService,
        dispatch: DispatchService,
        clock=time.time,
    ):
        self.data = data
        self.iam = iam
        self.dispatch = dispatch
        self.clock = clock
        self._runtimes: dict[str, _Runtime] = {}
        self._task_index: dict[str, str] = {}  # task_id -> experiment_id
        self._histogram_waits: dict[str, queue.Queue] = {}
        self._lock = threading.RLock()
        dispatch.on_result(self._on_result)
        dispatch.on_expiry(self._on_expiry)
        self._load_existing()

    # --- persistence ------------------------------------------------------------

    def _persist(self, experiment_id: str) -> None:
        rt = self._runtimes[experiment_id]
        with rt.lock:
            atomic_write_json(self.data.experiment_record_path(experiment_id), rt.record)

    def _load_existing(self) -> None:
        for experiment_id in self.data.experiment_ids():
            import json

            record = json.loads(self.data.experiment_record_path(experiment_id).read_text())
            rt = _Runtime(record, self.data.experiment_log(experiment_id))
            self._runtimes[experiment_id] = rt
            if record["status"] in ("created", "running"):
                algo = Algorithm(record["config"]["algorithm"])
                if algo.is_async:
                    record["status"] = "failed"
                    record["error"] = "server restarted; asynchronous state is not resumable"
                    rt.log.append("server restart: async experiment marked failed")
                    self._persist(experiment_id)
                else:
                    done = len(record["rounds"])
                    rt.log.append(f"server restart: resuming at round {done + 1}")
                    self._start_supervisor(experiment_id)

    # --- result routing -----------------------------------------------------------

    def _on_result(self, envelope: TaskEnvelope, result: TaskResult) -> None:
        if envelope.kind == "data_histogram":
            waiter = self._histogram_waits.get(envelope.experiment_id)
            if waiter:
                waiter.put((envelope, result))
            return
        rt = self._runtimes.get(envelope.experiment_id)
        if rt:
            rt.results.put((envelope, result))

    def _on_expiry(self, envelope: TaskEnvelope) -> None:
        if envelope.kind == "data_histogram":
            waiter = self._histogram_waits.get(envelope.experiment_id)
            if waiter:
                waiter.put((envelope, None))
            return
        rt = self._runtimes.get(envelope.experiment_id)
        if rt:
            rt.log.append(f"task {envelope.task_id} ({envelope.kind}) expired unanswered")
            rt.results.put((envelope, None))

    # --- experiment API --------------------------------------------------------------

    def launch_experiment(self, token: str, config_dict: dict) -> dict:
        config = ExperimentConfig.from_dict(config_dict)
        self.iam.authorize(token, config.federation_id, required_role="admin")
        errors = {}
        for endpoint_id in config.roster:
            try:
                fed = self.dispatch.endpoint_federation(endpoint_id)
            except Exception:
                errors["roster"] = f"endpoint {endpoint_id} is not registered"
                continue
            if fed != config.federation_id:
                errors["roster"] = f"endpoint {endpoint_id} belongs to another federation"
        if errors:
            raise InvalidConfig(errors)
        offline = [e for e in config.roster if self.dispatch.endpoint_status(e) == "offline"]
        if offline:
            raise EndpointOffline(f"roster endpoints offline: {', '.join(sorted(offline))}")

        experiment_id = "exp_" + secrets.token_hex(8)
        record = {
            "experiment_id": experiment_id,
            "config": config.to_dict(),
            "status": "running",
            "created_at": self.clock(),
            "finished_at": None,
            "rounds": [],
            "final_model": None,
            "data_histograms": {},
            "error": None,
        }
        rt = _Runtime(record, self.data.experiment_log(experiment_id))
        with self._lock:
            self._runtimes[experiment_id] = rt
        rt.log.append(
            f"experiment {experiment_id} ({config.name}) launched: "
            f"{config.algorithm.value}, {config.rounds} rounds, "
            f"{len(config.roster)} clients"
        )
        self._persist(experiment_id)
        if config.collect_data_distribution:
            try:
                record["data_histograms"] = self._collect_histograms(
                    config.federation_id, config.roster, experiment_id
                )
                self._persist(experiment_id)
            except Exception as exc:
                rt.log.append(f"data distribution collection failed: {exc}")
        self._start_supervisor(experiment_id)
        return self.experiment_view(experiment_id)

    def _start_supervisor(self, experiment_id: str) -> None:
        rt = self._runtimes[experiment_id]
        config = ExperimentConfig.from_dict(rt.record["config"])
        target = self._run_async if config.algorithm.is_async else self._run_sync
        rt.thread = threading.Thread(
            target=target, args=(experiment_id,), name=f"supervisor-{experiment_id}",
            daemon=True,
        )
        rt.thread.start()

    # --- shared helpers ---------------------------------------------------------------

    def _restore_state(self, rt: _Runtime, config: ExperimentConfig) -> AggregatorState:
        rounds = rt.record["rounds"]
        if not rounds:
            return AggregatorState(
                algorithm=config.algorithm,
                global_model=init_params(config.model_spec),
                hyper=config.aggregator_hyper,
            )
        last = rounds[-1]
        blob = self.dispatch.blob_get(last["global_digest"])
        momentum = second = None
        agg = last.get("aggregator", {})
        if agg.get("momentum"):
            momentum = deserialize(self.dispatch.blob_get(agg["momentum"]))
        if agg.get("second_moment"):
            second = deserialize(self.dispatch.blob_get(agg["second_moment"]))
        return AggregatorState(
            algorithm=config.algorithm,
            global_model=deserialize(blob),
            round=len(rounds),
            momentum=momentum,
            second_moment=second,
            hyper=config.aggregator_hyper,
        )

    def _upload_model(self, model: ParameterVector, federation_id: str) -> str:
        return self.dispatch.blob_put(serialize(model), federation_id)

    def _dispatch_task(
        self,
        config: ExperimentConfig,
        experiment_id: str,
        endpoint_id: str,
        kind: str,
        round_index: int,
        base_round: int,
        digest: Optional[str],
        lr: float,
    ) -> TaskEnvelope:
        payload = {
            "model_spec": config.model_spec.to_dict(),
            "loss": config.loss,
            "local_epochs": config.local_epochs,
            "batch_size": config.batch_size,
            "lr": lr,
            "seed": derive_seed(config.seed, round_index, endpoint_id),
            "base_round": base_round,
            "privacy": config.privacy.to_dict(),
        }
        if config.privacy.mechanism == "laplace":
            payload["privacy"]["noise_seed"] = (
                derive_seed(config.privacy.noise_seed, round_index, endpoint_id, "dp")
                if config.privacy.noise_seed is not None
                else None
            )
        envelope = TaskEnvelope(
            task_id=new_task_id(),
            experiment_id=experiment_id,
            round=round_index,
            kind=kind,
            config_payload=payload,
            model_blob=digest,
            deadline=self.clock() + config.round_timeout_s,
        )
        self._task_index[envelope.task_id] = experiment_id
        self.dispatch.enqueue_task(endpoint_id, envelope, config.federation_id)
        return envelope

    def _await_task_results(
        self,
        rt: _Runtime,
        wanted: dict[str, str],
        needed_successes: int,
        timeout_s: float,
        stash_other_kind: Optional[str] = None,
    ) -> dict[str, tuple[TaskEnvelope, Optional[TaskResult]]]:
        """Collect results for the given task_id -> endpoint_id map.

        Returns endpoint_id -> (envelope, result-or-None). Stops when
        every wanted task has an outcome, when successes reach
        needed_successes and every outstanding task could no longer
        change that, or at the timeout. Items of ``stash_other_kind``
        are buffered for the caller instead of dropped.
        """
        outcomes: dict[str, tuple[TaskEnvelope, Optional[TaskResult]]] = {}
        deadline = time.monotonic() + timeout_s
        while len(outcomes) < len(wanted):
            successes = sum(
                1 for _, r in outcomes.values() if r is not None and r.status == "success"
            )
            if successes >= needed_successes:
                break
            remaining = deadline - time.monotonic()
            if remaining <= 0 or rt.cancel.is_set():
                break
            try:
                envelope, result = rt.results.get(timeout=min(remaining, 0.5))
            except queue.Empty:
                continue
            if envelope.task_id in wanted:
                outcomes[wanted[envelope.task_id]] = (envelope, result)
            elif stash_other_kind and envelope.kind == stash_other_kind:
                rt.pending_train.append((envelope, result))
            else:
                rt.log.append(
                    f"ignoring late {envelope.kind} result for round {envelope.round}"
                )
        return outcomes

    def _evaluate_global(
        self,
        rt: _Runtime,
        config: ExperimentConfig,
        experiment_id: str,
        round_index: int,
        digest: str,
    ) -> tuple[Optional[float], Optional[float]]:
        """Sample-weighted mean of client validation metrics for one model."""
        wanted = {}
        for endpoint_id in config.roster:
            env = self._dispatch_task(
                config, experiment_id, endpoint_id, "evaluate",
                round_index, round_index, digest, lr=0.0,
            )
            wanted[env.task_id] = endpoint_id
        outcomes = self._await_task_results(
            rt, wanted, needed_successes=len(wanted),
            timeout_s=config.round_timeout_s, stash_other_kind="train",
        )
        weighted_acc = weighted_loss = total = 0.0
        for endpoint_id, (_, result) in outcomes.items():
            if result is None or result.status != "success":
                rt.log.append(f"evaluation on {endpoint_id} unavailable")
                continue
            n = max(1, result.sample_count)
            weighted_acc += result.metrics.accuracy * n
            weighted_loss += result.metrics.loss * n
            total += n
        if total == 0:
            rt.log.append(f"round {round_index}: no client evaluated the global model")
            return None, None
        return weighted_acc / total, weighted_loss / total

    # --- synchronous loop ----------------------------------------------------------------

    def _run_sync(self, experiment_id: str) -> None:
        rt = self._runtimes[experiment_id]
        config = ExperimentConfig.from_dict(rt.record["config"])
        try:
            state = self._restore_state(rt, config)
            start_round = state.round + 1
            for round_index in range(start_round, config.rounds + 1):
                if rt.cancel.is_set():
                    self._finish(experiment_id, "cancelled")
                    return
                state = self._run_sync_round(rt, config, experiment_id, state, round_index)
            digest = self._upload_model(state.global_model, config.federation_id)
            with rt.lock:
                rt.record["final_model"] = digest
            self._finish(experiment_id, "finished")
        except QuorumNotReached as exc:
            self._finish(experiment_id, "failed", str(exc))
        except Exception as exc:  # supervisor must never die silently
            rt.log.append(f"supervisor error: {exc!r}")
            self._finish(experiment_id, "failed", repr(exc))

    def _run_sync_round(
        self,
        rt: _Runtime,
        config: ExperimentConfig,
        experiment_id: str,
        state: AggregatorState,
        round_index: int,
    ) -> AggregatorState:
        started = self.clock()
        lr = client_lr_for_round(config, round_index)
        digest = self._upload_model(state.global_model, config.federation_id)
        rt.log.append(
            f"round {round_index}: dispatching train tasks (lr={lr:.6g}, model {digest[:12]})"
        )
        wanted = {}
        for endpoint_id in config.roster:
            env = self._dispatch_task(
                config, experiment_id, endpoint_id, "train",
                round_index, state.round, digest, lr,
            )
            wanted[env.task_id] = endpoint_id
        needed = math.ceil(config.quorum_fraction * len(config.roster))
        outcomes = self._await_task_results(
            rt, wanted, needed_successes=needed, timeout_s=config.round_timeout_s
        )

        updates = []
        per_client = {}
        for endpoint_id in config.roster:  # roster order keeps aggregation deterministic
            entry = outcomes.get(endpoint_id)
            if entry is None:
                per_client[endpoint_id] = {"status": "missing"}
                continue
            envelope, result = entry
            if result is None:
                per_client[endpoint_id] = {"status": "expired"}
                continue
            per_client[endpoint_id] = {
                "status": result.status,
                "metrics": result.metrics.to_dict(),
                "wall_seconds": result.wall_seconds,
            }
            if result.status != "success":
                rt.log.append(f"round {round_index}: {endpoint_id} failed: {result.error_message}")
                continue
            weights = deserialize(self.dispatch.blob_get(result.result_blob))
            updates.append(
                ClientUpdate(
                    endpoint_id=endpoint_id,
                    base_round=envelope.config_payload["base_round"],
                    weights=weights,
                    sample_count=result.sample_count,
                    metrics=result.metrics,
                )
            )
            rt.log.append(
                f"round {round_index}: {endpoint_id} returned "
                f"loss={result.metrics.loss:.4f} acc={result.metrics.accuracy:.4f} "
                f"in {result.wall_seconds:.2f}s"
            )
        if len(updates) < needed:
            missing = sorted(
                e for e in config.roster
                if per_client.get(e, {}).get("status") != "success"
            )
            raise QuorumNotReached(
                f"round {round_index}: {len(updates)}/{needed} required updates; "
                f"missing or failed: {', '.join(missing)}"
            )

        state = aggregate(state, updates)
        new_digest = self._upload_model(state.global_model, config.federation_id)
        rt.log.append(f"round {round_index}: aggregated {len(updates)} updates -> {new_digest[:12]}")
        acc, loss = self._evaluate_global(rt, config, experiment_id, round_index, new_digest)
        if acc is not None:
            rt.log.append(f"round {round_index}: global val acc={acc:.4f} loss={loss:.4f}")
        self._append_round(
            rt, experiment_id, state, round_index, per_client, acc, loss,
            started, lr, new_digest, config,
        )
        return state

    def _append_round(
        self, rt, experiment_id, state, round_index, per_client, acc, loss,
        started, lr, digest, config,
    ) -> None:
        aggregator = {"momentum": None, "second_moment": None}
        if state.momentum is not None:
            aggregator["momentum"] = self._upload_model(state.momentum, config.federation_id)
        if state.second_moment is not None:
            aggregator["second_moment"] = self._upload_model(
                state.second_moment, config.federation_id
            )
        record_row = {
            "round": round_index,
            "client_lr_used": lr,
            "per_client": per_client,
            "global_val_accuracy": acc,
            "global_val_loss": loss,
            "started_at": started,
            "finished_at": self.clock(),
            "global_digest": digest,
            "aggregator": aggregator,
        }
        with rt.lock:
            rt.record["rounds"].append(record_row)
        self._persist(experiment_id)

    # --- asynchronous loop -----------------------------------------------------------------

    def _run_async(self, experiment_id: str) -> None:
        rt = self._runtimes[experiment_id]
        config = ExperimentConfig.from_dict(rt.record["config"])
        try:
            state = AggregatorState(
                algorithm=config.algorithm,
                global_model=init_params(config.model_spec),
                hyper=config.aggregator_hyper,
            )
            digest = self._upload_model(state.global_model, config.federation_id)
            live = set(config.roster)
            dispatch_counter = {e: 0 for e in config.roster}
            for endpoint_id in config.roster:
                dispatch_counter[endpoint_id] += 1
                self._dispatch_task(
                    config, experiment_id, endpoint_id, "train",
                    dispatch_counter[endpoint_id], state.round, digest,
                    client_lr_for_round(config, state.round + 1),
                )
            while state.round < config.rounds:
                if rt.cancel.is_set():
                    self._finish(experiment_id, "cancelled")
                    return
                if not live:
                    raise QuorumNotReached("all clients failed or retired")
                envelope, result = self._next_train_result(rt, config)
                if envelope is None:
                    raise QuorumNotReached(
                        f"no client activity within {config.round_timeout_s}s"
                    )
                endpoint_id = self._endpoint_for(envelope, config)
                if result is None or result.status != "success":
                    reason = result.error_message if result else "task expired"
                    rt.log.append(f"async: retiring {endpoint_id}: {reason}")
                    live.discard(endpoint_id)
                    continue
                update = ClientUpdate(
                    endpoint_id=endpoint_id,
                    base_round=envelope.config_payload["base_round"],
                    weights=deserialize(self.dispatch.blob_get(result.result_blob)),
                    sample_count=result.sample_count,
                    metrics=result.metrics,
                )
                staleness = state.round - update.base_round
                if config.algorithm is Algorithm.FEDASYNC:
                    state, emitted = step_fedasync(state, update), True
                else:
                    state, emitted = step_fedbuff(state, update)
                digest = self._upload_model(state.global_model, config.federation_id)
                if emitted:
                    rt.log.append(
                        f"async round {state.round}: applied update from {endpoint_id} "
                        f"(staleness {staleness})"
                    )
                    acc, loss = self._evaluate_global(
                        rt, config, experiment_id, state.round, digest
                    )
                    per_client = {
                        endpoint_id: {
                            "status": "success",
                            "metrics": result.metrics.to_dict(),
                            "wall_seconds": result.wall_seconds,
                            "staleness": staleness,
                        }
                    }
                    self._append_round(
                        rt, experiment_id, state, state.round, per_client, acc, loss,
                        self.clock(), client_lr_for_round(config, state.round), digest,
                        config,
                    )
                else:
                    rt.log.append(
                        f"async: buffered update from {endpoint_id} "
                        f"({len(state.buffer)}/{config.aggregator_hyper.buffer_size})"
                    )
                if state.round < config.rounds and endpoint_id in live:
                    dispatch_counter[endpoint_id] += 1
                    self._dispatch_task(
                        config, experiment_id, endpoint_id, "train",
                        dispatch_counter[endpoint_id], state.round, digest,
                        client_lr_for_round(config, state.round + 1),
                    )
            with rt.lock:
                rt.record["final_model"] = digest
            self.dispatch.cancel_experiment_tasks(experiment_id)
            self._finish(experiment_id, "finished")
        except QuorumNotReached as exc:
            self._finish(experiment_id, "failed", str(exc))
        except Exception as exc:
            rt.log.append(f"supervisor error: {exc!r}")
            self._finish(experiment_id, "failed", repr(exc))

    def _next_train_result(self, rt: _Runtime, config: ExperimentConfig):
        if rt.pending_train:
            return rt.pending_train.pop(0)
        deadline = time.monotonic() + config.round_timeout_s
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0 or rt.cancel.is_set():
                return None, None
            try:
                envelope, result = rt.results.get(timeout=min(remaining, 0.5))
            except queue.Empty:
                continue
            if envelope.kind == "train":
                return envelope, result
            rt.log.append(f"ignoring late {envelope.kind} result")

    def _endpoint_for(self, envelope: TaskEnvelope, config: ExperimentConfig) -> str:
        state = self.dispatch.task_state(envelope.task_id)
        # dispatch no longer knows expired tasks' endpoints; recover from payload seed
        for endpoint_id in config.roster:
            if envelope.config_payload["seed"] == derive_seed(
                config.seed, envelope.round, endpoint_id
            ):
                return endpoint_id
        return "unknown"

    # --- finishing -----------------------------------------------------------------------

    def _finish(self, experiment_id: str, status: str, error: Optional[str] = None) -> None:
        rt = self._runtimes[experiment_id]
        with rt.lock:
            rt.record["status"] = status
            rt.record["finished_at"] = self.clock()
            rt.record["error"] = error
        rt.log.append(f"experiment {status}" + (f": {error}" if error else ""))
        self._persist(experiment_id)

    def cancel_experiment(self, token: str, experiment_id: str) -> dict:
        rt = self._require(experiment_id)
        self.iam.authorize(token, rt.record["config"]["federation_id"], required_role="admin")
        rt.cancel.set()
        self.dispatch.cancel_experiment_tasks(experiment_id)
        rt.log.append("cancellation requested")
        return self.experiment_view(experiment_id)

    # --- reads ---------------------------------------------------------------------------

    def _require(self, experiment_id: str) -> _Runtime:
        rt = self._runtimes.get(experiment_id)
        if rt is None:
            raise NoSuchExperiment(f"no experiment {experiment_id}")
        return rt

    def authorize_read(self, token: str, experiment_id: str) -> _Runtime:
        rt = self._require(experiment_id)
        self.iam.authorize(token, rt.record["config"]["federation_id"])
        return rt

    def experiment_view(self, experiment_id: str) -> dict:
        rt = self._require(experiment_id)
        with rt.lock:
            import copy

            view = copy.deepcopy(rt.record)
        view["log_lines"] = len(rt.log)
        return view

    def get_experiment(self, token: str, experiment_id: str) -> dict:
        self.authorize_read(token, experiment_id)
        return self.experiment_view(experiment_id)

    def list_experiments(self, token: str, federation_id: str) -> list[dict]:
        self.iam.authorize(token, federation_id)
        out = []
        for eid, rt in sorted(self._runtimes.items()):
            if rt.record["config"]["federation_id"] == federation_id:
                with rt.lock:
                    out.append(
                        {
                            "experiment_id": eid,
                            "name": rt.record["config"]["name"],
                            "algorithm": rt.record["config"]["algorithm"],
                            "status": rt.record["status"],
                            "rounds_completed": len(rt.record["rounds"]),
                            "rounds_total": rt.record["config"]["rounds"],
                            "created_at": rt.record["created_at"],
                        }
                    )
        return out

    def stream_logs(self, token: str, experiment_id: str, from_line: int, wait_s: float) -> dict:
        rt = self.authorize_read(token, experiment_id)
        lines = rt.log.read(from_line, wait_s)
        return {"from_line": from_line, "lines": lines, "next_line": from_line + len(lines)}

    # --- data distribution ------------------------------------------------------------------

    def collect_data_distribution(
        self, token: str, federation_id: str, roster: list[str]
    ) -> dict:
        self.iam.authorize(token, federation_id, required_role="admin")
        offline = [e for e in roster if self.dispatch.endpoint_status(e) == "offline"]
        if offline:
            raise EndpointOffline(f"endpoints offline: {', '.join(sorted(offline))}")
        return self._collect_histograms(federation_id, roster, "hist_" + secrets.token_hex(6))

    def _collect_histograms(
        self, federation_id: str, roster, collection_id: str, timeout_s: float = 60.0
    ) -> dict:
        waiter: queue.Queue = queue.Queue()
        self._histogram_waits[collection_id] = waiter
        wanted = {}
        try:
            for endpoint_id in roster:
                env = TaskEnvelope(
                    task_id=new_task_id(),
                    experiment_id=collection_id,
                    round=0,
                    kind="data_histogram",
                    config_payload={},
                    model_blob=None,
                    deadline=self.clock() + timeout_s,
                )
                wanted[env.task_id] = endpoint_id
                self.dispatch.enqueue_task(endpoint_id, env, federation_id)
            histograms: dict[str, dict] = {}
            deadline = time.monotonic() + timeout_s
            while len(histograms) < len(wanted):
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                try:
                    envelope, result = waiter.get(timeout=min(remaining, 0.5))
                except queue.Empty:
                    continue
                endpoint_id = wanted.get(envelope.task_id)
                if endpoint_id is None:
                    continue
                if result is None or result.status != "success" or result.histogram is None:
                    histograms[endpoint_id] = {"histogram": None, "warning": "unavailable"}
                else:
                    entry = {"histogram": result.histogram}
                    if sum(result.histogram) == 0:
                        entry["warning"] = "empty dataset"
                    histograms[endpoint_id] = entry
            for endpoint_id in wanted.values():
                histograms.setdefault(
                    endpoint_id, {"histogram": None, "warning": "no response"}
                )
            return histograms
        finally:
            self._histogram_waits.pop(collection_id, None)

    # --- reports -------------------------------------------------------------------------------

    def generate_report(self, token: str, experiment_id: str) -> dict:
        rt = self.authorize_read(token, experiment_id)
        with rt.lock:
            record = rt.record
            config = record["config"]
            rows = []
            for r in record["rounds"]:
                rows.append(
                    {
                        "round": r["round"],
                        "client_lr_used": r["client_lr_used"],
                        "global_val_accuracy": r["global_val_accuracy"],
                        "global_val_loss": r["global_val_loss"],
                        "duration_seconds": r["finished_at"] - r["started_at"],
                        "per_client": {
                            e: {
                                "status": pc.get("status"),
                                "accuracy": pc.get("metrics", {}).get("accuracy"),
                                "loss": pc.get("metrics", {}).get("loss"),
                                "wall_seconds": pc.get("wall_seconds"),
                            }
                            for e, pc in r["per_client"].items()
                        },
                    }
                )
            report = {
                "experiment_id": experiment_id,
                "name": config["name"],
                "algorithm": config["algorithm"],
                "status": record["status"],
                "config": config,
                "rounds": rows,
                "final_model": record["final_model"],
                "data_histograms": record["data_histograms"],
            }
            if config["privacy"]["mechanism"] == "laplace":
                report["privacy_accounting"] = {
                    "per_round_epsilon": config["privacy"]["epsilon"],
                    "composed_epsilon": config["privacy"]["epsilon"] * len(record["rounds"]),
                    "composition": "basic",
                }
        return report

    def compare_experiments(self, token: str, experiment_ids: list[str]) -> dict:
        runtimes = [self._require(eid) for eid in experiment_ids]
        federations = {rt.record["config"]["federation_id"] for rt in runtimes}
        if len(federations) > 1:
            raise InvalidConfig(
                {"experiment_ids": "experiments belong to different federations"}
            )
        for fed in federations:
            self.iam.authorize(token, fed)
        series = []
        for eid, rt in zip(experiment_ids, runtimes):
            with rt.lock:
                series.append(
                    {
                        "experiment_id": eid,
                        "name": rt.record["config"]["name"],
                        "algorithm": rt.record["config"]["algorithm"],
                        "rounds": [r["round"] for r in rt.record["rounds"]],
                        "global_val_accuracy": [
                            r["global_val_accuracy"] for r in rt.record["rounds"]
                        ],
                        "global_val_loss": [
                            r["global_val_loss"] for r in rt.record["rounds"]
                        ],
                    }
                )
        return {"experiments": series}
