"""Task fabric between the orchestrator and client agents.

Agents initiate every connection: they long-poll for task envelopes,
push results, and send heartbeats carrying resource metrics, so a silo
only ever needs outbound traffic. Queues are FIFO per endpoint and a
task is handed to exactly one poll response; after a deadline expires
the task is dead and any late result is rejected, so re-dispatch always
happens under a fresh task id.

Model weights move through the content-addressed blob store, with each
digest owned by the federations that stored it.
"""

from __future__ import annotations

import secrets
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .aggregation import TrainingMetrics
from .errors import (
    CrossFederationDispatch,
    DuplicateEndpointName,
    DuplicateResult,
    Forbidden,
    InvalidMetrics,
    InvalidTaskResult,
    UnknownEndpoint,
    UnknownTask,
)
from .store import DataDir

HEARTBEAT_INTERVAL_S = 5.0
OFFLINE_AFTER_MISSED = 3

TASK_KINDS = ("train", "evaluate", "data_histogram")
DEVICE_TYPES = ("cpu", "gpu")


@dataclass(frozen=True)
class ResourceMetrics:
    cpu_percent: float
    mem_used_bytes: int
    mem_total_bytes: int
    net_tx_bytes_per_s: float = 0.0
    net_rx_bytes_per_s: float = 0.0
    gpu_percent: Optional[float] = None
    sampled_at: float = 0.0

    def __post_init__(self):
        ok = (
            0 <= self.cpu_percent <= 100
            and (self.gpu_percent is None or 0 <= self.gpu_percent <= 100)
            and 0 <= self.mem_used_bytes <= self.mem_total_bytes
            and self.net_tx_bytes_per_s >= 0
            and self.net_rx_bytes_per_s >= 0
        )
        if not ok:
            raise InvalidMetrics("resource metrics outside valid ranges")

    def to_dict(self) -> dict:
        return {
            "cpu_percent": self.cpu_percent,
            "gpu_percent": self.gpu_percent,
            "mem_used_bytes": self.mem_used_bytes,
            "mem_total_bytes": self.mem_total_bytes,
            "net_tx_bytes_per_s": self.net_tx_bytes_per_s,
            "net_rx_bytes_per_s": self.net_rx_bytes_per_s,
            "sampled_at": self.sampled_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResourceMetrics":
        return cls(
            cpu_percent=float(d["cpu_percent"]),
            mem_used_bytes=int(d["mem_used_bytes"]),
            mem_total_bytes=int(d["mem_total_bytes"]),
            net_tx_bytes_per_s=float(d.get("net_tx_bytes_per_s", 0.0)),
            net_rx_bytes_per_s=float(d.get("net_rx_bytes_per_s", 0.0)),
            gpu_percent=d.get("gpu_percent"),
            sampled_at=float(d.get("sampled_at", 0.0)),
        )


@dataclass(frozen=True)
class TaskEnvelope:
    task_id: str
    experiment_id: str
    round: int
    kind: str
    config_payload: dict
    model_blob: Optional[str]
    deadline: float

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind in ("train", "evaluate") and not self.model_blob:
            raise ValueError(f"{self.kind} tasks must carry a model blob")

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "experiment_id": self.experiment_id,
            "round": self.round,
            "kind": self.kind,
            "config_payload": self.config_payload,
            "model_blob": self.model_blob,
            "deadline": self.deadline,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskEnvelope":
        return cls(
            task_id=d["task_id"],
            experiment_id=d["experiment_id"],
            round=int(d["round"]),
            kind=d["kind"],
            config_payload=d["config_payload"],
            model_blob=d.get("model_blob"),
            deadline=float(d["deadline"]),
        )


@dataclass(frozen=True)
class TaskResult:
    task_id: str
    status: str  # success | failure
    metrics: TrainingMetrics
    result_blob: Optional[str] = None
    error_message: Optional[str] = None
    wall_seconds: float = 0.0
    sample_count: int = 0
    histogram: Optional[list[int]] = None

    def __post_init__(self):
        if self.status not in ("success", "failure"):
            raise ValueError(f"bad result status {self.status!r}")
        if self.status == "failure" and not self.error_message:
            raise ValueError("failure results must carry an error message")
        if self.wall_seconds < 0:
            raise ValueError("wall_seconds must be non-negative")

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "status": self.status,
            "metrics": self.metrics.to_dict(),
            "result_blob": self.result_blob,
            "error_message": self.error_message,
            "wall_seconds": self.wall_seconds,
            "sample_count": self.sample_count,
            "histogram": self.histogram,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskResult":
        return cls(
            task_id=d["task_id"],
            status=d["status"],
            metrics=TrainingMetrics.from_dict(d["metrics"]),
            result_blob=d.get("result_blob"),
            error_message=d.get("error_message"),
            wall_seconds=float(d.get("wall_seconds", 0.0)),
            sample_count=int(d.get("sample_count", 0)),
            histogram=d.get("histogram"),
        )


def new_task_id() -> str:
    return "task_" + secrets.token_hex(8)


class DispatchService:
    """Endpoint registry, per-endpoint task queues, and the blob store."""

    def __init__(
        self,
        data: DataDir,
        clock: Callable[[], float] = time.time,
        heartbeat_interval_s: float = HEARTBEAT_INTERVAL_S,
    ):
        self.data = data
        self.clock = clock
        self.heartbeat_interval_s = heartbeat_interval_s
        self.endpoints = data.table("endpoints")
        self.blob_owners = data.table("blob_owners")
        self._lock = threading.RLock()
        self._queues: dict[str, deque[TaskEnvelope]] = {}
        self._conds: dict[str, threading.Condition] = {}
        self._in_flight: dict[str, tuple[str, TaskEnvelope]] = {}
        self._completed: dict[str, TaskResult] = {}
        self._expired: set[str] = set()
        self._result_listeners: list[Callable[[TaskEnvelope, TaskResult], None]] = []
        self._expiry_listeners: list[Callable[[TaskEnvelope], None]] = []
        self._envelopes: dict[str, TaskEnvelope] = {}
        self._scanner: Optional[threading.Thread] = None
        self._stop = threading.Event()

    # --- lifecycle -----------------------------------------------------------

    def start(self, scan_interval_s: float = 0.25) -> None:
        """Start the background deadline scanner."""
        if self._scanner:
            return
        self._stop.clear()

        def loop():
            while not self._stop.wait(scan_interval_s):
                self.scan_expired()

        self._scanner = threading.Thread(target=loop, name="dispatch-expiry", daemon=True)
        self._scanner.start()

    def stop(self) -> None:
        self._stop.set()
        if self._scanner:
            self._scanner.join(timeout=2)
            self._scanner = None
        with self._lock:
            for cond in self._conds.values():
                cond.notify_all()

    def on_result(self, fn: Callable[[TaskEnvelope, TaskResult], None]) -> None:
        self._result_listeners.append(fn)

    def on_expiry(self, fn: Callable[[TaskEnvelope], None]) -> None:
        self._expiry_listeners.append(fn)

    # --- endpoint registry ---------------------------------------------------

    def register_endpoint(
        self, federation_id: str, owner_account_id: str, name: str, device_type: str
    ) -> dict:
        if device_type not in DEVICE_TYPES:
            raise InvalidMetrics(f"device_type must be one of {DEVICE_TYPES}")
        with self._lock:
            for row in self.endpoints.rows.values():
                if row["federation_id"] == federation_id and row["name"] == name:
                    raise DuplicateEndpointName(
                        f"endpoint {name!r} already exists in this federation"
                    )
            endpoint_id = "ep_" + secrets.token_hex(8)
            row = {
                "federation_id": federation_id,
                "owner_account_id": owner_account_id,
                "name": name,
                "device_type": device_type,
                "last_heartbeat": None,
                "resources": None,
            }
            self.endpoints.mutate(lambda rows: rows.__setitem__(endpoint_id, row))
        return self.endpoint_view(endpoint_id)

    def _row(self, endpoint_id: str) -> dict:
        row = self.endpoints.rows.get(endpoint_id)
        if row is None:
            raise UnknownEndpoint(f"no endpoint {endpoint_id}")
        return row

    def endpoint_status(self, endpoint_id: str) -> str:
        row = self._row(endpoint_id)
        beat = row["last_heartbeat"]
        horizon = self.heartbeat_interval_s * OFFLINE_AFTER_MISSED
        if beat is None or self.clock() - beat > horizon:
            return "offline"
        with self._lock:
            busy = any(ep == endpoint_id for ep, _ in self._in_flight.values())
        return "busy" if busy else "online"

    def endpoint_view(self, endpoint_id: str) -> dict:
        row = self._row(endpoint_id)
        with self._lock:
            queued = len(self._queues.get(endpoint_id, ()))
        return {
            "endpoint_id": endpoint_id,
            "federation_id": row["federation_id"],
            "owner_account_id": row["owner_account_id"],
            "name": row["name"],
            "device_type": row["device_type"],
            "status": self.endpoint_status(endpoint_id),
            "last_heartbeat": row["last_heartbeat"],
            "resources": row["resources"],
            "queued_tasks": queued,
        }

    def list_endpoints(self, federation_id: str) -> list[dict]:
        ids = [
            eid
            for eid, row in self.endpoints.rows.items()
            if row["federation_id"] == federation_id
        ]
        return [self.endpoint_view(eid) for eid in sorted(ids)]

    def endpoint_federation(self, endpoint_id: str) -> str:
        return self._row(endpoint_id)["federation_id"]

    def heartbeat(self, endpoint_id: str, metrics: ResourceMetrics) -> None:
        row = self._row(endpoint_id)
        with self._lock:
            row["last_heartbeat"] = self.clock()
            row["resources"] = metrics.to_dict()
            self.endpoints.save()

    # --- task queues -----------------------------------------------------------

    def _cond_for(self, endpoint_id: str) -> threading.Condition:
        with self._lock:
            if endpoint_id not in self._conds:
                self._conds[endpoint_id] = threading.Condition(self._lock)
            return self._conds[endpoint_id]

    def enqueue_task(
        self, endpoint_id: str, envelope: TaskEnvelope, federation_id: str
    ) -> None:
        row = self._row(endpoint_id)
        if row["federation_id"] != federation_id:
            raise CrossFederationDispatch(
                f"endpoint {endpoint_id} belongs to another federation"
            )
        cond = self._cond_for(endpoint_id)
        with cond:
            self._queues.setdefault(endpoint_id, deque()).append(envelope)
            self._envelopes[envelope.task_id] = envelope
            cond.notify_all()

    def poll_tasks(self, endpoint_id: str, max_wait_s: float) -> list[TaskEnvelope]:
        """Pop all queued tasks, blocking up to max_wait_s when idle.

        Delivered tasks become in-flight; each task id appears in exactly
        one poll response.
        """
        self._row(endpoint_id)
        cond = self._cond_for(endpoint_id)
        deadline = time.monotonic() + max(0.0, max_wait_s)
        with cond:
            while True:
                self._scan_locked()
                queue = self._queues.get(endpoint_id)
                if queue:
                    tasks = list(queue)
                    queue.clear()
                    for t in tasks:
                        self._in_flight[t.task_id] = (endpoint_id, t)
                    return tasks
                remaining = deadline - time.monotonic()
                if remaining <= 0 or self._stop.is_set():
                    return []
                cond.wait(timeout=min(remaining, 0.5))

    def submit_result(self, endpoint_id: str, result: TaskResult) -> TaskEnvelope:
        with self._lock:
            self._scan_locked()
            if result.task_id in self._completed:
                raise DuplicateResult(f"task {result.task_id} already has a result")
            entry = self._in_flight.get(result.task_id)
            if entry is None or entry[0] != endpoint_id:
                raise UnknownTask(f"task {result.task_id} is not in flight for this endpoint")
            envelope = entry[1]
            if result.status == "success" and envelope.kind == "train" and not result.result_blob:
                raise InvalidTaskResult("successful train results must carry a result blob")
            del self._in_flight[result.task_id]
            self._completed[result.task_id] = result
            listeners = list(self._result_listeners)
        for fn in listeners:
            fn(envelope, result)
        return envelope

    def _scan_locked(self) -> list[TaskEnvelope]:
        now = self.clock()
        expired: list[TaskEnvelope] = []
        for endpoint_id, queue in self._queues.items():
            keep = deque()
            for env in queue:
                (expired if env.deadline < now else keep).append(env)
            self._queues[endpoint_id] = keep
        for task_id, (_, env) in list(self._in_flight.items()):
            if env.deadline < now:
                expired.append(env)
                del self._in_flight[task_id]
        for env in expired:
            self._expired.add(env.task_id)
        return expired

    def scan_expired(self) -> list[TaskEnvelope]:
        """Expire overdue tasks and notify listeners; returns what expired."""
        with self._lock:
            expired = self._scan_locked()
            listeners = list(self._expiry_listeners)
        for env in expired:
            for fn in listeners:
                fn(env)
        return expired

    def cancel_experiment_tasks(self, experiment_id: str) -> int:
        """Drop every queued and in-flight task of one experiment."""
        with self._lock:
            dropped = 0
            for endpoint_id, queue in self._queues.items():
                keep = deque(e for e in queue if e.experiment_id != experiment_id)
                dropped += len(queue) - len(keep)
                self._queues[endpoint_id] = keep
            for task_id, (_, env) in list(self._in_flight.items()):
                if env.experiment_id == experiment_id:
                    del self._in_flight[task_id]
                    self._expired.add(task_id)
                    dropped += 1
            return dropped

    def task_state(self, task_id: str) -> dict:
        with self._lock:
            if task_id in self._completed:
                return {"task_id": task_id, "state": "completed",
                        "result": self._completed[task_id].to_dict()}
            if task_id in self._in_flight:
                return {"task_id": task_id, "state": "in_flight"}
            if task_id in self._expired:
                return {"task_id": task_id, "state": "expired"}
            for queue in self._queues.values():
                if any(e.task_id == task_id for e in queue):
                    return {"task_id": task_id, "state": "queued"}
        raise UnknownTask(f"no task {task_id}")

    # --- blobs -------------------------------------------------------------------

    def blob_put(self, data: bytes, federation_id: str) -> str:
        digest = self.data.blobs.put(data)
        with self._lock:
            owners = self.blob_owners.rows.setdefault(digest, [])
            if federation_id not in owners:
                owners.append(federation_id)
                self.blob_owners.save()
        return digest

    def blob_get(self, digest: str, allowed_federations: Optional[set[str]] = None) -> bytes:
        if allowed_federations is not None:
            owners = set(self.blob_owners.rows.get(digest, []))
            if not owners & allowed_federations:
                raise Forbidden("blob belongs to a federation you are not part of")
        return self.data.blobs.get(digest)

    def blob_size(self, digest: str) -> int:
        return self.data.blobs.size(digest)
