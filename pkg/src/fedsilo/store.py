"""Embedded on-disk persistence.

One data directory, three namespaces: JSON tables for metadata,
append-only JSONL streams for experiment logs, and a content-addressed
blob directory for model weights. All writes of whole documents go
through a temp file plus atomic rename, so a killed process never
leaves a half-written record behind.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from pathlib import Path
from typing import Any, Callable, Optional

from .errors import DigestMismatch, NoSuchBlob


def atomic_write_json(path: Path, payload: Any) -> None:
    tmp = path.with_suffix(path.suffix + f".tmp{os.getpid()}")
    tmp.write_text(json.dumps(payload, indent=1, sort_keys=True))
    os.replace(tmp, path)


class JsonTable:
    """A dict-of-dicts persisted as one JSON file, rewritten atomically."""

    def __init__(self, path: Path):
        self.path = path
        self._lock = threading.RLock()
        if path.exists():
            self.rows: dict[str, dict] = json.loads(path.read_text())
        else:
            self.rows = {}

    def save(self) -> None:
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            atomic_write_json(self.path, self.rows)

    def mutate(self, fn: Callable[[dict], Any]) -> Any:
        """Apply fn to the row dict under the lock, then persist."""
        with self._lock:
            out = fn(self.rows)
            self.save()
            return out


class LogStream:
    """Append-only timestamped log for one experiment, with long-poll reads."""

    def __init__(self, path: Path):
        self.path = path
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._lines: list[dict] = []
        if path.exists():
            with open(path) as f:
                self._lines = [json.loads(line) for line in f if line.strip()]

    def append(self, text: str) -> None:
        entry = {"ts": time.time(), "line": text}
        with self._cond:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as f:
                f.write(json.dumps(entry) + "\n")
            self._lines.append(entry)
            self._cond.notify_all()

    def read(self, from_line: int = 0, wait_s: float = 0.0) -> list[dict]:
        """Lines at index >= from_line, blocking up to wait_s for new ones."""
        deadline = time.monotonic() + wait_s
        with self._cond:
            while len(self._lines) <= from_line:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                self._cond.wait(timeout=remaining)
            return list(self._lines[from_line:])

    def __len__(self) -> int:
        with self._lock:
            return len(self._lines)


class BlobStore:
    """Immutable, deduplicating sha256-addressed byte storage."""

    def __init__(self, root: Path):
        self.root = root
        root.mkdir(parents=True, exist_ok=True)

    def _path(self, digest: str) -> Path:
        return self.root / digest

    def put(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        path = self._path(digest)
        if not path.exists():
            tmp = path.with_suffix(f".tmp{os.getpid()}.{threading.get_ident()}")
            tmp.write_bytes(data)
            os.replace(tmp, path)
        return digest

    def get(self, digest: str) -> bytes:
        path = self._path(digest)
        if not path.exists():
            raise NoSuchBlob(f"no blob {digest}")
        data = path.read_bytes()
        actual = hashlib.sha256(data).hexdigest()
        if actual != digest:
            raise DigestMismatch(f"blob {digest} read back as {actual}")
        return data

    def exists(self, digest: str) -> bool:
        return self._path(digest).exists()

    def size(self, digest: str) -> int:
        path = self._path(digest)
        if not path.exists():
            raise NoSuchBlob(f"no blob {digest}")
        return path.stat().st_size


class DataDir:
    """Layout of the orchestrator's data directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        (self.root / "meta").mkdir(parents=True, exist_ok=True)
        (self.root / "experiments").mkdir(parents=True, exist_ok=True)
        self.blobs = BlobStore(self.root / "blobs")

    def table(self, name: str) -> JsonTable:
        return JsonTable(self.root / "meta" / f"{name}.json")

    def experiment_record_path(self, experiment_id: str) -> Path:
        d = self.root / "experiments" / experiment_id
        d.mkdir(parents=True, exist_ok=True)
        return d / "record.json"

    def experiment_log(self, experiment_id: str) -> LogStream:
        d = self.root / "experiments" / experiment_id
        d.mkdir(parents=True, exist_ok=True)
        return LogStream(d / "log.jsonl")

    def experiment_ids(self) -> list[str]:
        return sorted(
            p.name for p in (self.root / "experiments").iterdir()
            if (p / "record.json").exists()
        )
