"""Record/replay of completion requests for offline tests.

A cassette is a JSONL file; each line maps the SHA-256 of the canonical
request JSON to the stored completion.
"""
from __future__ import annotations

import hashlib
import json
import threading
from pathlib import Path

from introplan.backends.base import BackendError, Completion, CompletionRequest, TextBackend


class CassetteMiss(BackendError):
    pass


def request_hash(req: CompletionRequest) -> str:
    canonical = json.dumps(req.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class CassetteBackend:
    def __init__(self, path: str | Path, inner: TextBackend | None = None, *, record: bool = False):
        if record and inner is None:
            raise ValueError("recording needs an inner backend")
        self.path = Path(path)
        self.inner = inner
        self.record = record
        self.name = f"cassette:{self.path.name}"
        self._lock = threading.Lock()
        self._store: dict[str, Completion] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        row = json.loads(line)
                        self._store[row["hash"]] = Completion.from_dict(row["response"])

    def __len__(self) -> int:
        return len(self._store)

    def complete(self, req: CompletionRequest) -> Completion:
        key = request_hash(req)
        with self._lock:
            hit = self._store.get(key)
        if hit is not None:
            return hit
        if not self.record:
            raise CassetteMiss(f"no recorded response for request {key[:12]}")
        result = self.inner.complete(req)
        with self._lock:
            self._store[key] = result
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"hash": key, "response": result.to_dict()}, sort_keys=True) + "\n")
        return result
