"""Durable append-only storage for labels and labeling tasks.

Both the label log and the task event log use the same on-disk framing:
a 4-byte big-endian length, the UTF-8 JSON body, then a 4-byte CRC32 of
the body. Appends are flushed and fsynced before they count as
committed, so a crash can only ever tear the final frame. Replay walks
the file frame by frame and truncates at the first bad one; everything
before it is intact by construction.
"""
from __future__ import annotations

import json
import logging
import os
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from .evalstats import POLICIES, LabelRecord
from .geo import ValidationError

log = logging.getLogger(__name__)

TASK_SOURCES = ("random", "active_learning")

_LEN = struct.Struct(">I")


class ConflictError(Exception):
    """A label for this (patch, policy, labeler) exists with another value."""


# -- framed log primitives ----------------------------------------------------


def _append_framed(fh, obj: dict) -> None:
    body = json.dumps(obj, sort_keys=True).encode("utf-8")
    fh.write(_LEN.pack(len(body)) + body + _LEN.pack(zlib.crc32(body)))
    fh.flush()
    os.fsync(fh.fileno())


def _replay_framed(path: Path) -> tuple[list[dict], int]:
    """Read frames until EOF or the first damaged frame.

    Returns the decoded records and the byte offset of the clean prefix.
    The caller decides whether to truncate.
    """
    data = path.read_bytes()
    records = []
    offset = 0
    while offset < len(data):
        if offset + _LEN.size > len(data):
            break
        (n,) = _LEN.unpack_from(data, offset)
        end = offset + _LEN.size + n + _LEN.size
        if end > len(data):
            break
        body = data[offset + _LEN.size : offset + _LEN.size + n]
        (crc,) = _LEN.unpack_from(data, end - _LEN.size)
        if zlib.crc32(body) != crc:
            break
        try:
            records.append(json.loads(body.decode("utf-8")))
        except ValueError:
            break
        offset = end
    return records, offset


def _open_log(path: Path) -> tuple[list[dict], object]:
    """Replay a framed log, repair a torn tail, and open it for appends."""
    path.parent.mkdir(parents=True, exist_ok=True)
    records: list[dict] = []
    if path.exists():
        records, good = _replay_framed(path)
        size = path.stat().st_size
        if good < size:
            log.warning(
                "%s: dropping %d torn trailing bytes (%d records intact)",
                path.name, size - good, len(records),
            )
            with open(path, "r+b") as fh:
                fh.truncate(good)
    return records, open(path, "ab")


# -- label store ------------------------------------------------------------


class LabelStore:
    """Append-only log of label records with in-memory indexes.

    Appends are idempotent per (patch_id, policy, labeler_id): repeating
    an identical label is a no-op, while a contradicting one raises
    ConflictError. Replay of the log reconstructs the indexes exactly,
    so the store carries no state that the file does not.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        raw, self._fh = _open_log(self.path)
        self._lock = threading.Lock()
        self._records: list[LabelRecord] = [LabelRecord.from_dict(r) for r in raw]
        self._by_key: dict[tuple, LabelRecord] = {}
        self._by_patch: dict[str, list[LabelRecord]] = {}
        self._by_policy: dict[str, list[LabelRecord]] = {p: [] for p in POLICIES}
        for rec in self._records:
            self._index(rec)

    def _index(self, rec: LabelRecord) -> None:
        self._by_key[(rec.patch_id, rec.policy, rec.labeler_id)] = rec
        self._by_patch.setdefault(rec.patch_id, []).append(rec)
        self._by_policy[rec.policy].append(rec)

    def append(self, rec: LabelRecord) -> tuple[LabelRecord, bool]:
        """Commit a record. Returns (stored record, was_new)."""
        with self._lock:
            key = (rec.patch_id, rec.policy, rec.labeler_id)
            existing = self._by_key.get(key)
            if existing is not None:
                if existing.label != rec.label:
                    raise ConflictError(
                        f"patch {rec.patch_id} already labeled "
                        f"{existing.label!r} by {rec.labeler_id} under "
                        f"{rec.policy} policy"
                    )
                return existing, False
            _append_framed(self._fh, rec.to_dict())
            self._records.append(rec)
            self._index(rec)
            return rec, True

    def records(self) -> list[LabelRecord]:
        return list(self._records)

    def by_policy(self, policy: str) -> list[LabelRecord]:
        if policy not in POLICIES:
            raise ValidationError(f"unknown policy {policy!r}")
        return list(self._by_policy[policy])

    def by_patch(self, patch_id: str) -> list[LabelRecord]:
        return list(self._by_patch.get(patch_id, []))

    def __len__(self) -> int:
        return len(self._records)

    def close(self) -> None:
        self._fh.close()


def training_records(records: list[LabelRecord]) -> list[LabelRecord]:
    """Pass through records destined for a training run.

    This is the firewall between the two labeling policies: anything
    carrying the test policy is a hard error here, never a silent
    filter, because a test patch that leaks into training quietly
    poisons every evaluation that follows.
    """
    for rec in records:
        if rec.policy != "train":
            raise ValidationError(
                f"policy firewall: record for patch {rec.patch_id} has "
                f"policy {rec.policy!r}; training loaders accept only 'train'"
            )
    return list(records)


class JsonLog:
    """Replayable framed log of arbitrary JSON objects.

    Same durability story as the label store, for small side channels
    (triage notes and the like) that want crash safety without indexes.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._items, self._fh = _open_log(self.path)
        self._lock = threading.Lock()

    def append(self, obj: dict) -> dict:
        with self._lock:
            _append_framed(self._fh, obj)
            self._items.append(obj)
        return obj

    def items(self) -> list[dict]:
        return list(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def close(self) -> None:
        self._fh.close()


# -- task queue ---------------------------------------------------------------


@dataclass
class Task:
    task_id: str
    patch_id: str
    policy: str
    source: str
    priority: int = 0
    status: str = "pending"
    leased_to: str | None = None
    lease_expires: float = 0.0
    seq: int = field(default=0, repr=False)

    def to_view(self) -> dict:
        return {
            "task_id": self.task_id,
            "patch_id": self.patch_id,
            "policy": self.policy,
            "source": self.source,
            "priority": self.priority,
            "status": self.status,
        }


class TaskQueue:
    """Event-sourced queue of labeling tasks with expiring leases.

    Task identity is policy-scoped ("train:patchkey"), so the same patch
    may be queued once under each policy but never twice under one. A
    pending task is leased to at most one labeler at a time; a lease
    that expires silently returns the task to the pool.
    """

    def __init__(self, path: str | Path, lease_seconds: float = 300.0):
        if lease_seconds <= 0:
            raise ValidationError("lease_seconds must be positive")
        self.path = Path(path)
        self.lease_seconds = lease_seconds
        self._lock = threading.Lock()
        self._tasks: dict[str, Task] = {}
        self._seq = 0
        events, self._fh = _open_log(self.path)
        for ev in events:
            self._apply(ev)

    @staticmethod
    def task_id_for(policy: str, patch_id: str) -> str:
        return f"{policy}:{patch_id}"

    def _apply(self, ev: dict) -> None:
        kind = ev["event"]
        if kind == "enqueue":
            self._seq += 1
            task = Task(
                task_id=ev["task_id"],
                patch_id=ev["patch_id"],
                policy=ev["policy"],
                source=ev["source"],
                priority=ev["priority"],
                seq=self._seq,
            )
            self._tasks[task.task_id] = task
        elif kind == "lease":
            task = self._tasks[ev["task_id"]]
            task.leased_to = ev["labeler"]
            task.lease_expires = ev["expires"]
        elif kind == "complete":
            task = self._tasks[ev["task_id"]]
            task.status = "done"
            task.leased_to = None
        else:  # pragma: no cover - only reachable with a hand-edited log
            raise ValidationError(f"unknown task event {kind!r}")

    def _emit(self, ev: dict) -> None:
        _append_framed(self._fh, ev)
        self._apply(ev)

    def enqueue(
        self, patch_id: str, policy: str, source: str = "random", priority: int = 0
    ) -> Task:
        """Add a task; re-enqueueing an existing id is a no-op."""
        if policy not in POLICIES:
            raise ValidationError(f"unknown policy {policy!r}")
        if source not in TASK_SOURCES:
            raise ValidationError(
                f"unknown task source {source!r}, expected one of {TASK_SOURCES}"
            )
        with self._lock:
            task_id = self.task_id_for(policy, patch_id)
            existing = self._tasks.get(task_id)
            if existing is not None:
                return existing
            self._emit(
                {
                    "event": "enqueue",
                    "task_id": task_id,
                    "patch_id": patch_id,
                    "policy": policy,
                    "source": source,
                    "priority": priority,
                }
            )
            return self._tasks[task_id]

    def next_task(self, policy: str, labeler: str, now: float | None = None) -> Task | None:
        """Lease the best available task to a labeler, or return None.

        A labeler who already holds a live lease gets the same task back
        rather than a second one, so a refreshed browser tab cannot
        hoard the queue.
        """
        if policy not in POLICIES:
            raise ValidationError(f"unknown policy {policy!r}")
        now = time.time() if now is None else now
        with self._lock:
            held = [
                t
                for t in self._tasks.values()
                if t.status == "pending"
                and t.policy == policy
                and t.leased_to == labeler
                and t.lease_expires > now
            ]
            if held:
                return min(held, key=lambda t: t.seq)
            free = [
                t
                for t in self._tasks.values()
                if t.status == "pending"
                and t.policy == policy
                and (t.leased_to is None or t.lease_expires <= now)
            ]
            if not free:
                return None
            task = min(free, key=lambda t: (-t.priority, t.seq))
            self._emit(
                {
                    "event": "lease",
                    "task_id": task.task_id,
                    "labeler": labeler,
                    "expires": now + self.lease_seconds,
                }
            )
            return task

    def complete(self, task_id: str) -> Task:
        with self._lock:
            task = self._tasks.get(task_id)
            if task is None:
                raise ValidationError(f"unknown task {task_id!r}")
            if task.status != "done":
                self._emit({"event": "complete", "task_id": task_id})
            return task

    def get(self, task_id: str) -> Task | None:
        return self._tasks.get(task_id)

    def pending(self, policy: str | None = None) -> list[Task]:
        tasks = [
            t
            for t in self._tasks.values()
            if t.status == "pending" and (policy is None or t.policy == policy)
        ]
        return sorted(tasks, key=lambda t: (-t.priority, t.seq))

    def __len__(self) -> int:
        return len(self._tasks)

    def close(self) -> None:
        self._fh.close()
