"""Producer-consumer dispatch of module calls.

Program executions are the producers: each backend call becomes a
:class:`CallTicket` on its role's FIFO queue. One consumer thread per role
waits until a batch is full or the oldest ticket has lingered long enough,
hands the batch to the backend, and completes every ticket exactly once.

Both dispatchers here expose ``call(request, timeout) -> (result, batch_id)``,
which is all the runtime needs.
"""

from __future__ import annotations

import itertools
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from .backends import BackendRegistry, Request, Role


class SchedulerClosed(RuntimeError):
    """Raised when submitting to a scheduler that has been shut down."""


class CallTimeout(TimeoutError):
    pass


@dataclass(frozen=True)
class DispatchPolicy:
    max_batch_size: int = 16
    linger: float = 0.010
    max_in_flight_batches: int = 2

    def __post_init__(self):
        if self.max_batch_size < 1:
            raise ValueError("scheduler.max_batch_size must be >= 1")
        if self.linger <= 0:
            raise ValueError("scheduler.linger must be > 0")
        if self.max_in_flight_batches < 1:
            raise ValueError("scheduler.max_in_flight_batches must be >= 1")


class CallTicket:
    __slots__ = ("id", "role", "digest", "request", "enqueued_at", "dispatched_at",
                 "batch_id", "_event", "_result", "_error", "_lock", "completions")

    def __init__(self, ticket_id: int, request: Request):
        self.id = ticket_id
        self.role = request.role
        self.digest = request.digest
        self.request = request
        self.enqueued_at = time.monotonic()
        self.dispatched_at: float | None = None
        self.batch_id: int | None = None
        self._event = threading.Event()
        self._lock = threading.Lock()
        self._result: Any = None
        self._error: BaseException | None = None
        self.completions = 0

    def _complete(self, result: Any = None, error: BaseException | None = None) -> None:
        with self._lock:
            self.completions += 1
            if self.completions > 1:
                return
            self._result, self._error = result, error
        self._event.set()

    @property
    def done(self) -> bool:
        return self._event.is_set()

    def wait(self, timeout: float | None = None) -> Any:
        if not self._event.wait(timeout):
            raise CallTimeout(f"ticket {self.id} ({self.role.value}) not completed within {timeout}s")
        if self._error is not None:
            raise self._error
        return self._result


class DirectDispatcher:
    """Calls the backend inline, one request at a time."""

    def __init__(self, registry: BackendRegistry):
        self.registry = registry

    def call(self, request: Request, timeout: float | None = None):
        result = self.registry.backend(request.role).run_batch([request])[0]
        if isinstance(result, BaseException):
            raise result
        return result, None


class _RoleQueue:
    def __init__(self, role: Role, policy: DispatchPolicy):
        self.role = role
        self.policy = policy
        self.queue: deque[CallTicket] = deque()
        self.slots = threading.BoundedSemaphore(policy.max_in_flight_batches)
        self.tickets = 0
        self.batch_sizes: list[int] = []
        self.waits: list[float] = []
        self.errors = 0


class BatchScheduler:
    """Per-role batching dispatcher.

    ``policy`` is either one :class:`DispatchPolicy` for all roles or a mapping
    from role to policy (missing roles take the defaults).
    """

    def __init__(self, registry: BackendRegistry,
                 policy: DispatchPolicy | Mapping[Role, DispatchPolicy] | None = None):
        self.registry = registry
        if policy is None or isinstance(policy, DispatchPolicy):
            policies = {role: policy or DispatchPolicy() for role in Role}
        else:
            policies = {role: policy.get(role, DispatchPolicy()) for role in Role}
        self._queues = {role: _RoleQueue(role, policies[role]) for role in Role}
        self._cond = threading.Condition()
        self._ids = itertools.count(1)
        self._batch_ids = itertools.count(1)
        self._closed = False
        self._running = False
        self._consumers: list[threading.Thread] = []
        self._pools: dict[Role, ThreadPoolExecutor] = {}
        self.dispatch_log: list[tuple[Role, int, tuple[int, ...]]] = []

    # producer side -------------------------------------------------------

    def submit(self, request: Request) -> CallTicket:
        return self.submit_many([request])[0]

    def submit_many(self, requests: Sequence[Request]) -> list[CallTicket]:
        """Enqueue several requests atomically (they arrive simultaneously)."""
        with self._cond:
            if self._closed:
                raise SchedulerClosed("scheduler is shut down")
            tickets = []
            for req in requests:
                t = CallTicket(next(self._ids), req)
                q = self._queues[req.role]
                q.queue.append(t)
                q.tickets += 1
                tickets.append(t)
            self._cond.notify_all()
        return tickets

    def call(self, request: Request, timeout: float | None = None):
        ticket = self.submit(request)
        result = ticket.wait(timeout)
        return result, ticket.batch_id

    # consumer side -------------------------------------------------------

    def run_consumers(self) -> "BatchScheduler":
        with self._cond:
            if self._running:
                return self
            self._running = True
        for role, q in self._queues.items():
            self._pools[role] = ThreadPoolExecutor(
                max_workers=q.policy.max_in_flight_batches, thread_name_prefix=f"viperkit-{role.value}")
            th = threading.Thread(target=self._consume, args=(q,), name=f"viperkit-consumer-{role.value}",
                                  daemon=True)
            th.start()
            self._consumers.append(th)
        return self

    start = run_consumers

    def _next_batch(self, q: _RoleQueue) -> list[CallTicket] | None:
        size, linger = q.policy.max_batch_size, q.policy.linger
        with self._cond:
            while not q.queue and not self._closed:
                self._cond.wait()
            if not q.queue:
                return None
            while len(q.queue) < size and not self._closed:
                age = time.monotonic() - q.queue[0].enqueued_at
                if age >= linger:
                    break
                self._cond.wait(linger - age)
            n = min(size, len(q.queue))
            batch = [q.queue.popleft() for _ in range(n)]
            batch_id = next(self._batch_ids)
            now = time.monotonic()
            for t in batch:
                t.batch_id = batch_id
                t.dispatched_at = now
                q.waits.append(now - t.enqueued_at)
            q.batch_sizes.append(n)
            self.dispatch_log.append((q.role, batch_id, tuple(t.id for t in batch)))
            return batch

    def _consume(self, q: _RoleQueue) -> None:
        pool = self._pools[q.role]
        while True:
            q.slots.acquire()
            batch = self._next_batch(q)
            if batch is None:
                q.slots.release()
                return
            pool.submit(self._run_batch, q, batch)

    def _run_batch(self, q: _RoleQueue, batch: list[CallTicket]) -> None:
        try:
            backend = self.registry.backend(q.role)
            try:
                results = backend.run_batch([t.request for t in batch])
                if len(results) != len(batch):
                    raise RuntimeError(f"{q.role.value} backend returned {len(results)} results "
                                       f"for a batch of {len(batch)}")
            except Exception as exc:
                q.errors += len(batch)
                for t in batch:
                    t._complete(error=exc)
                return
            for t, r in zip(batch, results):
                if isinstance(r, BaseException):
                    q.errors += 1
                    t._complete(error=r)
                else:
                    t._complete(result=r)
        finally:
            q.slots.release()

    # shutdown ------------------------------------------------------------

    def drain_and_shutdown(self) -> dict:
        with self._cond:
            self._closed = True
            self._cond.notify_all()
        for th in self._consumers:
            th.join()
        for pool in self._pools.values():
            pool.shutdown(wait=True)
        return self.statistics()

    def statistics(self) -> dict:
        stats = {}
        for role, q in self._queues.items():
            sizes = q.batch_sizes
            waits = np.asarray(q.waits) if q.waits else None
            stats[role.value] = {
                "tickets": q.tickets,
                "batches": len(sizes),
                "errors": q.errors,
                "mean_batch_size": float(np.mean(sizes)) if sizes else 0.0,
                "mean_occupancy": float(np.mean(sizes)) / q.policy.max_batch_size if sizes else 0.0,
                "queue_wait_s": {
                    "p50": float(np.quantile(waits, 0.5)) if waits is not None else 0.0,
                    "p90": float(np.quantile(waits, 0.9)) if waits is not None else 0.0,
                    "p99": float(np.quantile(waits, 0.99)) if waits is not None else 0.0,
                    "max": float(waits.max()) if waits is not None else 0.0,
                },
            }
        return stats

    def __enter__(self) -> "BatchScheduler":
        return self.run_consumers()

    def __exit__(self, *exc) -> None:
        self.drain_and_shutdown()
