"""Clocks, the event scheduler, RNG streams, and a tiny task kernel.

Every other layer of the testbed runs on top of this module so that a whole
benchmark can execute either in virtual (discrete-event) time or in wall-clock
time without code changes.  Virtual time is the default: it advances only when
scheduled events fire, which makes impairment-heavy runs both fast and
bit-reproducible.

Time is kept as integer microseconds to avoid floating-point drift in event
ordering.  Events scheduled for the same microsecond fire in insertion order.
"""

from __future__ import annotations

import hashlib
import heapq
import random
import threading
import time

US_PER_MS = 1_000
US_PER_S = 1_000_000


class SchedulePastError(ValueError):
    """Raised when an event is scheduled before the clock's current time."""


class DeadlockError(RuntimeError):
    """Raised when the event queue drains while a task is still pending."""


class Future:
    """One-shot result container; the kernel's only synchronization primitive.

    Tasks (generators) yield futures to suspend; resolving the future resumes
    them.  Callbacks attached after resolution run immediately.
    """

    __slots__ = ("_state", "_value", "_cbs")

    _PENDING, _DONE, _FAILED = 0, 1, 2

    def __init__(self) -> None:
        self._state = Future._PENDING
        self._value = None
        self._cbs = None

    def done(self) -> bool:
        return self._state != Future._PENDING

    def set_result(self, value) -> None:
        if self._state != Future._PENDING:
            raise RuntimeError("future already resolved")
        self._state = Future._DONE
        self._value = value
        self._fire()

    def set_exception(self, exc: BaseException) -> None:
        if self._state != Future._PENDING:
            raise RuntimeError("future already resolved")
        self._state = Future._FAILED
        self._value = exc
        self._fire()

    def _fire(self) -> None:
        cbs = self._cbs
        self._cbs = None
        if cbs:
            for cb in cbs:
                cb(self)

    def result(self):
        if self._state == Future._DONE:
            return self._value
        if self._state == Future._FAILED:
            raise self._value
        raise RuntimeError("future is still pending")

    def exception(self) -> BaseException | None:
        return self._value if self._state == Future._FAILED else None

    def add_done_callback(self, cb) -> None:
        if self._state != Future._PENDING:
            cb(self)
        elif self._cbs is None:
            self._cbs = [cb]
        else:
            self._cbs.append(cb)


class Task(Future):
    """Drives a generator; the generator yields futures and receives results.

    The task itself is a future for the generator's return value.  Exceptions
    raised by awaited futures are thrown into the generator so ordinary
    try/except works inside task code.
    """

    __slots__ = ("_gen",)

    def __init__(self, gen) -> None:
        super().__init__()
        self._gen = gen
        self._advance(None, None)

    def _advance(self, value, exc) -> None:
        try:
            if exc is not None:
                fut = self._gen.throw(exc)
            else:
                fut = self._gen.send(value)
        except StopIteration as stop:
            self.set_result(stop.value)
        except Exception as e:
            self.set_exception(e)
        else:
            fut.add_done_callback(self._resume)

    def _resume(self, fut: Future) -> None:
        if fut._state == Future._FAILED:
            self._advance(None, fut._value)
        else:
            self._advance(fut._value, None)


class VirtualScheduler:
    """Discrete-event clock: time jumps to each event's timestamp in order.

    Single-threaded by contract -- one event loop owns the clock.  Callbacks
    are invoked as ``fn(arg)`` with ``arg`` defaulting to None.
    """

    mode = "virtual"

    def __init__(self, start_us: int = 0) -> None:
        self._now = start_us
        self._heap: list = []
        self._seq = 0
        self._cancelled: set[int] = set()

    @property
    def now_us(self) -> int:
        return self._now

    def schedule(self, at_us: int, fn, arg=None) -> int:
        if at_us < self._now:
            raise SchedulePastError(
                f"cannot schedule at {at_us} us; clock is at {self._now} us"
            )
        self._seq += 1
        heapq.heappush(self._heap, (at_us, self._seq, fn, arg))
        return self._seq

    def schedule_in(self, delay_us: int, fn, arg=None) -> int:
        return self.schedule(self._now + delay_us, fn, arg)

    def call_soon(self, fn, arg=None) -> int:
        return self.schedule(self._now, fn, arg)

    def cancel(self, event_id: int) -> None:
        self._cancelled.add(event_id)

    def _step(self) -> None:
        at, seq, fn, arg = heapq.heappop(self._heap)
        if self._cancelled and seq in self._cancelled:
            self._cancelled.discard(seq)
            return
        self._now = at
        fn(arg)

    def run(self) -> None:
        """Run until the event queue is empty."""
        while self._heap:
            self._step()

    def run_until(self, fut: Future):
        """Run until `fut` resolves; raise DeadlockError if events run out."""
        while not fut.done():
            if not self._heap:
                raise DeadlockError("event queue drained before completion")
            self._step()
        return fut.result()

    def sleep(self, delay_us: int) -> Future:
        fut = Future()
        self.schedule(self._now + delay_us, fut.set_result, None)
        return fut

    def spawn(self, gen) -> Task:
        return Task(gen)


class WallScheduler:
    """Wall-clock scheduler for sanity runs: events fire at >= their deadline.

    schedule() is safe to call from any thread; callbacks execute on the
    thread running the loop.
    """

    mode = "wall"

    def __init__(self) -> None:
        self._t0 = time.monotonic_ns()
        self._heap: list = []
        self._seq = 0
        self._cancelled: set[int] = set()
        self._cond = threading.Condition()

    @property
    def now_us(self) -> int:
        return (time.monotonic_ns() - self._t0) // 1000

    def schedule(self, at_us: int, fn, arg=None) -> int:
        with self._cond:
            if at_us < self.now_us:
                raise SchedulePastError(
                    f"cannot schedule at {at_us} us; clock is at {self.now_us} us"
                )
            self._seq += 1
            heapq.heappush(self._heap, (at_us, self._seq, fn, arg))
            self._cond.notify()
            return self._seq

    def schedule_in(self, delay_us: int, fn, arg=None) -> int:
        with self._cond:
            self._seq += 1
            heapq.heappush(self._heap, (self.now_us + delay_us, self._seq, fn, arg))
            self._cond.notify()
            return self._seq

    def call_soon(self, fn, arg=None) -> int:
        return self.schedule_in(0, fn, arg)

    def cancel(self, event_id: int) -> None:
        with self._cond:
            self._cancelled.add(event_id)

    def _pop_due(self):
        """Wait for and pop the next due event; None if the queue is empty."""
        with self._cond:
            while True:
                if not self._heap:
                    return None
                at, seq, fn, arg = self._heap[0]
                wait_us = at - self.now_us
                if wait_us <= 0:
                    heapq.heappop(self._heap)
                    if seq in self._cancelled:
                        self._cancelled.discard(seq)
                        continue
                    return fn, arg
                self._cond.wait(wait_us / US_PER_S)

    def run(self) -> None:
        while True:
            item = self._pop_due()
            if item is None:
                return
            fn, arg = item
            fn(arg)

    def run_until(self, fut: Future):
        while not fut.done():
            item = self._pop_due()
            if item is None:
                raise DeadlockError("event queue drained before completion")
            fn, arg = item
            fn(arg)
        return fut.result()

    def sleep(self, delay_us: int) -> Future:
        fut = Future()
        self.schedule_in(delay_us, fut.set_result, None)
        return fut

    def spawn(self, gen) -> Task:
        return Task(gen)


def make_scheduler(mode: str = "virtual", start_us: int = 0):
    if mode == "virtual":
        return VirtualScheduler(start_us)
    if mode == "wall":
        return WallScheduler()
    raise ValueError(f"unknown time mode {mode!r}; expected 'virtual' or 'wall'")


def stream_id_for(label: str) -> int:
    """Stable 64-bit stream id for a textual label (process-salt free)."""
    return int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "big")


def _derive_seed(seed: int, stream_id: int) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(seed.to_bytes(8, "big", signed=False))
    h.update(stream_id.to_bytes(8, "big", signed=False))
    return int.from_bytes(h.digest(), "big")


class RngStream(random.Random):
    """Deterministic random stream keyed by (seed, stream_id).

    Identical keys replay identical sequences; distinct stream ids give
    independent streams, so adding a consumer (e.g. a new link) never
    perturbs the draws of existing ones.
    """

    def __init__(self, seed: int, stream_id: int) -> None:
        self.seed_value = seed
        self.stream_id = stream_id
        super().__init__(_derive_seed(seed, stream_id))


def rng_stream(seed: int, stream: int | str) -> RngStream:
    sid = stream_id_for(stream) if isinstance(stream, str) else stream
    return RngStream(seed, sid)


def sample_uniform(rng: random.Random, lo: float, hi: float) -> float:
    """Uniform draw on [lo, hi]; rejects inverted bounds."""
    if lo > hi:
        raise ValueError(f"uniform bounds inverted: lo={lo} > hi={hi}")
    return rng.uniform(lo, hi)
