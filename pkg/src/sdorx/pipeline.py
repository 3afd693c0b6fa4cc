"""Stream-parallel buffer scheduler with explicit cross-buffer hand-offs.

Each buffer is a job that one worker thread carries through the chain's
stages in order.  Stages that depend on the previous buffer ("carried"
stages) take their input state from a hand-off slot stamped with the
buffer index that produced it, and block until buffer ``n - 1`` has put it
there.  Frames come out in buffer order whatever the interleaving, and a
new buffer is only accepted once the frame ``n_streams`` places earlier has
been emitted.
"""

from __future__ import annotations

import csv
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .core import SampleBuffer
from .errors import ConfigError, SequenceError
from .imdd import Job

DEFAULT_STREAMS = 5


@dataclass(frozen=True)
class StreamPlan:
    n_streams: int = DEFAULT_STREAMS
    jitter_s: float = 0.0  # upper bound of random sleeps injected before each stage
    jitter_seed: int | None = None

    def __post_init__(self):
        if self.n_streams < 1:
            raise ConfigError("n_streams must be at least 1")
        if self.jitter_s < 0:
            raise ConfigError("jitter_s must be non-negative")


def dependency_edges(chain) -> list[tuple[str, str]]:
    """``(stage of buffer n, stage of buffer n-1)`` pairs the scheduler enforces."""
    return [(name, name) for name, _, carried in chain.stages() if carried]


def validate_chain(chain) -> None:
    names = [name for name, _, _ in chain.stages()]
    if len(set(names)) != len(names):
        raise ConfigError("stage names must be unique")
    carries = chain.initial_carries()
    for name, _ in dependency_edges(chain):
        if name not in carries:
            raise ConfigError(f"carried stage {name!r} has no initial state; the plan would deadlock")


@dataclass(frozen=True)
class Event:
    stage: str
    buffer: int
    worker: int
    start: float
    end: float
    waited: float  # time blocked on the previous buffer's hand-off


@dataclass
class BudgetReport:
    n_streams: int
    buffer_duration: float
    buffer_times: list = field(default_factory=list)  # job wall time minus hand-off waits
    stage_times: dict = field(default_factory=dict)  # stage -> seconds per buffer
    waits: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def n_buffers(self) -> int:
        return len(self.buffer_times)

    @property
    def mean_buffer_time(self) -> float:
        return float(np.mean(self.buffer_times)) if self.buffer_times else float("nan")

    @property
    def realtime_ratio(self) -> float:
        return self.mean_buffer_time / (self.buffer_duration * self.n_streams)

    @property
    def realtime_capable(self) -> bool:
        return self.realtime_ratio < 1

    @property
    def stage_means(self) -> dict:
        return {k: float(np.mean(v)) for k, v in self.stage_times.items()}

    @property
    def stage_sum(self) -> float:
        return sum(self.stage_means.values())

    def histogram(self, stage: str, bins: int = 20):
        return np.histogram(self.stage_times[stage], bins=bins)

    def without_warmup(self, n: int) -> "BudgetReport":
        return BudgetReport(self.n_streams, self.buffer_duration, self.buffer_times[n:],
                            {k: v[n:] for k, v in self.stage_times.items()}, self.waits[n:], self.wall_time)

    def table(self) -> str:
        lines = [f"buffers            {self.n_buffers}",
                 f"streams            {self.n_streams}",
                 f"buffer duration    {self.buffer_duration * 1e3:.3f} ms",
                 f"mean buffer time   {self.mean_buffer_time * 1e3:.3f} ms",
                 f"realtime ratio     {self.realtime_ratio:.3f}"
                 f" ({'real-time capable' if self.realtime_capable else 'not real-time'})",
                 "stage              mean ms   share"]
        total = self.mean_buffer_time
        for k, v in self.stage_means.items():
            lines.append(f"  {k:<17}{v * 1e3:8.3f}  {v / total:6.1%}")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["buffer", "busy_s", "wait_s", *self.stage_times])
            for i, t in enumerate(self.buffer_times):
                w.writerow([i, t, self.waits[i], *(v[i] for v in self.stage_times.values())])

    def as_dict(self) -> dict:
        return {"n_streams": self.n_streams, "buffer_duration_s": self.buffer_duration,
                "n_buffers": self.n_buffers, "mean_buffer_time_s": self.mean_buffer_time,
                "realtime_ratio": self.realtime_ratio, "realtime_capable": self.realtime_capable,
                "stage_mean_s": self.stage_means}


class _Aborted(Exception):
    pass


class _HandOff:
    """Single-writer slots for carried state, stamped with the producing buffer."""

    def __init__(self, initial: dict):
        self._cond = threading.Condition()
        self._slots = {name: (-1, value) for name, value in initial.items()}
        self.failed = False

    def take(self, name: str, n: int):
        with self._cond:
            while self._slots[name][0] != n - 1:
                if self.failed:
                    raise _Aborted
                if self._slots[name][0] > n - 1:
                    raise SequenceError(f"{name} state already advanced past buffer {n - 1}")
                self._cond.wait(0.1)
            return self._slots[name][1]

    def put(self, name: str, n: int, value) -> None:
        with self._cond:
            stamp = self._slots[name][0]
            if stamp != n - 1:
                raise SequenceError(f"{name} hand-off from buffer {n} found stamp {stamp}")
            self._slots[name] = (n, value)
            self._cond.notify_all()

    def abort(self) -> None:
        with self._cond:
            self.failed = True
            self._cond.notify_all()


class Pipeline:
    """Runs a receiver chain over a buffer source with ``plan.n_streams`` workers.

    ``chain`` supplies ``stages()`` as ``(name, fn, carried)`` tuples,
    ``initial_carries()`` and ``finish(job)``; carried stages are called as
    ``fn(job, state)`` and return the state for the next buffer.
    """

    def __init__(self, chain, plan: StreamPlan = StreamPlan(), buffer_duration: float | None = None):
        validate_chain(chain)
        self.chain = chain
        self.plan = plan
        self.stages = chain.stages()
        self.buffer_duration = buffer_duration
        self.events: list[Event] = []
        self.report: BudgetReport | None = None

    def _buffer_duration(self, buf) -> float:
        if self.buffer_duration is not None:
            return self.buffer_duration
        if isinstance(buf, SampleBuffer):
            return buf.duration
        cfg = getattr(self.chain, "cfg", None)
        return len(buf) / cfg.adc_rate

    def run(self, source: Iterable, first_index: int = 0) -> Iterator:
        """Yield finished frames in buffer order."""
        s = self.plan.n_streams
        handoff = _HandOff(self.chain.initial_carries())
        work: queue.Queue = queue.Queue()
        done: dict[int, tuple] = {}
        done_cond = threading.Condition()
        permits = threading.Semaphore(s)
        stop = threading.Event()
        seeds = np.random.SeedSequence(self.plan.jitter_seed).spawn(s)
        self.events = []
        report = BudgetReport(s, float("nan"))
        report.stage_times = {name: [] for name, _, _ in self.stages}
        n_fed = [0]

        def fail(exc):
            handoff.abort()
            stop.set()
            with done_cond:
                done.setdefault(-1, (None, exc))
                done_cond.notify_all()

        def feeder():
            expect = None
            try:
                for buf in source:
                    while not permits.acquire(timeout=0.1):
                        if stop.is_set():
                            return
                    if stop.is_set():
                        return
                    n = first_index + n_fed[0]
                    seq = buf.sequence_index if isinstance(buf, SampleBuffer) else None
                    if seq is not None:
                        if expect is not None and seq != expect:
                            raise SequenceError(f"source gap: buffer {expect} missing, got {seq}")
                        expect = seq + 1
                    if n_fed[0] == 0:
                        report.buffer_duration = self._buffer_duration(buf)
                    work.put(Job(n, buf))
                    n_fed[0] += 1
            except BaseException as exc:  # noqa: BLE001 - forwarded to the consumer
                fail(exc)
            finally:
                for _ in range(s):
                    work.put(None)
                with done_cond:
                    done_cond.notify_all()
                feeder_done.set()

        def worker(wid):
            rng = np.random.default_rng(seeds[wid])
            jitter = self.plan.jitter_s
            while True:
                job = work.get()
                if job is None or stop.is_set():
                    return
                events = []
                t_job = time.perf_counter()
                try:
                    for name, fn, carried in self.stages:
                        if jitter:
                            time.sleep(rng.uniform(0, jitter))
                        waited = 0.0
                        if carried:
                            w0 = time.perf_counter()
                            state = handoff.take(name, job.index - first_index)
                            waited = time.perf_counter() - w0
                            t0 = time.perf_counter()
                            new_state = fn(job, state)
                            t1 = time.perf_counter()
                            handoff.put(name, job.index - first_index, new_state)
                        else:
                            t0 = time.perf_counter()
                            fn(job)
                            t1 = time.perf_counter()
                        events.append(Event(name, job.index, wid, t0, t1, waited))
                    frame = self.chain.finish(job)
                    busy = time.perf_counter() - t_job - sum(e.waited for e in events)
                except _Aborted:
                    return
                except BaseException as exc:  # noqa: BLE001
                    fail(exc)
                    return
                with done_cond:
                    done[job.index] = (frame, events, busy)
                    done_cond.notify_all()

        feeder_done = threading.Event()
        threads = [threading.Thread(target=feeder, daemon=True)]
        threads += [threading.Thread(target=worker, args=(i,), daemon=True) for i in range(s)]
        t_start = time.perf_counter()
        for t in threads:
            t.start()
        n = first_index
        try:
            while True:
                with done_cond:
                    while n not in done and -1 not in done:
                        if feeder_done.is_set() and n >= first_index + n_fed[0]:
                            break
                        done_cond.wait(0.1)
                    if -1 in done:
                        raise done[-1][1]
                    if n not in done:
                        break
                    frame, events, busy = done.pop(n)
                self.events.extend(events)
                report.buffer_times.append(busy)
                report.waits.append(sum(e.waited for e in events))
                for e in events:
                    report.stage_times[e.stage].append(e.end - e.start)
                report.wall_time = time.perf_counter() - t_start
                self.report = report
                yield frame
                permits.release()
                n += 1
        finally:
            stop.set()
            handoff.abort()
            # workers finish their current stage; leaving them running into
            # interpreter shutdown can kill them inside native code
            for t in threads:
                t.join()
            self.report = report


def run_pipeline(source: Iterable, chain, plan: StreamPlan = StreamPlan(),
                 buffer_duration: float | None = None) -> tuple[list, BudgetReport]:
    p = Pipeline(chain, plan, buffer_duration)
    frames = list(p.run(source))
    return frames, p.report


class PassthroughChain:
    """Minimal chain for probes: optional sleep stage, one carried counter."""

    def __init__(self, sleep_s: float = 0.0):
        self.sleep_s = sleep_s

    def initial_carries(self) -> dict:
        return {"count": 0}

    def st_touch(self, job):
        x = job.buffer.samples if isinstance(job.buffer, SampleBuffer) else job.buffer
        job.ctx["n"] = len(x)

    def st_sleep(self, job):
        if self.sleep_s:
            time.sleep(self.sleep_s)

    def st_count(self, job, count):
        job.ctx["count"] = count + job.ctx["n"]
        return job.ctx["count"]

    def stages(self):
        return [("touch", self.st_touch, False), ("sleep", self.st_sleep, False),
                ("count", self.st_count, True)]

    def finish(self, job):
        return job.ctx["count"]


def throughput_probe(chain, source: Iterable, n_buffers: int, plan: StreamPlan = StreamPlan(),
                     warmup: int = 3, buffer_duration: float | None = None) -> BudgetReport:
    """Run ``n_buffers`` + ``warmup`` buffers and report without the warm-up ones."""
    it = iter(source)

    def limited():
        for _ in range(n_buffers + warmup):
            yield next(it)

    p = Pipeline(chain, plan, buffer_duration)
    for _ in p.run(limited()):
        pass
    return p.report.without_warmup(warmup)
