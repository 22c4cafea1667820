"""Workload driver and metrics reporter.

Four workloads, all closed-loop over the virtual clock (the next op is
issued a fixed host cost after the previous ack):

* A: fillrandom, one writer, 100% puts, continuous.
* B: 9:1 write:read, one writer and one reader taking weighted turns.
* C: as B at 8:2.
* D: a preload of puts runs to quiescence, then one reader issues range
  queries (one seek plus ``range_len`` next steps each).

The mixed workloads run in cycles of ``burst_ops`` issued ops: the
writer's turn (9/10 of the cycle for B), a ``burst_gap_ms`` client
think gap, then the reader's turn, then the next cycle without a pause.
The issued write:read ratio is exact per cycle.  Pure fill and the scan
phase of D never pause.  The default gap plus read turn (about 1.65 s)
is shorter than the lazy rollback quiet window (2 s), so the rhythm of
the workload itself never counts as idle time toward a lazy drain.

Keys are fixed-size random byte strings; values carry the op index in
their first 8 bytes and are zero-padded.  Reads sample uniformly from
every key written so far, so a read can land on any live version no
matter where its latest write currently resides.  Every actor derives
its RNG from the run seed and its role name, which keeps op streams
stable when other actors change.

Reported CPU usage is a proxy: the fraction of virtual time spent in
compaction CPU phases, normalized by the worker count.  No real CPU is
metered.

Outputs per run: ``samples.csv`` (schema ``samples-v1``, one row per
completed 1 s interval of the measurement window) and ``report.json``
(run totals).  All CSV floats use a fixed %.6f format so identical
configurations produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import os
import random
import struct
from dataclasses import dataclass, fields

from .accel import PutResult, Store
from .config import SimConfig
from .engine import EventKind, SECOND_US
from .main_lsm import Verdict

SAMPLES_SCHEMA = "samples-v1"
CDF_SCHEMA = "cdf-v1"
COMPARE_SCHEMA = "compare-v1"

WORKLOAD_MIX = {"A": (10, 0), "B": (9, 1), "C": (8, 2)}
WORKLOADS = ("A", "B", "C", "D")
FLOAT_FMT = "%.6f"


@dataclass
class WorkloadSpec:
    """Shape of one benchmark run, derived from the shared configuration."""

    name: str
    write_weight: int
    read_weight: int
    key_size: int
    value_size: int
    duration_s: int
    max_ops: int
    seed: int
    preload_ops: int = 0      # workload D only
    range_queries: int = 0    # workload D only
    range_len: int = 0        # next steps per range query
    burst_ops: int = 0        # ops per cycle; 0 = continuous, no think gaps
    burst_gap_ms: int = 0
    write_phase_ops: int = 0  # writer's turn within each cycle

    @classmethod
    def from_config(cls, cfg: SimConfig, name: str) -> "WorkloadSpec":
        name = name.upper()
        if name not in WORKLOADS:
            raise ValueError(f"unknown workload {name!r} (expected one of {WORKLOADS})")
        if name == "D":
            return cls(name, 0, 0, cfg.key_size, cfg.value_size, cfg.duration_s,
                       cfg.max_ops, cfg.seed, preload_ops=cfg.preload_ops,
                       range_queries=cfg.range_queries, range_len=cfg.range_len)
        w, r = WORKLOAD_MIX[name]
        burst = cfg.burst_ops if r else 0
        return cls(name, w, r, cfg.key_size, cfg.value_size, cfg.duration_s,
                   cfg.max_ops, cfg.seed,
                   burst_ops=burst, burst_gap_ms=cfg.burst_gap_ms if burst else 0,
                   write_phase_ops=burst * w // (w + r) if burst else 0)


@dataclass
class MetricsSample:
    """One 1-second interval of the measurement window.

    Byte counters are split by interface and direction; the two
    utilization fields hold the fraction of each resource's capacity
    the interval consumed, kept at percent resolution.
    """

    interval: int
    puts: int = 0
    gets: int = 0
    ranges: int = 0
    deletes: int = 0
    put_bytes: int = 0
    redirected: int = 0
    blocked: int = 0
    slowdown_sleeps: int = 0
    stall_us: int = 0
    saw_normal: int = 0
    saw_slowdown: int = 0
    saw_stall: int = 0
    block_h2d: float = 0.0
    block_d2h: float = 0.0
    kv_h2d: float = 0.0
    kv_d2h: float = 0.0
    bus_util: float = 0.0
    dev_util: float = 0.0


SAMPLE_FIELDS = [f.name for f in fields(MetricsSample)]
_FLOAT_FIELDS = {"block_h2d", "block_d2h", "kv_h2d", "kv_d2h", "bus_util", "dev_util"}


@dataclass
class RunResult:
    spec: WorkloadSpec
    cfg: SimConfig
    samples: list[MetricsSample]
    report: dict
    store: Store


def actor_rng(seed: int, role: str) -> random.Random:
    """String seeds hash platform-independently, so each role's op stream
    survives changes to every other actor."""
    return random.Random(f"{seed}-{role}")


def make_value(value_size: int, n: int) -> bytes:
    stamp = struct.pack("<Q", n)
    if value_size <= 8:
        return stamp[:value_size]
    return stamp + b"\x00" * (value_size - 8)


class _Driver:
    """Runs one workload on one store and collects per-interval samples."""

    def __init__(self, spec: WorkloadSpec, cfg: SimConfig) -> None:
        self.spec = spec
        self.cfg = cfg
        self.store = Store(cfg)
        self.engine = self.store.engine
        self.writer_rng = actor_rng(spec.seed, "writer")
        self.reader_rng = actor_rng(spec.seed, "reader")
        self.written_keys: list[bytes] = []
        self.samples: list[MetricsSample] = []
        self.issued = 0
        self._burst_count = 0
        self.acked_puts = 0
        self.acked_gets = 0
        self.acked_ranges = 0
        self.acked_put_bytes = 0
        self.write_latencies: list[int] = []
        self.stall_episodes = 0
        self._last_sampled_verdict = Verdict.NORMAL
        self._flags = [False, False, False]
        self._window_end_us = 0
        self._stop = False

    # measurement plumbing

    def _sample_verdict(self) -> None:
        v = self.store.main.stall_status().verdict
        self._flags[int(v)] = True
        if v == Verdict.STALL and self._last_sampled_verdict != Verdict.STALL:
            self.stall_episodes += 1
        self._last_sampled_verdict = v
        nxt = self.engine.now + self.cfg.detector_period_us
        if nxt < self._window_end_us:
            self.engine.schedule(nxt, EventKind.DETECTOR_TICK, self._sample_verdict)

    def _snapshot(self) -> dict:
        s = self.store
        return {"puts": self.acked_puts, "gets": self.acked_gets,
                "ranges": self.acked_ranges, "put_bytes": self.acked_put_bytes,
                "redirected": s.redirected_puts, "blocked": s.blocked_puts,
                "slowdown_sleeps": s.slowdown_sleeps, "stall_us": s.blocked_wait_us}

    def _interval_boundary(self, k: int, prev: dict) -> MetricsSample:
        led = self.store.ledger
        led.sync()
        cur = self._snapshot()
        sample = MetricsSample(
            interval=k,
            puts=cur["puts"] - prev["puts"],
            gets=cur["gets"] - prev["gets"],
            ranges=cur["ranges"] - prev["ranges"],
            deletes=0,
            put_bytes=cur["put_bytes"] - prev["put_bytes"],
            redirected=cur["redirected"] - prev["redirected"],
            blocked=cur["blocked"] - prev["blocked"],
            slowdown_sleeps=cur["slowdown_sleeps"] - prev["slowdown_sleeps"],
            stall_us=cur["stall_us"] - prev["stall_us"],
            saw_normal=int(self._flags[int(Verdict.NORMAL)]),
            saw_slowdown=int(self._flags[int(Verdict.SLOWDOWN)]),
            saw_stall=int(self._flags[int(Verdict.STALL)]),
            block_h2d=led.interval_bytes(k, "block", "h2d"),
            block_d2h=led.interval_bytes(k, "block", "d2h"),
            kv_h2d=led.interval_bytes(k, "kv", "h2d"),
            kv_d2h=led.interval_bytes(k, "kv", "d2h"),
            # Percent resolution: sub-percent gaps in a saturated second
            # (one op short of capacity) are scheduling dust, not signal.
            bus_util=round(led.utilization(k, "bus"), 2),
            dev_util=round(led.utilization(k, "device"), 2),
        )
        self._flags = [False, False, False]
        prev.update(cur)
        return sample

    # op issue loop

    def _op_kind(self) -> str:
        if self.spec.name == "D":
            return "range"
        w, r = self.spec.write_weight, self.spec.read_weight
        if not r:
            return "put"
        if self.spec.burst_ops:
            return "put" if self._burst_count < self.spec.write_phase_ops else "get"
        return "put" if self.issued % (w + r) < w else "get"

    def _issue_next(self) -> None:
        if self._stop or self.engine.now >= self._window_end_us or self.issued >= self.spec.max_ops:
            return
        kind = self._op_kind()
        self.issued += 1
        self._burst_count += 1
        if kind == "put":
            key = self.writer_rng.randbytes(self.spec.key_size)
            value = make_value(self.spec.value_size, self.issued)
            self.written_keys.append(key)
            self.store.submit_put(key, value, self._put_acked)
        elif kind == "get":
            if self.written_keys:
                key = self.written_keys[self.reader_rng.randrange(len(self.written_keys))]
            else:
                key = self.reader_rng.randbytes(self.spec.key_size)
            self.store.submit_get(key, self._get_acked)
        else:
            start = self.reader_rng.randbytes(self.spec.key_size)
            self.store.submit_range(start, self.spec.range_len, self._range_acked)

    def _schedule_next(self) -> None:
        delay = self.cfg.host_op_cost_us
        if self.spec.burst_ops:
            if self._burst_count == self.spec.write_phase_ops:
                delay += self.spec.burst_gap_ms * 1000  # think gap before reads
            elif self._burst_count >= self.spec.burst_ops:
                self._burst_count = 0
        self.engine.schedule_in(delay, EventKind.OP_ARRIVAL, self._issue_next)

    def _put_acked(self, result: PutResult) -> None:
        if self.engine.now < self._window_end_us:
            self.acked_puts += 1
            self.acked_put_bytes += self.spec.key_size + self.spec.value_size
            self.write_latencies.append(result.latency_us)
        self._schedule_next()

    def _get_acked(self, value: bytes | None, source: str) -> None:
        if self.engine.now < self._window_end_us:
            self.acked_gets += 1
        self._schedule_next()

    def _range_acked(self, results: list, switches: int) -> None:
        if self.engine.now < self._window_end_us:
            self.acked_ranges += 1
        if self.spec.name == "D" and self.acked_ranges >= self.spec.range_queries:
            self._stop = True
            return
        self._schedule_next()

    # phases

    def _preload(self) -> None:
        n = 0
        rng = actor_rng(self.spec.seed, "preload")

        def put_next() -> None:
            nonlocal n
            if n >= self.spec.preload_ops:
                return
            n += 1
            key = rng.randbytes(self.spec.key_size)
            self.written_keys.append(key)
            self.store.submit_put(key, make_value(self.spec.value_size, -n),
                                  lambda r: self.engine.schedule_in(
                                      self.cfg.host_op_cost_us, EventKind.OP_ARRIVAL, put_next))

        put_next()
        self.engine.run_until(lambda: n >= self.spec.preload_ops and self.store.ledger.active_count == 0)
        self.store.drain_now()
        self.store.wait_quiescent()

    def run(self) -> RunResult:
        self.store.start()
        if self.spec.name == "D" and self.spec.preload_ops:
            self._preload()
            # align the measurement window to a whole-second boundary so
            # sample rows coincide with ledger intervals
            self.engine.advance_until(-(-self.engine.now // SECOND_US) * SECOND_US,
                                      collect=False)
        start_us = self.engine.now
        self._window_end_us = start_us + self.spec.duration_s * SECOND_US
        first_interval = start_us // SECOND_US
        if self.spec.duration_s > 0:
            self.engine.schedule(start_us + self.cfg.detector_period_us // 2,
                                 EventKind.DETECTOR_TICK, self._sample_verdict)
            self._issue_next()
        prev = self._snapshot()
        for k in range(first_interval, first_interval + self.spec.duration_s):
            self.engine.advance_until((k + 1) * SECOND_US, collect=False)
            self.samples.append(self._interval_boundary(k, prev))
        # measurement window closed; let in-flight work settle and drain
        self.store.drain_now()
        self.store.wait_quiescent()
        self.store.check_invariants()
        report = self._report(start_us)
        return RunResult(self.spec, self.cfg, self.samples, report, self.store)

    def _report(self, start_us: int) -> dict:
        s = self.store
        led = s.ledger
        duration_us = self.spec.duration_s * SECOND_US
        total_ops = self.acked_puts + self.acked_gets + self.acked_ranges
        avg_mbps = (self.acked_put_bytes / duration_us) if duration_us else 0.0
        workers = max(1, self.cfg.compaction_workers)
        cpu_pct = (100.0 * s.main.cpu_busy_us / (duration_us * workers)) if duration_us else 0.0
        lat = sorted(self.write_latencies)
        p99 = lat[max(0, -(-99 * len(lat) // 100) - 1)] if lat else None
        return {
            "schema": "report-v1",
            "workload": self.spec.name,
            "policy": self.cfg.policy,
            "rollback_mode": self.cfg.rollback_mode,
            "seed": self.spec.seed,
            "duration_s": self.spec.duration_s,
            "ops_acked": total_ops,
            "puts_acked": self.acked_puts,
            "gets_acked": self.acked_gets,
            "ranges_acked": self.acked_ranges,
            "avg_ops_per_s": total_ops / self.spec.duration_s if self.spec.duration_s else 0.0,
            "avg_write_mb_per_s": avg_mbps,
            "p99_write_latency_us": p99,
            "avg_cpu_pct": cpu_pct,
            "efficiency_mb_per_cpu_pct": (avg_mbps / cpu_pct) if cpu_pct > 0 else None,
            "stall_episodes": self.stall_episodes,
            "slowdown_sleeps": s.slowdown_sleeps,
            "blocked_puts": s.blocked_puts,
            "redirected_puts": s.redirected_puts,
            "direct_puts": s.direct_puts,
            "reads_from_dev": s.reads_from_dev,
            "reads_from_main": s.reads_from_main,
            "zero_write_intervals": sum(1 for m in self.samples if m.puts == 0),
            "rollback_sessions": s.sessions_completed,
            "rollback_bytes": s.rollback_bytes,
            "rollback_records_merged": s.records_merged,
            "rollback_records_skipped": s.records_skipped,
            "flushes": s.main.flush_count,
            "compactions": s.main.compaction_count,
            "compaction_cpu_us": s.main.cpu_busy_us,
            "bytes": {f"{i}_{d}": led.total_bytes(i, d)
                      for i in ("block", "kv") for d in ("h2d", "d2h")},
            "bus_util_sorted": sorted(m.bus_util for m in self.samples),
            "dev_util_sorted": sorted(m.dev_util for m in self.samples),
        }


def run_workload(cfg: SimConfig, workload: str) -> RunResult:
    """Execute one workload run to completion and return its results."""
    spec = WorkloadSpec.from_config(cfg, workload)
    return _Driver(spec, cfg).run()


# file output

def _fmt(name: str, v) -> str:
    return FLOAT_FMT % v if name in _FLOAT_FIELDS else str(v)


def write_samples_csv(samples: list[MetricsSample], path: str) -> None:
    with open(path, "w", newline="") as fp:
        fp.write(f"# schema: {SAMPLES_SCHEMA}\n")
        w = csv.writer(fp)
        w.writerow(SAMPLE_FIELDS)
        for m in samples:
            w.writerow([_fmt(f, getattr(m, f)) for f in SAMPLE_FIELDS])


def read_samples_csv(path: str) -> list[dict]:
    with open(path, newline="") as fp:
        rows = [r for r in fp if not r.startswith("#")]
    out = []
    for rec in csv.DictReader(rows):
        parsed = {}
        for k, v in rec.items():
            parsed[k] = float(v) if k in _FLOAT_FIELDS else int(v)
        out.append(parsed)
    return out


def write_report_json(report: dict, path: str) -> None:
    with open(path, "w") as fp:
        json.dump(report, fp, indent=2, sort_keys=True)
        fp.write("\n")


def utilization_cdf_rows(samples: list[dict]) -> list[tuple[float, float]]:
    """CDF of device-link utilization over the stall-flagged intervals.

    The device end of the transfer path is the binding resource, so its
    share is the one that shows whether stall time leaves it idle.
    """
    vals = sorted(float(m["dev_util"]) for m in samples if int(m["saw_stall"]))
    if not vals:
        raise ValueError("no stall intervals in input; nothing to aggregate")
    n = len(vals)
    return [(v, (i + 1) / n) for i, v in enumerate(vals)]


def write_cdf_csv(rows: list[tuple[float, float]], path: str) -> None:
    with open(path, "w", newline="") as fp:
        fp.write(f"# schema: {CDF_SCHEMA}\n")
        w = csv.writer(fp)
        w.writerow(["utilization", "cum_fraction"])
        for u, f in rows:
            w.writerow([FLOAT_FMT % u, FLOAT_FMT % f])


COMPARE_FIELDS = ["workload", "policy", "rollback_mode", "seed", "puts_acked",
                  "avg_ops_per_s", "avg_write_mb_per_s", "p99_write_latency_us",
                  "efficiency_mb_per_cpu_pct", "zero_write_intervals", "stall_episodes",
                  "slowdown_sleeps", "blocked_puts", "redirected_puts", "rollback_sessions"]


def compare_runs(results: list[RunResult]) -> list[dict]:
    """Side-by-side summary rows, one per run."""
    rows = []
    for r in results:
        row = {}
        for f in COMPARE_FIELDS:
            v = r.report[f]
            if isinstance(v, float):
                v = FLOAT_FMT % v
            row[f] = v
        rows.append(row)
    return rows


def write_compare_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="") as fp:
        fp.write(f"# schema: {COMPARE_SCHEMA}\n")
        w = csv.DictWriter(fp, fieldnames=COMPARE_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow(row)


def out_paths(out_dir: str, tag: str) -> dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    return {kind: os.path.join(out_dir, f"{tag}-{kind}.{ext}")
            for kind, ext in (("samples", "csv"), ("report", "json"),
                              ("timeseries", "png"), ("utilization", "png"))}
