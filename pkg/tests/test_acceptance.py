"""End-to-end behavior gates.

Each test covers one numbered acceptance criterion and prints a single
PASS or FAIL line (visible with -s, or in the captured output on
failure) so verdicts can be read off the run log directly.
"""

import bisect
import random
import time

from dualkv import SimConfig, Store, bench
from dualkv.records import CHUNK_MAX, decode_records, reassemble

from conftest import tiny_cfg


def _verdict(num: int, name: str, failures: list, detail: str) -> None:
    status = "FAIL" if failures else "PASS"
    print(f"\n[criterion {num}] {name}: {status} ({detail})", flush=True)
    assert not failures, f"criterion {num} {name}: " + "; ".join(str(f) for f in failures[:8])


def test_c1_no_write_halt():
    failures, walls = [], []
    for seed in range(1, 11):
        for policy in ("kvaccel", "baseline-stall"):
            cfg = SimConfig().copy(policy=policy, seed=seed)
            t0 = time.monotonic()
            rep = bench.run_workload(cfg, "A").report
            wall = time.monotonic() - t0
            walls.append(wall)
            if wall >= 30:
                failures.append(f"seed {seed} {policy} took {wall:.1f}s wall")
            if policy == "kvaccel":
                if rep["zero_write_intervals"] != 0:
                    failures.append(f"seed {seed}: kvaccel had "
                                    f"{rep['zero_write_intervals']} zero-write intervals")
                if rep["blocked_puts"] != 0:
                    failures.append(f"seed {seed}: kvaccel blocked {rep['blocked_puts']} puts")
            elif rep["zero_write_intervals"] < 1:
                failures.append(f"seed {seed}: baseline-stall never went a second without writes")
    _verdict(1, "no write halt", failures, f"10 seeds, max wall {max(walls):.1f}s")


def test_c2_throughput_gap_narrows_with_workers():
    seeds, workers = (1, 2, 3), (1, 2, 4)
    failures, ratios = [], {}
    for seed in seeds:
        per = []
        for w in workers:
            puts = {}
            for policy in ("kvaccel", "baseline-slowdown"):
                cfg = SimConfig().copy(policy=policy, seed=seed, compaction_workers=w)
                puts[policy] = bench.run_workload(cfg, "A").report["puts_acked"]
            per.append(puts["kvaccel"] / puts["baseline-slowdown"])
        ratios[seed] = per
        if per[0] < 1.10:
            failures.append(f"seed {seed}: ratio at 1 worker {per[0]:.3f} < 1.10")
    inversions = [(s, a, b) for s in seeds
                  for a, b in zip(ratios[s], ratios[s][1:]) if b > a]
    if len(inversions) > 1:
        failures.append(f"{len(inversions)} gap inversions: {inversions}")
    elif inversions and inversions[0][2] > inversions[0][1] * 1.02:
        s, a, b = inversions[0]
        failures.append(f"seed {s}: inversion {a:.3f} -> {b:.3f} beyond 2%")
    detail = "; ".join(
        f"s{s} " + "/".join(f"{x:.2f}" for x in ratios[s]) for s in seeds)
    _verdict(2, "throughput gap narrows with workers", failures, detail)


def test_c3_oracle_equivalence():
    n_sequences = 1000
    failures = []
    for i in range(n_sequences):
        rng = random.Random(f"c3-{i}")
        store = Store(tiny_cfg())
        store.start()
        oracle = {}
        diverged = None
        for op in range(rng.randint(30, 250)):
            kind = rng.choices(("put", "get", "delete", "range"), (50, 20, 15, 15))[0]
            key = b"key%02d" % rng.randrange(40)
            if kind == "put":
                value = rng.randbytes(rng.randint(1, 2048))
                store.put(key, value)
                oracle[key] = value
            elif kind == "delete":
                store.delete(key)
                oracle.pop(key, None)
            elif kind == "get":
                if store.get(key) != oracle.get(key):
                    diverged = f"sequence {i} op {op}: get({key!r})"
                    break
            else:
                n = rng.randint(1, 12)
                want = [(k, oracle[k]) for k in sorted(oracle) if k >= key][:n + 1]
                if store.range(key, n) != want:
                    diverged = f"sequence {i} op {op}: range from {key!r}"
                    break
            if rng.random() < 0.03:
                store.engine.advance_until(store.engine.now + rng.randint(1000, 300_000))
            if rng.random() < 0.02:
                store.drain_now()
        if diverged is None:
            store.drain_now()
            store.wait_quiescent()
            if store.range(b"", len(oracle) + 5) != sorted(oracle.items()):
                diverged = f"sequence {i}: final range scan"
            elif any(store.get(k) != v for k, v in oracle.items()):
                diverged = f"sequence {i}: final point reads"
            else:
                store.check_invariants()
        if diverged:
            failures.append(diverged)
            if len(failures) >= 5:
                break
    _verdict(3, "oracle equivalence", failures, f"{n_sequences} randomized sequences")


def test_c4_rollback_postconditions():
    failures = []
    episodes = 10
    # a huge detector period keeps every drain under the test's control
    store = Store(tiny_cfg(detector_period_ms=600_000))
    store.start()
    for ep in range(episodes):
        rng = random.Random(f"c4-{ep}")
        dev_ever, last_route = set(), {}
        for i in range(50):
            key = b"e%02d-k%03d" % (ep, i)
            r = store.put(key, bytes([ep + 1]) * 2048)
            last_route[key] = r.route
            if r.route == "dev":
                dev_ever.add(key)
        store.engine.advance_until(store.engine.now + 400_000)  # stall clears
        redirected = sorted(dev_ever)
        for key in rng.sample(redirected, rng.randint(0, len(redirected))):
            r = store.delete(key) if rng.random() < 0.3 else store.put(key, b"rewritten")
            last_route[key] = r.route
            if r.route == "dev":
                dev_ever.add(key)
        expect_skip = sum(1 for k in dev_ever if last_route[k] == "main")
        expect_merge = sum(1 for k in dev_ever if last_route[k] == "dev")
        pre_skip, pre_merge = store.records_skipped, store.records_merged
        store.drain_now()
        for ok, msg in (
                (len(store.metadata) == 0, "metadata not empty"),
                (store.device.dev_is_empty(), "device-side tree not empty"),
                (store.device.kv_allocator.free_pages == store.cfg.kv_region_pages,
                 "kv region pages not all free"),
                (store.records_skipped - pre_skip == expect_skip,
                 f"skips {store.records_skipped - pre_skip} != oracle {expect_skip}"),
                (store.records_merged - pre_merge == expect_merge,
                 f"merges {store.records_merged - pre_merge} != oracle {expect_merge}")):
            if not ok:
                failures.append(f"episode {ep}: {msg}")
    _verdict(4, "rollback postconditions", failures, f"{episodes} episodes")


def test_c5_chunking_exactness():
    failures = []
    # closed form: 256 records of 4-byte keys and 4 KiB values pack as
    # 127 + 127 + 2 whole records per chunk
    store = Store(tiny_cfg())
    for i in range(256):
        store.device.kv_put(b"%04d" % i, b"v" * 4096, i + 1)
    store.engine.drain()
    store.device.freeze()
    scan = store.device.kv_range_scan_bulk(frozen_only=True)
    shape = []
    while (nxt := scan.next_chunk()) is not None:
        chunk, n_records, _ = nxt
        shape.append((len(chunk), n_records))
    store.engine.drain()
    if shape != [(522_605, 127), (522_605, 127), (8_230, 2)]:
        failures.append(f"closed-form packing came out as {shape}")

    datasets = 6
    for ds in range(datasets):
        rng = random.Random(f"c5-{ds}")
        store = Store(tiny_cfg(total_pages=65_536, disaggregation_point=8_192))
        expected = []
        for i in range(rng.randint(40, 120)):
            key = b"r%04d." % i + rng.randbytes(rng.randint(1, 30)).hex().encode()
            tomb = rng.random() < 0.1
            value = b"" if tomb else rng.randbytes(rng.randint(0, 600_000))
            store.device.kv_put(key, value, i + 1, tomb)
            expected.append((key, i + 1, tomb, value))
        store.engine.drain()
        store.device.freeze()
        scan = store.device.kv_range_scan_bulk(frozen_only=True)
        decoded = []
        while (nxt := scan.next_chunk()) is not None:
            chunk, n_records, _ = nxt
            if len(chunk) > CHUNK_MAX:
                failures.append(f"dataset {ds}: {len(chunk)}-byte chunk")
            recs = decode_records(chunk)
            if len(recs) != n_records:
                failures.append(f"dataset {ds}: chunk claimed {n_records} records, "
                                f"decoded {len(recs)}")
            decoded.extend(recs)
        store.engine.drain()
        got = sorted((e.key, e.seq, e.tombstone, e.value) for e in reassemble(decoded))
        if got != sorted(expected):
            failures.append(f"dataset {ds}: record multiset mismatch")
    _verdict(5, "chunking exactness", failures, f"closed form + {datasets} random datasets")


def test_c6_metadata_recovery():
    failures = []
    cases = 100
    for i in range(cases):
        rng = random.Random(f"c6-{i}")
        store = Store(tiny_cfg())
        store.start()
        acked = {}
        n_ops = rng.randint(40, 120)
        crash_mode = i % 3  # 0 mid-sequence, 1 during settling, 2 mid-rollback
        crash_at = rng.randrange(n_ops) if crash_mode == 0 else None
        for op in range(n_ops):
            key = b"key%02d" % rng.randrange(30)
            if rng.random() < 0.85:
                value = rng.randbytes(rng.randint(1, 1500))
                store.put(key, value)
                acked[key] = value
            else:
                store.delete(key)
                acked[key] = None
            if crash_at is not None and op == crash_at:
                break
        if crash_mode == 1:
            store.engine.advance_until(store.engine.now + rng.randint(100, 200_000))
        elif crash_mode == 2:
            for _ in range(5000):
                if store.session is not None or store.engine.step() is None:
                    break
            for _ in range(rng.randrange(60)):  # die partway through the drain
                if store.session is None:
                    break
                store.engine.step()
        store.crash()
        expected = {}
        for entry in store.device.kv_iter_from(b""):
            main_seq = store.main.peek_seq(entry.key)
            if main_seq is None or entry.seq > main_seq:
                expected[entry.key] = entry.seq
        count = store.recover_metadata()
        if dict(store.metadata.items()) != expected:
            failures.append(f"case {i}: rebuilt table mismatch")
        if count != len(expected):
            failures.append(f"case {i}: reported {count}, expected {len(expected)}")
        bad = sum(1 for k, v in acked.items() if store.get(k) != v)
        if bad:
            failures.append(f"case {i}: {bad} acked writes unreadable after recovery")
        store.check_invariants()
        if len(failures) >= 6:
            break
    _verdict(6, "metadata recovery", failures, f"{cases} crash points, 3 modes")


def test_c7_eager_beats_lazy_on_read_locality():
    failures, gaps, write_ratios = [], [], []
    for seed in range(1, 11):
        frac, puts = {}, {}
        for mode in ("eager", "lazy"):
            cfg = SimConfig().copy(compaction_workers=4, memtable_bytes=512 * 1024,
                                   rollback_mode=mode, seed=seed)
            rep = bench.run_workload(cfg, "B").report
            reads = rep["reads_from_main"] + rep["reads_from_dev"]
            frac[mode] = rep["reads_from_main"] / reads if reads else 0.0
            puts[mode] = rep["puts_acked"]
        gap = frac["eager"] - frac["lazy"]
        gaps.append(gap)
        if gap < 0.10:
            failures.append(f"seed {seed}: read-locality gap {gap:+.3f} < +0.10")
        ratio = puts["eager"] / puts["lazy"]
        write_ratios.append(ratio)
        if not 0.9 <= ratio <= 1.1:
            failures.append(f"seed {seed}: write throughput ratio {ratio:.3f} off by >10%")
    _verdict(7, "eager vs lazy read locality", failures,
             f"10 seeds, min gap {min(gaps):+.3f}, "
             f"write ratios {min(write_ratios):.3f}-{max(write_ratios):.3f}")


def _step_cdf(vals: list[float]):
    vals = sorted(vals)
    return lambda u: bisect.bisect_right(vals, u) / len(vals)


def test_c8_stall_interval_utilization():
    failures, details = [], []
    for seed in (1, 2, 3):
        per = {}
        for policy in ("baseline-stall", "kvaccel"):
            # pace the fill at device saturation so stall-interval
            # utilization reflects the transfer path, not client think time
            cfg = SimConfig().copy(policy=policy, seed=seed,
                                   host_op_cost_us=150, max_ops=1_000_000)
            r = bench.run_workload(cfg, "A")
            per[policy] = [m.dev_util for m in r.samples if m.saw_stall]
        base, kv = per["baseline-stall"], per["kvaccel"]
        if not base:
            failures.append(f"seed {seed}: baseline produced no stall intervals")
            continue
        mass_low = sum(1 for u in base if u < 0.05) / len(base)
        if mass_low < 0.10:
            failures.append(f"seed {seed}: baseline mass below 0.05 is {mass_low:.3f} < 0.10")
        crossing = 0.0
        if kv:
            f_base, f_kv = _step_cdf(base), _step_cdf(kv)
            crossing = max(f_kv(u) - f_base(u) for u in sorted(set(base + kv)))
            if crossing > 0.02 + 1e-9:
                failures.append(f"seed {seed}: dominance crossing {crossing:.4f} > 0.02")
        details.append(f"s{seed} mass {mass_low:.2f} crossing {crossing:+.4f}")
    _verdict(8, "stall-interval utilization", failures, "; ".join(details))


def test_c9_deterministic_csv_output(tmp_path):
    failures = []
    for policy in ("baseline-stall", "kvaccel"):
        blobs = []
        for rep in range(2):
            cfg = SimConfig().copy(policy=policy, seed=11, duration_s=5)
            r = bench.run_workload(cfg, "A")
            samples = tmp_path / f"{policy}-{rep}-samples.csv"
            compare = tmp_path / f"{policy}-{rep}-compare.csv"
            bench.write_samples_csv(r.samples, str(samples))
            bench.write_compare_csv(bench.compare_runs([r]), str(compare))
            blob = samples.read_bytes() + compare.read_bytes()
            if policy == "baseline-stall":
                rows = bench.utilization_cdf_rows(bench.read_samples_csv(str(samples)))
                cdf = tmp_path / f"cdf-{rep}.csv"
                bench.write_cdf_csv(rows, str(cdf))
                blob += cdf.read_bytes()
            blobs.append(blob)
        if blobs[0] != blobs[1]:
            failures.append(f"{policy}: repeated identical run produced different bytes")
    _verdict(9, "deterministic output", failures, "2 policies, repeated at seed 11")
