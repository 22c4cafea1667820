"""PNG rendering for run outputs.

Every function takes the row dictionaries that the CSV writers consume,
so figures can be rebuilt from files alone.  The Agg backend keeps
rendering headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)


def _shade_stalls(ax, samples: list[dict]) -> None:
    for m in samples:
        if int(m["saw_stall"]):
            k = int(m["interval"])
            ax.axvspan(k, k + 1, color="tab:red", alpha=0.15, linewidth=0)


def render_timeseries(samples: list[dict], report: dict, path: str) -> None:
    """Acked ops per second with stall intervals shaded."""
    fig, ax = plt.subplots(figsize=(9, 3.2), layout="constrained")
    xs = [int(m["interval"]) for m in samples]
    ax.plot(xs, [int(m["puts"]) for m in samples], label="puts/s", linewidth=1.2)
    if any(int(m["gets"]) for m in samples):
        ax.plot(xs, [int(m["gets"]) for m in samples], label="gets/s", linewidth=1.2)
    if any(int(m["ranges"]) for m in samples):
        ax.plot(xs, [int(m["ranges"]) for m in samples], label="ranges/s", linewidth=1.2)
    _shade_stalls(ax, samples)
    ax.set_xlabel("virtual second")
    ax.set_ylabel("acked ops/s")
    ax.set_title(f"workload {report['workload']}, {report['policy']}, seed {report['seed']}")
    ax.legend(loc="upper right", fontsize=8)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_utilization(samples: list[dict], path: str) -> None:
    """Bus and device utilization per interval, stall intervals shaded."""
    fig, ax = plt.subplots(figsize=(9, 3.2), layout="constrained")
    xs = [int(m["interval"]) for m in samples]
    ax.plot(xs, [float(m["bus_util"]) for m in samples], label="bus", linewidth=1.2)
    ax.plot(xs, [float(m["dev_util"]) for m in samples], label="device", linewidth=1.2)
    _shade_stalls(ax, samples)
    ax.set_xlabel("virtual second")
    ax.set_ylabel("utilization")
    ax.set_ylim(0, 1.05)
    ax.legend(loc="upper right", fontsize=8)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_cdf(rows: list[tuple[float, float]], path: str, label: str = "") -> None:
    """Step CDF of stall-interval bus utilization."""
    fig, ax = plt.subplots(figsize=(5, 3.6), layout="constrained")
    xs = [0.0] + [u for u, _ in rows]
    ys = [0.0] + [f for _, f in rows]
    ax.step(xs, ys, where="post", label=label or None)
    ax.set_xlabel("bus utilization during stall intervals")
    ax.set_ylabel("cumulative fraction")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    if label:
        ax.legend(loc="lower right", fontsize=8)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_compare(rows: list[dict], path: str) -> None:
    """Grouped bars: acked puts per run, labeled by policy and seed."""
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(rows)), 3.6), layout="constrained")
    labels = [f"{r['policy']}\n{r['workload']} s{r['seed']}" for r in rows]
    ax.bar(range(len(rows)), [int(r["puts_acked"]) for r in rows], color="tab:blue")
    ax.set_xticks(range(len(rows)), labels, fontsize=7)
    ax.set_ylabel("acked puts")
    fig.savefig(path, dpi=120)
    plt.close(fig)
