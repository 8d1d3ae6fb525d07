"""Figure rendering for characterization reports.

Renders a port-pressure heatmap, a measured-vs-computed throughput scatter,
and a latency bar chart next to the delimited summary.  All figures go to
files; no interactive backend is required.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _expected_load(result, ports):
    """Per-port expected uop pressure assuming an even split per combination."""
    load = {p: 0.0 for p in ports}
    for combo, count in result.port_usage.entries:
        share = count / len(combo)
        for p in combo:
            load[p] += share
    return [load[p] for p in ports]


def render_figures(results, out_dir, ports=None) -> list:
    """Render all report figures into ``out_dir``; returns the file paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = sorted(results, key=lambda r: r.instruction)
    if ports is None:
        seen = set()
        for r in results:
            for combo, _ in r.port_usage.entries:
                seen |= combo
        ports = sorted(seen) if seen else [0]
    paths = []

    # port pressure heatmap
    fig, ax = plt.subplots(
        figsize=(6, max(2.0, 0.22 * len(results) + 1.2)), constrained_layout=True
    )
    matrix = [_expected_load(r, ports) for r in results]
    im = ax.imshow(matrix, aspect="auto", cmap="YlOrRd")
    ax.set_xticks(range(len(ports)), [f"p{p}" for p in ports])
    ax.set_yticks(range(len(results)), [r.instruction for r in results], fontsize=6)
    ax.set_xlabel("port")
    ax.set_title("expected uop pressure per port")
    fig.colorbar(im, ax=ax, shrink=0.8)
    path = out_dir / "port_usage.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    paths.append(path)

    # measured vs computed throughput
    fig, ax = plt.subplots(figsize=(5, 5), constrained_layout=True)
    xs, ys, labels = [], [], []
    for r in results:
        if r.throughput.computed is None:
            continue
        xs.append(float(r.throughput.computed))
        ys.append(float(r.throughput.measured.cycles))
        labels.append(r.instruction)
    if xs:
        top = max(max(xs), max(ys)) * 1.1
        ax.plot([0, top], [0, top], color="grey", linewidth=0.8, linestyle="--")
        ax.scatter(xs, ys, s=14)
    ax.set_xlabel("computed throughput (cycles/instruction)")
    ax.set_ylabel("measured throughput (cycles/instruction)")
    ax.set_title("throughput: measured vs computed")
    path = out_dir / "throughput.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    paths.append(path)

    # worst-case exact latency per instruction
    fig, ax = plt.subplots(
        figsize=(6, max(2.0, 0.22 * len(results) + 1.2)), constrained_layout=True
    )
    names, values = [], []
    for r in results:
        exact = [p.cycles for p in r.latency.pairs.values() if p.kind == "exact"]
        if exact:
            names.append(r.instruction)
            values.append(float(max(exact)))
    ax.barh(range(len(names)), values, height=0.7)
    ax.set_yticks(range(len(names)), names, fontsize=6)
    ax.invert_yaxis()
    ax.set_xlabel("max exact latency (cycles)")
    ax.set_title("worst-case operand-pair latency")
    path = out_dir / "latency.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    paths.append(path)
    return paths
