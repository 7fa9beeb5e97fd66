"""SVG figures: welfare against k, learning curves and assignment histograms.

Figures use a fixed size and axes rectangle, so a data point ``(x, y)`` lands
at ``PlotInfo.to_svg(x, y)`` in the SVG user coordinate system.  Output is
byte-reproducible: the SVG hash salt is fixed and no date is embedded.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .assign import read_assignment_csv  # noqa: E402
from .core import RMdpError  # noqa: E402
from .experiment import read_aggregate_csv, read_progress_csv  # noqa: E402

FIG_SIZE = (6.4, 4.0)  # inches; SVG user units are points (72 per inch)
AXES_BOX = (0.12, 0.14, 0.80, 0.78)  # left, bottom, width, height as figure fractions
PLOT_KINDS = ("sw_vs_k", "learning_curve", "assignment_histogram")


class PlotError(RMdpError, ValueError):
    pass


@dataclass
class PlotInfo:
    path: Path
    xlim: tuple
    ylim: tuple

    def to_svg(self, x, y):
        """SVG coordinates of the data point ``(x, y)``."""
        W, H = FIG_SIZE[0] * 72.0, FIG_SIZE[1] * 72.0
        left, bottom, width, height = AXES_BOX
        fx = (np.asarray(x, dtype=float) - self.xlim[0]) / (self.xlim[1] - self.xlim[0])
        fy = (np.asarray(y, dtype=float) - self.ylim[0]) / (self.ylim[1] - self.ylim[0])
        return W * (left + width * fx), H * (1.0 - bottom - height * fy)


def padded_limits(values, pad: float = 0.05):
    """Data range widened by ``pad`` on both sides (one unit for a single value)."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    lo, hi = float(v.min()), float(v.max())
    if hi - lo < 1e-12:
        return lo - 1.0, hi + 1.0
    span = hi - lo
    return lo - pad * span, hi + pad * span


def _figure():
    fig = plt.figure(figsize=FIG_SIZE)
    ax = fig.add_axes(AXES_BOX)
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": "rmdp", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _colors(k):
    cmap = plt.get_cmap("tab10" if k <= 10 else "tab20")
    return [cmap(j % cmap.N) for j in range(k)]


# -- welfare against k -----------------------------------------------------------

def plot_sw_vs_k(rows, out) -> PlotInfo:
    """Mean welfare with standard-error bars per algorithm, plus a dashed oracle line.

    The x axis places the distinct k values at evenly spaced positions.
    """
    rows = [r for r in rows if np.isfinite(r["mean_sw"])]
    if not rows:
        raise PlotError("no data points to plot")
    ks = sorted({r["k"] for r in rows})
    pos = {k: i for i, k in enumerate(ks)}
    algos = sorted({r["algo"] for r in rows})
    fig, ax = _figure()
    ys = []
    for algo, color in zip(algos, _colors(len(algos))):
        pts = sorted((pos[r["k"]], r["mean_sw"], r["se_sw"]) for r in rows if r["algo"] == algo)
        x, y, se = (np.array(c, dtype=float) for c in zip(*pts))
        se = np.nan_to_num(se)
        ax.errorbar(x, y, yerr=se, marker="o", capsize=3, color=color, label=algo, gid=f"series-{algo}")
        ys.extend(y - se)
        ys.extend(y + se)
    oracle = [r["oracle_sw"] for r in rows if np.isfinite(r["oracle_sw"])]
    if oracle:
        best = max(oracle)
        ax.axhline(best, color="black", linestyle="--", linewidth=1.0, label="optimum", gid="oracle")
        ys.append(best)
    xlim = (-0.5, len(ks) - 0.5)
    ylim = padded_limits(ys)
    ax.set_xlim(xlim)
    ax.set_ylim(ylim)
    ax.set_xticks(range(len(ks)))
    ax.set_xticklabels([str(k) for k in ks])
    ax.set_xlabel("number of policies k")
    ax.set_ylabel("social welfare")
    ax.legend(loc="lower right", fontsize="small")
    return PlotInfo(_save(fig, out), xlim, ylim)


# -- learning curves ----------------------------------------------------------------

def learning_series(records) -> dict:
    """``(algo, k) -> (steps, mean SW)`` averaged over seeds at shared evaluation points."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r["algo"], r["k"]), {}).setdefault(r["seed"], {})[r["transitions_per_policy"]] = \
            r["social_welfare"]
    out = {}
    for key, by_seed in sorted(groups.items()):
        steps = sorted(set.intersection(*(set(s) for s in by_seed.values())))
        if steps:
            out[key] = (np.array(steps, dtype=float),
                        np.array([np.mean([s[t] for s in by_seed.values()]) for t in steps]))
    return out


def plot_learning_curve(records, out) -> PlotInfo:
    series = learning_series(records)
    if not series:
        raise PlotError("no data points to plot")
    fig, ax = _figure()
    xs, ys = [], []
    for ((algo, k), (x, y)), color in zip(series.items(), _colors(len(series))):
        style = "o-" if len(x) == 1 else "-"
        ax.plot(x, y, style, color=color, label=f"{algo} k={k}", gid=f"series-{algo}-k{k}")
        xs.extend(x)
        ys.extend(y)
    xlim, ylim = padded_limits(xs), padded_limits(ys)
    ax.set_xlim(xlim)
    ax.set_ylim(ylim)
    ax.set_xlabel("transitions per policy")
    ax.set_ylabel("social welfare")
    ax.legend(loc="lower right", fontsize="small")
    return PlotInfo(_save(fig, out), xlim, ylim)


# -- assignment histograms ----------------------------------------------------------

def plot_assignment_histogram(alpha, out, targets=None, grid_side: int = 5, start_cell=(2, 0),
                              bins: int = 20) -> PlotInfo:
    """Ownership of grid tiles (no targets) or stacked counts over target velocities."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim != 2 or alpha.size == 0:
        raise PlotError("empty assignment")
    labels = np.argmax(alpha, axis=1)
    k = alpha.shape[1]
    colors = _colors(k)
    fig, ax = _figure()
    if targets is None:
        if len(labels) != grid_side * grid_side:
            plt.close(fig)
            raise PlotError(f"{len(labels)} agents do not fill a {grid_side}x{grid_side} grid")
        for idx, j in enumerate(labels):
            r, c = divmod(idx, grid_side)
            y = grid_side - 1 - r
            ax.add_patch(Rectangle((c, y), 1, 1, facecolor=colors[j], edgecolor="white", gid=f"tile-{idx}"))
            ax.text(c + 0.5, y + 0.5, "S" if (r, c) == tuple(start_cell) else str(j), ha="center", va="center")
        xlim = ylim = (0.0, float(grid_side))
        ax.set_aspect("equal")
        ax.set_xticks([])
        ax.set_yticks([])
    else:
        targets = np.asarray(targets, dtype=float)
        if targets.shape != labels.shape:
            plt.close(fig)
            raise PlotError("need one target per agent")
        edges = np.histogram_bin_edges(targets, bins=bins)
        width = edges[1] - edges[0]
        bottom = np.zeros(len(edges) - 1)
        for j in range(k):
            counts, _ = np.histogram(targets[labels == j], bins=edges)
            if counts.any():
                ax.bar(edges[:-1], counts, width=width, bottom=bottom, align="edge", color=colors[j],
                       label=f"policy {j}", gid=f"rep-{j}")
            bottom += counts
        xlim = (float(edges[0]), float(edges[-1]))
        ylim = (0.0, float(bottom.max()) * 1.1 or 1.0)
        ax.set_xlabel("target velocity")
        ax.set_ylabel("agents")
        if k <= 10:
            ax.legend(fontsize="small")
    ax.set_xlim(xlim)
    ax.set_ylim(ylim)
    return PlotInfo(_save(fig, out), xlim, ylim)


def read_targets_csv(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#") or line.startswith("agent"):
            continue
        try:
            rows.append(float(line.split(",")[1]))
        except (IndexError, ValueError) as exc:
            raise PlotError(f"{path}:{lineno}: malformed target row") from exc
    return np.array(rows)


def plot_file(kind: str, inputs, out, targets=None) -> PlotInfo:
    """Dispatch on ``kind`` with CSV file inputs (several progress files allowed)."""
    if kind == "sw_vs_k":
        rows = [r for p in inputs for r in read_aggregate_csv(Path(p))]
        return plot_sw_vs_k(rows, out)
    if kind == "learning_curve":
        records = [r for p in inputs for r in read_progress_csv(Path(p))]
        return plot_learning_curve(records, out)
    if kind == "assignment_histogram":
        if len(inputs) != 1:
            raise PlotError("assignment_histogram takes exactly one assignment CSV")
        alpha = read_assignment_csv(inputs[0])
        return plot_assignment_histogram(alpha, out, read_targets_csv(targets) if targets else None)
    raise PlotError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
