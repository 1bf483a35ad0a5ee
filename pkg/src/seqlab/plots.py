"""Figure rendering for the CLI report path.

Every plotting command writes its delimited output first; these helpers
render the matching figure next to it when --plot is given. Matplotlib
runs headless (Agg) and is imported lazily so the numeric paths never
depend on it.
"""

from __future__ import annotations

import math
import os

_FIG_WIDTH = 6.4
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0

_SCHEME_STYLE = {
    "ulysses": dict(color="#1f77b4", marker="o"),
    "megatron": dict(color="#d62728", marker="s"),
    "ring": dict(color="#2ca02c", marker="^"),
}


def _mpl():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["figure.figsize"] = [_FIG_WIDTH, _FIG_WIDTH * _GOLDEN]
    plt.rcParams["font.size"] = 9
    plt.rcParams["axes.grid"] = True
    plt.rcParams["grid.alpha"] = 0.3
    return plt


def _new_axes(plt):
    fig, ax = plt.subplots()
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    return fig, ax


def save_figure(fig, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    return path


def plot_cost(p_values, per_scheme: dict, unit: str, path: str) -> str:
    """Per-link volume vs parallel degree, one line per scheme."""
    plt = _mpl()
    fig, ax = _new_axes(plt)
    for scheme, vols in per_scheme.items():
        ax.plot(p_values, [float(v) for v in vols], label=scheme,
                **_SCHEME_STYLE.get(scheme, {}))
    ax.set_xscale("log", base=2)
    ax.set_yscale("log", base=2)
    ax.set_xlabel("parallel degree P")
    ax.set_ylabel(f"per-link volume ({unit})")
    ax.legend(frameon=False)
    out = save_figure(fig, path)
    plt.close(fig)
    return out


def plot_sweep(scales, per_scheme: dict, unit: str, path: str) -> str:
    """Per-link volume under proportional (n, P) scaling."""
    plt = _mpl()
    fig, ax = _new_axes(plt)
    for scheme, vols in per_scheme.items():
        ax.plot(scales, [float(v) for v in vols], label=scheme,
                **_SCHEME_STYLE.get(scheme, {}))
    ax.set_xscale("log", base=2)
    ax.set_yscale("log", base=2)
    ax.set_xlabel("scale factor k  (n, P) -> (k n, k P)")
    ax.set_ylabel(f"per-link volume ({unit})")
    ax.legend(frameon=False)
    out = save_figure(fig, path)
    plt.close(fig)
    return out


def plot_memory(p_seq_values, model_state, activation, path: str) -> str:
    """Per-rank memory vs sequence-parallel degree (stacked view)."""
    plt = _mpl()
    fig, ax = _new_axes(plt)
    gb = 1e9
    ax.plot(p_seq_values, [v / gb for v in model_state], label="model states",
            color="#d62728", marker="s")
    if any(activation):
        ax.plot(p_seq_values, [v / gb for v in activation], label="activations",
                color="#1f77b4", marker="o")
        totals = [(m + a) / gb for m, a in zip(model_state, activation)]
        ax.plot(p_seq_values, totals, label="total", color="#555555", linestyle="--")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("sequence-parallel degree")
    ax.set_ylabel("per-rank memory (GB)")
    ax.legend(frameon=False)
    out = save_figure(fig, path)
    plt.close(fig)
    return out


def plot_trace(records, path: str) -> str:
    """Cumulative per-rank egress over the run's collective sequence."""
    plt = _mpl()
    fig, ax = _new_axes(plt)
    kinds = sorted({r.collective for r in records})
    cum = 0
    xs, ys = [], []
    for i, r in enumerate(records):
        cum += r.per_rank_egress_elements
        xs.append(i)
        ys.append(cum)
    ax.step(xs, ys, where="post", color="#1f77b4")
    ax.set_xlabel("collective index")
    ax.set_ylabel("cumulative per-rank egress (elements)")
    ax.set_title(" + ".join(kinds) if kinds else "no collectives")
    out = save_figure(fig, path)
    plt.close(fig)
    return out
