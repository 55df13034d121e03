"""
Report generation from per-cell CSVs: long-format table, aggregate JSON and
PNG figures.
"""

from __future__ import annotations

import csv
import json
import math
import re
import warnings
from collections import defaultdict
from pathlib import Path

import numpy as np

from .harness import CSV_COLUMNS, SCHEMA_VERSION, sublinearity_ratio

__all__ = ["load_cells", "long_format", "aggregate", "render_figures", "build_report"]

_CELL_RE = re.compile(r"^(?P<agent>.+)_seed(?P<seed>-?\d+)\.csv$")
METRICS = CSV_COLUMNS[1:]


def _parse(v):
    if v == "":
        return float("nan")
    return float(v)


def load_cells(out_dir) -> dict:
    """``{(agent, seed): {column: np.ndarray}}`` from ``out_dir/cells``."""
    cells = {}
    for path in sorted((Path(out_dir) / "cells").glob("*.csv")):
        m = _CELL_RE.match(path.name)
        if not m:
            continue
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
        cols = {c: np.array([_parse(r[c]) for r in rows]) for c in CSV_COLUMNS}
        cells[(m["agent"], int(m["seed"]))] = cols
    return cells


def long_format(cells: dict, path) -> Path:
    """One row per (agent, seed, episode, metric)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["agent", "seed", "l", "metric", "value"])
        for (agent, seed), cols in sorted(cells.items()):
            for i, l in enumerate(cols["l"]):
                for metric in METRICS:
                    v = cols[metric][i]
                    w.writerow([agent, seed, int(l), metric, "" if math.isnan(v) else repr(float(v))])
    return path


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def aggregate(cells: dict) -> dict:
    by_agent = defaultdict(dict)
    for (agent, seed), cols in cells.items():
        by_agent[agent][seed] = cols
    out = {"schema": SCHEMA_VERSION, "agents": {}}
    for agent, seeds in sorted(by_agent.items()):
        finals = np.array([c["cum_regret"][-1] for c in seeds.values() if len(c["cum_regret"])])
        ratios = {str(s): _clean(sublinearity_ratio(c["inst_regret"])) for s, c in sorted(seeds.items())}
        entry = {
            "n_seeds": len(seeds),
            "final_cum_regret_mean": _clean(float(finals.mean())) if finals.size else None,
            "final_cum_regret_sd": _clean(float(finals.std(ddof=1))) if finals.size > 1 else 0.0,
            "sublinearity_ratio": ratios,
        }
        cov = [c for c in seeds.values() if not np.all(np.isnan(c["covered_R"]))]
        if cov:
            both = [np.nan_to_num(c["covered_R"]) * np.nan_to_num(c["covered_P"]) for c in cov]
            entry["coverage_rate"] = float(np.mean(np.concatenate(both)))
            entry["runs_fully_covered"] = int(sum(bool(b.all()) for b in both))
        out["agents"][agent] = entry
    return out


def _curves(seeds: dict, column):
    n = min(len(c[column]) for c in seeds.values())
    return np.array([c[column][:n] for c in seeds.values()])


def render_figures(cells: dict, fig_dir) -> list[Path]:
    """Write PNG figures; returns the paths written."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig_dir = Path(fig_dir)
    fig_dir.mkdir(parents=True, exist_ok=True)
    by_agent = defaultdict(dict)
    for (agent, seed), cols in cells.items():
        by_agent[agent][seed] = cols
    written = []

    def band(ax, agent, column, transform=None):
        y = _curves(by_agent[agent], column)
        if transform is not None:
            y = transform(y)
        if np.all(np.isnan(y)):
            return False
        x = np.arange(1, y.shape[1] + 1)
        with warnings.catch_warnings():
            # episodes before any data carry no width or information value
            warnings.simplefilter("ignore", RuntimeWarning)
            mu, sd = np.nanmean(y, 0), np.nanstd(y, 0)
        ax.plot(x, mu, label=agent)
        ax.fill_between(x, mu - sd, mu + sd, alpha=0.2)
        return True

    panels = [
        ("cum_regret.png", "cum_regret", "cumulative regret", None),
        ("avg_regret.png", "cum_regret", "R(T) / episodes", lambda y: y / np.arange(1, y.shape[1] + 1)),
        ("dictionary_size.png", "d_R", "reward dictionary size", None),
        ("beta.png", "beta_R", "reward width", None),
        ("gamma_hat.png", "gamma_hat_R", "achieved log-det information (reward)", None),
    ]
    for name, column, ylabel, fn in panels:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        drawn = [band(ax, a, column, fn) for a in sorted(by_agent)]
        if not any(drawn):
            plt.close(fig)
            continue
        ax.set_xlabel("episode")
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = fig_dir / name
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def build_report(out_dir, figures: bool = True) -> dict:
    """Aggregate ``out_dir/cells`` into ``report.json``, ``long.csv`` and figures."""
    out_dir = Path(out_dir)
    cells = load_cells(out_dir)
    if not cells:
        raise FileNotFoundError(f"no cell CSVs under {out_dir / 'cells'}")
    summary = aggregate(cells)
    long_format(cells, out_dir / "long.csv")
    if figures:
        summary["figures"] = [p.name for p in render_figures(cells, out_dir / "figures")]
    (out_dir / "report.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
