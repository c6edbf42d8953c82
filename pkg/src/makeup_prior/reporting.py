"""Delimited tables and matplotlib figures for run summaries and evaluation reports."""

from __future__ import annotations

import csv
import io as _io
from typing import Dict, List, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .io import atomic_write_bytes, atomic_write_text  # noqa: E402


def write_csv(path, rows: Sequence[Mapping], columns: Sequence[str]) -> None:
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _cell(row.get(k)) for k in columns})
    atomic_write_text(path, buf.getvalue())


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(map(str, v))
    return "" if v is None else v


def _save(fig, path) -> None:
    buf = _io.BytesIO()
    # no Software/date chunks so identical inputs give identical bytes
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_loss_curves(curves: Dict[str, List[Dict[str, float]]], path,
                     components=("total", "struc", "hist", "glob", "adv")) -> None:
    """One panel per loss component, one line per run."""
    fig, axes = plt.subplots(1, len(components), figsize=(3.2 * len(components), 3), squeeze=False)
    for ax, comp in zip(axes[0], components):
        for name, traj in curves.items():
            ax.plot([b[comp] for b in traj], lw=1, label=name)
        ax.set_title(comp)
        ax.set_xlabel("iteration")
    if 0 < len(curves) <= 8:
        axes[0][0].legend(fontsize=6)
    fig.tight_layout()
    _save(fig, path)


def plot_psr(rows: Sequence[Mapping], path) -> None:
    """Bar chart of PSR per (backend, protocol, group); ``rows`` carry those keys."""
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(rows) + 2), 3.2))
    labels = [f"{r['backend']}\n{r['protocol']}\n{r['group']}" for r in rows]
    ax.bar(range(len(rows)), [r["psr"] for r in rows], color="tab:blue")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, fontsize=6)
    ax.set_ylim(0, 1)
    ax.set_ylabel("PSR")
    fig.tight_layout()
    _save(fig, path)


def plot_rank_n(series: Dict[str, Dict[int, float]], path, mode: str) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for name, rates in series.items():
        ns = sorted(rates)
        ax.plot(ns, [rates[n] for n in ns], marker="o", label=name)
    ax.set_xlabel("N")
    ax.set_ylabel(f"Rank-N-{'T' if mode == 'impersonate' else 'U'}")
    ax.set_ylim(0, 1.02)
    if series:
        ax.legend(fontsize=6)
    fig.tight_layout()
    _save(fig, path)
