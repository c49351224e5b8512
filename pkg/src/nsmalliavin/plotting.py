"""Figures for a finished run. Imports matplotlib on first use only."""

import os
import re

import numpy as np

LOG_KINDS = {"control-probe", "mixing", "nondegeneracy", "malliavin"}


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _groups(series):
    """Group series that differ only by a path, beta, eta or observable suffix."""
    groups = {}
    for name in sorted(series):
        key = re.sub(r"(_beta_.*|_eta_.*|_p\d+$|_\d+$)", "", name)
        key = re.sub(r"^((?:null_)?diff)_.*", r"\1", key)
        groups.setdefault(key, []).append(name)
    return groups


def render_run(out_dir, series, kind, fmt="png"):
    """One figure per series group, saved next to series.csv. Returns relative file names."""
    plt = _pyplot()
    names = []
    for key, members in _groups(series).items():
        fig, ax = plt.subplots(figsize=(6, 4))
        for name in members:
            arr = series[name]
            t, v, lo, hi = arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]
            ax.plot(t, v, marker="o" if len(t) < 30 else None, ms=3, label=name)
            ok = np.isfinite(lo) & np.isfinite(hi)
            if ok.any():
                ax.fill_between(t[ok], lo[ok], hi[ok], alpha=0.2)
        if kind in LOG_KINDS:
            positive = all((series[n][:, 1] > 0).all() for n in members)
            if positive:
                ax.set_yscale("log")
        if kind in ("nondegeneracy", "energy-check"):
            if all((series[n][:, 0] > 0).all() for n in members):
                ax.set_xscale("log")
        ax.set_title(f"{kind}: {key}")
        ax.set_xlabel("eps" if kind == "nondegeneracy" else "t")
        if len(members) <= 8:
            ax.legend(fontsize=7)
        fig.tight_layout()
        fname = f"fig_{''.join(c if c.isalnum() or c in '-_.' else '_' for c in key)}.{fmt}"
        fig.savefig(os.path.join(out_dir, fname), dpi=110)
        plt.close(fig)
        names.append(fname)
    return names
