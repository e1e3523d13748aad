"""Trade-off plots: model accuracy against attack success, one curve per method."""

import csv
import io
from pathlib import Path

from .errors import InputContractError

PLOT_KINDS = {
    "acc_vs_ssim": ("KA", "ssim", "SSIM of reconstruction"),
    "acc_vs_attack_acc": ("PMC", "attack_accuracy", "attack accuracy"),
}


def _level(record):
    spec = record.spec
    method = record.method
    if method in ("add_noise",):
        return spec["baseline"]["noise_scale"]
    if method in ("compress",):
        return spec["baseline"]["compression_rate"]
    return spec["defense"]["lambda_d"] + spec["defense"]["lambda_l"]


def plot_points(records, kind, attack=None):
    """Rows of (method, level, seed, x, y) sorted for deterministic output."""
    if kind not in PLOT_KINDS:
        raise InputContractError(f"unknown plot kind {kind!r}")
    name, metric, _ = PLOT_KINDS[kind]
    name = attack or name
    rows = []
    for r in records:
        rep = r.attack(name)
        if rep is None or rep.get(metric) is None:
            continue
        rows.append((r.method, float(_level(r)), int(r.spec["seed"]), float(rep[metric]), float(r.clean_accuracy)))
    if not rows:
        raise InputContractError(f"no records carry {name} {metric}")
    return sorted(rows)


def points_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "level", "seed", "x", "y"])
    for method, level, seed, x, y in rows:
        w.writerow([method, repr(level), seed, repr(x), repr(y)])
    return buf.getvalue()


def emit_plots(records, kind, out_dir, stem=None, attack=None):
    """Write ``<stem>.csv``, ``<stem>.svg`` and ``<stem>.png``; returns the three paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not records:
        raise InputContractError("no records to plot")
    rows = plot_points(records, kind, attack)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or kind
    paths = [out_dir / f"{stem}.{ext}" for ext in ("csv", "svg", "png")]
    paths[0].write_text(points_csv(rows))

    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for method in sorted({r[0] for r in rows}):
        pts = sorted((level, x, y) for m, level, _, x, y in rows if m == method)
        # average seeds at each level
        levels = sorted({p[0] for p in pts})
        xs = [sum(p[1] for p in pts if p[0] == lv) / sum(1 for p in pts if p[0] == lv) for lv in levels]
        ys = [sum(p[2] for p in pts if p[0] == lv) / sum(1 for p in pts if p[0] == lv) for lv in levels]
        ax.plot(xs, ys, marker="o", label=method)
    ax.set_xlabel(PLOT_KINDS[kind][2])
    ax.set_ylabel("model accuracy")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(paths[1], metadata={"Date": None})
    fig.savefig(paths[2], dpi=120)
    plt.close(fig)
    return paths
