"""Delimited reports and figures.

``report.tsv`` holds one row per (object, views, keypoints, refine, metric)
group with columns ``REPORT_COLUMNS``. ``series.tsv`` is the plot-ready
keypoint-count series (``SERIES_COLUMNS``). Solver runtimes are not
reproducible, so they live in ``timing.tsv`` (``TIMING_COLUMNS``) and the
runtime figure, which are the only outputs that change between runs.
Every file starts with ``# config_hash=... seed=...`` comment lines.
"""
from __future__ import annotations

import csv
import io
from collections import defaultdict

import numpy as np
from matplotlib.figure import Figure

from .metrics import average_recall

REPORT_COLUMNS = ("object", "views", "keypoints", "refine", "metric", "valid_gt", "passed", "false_detections", "AR")
SERIES_COLUMNS = ("object", "views", "keypoints", "metric", "AR")
TIMING_COLUMNS = ("object", "views", "keypoints", "refine", "scenes", "solver_seconds", "seconds_per_scene")

METRIC_LABELS = {"add": "ADD", "5mm10deg": "(5mm,10°)", "2mm3deg": "(2mm,3°)"}


def group_key(cfg):
    return (cfg.simulator.object, int(cfg.simulator.view_count), int(cfg.simulator.keypoints), bool(cfg.solver.refine))


def report_rows(groups, metrics):
    """``groups``: ``{(object, views, keypoints, refine): (model, scenes)}``.

    ``scenes`` are ``(estimates, gt_poses, visibility)`` triples. Rows are
    sorted by group key, then by the order of ``metrics``.
    """
    rows = []
    for key in sorted(groups):
        model, scenes = groups[key]
        obj, views, kp, refine = key
        for metric in metrics:
            r = average_recall(scenes, model, metric)
            rows.append(
                {
                    "object": obj,
                    "views": views,
                    "keypoints": kp,
                    "refine": int(refine),
                    "metric": metric,
                    "valid_gt": r.valid_gt,
                    "passed": r.matched,
                    "false_detections": r.false_detections,
                    "AR": r.recall,
                }
            )
    return rows


def series_rows(rows):
    """Keypoint-count series from report rows (refined runs only when both exist)."""
    have_refined = {(r["object"], r["views"], r["keypoints"]) for r in rows if r["refine"]}
    out = [
        {c: r[c] for c in SERIES_COLUMNS}
        for r in rows
        if r["refine"] or (r["object"], r["views"], r["keypoints"]) not in have_refined
    ]
    return sorted(out, key=lambda r: (r["object"], r["views"], r["metric"], r["keypoints"]))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.2f}"
    return str(v)


def tsv_text(columns, rows, meta):
    buf = io.StringIO()
    for k in sorted(meta):
        buf.write(f"# {k}={meta[k]}\n")
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def write_tsv(path, columns, rows, meta):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(tsv_text(columns, rows, meta))


def read_tsv(path):
    """Rows of a report file as dicts of strings (comment lines skipped)."""
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines, delimiter="\t"))


def pretty_table(rows):
    """AR per metric (rows) and view count (columns), one block per object/keypoints/refine."""
    blocks = defaultdict(dict)
    for r in rows:
        blocks[(r["object"], r["keypoints"], r["refine"])][(r["metric"], r["views"])] = r["AR"]
    out = []
    for (obj, kp, refine), cells in sorted(blocks.items()):
        views = sorted({v for _, v in cells})
        metrics = list(dict.fromkeys(m for m, _ in cells))
        out.append(f"{obj}  N={kp}  refine={'on' if refine else 'off'}")
        head = f"{'metric':<12}" + "".join(f"{f'{v} Views':>10}" for v in views)
        out.append(head)
        out.append("-" * len(head))
        for m in metrics:
            vals = "".join(f"{cells[m, v]:>10.2f}" if (m, v) in cells else f"{'-':>10}" for v in views)
            out.append(f"{METRIC_LABELS.get(m, m):<12}" + vals)
        out.append("")
    return "\n".join(out)


# --------------------------------------------------------------------------
# figures


def _save(fig, path, meta):
    # no timestamps or version strings in the file, so reruns are byte-identical
    desc = " ".join(f"{k}={meta[k]}" for k in sorted(meta))
    fig.savefig(path, dpi=100, metadata={"Software": None, "Description": desc})


def plot_views(rows, path, meta):
    """AR against view count, one line per metric."""
    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot()
    by = defaultdict(list)
    for r in rows:
        if r["refine"]:
            by[(r["object"], r["keypoints"], r["metric"])].append((r["views"], r["AR"]))
    for (obj, kp, m), pts in sorted(by.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", label=f"{METRIC_LABELS.get(m, m)} {obj} N={kp}")
    ax.set_xlabel("views")
    ax.set_ylabel("AR (%)")
    ax.set_ylim(0, 102)
    if by:
        ax.set_xticks(sorted({v for pts in by.values() for v, _ in pts}))
        ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path, meta)


def plot_keypoints(series, path, meta):
    """AR against keypoint count on a log2 axis."""
    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot()
    by = defaultdict(list)
    for r in series:
        by[(r["object"], r["views"], r["metric"])].append((r["keypoints"], r["AR"]))
    for (obj, v, m), pts in sorted(by.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], "s-", label=f"{METRIC_LABELS.get(m, m)} {obj} {v} views")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("keypoints")
    ax.set_ylabel("AR (%)")
    ax.set_ylim(0, 102)
    if by:
        ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path, meta)


def plot_runtime(timing, path, meta):
    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot()
    by = defaultdict(list)
    for r in timing:
        by[(r["object"], r["views"], r["refine"])].append((r["keypoints"], r["seconds_per_scene"]))
    for (obj, v, refine), pts in sorted(by.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], "^-", label=f"{obj} {v} views{'' if refine else ' w/o refine'}")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("keypoints")
    ax.set_ylabel("solver time per scene (s)")
    if by:
        ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path, meta)
