"""Centerline extraction quality metrics.

Point correspondence between a reference tree and a tracked tree uses one
of two distance rules: a fixed 1 mm threshold for the plain detection rates
(sensitivity and false-positive rate), or the locally annotated reference
radius for the overlap family (a point counts as found when the match lies
inside the vessel). Overlap metrics follow the usual centerline-evaluation
conventions: OV is symmetric overlap, OF is the fraction of each root-to-
leaf path extracted before the first miss, OT restricts OV to the clinically
relevant part (radius above 0.75 mm), and AI is the mean distance over
matched points.
"""

from __future__ import annotations

import numpy as np

from .tree import CenterlineTree

# Reference points thicker than this radius are clinically relevant.
CLINICAL_RADIUS = 0.75
# Fixed correspondence threshold for sensitivity / false positive rate.
FIXED_THRESHOLD = 1.0

METRIC_NAMES = ("OV", "OF", "OT", "AI", "S", "FPR")


def correspond(reference: CenterlineTree, tracked: CenterlineTree, mode: str = "radius"):
    """Nearest-point correspondence in both directions.

    Returns a dict with the distance from every reference point to the
    tracked tree (`ref_dist`), the distance from every tracked point to the
    reference (`trk_dist`), the index of the nearest reference point per
    tracked point (`trk_ref`), and boolean match masks under the chosen
    threshold rule ("radius" or "fixed").
    """
    ref_dist, _ = tracked.kdtree.query(reference.positions)
    trk_dist, trk_ref = reference.kdtree.query(tracked.positions)
    if mode == "radius":
        ref_threshold = reference.radii
        trk_threshold = reference.radii[trk_ref]
    elif mode == "fixed":
        ref_threshold = np.full(reference.n_points, FIXED_THRESHOLD)
        trk_threshold = np.full(tracked.n_points, FIXED_THRESHOLD)
    else:
        raise ValueError("mode must be 'radius' or 'fixed'")
    return {
        "ref_dist": ref_dist,
        "trk_dist": trk_dist,
        "trk_ref": trk_ref,
        "ref_matched": ref_dist <= ref_threshold,
        "trk_matched": trk_dist <= trk_threshold,
    }


def sensitivity(reference: CenterlineTree, tracked: CenterlineTree) -> float:
    """Fraction of reference points with a tracked point within 1 mm."""
    c = correspond(reference, tracked, mode="fixed")
    return float(np.mean(c["ref_matched"]))


def false_positive_rate(reference: CenterlineTree, tracked: CenterlineTree) -> float:
    """Fraction of tracked points with no reference point within 1 mm."""
    c = correspond(reference, tracked, mode="fixed")
    return float(np.mean(~c["trk_matched"]))


def overlap(reference: CenterlineTree, tracked: CenterlineTree) -> float:
    """Symmetric overlap: matched points over all points, both trees."""
    c = correspond(reference, tracked)
    tpm = int(np.sum(c["ref_matched"]))
    tpr = int(np.sum(c["trk_matched"]))
    total = reference.n_points + tracked.n_points
    return (tpm + tpr) / total


def overlap_until_first_error(reference: CenterlineTree, tracked: CenterlineTree) -> float:
    """Mean over root-to-leaf paths of the fraction extracted before the
    first missed reference point."""
    c = correspond(reference, tracked)
    matched = c["ref_matched"]
    fractions = []
    for leaf in reference.leaves:
        path = reference.vessel_path(int(leaf))
        hits = matched[path]
        misses = np.flatnonzero(~hits)
        k = len(path) if len(misses) == 0 else int(misses[0])
        fractions.append(k / len(path))
    return float(np.mean(fractions))


def overlap_clinical(reference: CenterlineTree, tracked: CenterlineTree) -> float:
    """Symmetric overlap restricted to reference points with radius above
    the clinical threshold; tracked points participate when their nearest
    reference point is clinical."""
    c = correspond(reference, tracked)
    clinical = reference.radii > CLINICAL_RADIUS
    trk_in_scope = clinical[c["trk_ref"]]
    tpm = int(np.sum(c["ref_matched"] & clinical))
    fn = int(np.sum(~c["ref_matched"] & clinical))
    tpr = int(np.sum(c["trk_matched"] & trk_in_scope))
    fp = int(np.sum(~c["trk_matched"] & trk_in_scope))
    total = tpm + fn + tpr + fp
    if total == 0:
        return 1.0
    return (tpm + tpr) / total


def accuracy_inside(reference: CenterlineTree, tracked: CenterlineTree) -> float:
    """Mean matched-pair distance over both directions; NaN if nothing
    matched."""
    c = correspond(reference, tracked)
    distances = np.concatenate(
        [c["ref_dist"][c["ref_matched"]], c["trk_dist"][c["trk_matched"]]]
    )
    if len(distances) == 0:
        return float("nan")
    return float(np.mean(distances))


def evaluate_case(reference: CenterlineTree, tracked: CenterlineTree) -> dict:
    """All six metrics for one case."""
    return {
        "OV": overlap(reference, tracked),
        "OF": overlap_until_first_error(reference, tracked),
        "OT": overlap_clinical(reference, tracked),
        "AI": accuracy_inside(reference, tracked),
        "S": sensitivity(reference, tracked),
        "FPR": false_positive_rate(reference, tracked),
        "n_reference": reference.n_points,
        "n_tracked": tracked.n_points,
    }


def summarize(rows: list) -> dict:
    """Mean of every metric over a list of evaluate_case results."""
    out = {}
    for name in METRIC_NAMES:
        values = [row[name] for row in rows if not np.isnan(row[name])]
        out[name] = float(np.mean(values)) if values else float("nan")
    return out


def format_table(rows: list, names: list | None = None) -> str:
    """Fixed-column text table; one row per case plus a mean row.

    Each row is a dict with a "case" key, the metric keys, and optionally
    "T" (seconds). Missing values render as "-".
    """
    columns = ["case"] + list(METRIC_NAMES)
    if any("T" in row for row in rows):
        columns.append("T")
    display = []
    for i, row in enumerate(rows):
        name = str(row.get("case", i))
        display.append([name] + [_fmt(row.get(col)) for col in columns[1:]])
    if len(rows) > 1:
        mean_row = summarize(rows)
        if "T" in columns:
            times = [row["T"] for row in rows if "T" in row]
            mean_row["T"] = float(np.mean(times))
        display.append(["mean"] + [_fmt(mean_row.get(col)) for col in columns[1:]])
    widths = [
        max(len(columns[j]), max(len(r[j]) for r in display)) for j in range(len(columns))
    ]
    lines = ["  ".join(col.ljust(widths[j]) for j, col in enumerate(columns))]
    for r in display:
        lines.append("  ".join(v.ljust(widths[j]) for j, v in enumerate(r)))
    return "\n".join(lines)


def _fmt(value) -> str:
    if value is None:
        return "-"
    value = float(value)
    if np.isnan(value):
        return "-"
    return f"{value:.4f}"
