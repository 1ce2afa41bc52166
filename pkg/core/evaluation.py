"""
Detection and segmentation scoring for AHNET
Local-maxima extraction with suppression, finding/box matching,
FROC curves and Dice metrics.
"""

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import ndimage

from utils import EvaluationError, get_error_message

FROC_GRID = (0.01, 0.05, 0.10, 0.15, 0.20, 0.25)
DEFAULT_RADIUS = (5, 5, 2)


@dataclass(frozen=True)
class Finding:
    position: tuple
    score: float


@dataclass(frozen=True)
class FrocPoint:
    fp_per_volume: float
    tpr: float
    threshold: float = float("inf")


# ============================================================
# LOCAL MAXIMA
# ============================================================


def _response_array(response):
    r = np.asarray(getattr(response, "data", response))
    while r.ndim > 3 and r.shape[0] == 1:
        r = r[0]
    if r.ndim != 3:
        raise EvaluationError(f"Maxima extraction needs a 3D response map, got shape {r.shape}")
    return r


def extract_maxima(response, threshold=0.0, radius=DEFAULT_RADIUS):
    """
    Strict 26-neighbourhood maxima scoring at least threshold, kept greedily by
    descending score (ties broken by x, y, z) while later maxima within the
    per-axis radius of a kept one are suppressed.
    """
    r = _response_array(response)
    footprint = np.ones((3, 3, 3), dtype=bool)
    footprint[1, 1, 1] = False
    neighbours = ndimage.maximum_filter(r, footprint=footprint, mode="constant", cval=-np.inf)
    peaks = (r > neighbours) & (r >= threshold)
    coords = np.argwhere(peaks)
    scores = r[peaks].astype(np.float64)
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0], -scores)) if len(scores) else []
    radius = np.asarray(radius)
    kept = []
    findings = []
    for i in order:
        p = coords[i]
        if any(np.all(np.abs(p - q) <= radius) for q in kept):
            continue
        kept.append(p)
        findings.append(Finding(tuple(int(c) for c in p), float(scores[i])))
    return findings


# ============================================================
# MATCHING AND FROC
# ============================================================


def match_findings(findings, boxes):
    """(indices of detected boxes, false-positive findings); each box counts once."""
    detected = set()
    false_positives = []
    for finding in findings:
        hits = [i for i, box in enumerate(boxes) if box.contains(finding.position)]
        if hits:
            detected.update(hits)
        else:
            false_positives.append(finding)
    return detected, false_positives


def froc_curve(per_volume_findings, per_volume_boxes):
    """One operating point per distinct score threshold, most restrictive first."""
    if len(per_volume_findings) != len(per_volume_boxes):
        raise EvaluationError(f"{len(per_volume_findings)} finding lists for {len(per_volume_boxes)} volumes")
    total = sum(len(b) for b in per_volume_boxes)
    if total == 0:
        raise EvaluationError(get_error_message('no_lesions'))
    n_volumes = len(per_volume_boxes)

    events = []
    for v, (findings, boxes) in enumerate(zip(per_volume_findings, per_volume_boxes)):
        for finding in findings:
            hits = tuple((v, i) for i, box in enumerate(boxes) if box.contains(finding.position))
            events.append((finding.score, hits))
    events.sort(key=lambda e: -e[0])

    points = [FrocPoint(0.0, 0.0, float("inf"))]
    detected = set()
    fp = 0
    i = 0
    while i < len(events):
        score = events[i][0]
        while i < len(events) and events[i][0] == score:
            hits = events[i][1]
            if hits:
                detected.update(hits)
            else:
                fp += 1
            i += 1
        points.append(FrocPoint(fp / n_volumes, len(detected) / total, float(score)))
    return points


def froc_at(curve, grid=FROC_GRID):
    """Highest TPR among operating points whose FP/volume is within each budget."""
    result = []
    for g in grid:
        admissible = [p.tpr for p in curve if p.fp_per_volume <= g + 1e-12]
        result.append(FrocPoint(float(g), max(admissible)))
    return result


def froc(per_volume_findings, per_volume_boxes, grid=FROC_GRID):
    grid = tuple(grid)
    if list(grid) != sorted(grid):
        raise EvaluationError(f"FP grid must be ascending, got {grid}")
    return froc_at(froc_curve(per_volume_findings, per_volume_boxes), grid)


# ============================================================
# DICE
# ============================================================


def _binary_pair(a, b):
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise EvaluationError(f"Mask dims differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b):
    """2|A∩B| / (|A|+|B|); two empty masks agree perfectly (1.0)."""
    a, b = _binary_pair(a, b)
    size = int(a.sum()) + int(b.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / size


def dice_global(pairs):
    """Dice over all volumes pooled into one."""
    pairs = list(pairs)
    if not pairs:
        raise EvaluationError("Dice needs at least one volume")
    inter = size = 0
    for a, b in pairs:
        a, b = _binary_pair(a, b)
        inter += int(np.logical_and(a, b).sum())
        size += int(a.sum()) + int(b.sum())
    return 1.0 if size == 0 else 2.0 * inter / size


def dice_per_case(pairs):
    pairs = list(pairs)
    if not pairs:
        raise EvaluationError("Dice needs at least one volume")
    return float(np.mean([dice(a, b) for a, b in pairs]))


def predicted_mask(logits):
    """Per-voxel argmax over the class axis; class 0 is background."""
    z = np.asarray(getattr(logits, "data", logits))
    while z.ndim > 4 and z.shape[0] == 1:
        z = z[0]
    if z.shape[0] == 1:
        return (z[0] > 0).astype(np.uint8)
    return (np.argmax(z, axis=0) > 0).astype(np.uint8)


# ============================================================
# TABLES
# ============================================================


def froc_frame(points):
    return pd.DataFrame({"fp_per_volume": [p.fp_per_volume for p in points],
                         "tpr": [p.tpr for p in points]})


def curve_frame(points):
    return pd.DataFrame({"threshold": [p.threshold for p in points],
                         "fp_per_volume": [p.fp_per_volume for p in points],
                         "tpr": [p.tpr for p in points]})


def dice_frame(volume_ids, scores, dg, dpc):
    rows = [{"volume_id": v, "dice": s} for v, s in zip(volume_ids, scores)]
    rows.append({"volume_id": "DG", "dice": dg})
    rows.append({"volume_id": "DPC", "dice": dpc})
    return pd.DataFrame(rows, columns=["volume_id", "dice"])


def write_csv(frame, path):
    """Fixed float format and line endings so reruns are byte-identical."""
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
