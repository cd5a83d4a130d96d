"""Point-based scanpath metrics and saccade-vector statistics (pixel units)."""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptySequence, LengthMismatch, NonMonotonicTime


def _pts(a):
    return np.asarray(a, dtype=np.float64).reshape(-1, 2)


def euclidean(pred, gts):
    """Mean over subjects of the mean point-wise distance to ``pred``."""
    pred = _pts(pred)
    per = []
    for gt in gts:
        gt = _pts(gt)
        if gt.shape != pred.shape:
            raise LengthMismatch(f"prediction length {len(pred)} != ground truth {len(gt)}")
        per.append(np.linalg.norm(pred - gt, axis=1).mean())
    if not per:
        raise EmptySequence("no ground-truth trajectories")
    return float(np.mean(per))


def dtw(a, b, normalize=False):
    """Accumulated cost of the optimal monotone alignment (Euclidean local cost,
    symmetric match/insert/delete steps, both ends aligned).

    ``normalize`` divides by the length of the optimal warping path.
    """
    a, b = _pts(a), _pts(b)
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        raise EmptySequence("dtw needs non-empty sequences")
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    acc = np.full((n + 1, m + 1), np.inf)
    steps = np.zeros((n + 1, m + 1), dtype=int)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            prev = (acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
            k = int(np.argmin(prev))
            acc[i, j] = cost[i - 1, j - 1] + prev[k]
            steps[i, j] = (steps[i - 1, j - 1], steps[i - 1, j], steps[i, j - 1])[k] + 1
    total = float(acc[n, m])
    return total / steps[n, m] if normalize else total


def mean_dtw(pred, gts, normalize=False):
    return float(np.mean([dtw(pred, gt, normalize) for gt in gts]))


def _cells(pts, image_size, grid):
    W, H = image_size
    gx, gy = grid
    cx = np.clip(np.floor(pts[:, 0] / W * gx), 0, gx - 1)
    cy = np.clip(np.floor(pts[:, 1] / H * gy), 0, gy - 1)
    centers = np.stack([(cx + 0.5) * W / gx, (cy + 0.5) * H / gy], axis=1)
    return centers


def substitution_matrix(a, b, image_size, grid=(8, 8)):
    """Similarity between the grid cells of each pair of points, in [0, 1]."""
    ca = _cells(_pts(a), image_size, grid)
    cb = _cells(_pts(b), image_size, grid)
    diag = math.hypot(*image_size)
    dist = np.linalg.norm(ca[:, None, :] - cb[None, :, :], axis=-1)
    return 1.0 - dist / diag


def needleman_wunsch(sub, gap=0.0):
    """Best global alignment score for a substitution matrix; gaps cost ``gap``."""
    n, m = sub.shape
    f = np.zeros((n + 1, m + 1))
    f[1:, 0] = -gap * np.arange(1, n + 1)
    f[0, 1:] = -gap * np.arange(1, m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            f[i, j] = max(f[i - 1, j - 1] + sub[i - 1, j - 1],
                          f[i - 1, j] - gap,
                          f[i, j - 1] - gap)
    return float(f[n, m])


def scanmatch(a, b, image_size, grid=(8, 8), gap=0.0):
    """Grid-quantized Needleman-Wunsch similarity normalized to [0, 1]."""
    a, b = _pts(a), _pts(b)
    if len(a) == 0 or len(b) == 0:
        raise EmptySequence("scanmatch needs non-empty sequences")
    sub = substitution_matrix(a, b, image_size, grid)
    return needleman_wunsch(sub, gap) / max(len(a), len(b))


def mean_scanmatch(pred, gts, image_size, grid=(8, 8), gap=0.0):
    return float(np.mean([scanmatch(pred, gt, image_size, grid, gap) for gt in gts]))


# saccades -------------------------------------------------------------------

@dataclass(frozen=True)
class SaccadeVector:
    dx: float
    dy: float
    length: float
    angle: float  # degrees in [0, 360), counterclockwise from +x
    duration: float
    speed: float


DEFAULT_LENGTH_EDGES = (0.0, 100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 800.0)
FIXATION = "fixation"


def saccades(points, times, flip_y=False):
    """Vectors between consecutive points; ``times`` are the points' timestamps.

    Angles are ``atan2(dy, dx)`` on the coordinates as given; pass ``flip_y``
    to measure them with the image y axis pointing up instead.
    """
    pts = _pts(points)
    t = np.asarray(times, dtype=np.float64)
    if len(t) != len(pts):
        raise LengthMismatch(f"{len(pts)} points but {len(t)} timestamps")
    if np.any(np.diff(t) <= 0):
        raise NonMonotonicTime("timestamps must be strictly increasing")
    out = []
    for k in range(1, len(pts)):
        dx, dy = pts[k] - pts[k - 1]
        length = math.hypot(dx, dy)
        up = -dy if flip_y else dy
        angle = math.degrees(math.atan2(up, dx)) % 360.0 if length > 0 else 0.0
        dur = float(t[k] - t[k - 1])
        out.append(SaccadeVector(float(dx), float(dy), length, angle, dur, length / dur))
    return out


def angle_bin(angle, n_bins):
    width = 360.0 / n_bins
    return int(((angle + width / 2) % 360.0) // width)


def length_bin(length, edges):
    k = int(np.searchsorted(edges, length, side="right")) - 1
    return max(k, 0)


def saccade_analysis(trajs, angle_bins=8, length_edges=DEFAULT_LENGTH_EDGES, flip_y=False):
    """Mean saccade speed per (angle bin, length bin).

    ``trajs`` is an iterable of (points, times). Returns a list of row dicts
    covering every bin (empty bins have count 0 and NaN speed) plus one
    fixation row for zero-length vectors.
    """
    edges = np.asarray(length_edges, dtype=np.float64)
    if len(edges) == 0 or edges[0] != 0 or np.any(np.diff(edges) <= 0):
        raise ValueError("length edges must start at 0 and increase strictly")
    width = 360.0 / angle_bins
    sums = np.zeros((angle_bins, len(edges)))
    counts = np.zeros((angle_bins, len(edges)), dtype=int)
    fix_sum, fix_count = 0.0, 0
    for points, times in trajs:
        for v in saccades(points, times, flip_y=flip_y):
            if v.length == 0:
                fix_sum += v.speed
                fix_count += 1
                continue
            a, b = angle_bin(v.angle, angle_bins), length_bin(v.length, edges)
            sums[a, b] += v.speed
            counts[a, b] += 1
    rows = []
    for a in range(angle_bins):
        for b in range(len(edges)):
            c = int(counts[a, b])
            rows.append({
                "angle_bin_deg": a * width,
                "length_bin_px": float(edges[b]),
                "mean_speed_px_s": float(sums[a, b] / c) if c else float("nan"),
                "count": c,
            })
    rows.append({
        "angle_bin_deg": FIXATION,
        "length_bin_px": 0.0,
        "mean_speed_px_s": fix_sum / fix_count if fix_count else float("nan"),
        "count": fix_count,
    })
    return rows


CSV_FIELDS = ("angle_bin_deg", "length_bin_px", "mean_speed_px_s", "count")


def format_cell(v):
    """Shortest round-trip text for floats (numpy scalars included)."""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_saccade_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: format_cell(v) for k, v in r.items()})


def read_saccade_csv(path):
    """Parse and schema-check a saccade CSV written by :func:`write_saccade_csv`."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValueError(f"unexpected columns {reader.fieldnames}")
        rows = []
        for r in reader:
            ang = r["angle_bin_deg"]
            rows.append({
                "angle_bin_deg": ang if ang == FIXATION else float(ang),
                "length_bin_px": float(r["length_bin_px"]),
                "mean_speed_px_s": float(r["mean_speed_px_s"]),
                "count": int(r["count"]),
            })
    return rows
