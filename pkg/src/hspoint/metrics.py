"""Category-level pose evaluation: oriented-box IoU, rotation/translation
errors with symmetry handling, threshold accuracies, and category-mean
aggregation.

Evaluation is detection-free: every record pairs one prediction with its
ground truth, so average precision at an IoU threshold reduces to the
fraction of instances clearing it, and the headline numbers are
unweighted means over categories. Thresholds on rotation/translation
errors are strict (an error exactly at the threshold fails); IoU
thresholds are inclusive.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .pointcloud import Pose
from .rng import child_seeds, make_rng

IOU_THRESHOLDS = (0.25, 0.50, 0.75)
POSE_METRICS = (
    ("5deg2cm", 5.0, 2.0),
    ("5deg5cm", 5.0, 5.0),
    ("10deg2cm", 10.0, 2.0),
    ("10deg5cm", 10.0, 5.0),
    ("2cm", None, 2.0),
    ("5deg", 5.0, None),
)


@dataclass(frozen=True)
class OrientedBox:
    """A box given by a Pose: center = translation, extents = size."""

    pose: Pose

    @property
    def volume(self) -> float:
        return float(np.prod(self.pose.size))

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                         dtype=np.float64)
        local = signs * (self.pose.size / 2.0)
        return local @ self.pose.rotation.T + self.pose.translation

    def contains(self, pts: np.ndarray) -> np.ndarray:
        local = (pts - self.pose.translation) @ self.pose.rotation
        return np.all(np.abs(local) <= self.pose.size / 2.0, axis=1)


@dataclass(frozen=True)
class EvalRecord:
    """One matched prediction/ground-truth pair."""

    predicted: Pose
    ground_truth: Pose
    category: str
    symmetry: np.ndarray | None = None  # axial symmetry axis, or None

    def __post_init__(self):
        if self.symmetry is not None:
            axis = np.asarray(self.symmetry, dtype=np.float64)
            if axis.shape != (3,) or abs(np.linalg.norm(axis) - 1.0) > 1e-9:
                raise ValueError("symmetry axis must be a unit 3-vector")
            object.__setattr__(self, "symmetry", axis)


def rotation_error_deg(r_pred, r_gt, symmetry=None) -> float:
    """Geodesic rotation error in degrees; with an axial symmetry the error
    is the angle between the two mapped symmetry axes."""
    r_pred = np.asarray(r_pred, dtype=np.float64)
    r_gt = np.asarray(r_gt, dtype=np.float64)
    if symmetry is None:
        cos = (np.trace(r_pred.T @ r_gt) - 1.0) / 2.0
        return math.degrees(math.acos(float(np.clip(cos, -1.0, 1.0))))
    axis = np.asarray(symmetry, dtype=np.float64)
    a = r_pred @ axis
    b = r_gt @ axis
    cos = float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return math.degrees(math.acos(float(np.clip(cos, -1.0, 1.0))))


def translation_error_cm(t_pred, t_gt) -> float:
    """Euclidean translation error in centimeters (inputs in meters)."""
    t_pred = np.asarray(t_pred, dtype=np.float64)
    t_gt = np.asarray(t_gt, dtype=np.float64)
    if not (np.all(np.isfinite(t_pred)) and np.all(np.isfinite(t_gt))):
        raise ValueError("translations must be finite")
    return 100.0 * float(np.linalg.norm(t_pred - t_gt))


def _axis_aligned_iou(a: OrientedBox, b: OrientedBox) -> float:
    lo_a = a.pose.translation - a.pose.size / 2
    hi_a = a.pose.translation + a.pose.size / 2
    lo_b = b.pose.translation - b.pose.size / 2
    hi_b = b.pose.translation + b.pose.size / 2
    overlap = np.maximum(0.0, np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b))
    inter = float(np.prod(overlap))
    union = a.volume + b.volume - inter
    return inter / union


def iou3d(a: OrientedBox, b: OrientedBox, samples: int = 100_000, seed: int = 0) -> float:
    """Intersection over union of oriented boxes.

    Axis-aligned pairs (both rotations exactly the identity) use the
    closed-form overlap. Otherwise the volumes are estimated by Monte
    Carlo: points are sampled uniformly in the axis-aligned hull of both
    boxes and classified against each box; deterministic given the seed.
    """
    if samples < 10_000:
        raise ValueError("need at least 1e4 samples for a stable estimate")
    if min(a.volume, b.volume) <= 0.0:
        raise ValueError("degenerate zero-volume box")
    eye = np.eye(3)
    if np.array_equal(a.pose.rotation, eye) and np.array_equal(b.pose.rotation, eye):
        return _axis_aligned_iou(a, b)
    corners = np.vstack([a.corners(), b.corners()])
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    pts = make_rng(seed).uniform(lo, hi, size=(samples, 3))
    in_a = a.contains(pts)
    in_b = b.contains(pts)
    union = int(np.count_nonzero(in_a | in_b))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(in_a & in_b)) / union


def record_errors(record: EvalRecord) -> tuple[float, float]:
    rot = rotation_error_deg(record.predicted.rotation, record.ground_truth.rotation,
                             record.symmetry)
    trans = translation_error_cm(record.predicted.translation,
                                 record.ground_truth.translation)
    return rot, trans


def threshold_accuracy(records, rot_thresh_deg=None, trans_thresh_cm=None) -> float:
    """Fraction of records strictly under the given threshold(s)."""
    records = list(records)
    if not records:
        raise ValueError("no records to evaluate")
    if rot_thresh_deg is None and trans_thresh_cm is None:
        raise ValueError("set at least one threshold")
    hits = 0
    for rec in records:
        rot, trans = record_errors(rec)
        ok = True
        if rot_thresh_deg is not None:
            ok = ok and rot < rot_thresh_deg
        if trans_thresh_cm is not None:
            ok = ok and trans < trans_thresh_cm
        hits += ok
    return hits / len(records)


def _record_iou(rec: EvalRecord, samples: int, seed: int) -> float:
    return iou3d(OrientedBox(rec.predicted), OrientedBox(rec.ground_truth),
                 samples=samples, seed=seed)


def iou_map(records, iou_threshold: float, samples: int = 100_000, seed: int = 0) -> float:
    """Mean over categories of the fraction of instances with IoU >= threshold."""
    records = list(records)
    if not records:
        raise ValueError("no records to evaluate")
    seeds = child_seeds(seed, len(records))
    by_cat: dict[str, list] = {}
    for rec, s in zip(records, seeds):
        by_cat.setdefault(rec.category, []).append(_record_iou(rec, samples, s) >= iou_threshold)
    return float(np.mean([np.mean(v) for v in by_cat.values()]))


@dataclass
class MetricsReport:
    """Category-mean scores plus the per-category breakdown."""

    iou_scores: dict  # threshold -> mean over categories
    pose_scores: dict  # metric name -> mean over categories
    per_category: dict  # category -> {column -> fraction}


def compute_report(records, samples: int = 100_000, seed: int = 0) -> MetricsReport:
    records = list(records)
    if not records:
        raise ValueError("no records to evaluate")
    seeds = child_seeds(seed, len(records))
    by_cat: dict[str, dict] = {}
    for rec, s in zip(records, seeds):
        entry = by_cat.setdefault(rec.category, {"iou": [], "errors": []})
        entry["iou"].append(_record_iou(rec, samples, s))
        entry["errors"].append(record_errors(rec))
    per_category = {}
    for cat in sorted(by_cat):
        ious = np.array(by_cat[cat]["iou"])
        errors = by_cat[cat]["errors"]
        cols = {}
        for thr in IOU_THRESHOLDS:
            cols[f"IoU{int(thr * 100)}"] = float(np.mean(ious >= thr))
        for name, rot_t, trans_t in POSE_METRICS:
            hits = [
                (rot_t is None or rot < rot_t) and (trans_t is None or trans < trans_t)
                for rot, trans in errors
            ]
            cols[name] = float(np.mean(hits))
        per_category[cat] = cols
    columns = list(next(iter(per_category.values())))
    iou_scores = {}
    pose_scores = {}
    for col in columns:
        mean = float(np.mean([per_category[c][col] for c in per_category]))
        if col.startswith("IoU"):
            iou_scores[int(col[3:]) / 100.0] = mean
        else:
            pose_scores[col] = mean
    return MetricsReport(iou_scores, pose_scores, per_category)


def format_report(report: MetricsReport) -> str:
    """Aligned plain-text table, one category per row plus the mean row."""
    columns = [f"IoU{int(t * 100)}" for t in IOU_THRESHOLDS] + [m[0] for m in POSE_METRICS]
    width = max([len(c) for c in columns] + [8])
    cat_width = max([len(c) for c in report.per_category] + [len("category"), len("mean")])
    header = "category".ljust(cat_width) + "".join(c.rjust(width + 2) for c in columns)
    lines = [header]
    for cat, cols in report.per_category.items():
        row = cat.ljust(cat_width)
        row += "".join(f"{cols[c]:.3f}".rjust(width + 2) for c in columns)
        lines.append(row)
    mean_cols = {**{f"IoU{int(t * 100)}": v for t, v in report.iou_scores.items()},
                 **report.pose_scores}
    lines.append("mean".ljust(cat_width)
                 + "".join(f"{mean_cols[c]:.3f}".rjust(width + 2) for c in columns))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Record files: one JSON object per line
# ---------------------------------------------------------------------------


def _pose_to_json(pose: Pose) -> dict:
    return {
        "R": [float(v) for v in pose.rotation.ravel(order="C")],
        "t": [float(v) for v in pose.translation],
        "s": [float(v) for v in pose.size],
    }


def _pose_from_json(obj: dict) -> Pose:
    return Pose(
        np.array(obj["R"], dtype=np.float64).reshape(3, 3),
        np.array(obj["t"], dtype=np.float64),
        np.array(obj["s"], dtype=np.float64),
    )


def record_to_json(rec: EvalRecord) -> str:
    if rec.symmetry is None:
        sym = "none"
    else:
        sym = {"axial": [float(v) for v in rec.symmetry]}
    return json.dumps({
        "category": rec.category,
        "symmetry": sym,
        "pred": _pose_to_json(rec.predicted),
        "gt": _pose_to_json(rec.ground_truth),
    }, sort_keys=True)


def record_from_json(line: str) -> EvalRecord:
    obj = json.loads(line)
    sym = obj.get("symmetry", "none")
    if sym == "none":
        axis = None
    elif isinstance(sym, dict) and "axial" in sym:
        axis = np.array(sym["axial"], dtype=np.float64)
        norm = np.linalg.norm(axis)
        if norm < 1e-12:
            raise ValueError("symmetry axis must be nonzero")
        axis = axis / norm
    else:
        raise ValueError(f"bad symmetry value {sym!r}")
    return EvalRecord(
        predicted=_pose_from_json(obj["pred"]),
        ground_truth=_pose_from_json(obj["gt"]),
        category=str(obj["category"]),
        symmetry=axis,
    )


def save_records(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(record_to_json(rec) + "\n")


def load_records(path) -> list:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(record_from_json(line))
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad record ({exc})") from exc
    if not records:
        raise ValueError(f"{path}: no records")
    return records
