"""Frame-level and pixel-level ROC evaluation with AUC and EER.

Frame level: a frame is predicted abnormal at threshold ``tau`` when any
pixel of its map is ``>= tau``, which is the same as its max being ``>= tau``.

Pixel level: at ``tau`` the predicted set is ``P = {A >= tau}``. An abnormal
frame is a true positive iff ``|P & GT| >= 0.4 |GT|`` (inclusive, exact
integer arithmetic). By default an abnormal frame with a nonempty ``P`` that
misses the 40% bar counts as a false positive, as do normal frames with a
nonempty ``P``; the false-positive rate then divides by all frames, since
every frame can produce a false detection. ``sub_coverage="miss"`` gives
the other reading: such frames are only misses and FPR divides by normal
frames, identical to the frame-level FPR.

Both curves are exact: thresholds are every value at which some frame's
status flips, plus the analytic endpoints (0, 0) and (1, 1).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, GroundTruthMissingError, UndefinedMetricError

PIXEL_COVERAGE = 0.4


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        self.fpr = np.asarray(self.fpr, dtype=np.float64)
        self.tpr = np.asarray(self.tpr, dtype=np.float64)

    def __len__(self):
        return len(self.fpr)

    @classmethod
    def from_points(cls, fpr, tpr) -> "RocCurve":
        """Curve from ordered points; thresholds become a decreasing index."""
        fpr = np.asarray(fpr, dtype=np.float64)
        return cls(np.arange(len(fpr), 0, -1, dtype=np.float64), fpr, tpr)

    def points(self):
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))


@dataclass
class MetricReport:
    protocol: str
    auc: float
    eer: float
    curve: RocCurve
    per_video: Dict[str, Dict[str, float]] = field(default_factory=dict)
    dataset: str = ""

    def rows(self):
        yield [self.protocol, self.dataset, "ALL", _fmt(self.auc), _fmt(self.eer)]
        for vid in sorted(self.per_video):
            r = self.per_video[vid]
            yield [self.protocol, self.dataset, vid, _fmt(r["auc"]), _fmt(r["eer"])]


def _fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


# --------------------------------------------------------------------------

def frame_scores(maps) -> np.ndarray:
    """Max of each abnormality map."""
    if len(maps) == 0:
        raise ConfigurationError("no maps to score")
    return np.array([float(np.max(getattr(m, "values", m))) for m in maps])


def _check_labels(labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise UndefinedMetricError("ROC needs both normal and abnormal frames")
    return labels


def frame_level_roc(scores, labels) -> RocCurve:
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_labels(labels)
    if scores.shape != labels.shape:
        raise ConfigurationError("scores and labels must have equal length")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    n_pos, n_neg = tp[-1], fp[-1]
    thr = np.r_[np.inf, s[last], -np.inf]
    tpr = np.r_[0.0, tp[last] / n_pos, 1.0]
    fpr = np.r_[0.0, fp[last] / n_neg, 1.0]
    return RocCurve(thr, fpr, tpr)


def _coverage_count(n_gt: int, coverage: float) -> int:
    """Smallest integer k with k >= coverage * n_gt, computed exactly."""
    frac = Fraction(coverage).limit_denominator(10 ** 6)
    return -((-frac.numerator * n_gt) // frac.denominator)


@dataclass
class _FrameStats:
    top: float            # max of A over the frame
    q: float              # tau <= q  <=>  frame is a true positive (abnormal only)
    abnormal: bool


def _pixel_frame_stats(maps, labels, masks, coverage) -> List[_FrameStats]:
    stats = []
    for t, (a, lab) in enumerate(zip(maps, labels)):
        a = np.asarray(getattr(a, "values", a), dtype=np.float64)
        top = float(a.max())
        if not lab:
            stats.append(_FrameStats(top, -np.inf, False))
            continue
        m = masks[t] if masks is not None else None
        if m is None or not np.any(m):
            raise GroundTruthMissingError(f"abnormal frame {t} has no ground-truth mask")
        m = np.asarray(m, dtype=bool)
        if m.shape != a.shape:
            raise ConfigurationError(
                f"frame {t}: map shape {a.shape} differs from mask shape {m.shape}")
        inside = np.sort(a[m])[::-1]
        k = _coverage_count(inside.size, coverage)
        q = float(inside[k - 1]) if k >= 1 else np.inf
        stats.append(_FrameStats(top, q, True))
    return stats


def pixel_level_roc(maps, labels, masks, coverage: float = PIXEL_COVERAGE,
                    sub_coverage: str = "false_positive",
                    thresholds: Optional[Sequence[float]] = None) -> RocCurve:
    """Localization ROC over frames.

    ``maps``: per-frame abnormality maps at mask resolution. ``labels``:
    per-frame abnormal flags. ``masks``: per-frame boolean masks (``None``
    allowed for normal frames). Passing ``thresholds`` evaluates exactly
    those thresholds instead of the exact sweep.
    """
    if sub_coverage not in ("false_positive", "miss"):
        raise ConfigurationError(f"unknown sub_coverage mode {sub_coverage!r}")
    labels = _check_labels(labels)
    if len(maps) != len(labels):
        raise ConfigurationError("one map per labelled frame is required")
    stats = _pixel_frame_stats(maps, labels, masks, coverage)
    top = np.array([s.top for s in stats])
    q = np.array([s.q for s in stats])
    ab = labels

    if thresholds is None:
        cand = np.unique(np.r_[top, q[ab]])
        cand = cand[np.isfinite(cand)][::-1]
        thr = np.r_[np.inf, cand, -np.inf]
    else:
        thr = np.asarray(thresholds, dtype=np.float64)

    T = thr[:, None]
    tp = ((T <= q[None, :]) & ab[None, :]).sum(axis=1)
    fp_normal = ((T <= top[None, :]) & ~ab[None, :]).sum(axis=1)
    n_pos, n_neg = int(ab.sum()), int((~ab).sum())
    tpr = tp / n_pos
    if sub_coverage == "miss":
        fpr = fp_normal / n_neg
    else:
        fp_ab = ((T <= top[None, :]) & (T > q[None, :]) & ab[None, :]).sum(axis=1)
        fpr = (fp_normal + fp_ab) / (n_pos + n_neg)

    if thresholds is None:
        # analytic endpoints, then order the points by FPR (then TPR)
        tpr[0], fpr[0] = 0.0, 0.0
        tpr[-1], fpr[-1] = 1.0, 1.0
        order = np.lexsort((tpr, fpr))
        thr, fpr, tpr = thr[order], fpr[order], tpr[order]
    return RocCurve(thr, fpr, tpr)


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve over FPR in [0, 1]."""
    x, y = curve.fpr, curve.tpr
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) * 0.5))


def eer(curve: RocCurve) -> float:
    """FPR where FPR = 1 - TPR, linearly interpolated between adjacent points."""
    x, y = curve.fpr, curve.tpr
    d = (1.0 - y) - x
    for i in range(len(d) - 1):
        if d[i] == 0:
            return float(x[i])
        if d[i] > 0 > d[i + 1]:
            t = d[i] / (d[i] - d[i + 1])
            return float(x[i] + t * (x[i + 1] - x[i]))
    return float(x[-1]) if d[-1] == 0 else float("nan")


def eer_threshold(curve: RocCurve) -> float:
    """Threshold of the ROC point nearest the equal-error crossing."""
    d = np.abs((1.0 - curve.tpr) - curve.fpr)
    finite = np.isfinite(curve.thresholds)
    if not finite.any():
        return float("nan")
    d = np.where(finite, d, np.inf)
    return float(curve.thresholds[int(np.argmin(d))])


# --------------------------------------------------------------------------
# dataset-level evaluation

def align_maps(maps: Sequence, n_frames: int) -> List:
    """Pad T-1 maps (map t from frames t, t+1) to T frames: the last frame reuses map T-2."""
    maps = list(maps)
    if len(maps) == n_frames:
        return maps
    if len(maps) != n_frames - 1:
        raise ConfigurationError(f"{len(maps)} maps cannot be aligned to {n_frames} frames")
    return maps + [maps[-1]]


def _safe(metric_fn, *args):
    try:
        curve = metric_fn(*args)
    except UndefinedMetricError:
        return {"auc": float("nan"), "eer": float("nan")}
    return {"auc": auc(curve), "eer": eer(curve)}


def evaluate(maps_by_video: Dict[str, Sequence], ground_truth: Dict[str, object],
             protocol: str = "frame_level", dataset: str = "",
             sub_coverage: str = "false_positive") -> MetricReport:
    """Pool every frame of every test video and compute one ROC.

    ``ground_truth`` maps video id to a :class:`~crossgan.dataset.GroundTruth`.
    Per-video rows are NaN for videos that contain a single class.
    """
    if protocol not in ("frame_level", "pixel_level"):
        raise ConfigurationError(f"unknown protocol {protocol!r}")
    all_maps, all_labels, all_masks = [], [], []
    per_video = {}
    for vid in sorted(maps_by_video):
        gt = ground_truth.get(vid)
        if gt is None:
            raise GroundTruthMissingError(f"no ground truth for video {vid}")
        labels = np.asarray(gt.frame_labels, dtype=bool)
        maps = align_maps(maps_by_video[vid], len(labels))
        masks = gt.pixel_masks
        if protocol == "pixel_level":
            for t, lab in enumerate(labels):
                if lab and (masks is None or masks[t] is None or not np.any(masks[t])):
                    raise GroundTruthMissingError(f"{vid}: abnormal frame {t} has no mask")
        all_maps += maps
        all_labels += list(labels)
        all_masks += list(masks) if masks is not None else [None] * len(labels)
        if protocol == "frame_level":
            per_video[vid] = _safe(frame_level_roc, frame_scores(maps), labels)
        else:
            per_video[vid] = _safe(lambda m, l, k: pixel_level_roc(m, l, k, sub_coverage=sub_coverage),
                                   maps, labels, masks)
    if protocol == "frame_level":
        curve = frame_level_roc(frame_scores(all_maps), all_labels)
    else:
        curve = pixel_level_roc(all_maps, all_labels, all_masks, sub_coverage=sub_coverage)
    return MetricReport(protocol, auc(curve), eer(curve), curve, per_video, dataset)


def write_reports(reports: Sequence[MetricReport], out_dir) -> Dict[str, Path]:
    """metrics.csv (one row per protocol and video), summary.json and roc_<protocol>.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out_dir / "metrics.csv", "summary": out_dir / "summary.json"}
    with open(paths["metrics"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["protocol", "dataset", "video", "auc", "eer"])
        for rep in reports:
            for row in rep.rows():
                w.writerow(row)
    summary = {rep.protocol: {"auc": round(rep.auc, 12), "eer": round(rep.eer, 12),
                              "dataset": rep.dataset, "n_points": len(rep.curve)}
               for rep in reports}
    paths["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for rep in reports:
        p = out_dir / f"roc_{rep.protocol}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fpr", "tpr"])
            for thr, fpr, tpr in rep.curve.points():
                w.writerow([repr(thr), repr(fpr), repr(tpr)])
        paths[f"roc_{rep.protocol}"] = p
    return paths
