"""Detection matching, 40-point average precision, and seed-paired
significance testing.

Difficulty follows the projected-height convention: a ground-truth box
is easy when its image projection is at least 40 px tall, moderate at
25 px, hard at 20 px, and ignored below that (or when it does not
project into the image). Evaluating a difficulty counts every ground
truth of that difficulty or easier; harder ground truths are ignored,
so detections matching them are neither true nor false positives.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats as scipy_stats

from .geometry import Box3D, Calibration, ProjectionError, iou_3d, project_box3d

DIFFICULTIES = ("easy", "moderate", "hard")
_MIN_HEIGHT = {"easy": 40.0, "moderate": 25.0, "hard": 20.0}
_LEVEL = {"easy": 0, "moderate": 1, "hard": 2, "ignored": 3}
N_RECALL_POINTS = 40


class NoGroundTruth(ValueError):
    """The evaluation split contains no ground-truth boxes at all."""


class DegenerateVariance(UserWarning):
    """All paired differences are equal; the t statistic is undefined."""


def difficulty_bin(gt: Box3D, calib: Calibration) -> str:
    """easy / moderate / hard / ignored by projected box height."""
    try:
        box = project_box3d(gt, calib)
    except ProjectionError:
        return "ignored"
    h = box.height
    for name in DIFFICULTIES:
        if h >= _MIN_HEIGHT[name]:
            return name
    return "ignored"


@dataclass(frozen=True)
class BinResult:
    ap: float | None
    n_gt: int
    n_tp: int
    n_fp: int


@dataclass(frozen=True)
class ApResult:
    """Average precision per difficulty, in percent, with match counts."""

    easy: BinResult
    moderate: BinResult
    hard: BinResult

    def bin(self, difficulty: str) -> BinResult:
        return getattr(self, difficulty)

    def ap_values(self) -> dict[str, float | None]:
        return {d: self.bin(d).ap for d in DIFFICULTIES}


def _interpolated_ap(flags: list[tuple[float, int, bool]], n_gt: int) -> BinResult:
    """AP over N_RECALL_POINTS recall levels from (score, order, is_tp)
    records; precision at recall r is the maximum precision attained at
    any operating point with recall >= r."""
    if n_gt == 0:
        return BinResult(None, 0, 0, 0)
    flags = sorted(flags, key=lambda t: (-t[0], t[1]))
    tps = np.cumsum([1 if f[2] else 0 for f in flags])
    fps = np.cumsum([0 if f[2] else 1 for f in flags])
    if len(flags) == 0:
        return BinResult(0.0, n_gt, 0, 0)
    recalls = tps / n_gt
    precisions = tps / np.maximum(tps + fps, 1)
    total = 0.0
    for j in range(1, N_RECALL_POINTS + 1):
        r = j / N_RECALL_POINTS
        reachable = precisions[recalls >= r - 1e-12]
        total += float(reachable.max()) if reachable.size else 0.0
    ap = 100.0 * total / N_RECALL_POINTS
    return BinResult(ap, n_gt, int(tps[-1]), int(fps[-1]))


def ap_3d(detections, gt_frames, iou_threshold: float = 0.7) -> ApResult:
    """40-point interpolated 3D AP per difficulty.

    detections expose box, score, frame_id; gt_frames expose frame_id,
    gt_boxes, calib. Matching is greedy in descending score within each
    frame, each ground truth used at most once, at iou_3d >= threshold.
    Raises NoGroundTruth when the split has no ground-truth boxes.
    """
    frames = {f.frame_id: f for f in gt_frames}
    total_gt = sum(len(f.gt_boxes) for f in gt_frames)
    if total_gt == 0:
        raise NoGroundTruth("no ground-truth boxes in evaluation split")

    by_frame: dict[str, list] = {fid: [] for fid in frames}
    for order, det in enumerate(detections):
        if det.frame_id not in frames:
            raise KeyError(f"detection references unknown frame {det.frame_id!r}")
        by_frame[det.frame_id].append((float(det.score), order, det.box))

    bins = {f.frame_id: [difficulty_bin(gt, f.calib) for gt in f.gt_boxes]
            for f in gt_frames}

    # One IoU row per detection, shared by all three difficulty passes.
    iou_rows: dict[str, list[tuple[float, int, np.ndarray]]] = {}
    for fid, frame in frames.items():
        rows = []
        for score, order, box in sorted(by_frame[fid], key=lambda t: (-t[0], t[1])):
            ious = np.array([iou_3d(box, gt) for gt in frame.gt_boxes],
                            dtype=np.float64)
            rows.append((score, order, ious))
        iou_rows[fid] = rows

    results = {}
    for difficulty in DIFFICULTIES:
        level = _LEVEL[difficulty]
        flags: list[tuple[float, int, bool]] = []
        n_gt = 0
        for fid, frame in frames.items():
            counted = [j for j, b in enumerate(bins[fid]) if _LEVEL[b] <= level]
            ignored = [j for j, b in enumerate(bins[fid]) if _LEVEL[b] > level]
            n_gt += len(counted)
            taken: set[int] = set()
            for score, order, ious in iou_rows[fid]:
                best_j, best_iou = -1, iou_threshold - 1e-12
                for j in counted:
                    if j in taken:
                        continue
                    iou = float(ious[j])
                    if iou >= iou_threshold and iou > best_iou:
                        best_j, best_iou = j, iou
                if best_j >= 0:
                    taken.add(best_j)
                    flags.append((score, order, True))
                elif any(float(ious[j]) >= iou_threshold for j in ignored):
                    continue    # matches only harder/ignored GT: drop silently
                else:
                    flags.append((score, order, False))
        results[difficulty] = _interpolated_ap(flags, n_gt)
    return ApResult(**results)


def paired_significance(runs_a, runs_b) -> float:
    """Two-sided paired t-test p-value over matched runs.

    When every difference is identical the t statistic is undefined; by
    convention the p-value is then 0 for a nonzero difference and 1 for
    zero difference, with a DegenerateVariance warning.
    """
    a = np.asarray(runs_a, dtype=np.float64)
    b = np.asarray(runs_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("need two equal-length 1-D samples with n >= 2")
    diffs = a - b
    if np.ptp(diffs) == 0.0:
        warnings.warn("all paired differences equal; p-value by convention",
                      DegenerateVariance, stacklevel=2)
        return 1.0 if diffs[0] == 0.0 else 0.0
    return float(scipy_stats.ttest_rel(a, b).pvalue)
