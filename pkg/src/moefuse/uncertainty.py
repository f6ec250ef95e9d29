"""Uncertainty scoring for MC-dropout detector proposals.

A proposal arrives as N stochastic forward passes (boxes + class
probabilities) plus the per-coordinate variances predicted by a
direct-modeling regression head. This module reduces that bundle to
the scalar channels the fusion networks consume:

  score                mean probability of the foreground class
  cls_entropy          entropy of the MC-mean class distribution
  cls_deviation_ratio  hinge-damped distance from validation TP behavior
  reg_uncertainty      standardized total variance of the box samples

Class index 0 is the foreground (object) class by convention.
Standardization always uses statistics collected on the clear-weather
validation true positives, never on degraded data.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box2D, Box3D, diagonal, iou_2d, iou_3d, project_box3d, ProjectionError

LIDAR = "lidar"
CAMERA = "camera"
MODALITIES = (LIDAR, CAMERA)

STATS_VERSION = 1

# Box parameter counts per modality.
_BOX_WIDTH = {LIDAR: 7, CAMERA: 4}


class MissingStats(LookupError):
    """Validation statistics requested for a modality that has none."""


class EmptyPopulation(UserWarning):
    """A modality produced zero validation true positives; defaults used."""


@dataclass(frozen=True)
class McSample:
    """One stochastic forward pass: a box and its class distribution."""

    box: Box3D | Box2D
    class_probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.class_probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size < 2:
            raise ValueError(f"class_probs must be a C>=2 vector, got shape {probs.shape}")
        if np.any(probs < 0.0) or np.any(probs > 1.0):
            raise ValueError("class probabilities outside [0,1]")
        if abs(float(probs.sum()) - 1.0) > 1e-6:
            raise ValueError(f"class probabilities sum to {probs.sum():.8f}, not 1")
        object.__setattr__(self, "class_probs", probs)


@dataclass(frozen=True)
class McProposal:
    """One detector proposal with its N MC-dropout samples.

    data_var holds the direct-modeling head's per-coordinate variances
    (7 entries for 3D boxes, 4 for 2D boxes).
    """

    modality: str
    samples: tuple[McSample, ...]
    data_var: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if not self.samples:
            raise ValueError("proposal needs at least one MC sample")
        object.__setattr__(self, "samples", tuple(self.samples))
        want_box = Box3D if self.modality == LIDAR else Box2D
        c = self.samples[0].class_probs.size
        for s in self.samples:
            if not isinstance(s.box, want_box):
                raise ValueError(f"{self.modality} proposal holds a {type(s.box).__name__}")
            if s.class_probs.size != c:
                raise ValueError("samples disagree on class count")
        dv = np.asarray(self.data_var, dtype=np.float64)
        b = _BOX_WIDTH[self.modality]
        if dv.shape != (b,):
            raise ValueError(f"data_var must have {b} entries, got shape {dv.shape}")
        if np.any(dv < 0.0) or not np.all(np.isfinite(dv)):
            raise ValueError("data_var entries must be finite and nonnegative")
        object.__setattr__(self, "data_var", dv)

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    @property
    def n_classes(self) -> int:
        return self.samples[0].class_probs.size


@dataclass(frozen=True)
class ScoredProposal:
    """A proposal reduced to its mean box and scalar uncertainty channels."""

    mean_box: Box3D | Box2D
    score: float
    cls_entropy: float
    cls_deviation_ratio: float
    reg_uncertainty: float
    source_index: int


@dataclass(frozen=True)
class ModalityStats:
    """Mean/std of entropy, predicted-class probability, and raw regression
    score over clear-validation true positives of one modality."""

    entropy_mean: float
    entropy_std: float
    score_mean: float
    score_std: float
    reg_mean: float
    reg_std: float

    def __post_init__(self):
        if min(self.entropy_std, self.score_std, self.reg_std) < 0.0:
            raise ValueError("standard deviations must be nonnegative")
        if self.entropy_mean < 0.0:
            raise ValueError("entropy mean must be nonnegative")
        if not (0.0 < self.score_mean <= 1.0):
            raise ValueError("score mean must lie in (0, 1]")


@dataclass(frozen=True)
class ValidationStats:
    """Per-modality validation statistics, read-only after construction."""

    modalities: dict[str, ModalityStats] = field(default_factory=dict)

    def for_modality(self, modality: str) -> ModalityStats:
        try:
            return self.modalities[modality]
        except KeyError:
            raise MissingStats(f"no validation stats for modality {modality!r}") from None


def fallback_stats(n_classes: int = 2) -> ModalityStats:
    """Documented defaults used when a modality has zero validation TPs."""
    top = math.log(n_classes)
    return ModalityStats(
        entropy_mean=top / 2.0, entropy_std=top / 4.0,
        score_mean=0.5, score_std=0.25,
        reg_mean=0.0, reg_std=1.0,
    )


@dataclass(frozen=True)
class ScoringConfig:
    """Knobs for the regression-score data-variance term.

    deterministic mode adds sum(data_var), the expectation of the sampled
    estimator; sampled mode draws data_var_samples Gaussian boxes instead.
    """

    data_var_mode: str = "deterministic"
    data_var_samples: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.data_var_mode not in ("deterministic", "sampled"):
            raise ValueError(f"unknown data_var_mode {self.data_var_mode!r}")
        if self.data_var_samples < 1:
            raise ValueError("data_var_samples must be >= 1")


def sample_matrix(p: McProposal) -> np.ndarray:
    """Stack a proposal's sample boxes into an (N, B) parameter matrix."""
    return np.stack([s.box.as_array() for s in p.samples])


def mc_mean_probs(p: McProposal) -> np.ndarray:
    """Element-wise mean class distribution over the N samples."""
    return np.mean([s.class_probs for s in p.samples], axis=0)


def mc_mean_box(p: McProposal) -> Box3D | Box2D:
    """Element-wise mean box; yaw is averaged on the circle."""
    mat = sample_matrix(p)
    mean = mat.mean(axis=0)
    if p.modality == CAMERA:
        return Box2D(*mean)
    yaw = math.atan2(np.sin(mat[:, 6]).mean(), np.cos(mat[:, 6]).mean())
    return Box3D(*mean[:6], yaw)


def entropy_score(mean_probs) -> float:
    """Shannon entropy -sum(p ln p) with 0 ln 0 taken as 0."""
    p = np.asarray(mean_probs, dtype=np.float64)
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return float(-terms.sum())


def deviation_ratio(cls_entropy: float, score: float, stats: ValidationStats,
                    modality: str) -> float:
    """Product of two hinge-damped factors comparing a proposal's entropy
    and predicted-class probability against validation TP statistics.

    Equals 1 when entropy <= mean+std and score >= mean+std; decays toward
    0 as either statistic leaves the validation envelope. Degenerate means
    are floored at 1e-9 so the result stays in (0, 1].
    """
    ms = stats.for_modality(modality)
    hinge_u = max(0.0, cls_entropy - ms.entropy_mean - ms.entropy_std)
    hinge_s = max(0.0, -(score - ms.score_mean - ms.score_std))
    mu_u = max(ms.entropy_mean, 1e-9)
    mu_s = max(ms.score_mean, 1e-9)
    return (mu_u / (mu_u + hinge_u)) * (mu_s / (mu_s + hinge_s))


def total_variance(samples) -> float:
    """Trace of the biased (divide-by-N) covariance of box parameter rows.

    Accepts an (N, B) array or a sequence of boxes / parameter vectors.
    """
    if isinstance(samples, np.ndarray) and samples.ndim == 2:
        mat = samples.astype(np.float64, copy=False)
    else:
        rows = [s.as_array() if hasattr(s, "as_array") else np.asarray(s, dtype=np.float64)
                for s in samples]
        mat = np.stack(rows)
    return float(mat.var(axis=0).sum())


def data_variance_term(p: McProposal, mode: str = "deterministic",
                       n_samples: int = 512, rng_seed=0) -> float:
    """Additive data-variance contribution from the direct-modeling head."""
    if mode == "deterministic":
        return float(p.data_var.sum())
    if mode != "sampled":
        raise ValueError(f"unknown data variance mode {mode!r}")
    rng = np.random.default_rng(rng_seed)
    mean_vec = sample_matrix(p).mean(axis=0)
    draws = rng.normal(mean_vec, np.sqrt(p.data_var), size=(n_samples, p.data_var.size))
    return total_variance(draws)


def raw_regression_score(p: McProposal, cfg: ScoringConfig = ScoringConfig(),
                         stream=None) -> float:
    """Pre-standardization regression score: sample total variance plus the
    data-variance term, diagonal-normalized for camera proposals."""
    seed = cfg.seed if stream is None else stream
    u = total_variance(sample_matrix(p))
    u += data_variance_term(p, cfg.data_var_mode, cfg.data_var_samples, seed)
    if p.modality == CAMERA:
        u /= diagonal(mc_mean_box(p))
    return u


def regression_score(p: McProposal, stats: ValidationStats,
                     cfg: ScoringConfig = ScoringConfig(), stream=None) -> float:
    """Standardized regression score using the modality's clear-validation
    statistics (std floored at 1e-9)."""
    ms = stats.for_modality(p.modality)
    raw = raw_regression_score(p, cfg, stream)
    return (raw - ms.reg_mean) / max(ms.reg_std, 1e-9)


def predicted_class_prob(mean_probs) -> float:
    """Mean probability of the predicted (argmax) class."""
    return float(np.max(mean_probs))


def score_proposal(p: McProposal, stats: ValidationStats,
                   cfg: ScoringConfig = ScoringConfig(), source_index: int = 0,
                   stream=None) -> ScoredProposal:
    """Extend one proposal with its scalar uncertainty channels."""
    probs = mc_mean_probs(p)
    ent = entropy_score(probs)
    return ScoredProposal(
        mean_box=mc_mean_box(p),
        score=float(probs[0]),
        cls_entropy=ent,
        cls_deviation_ratio=deviation_ratio(ent, predicted_class_prob(probs), stats, p.modality),
        reg_uncertainty=regression_score(p, stats, cfg, stream),
        source_index=source_index,
    )


def score_frame(lidar: list[McProposal], camera: list[McProposal],
                stats: ValidationStats, cfg: ScoringConfig = ScoringConfig(),
                stream_base=()) -> tuple[list[ScoredProposal], list[ScoredProposal]]:
    """Score a frame's proposals; stream_base seeds sampled-mode draws."""
    base = tuple(stream_base)
    scored_l = [score_proposal(p, stats, cfg, i, stream=base + (0, i))
                for i, p in enumerate(lidar)]
    scored_c = [score_proposal(p, stats, cfg, i, stream=base + (1, i))
                for i, p in enumerate(camera)]
    return scored_l, scored_c


def match_to_ground_truth(mean_boxes, confidences, gt_boxes, iou_fn,
                          iou_threshold: float) -> np.ndarray:
    """Greedy confidence-descending one-to-one matching.

    Returns a boolean TP mask over the proposals. gt_boxes entries may be
    None (unprojectable ground truth), which can never match.
    """
    n = len(mean_boxes)
    matched = np.zeros(n, dtype=bool)
    taken = [False] * len(gt_boxes)
    order = sorted(range(n), key=lambda i: (-confidences[i], i))
    for i in order:
        best_j, best_iou = -1, iou_threshold
        for j, gt in enumerate(gt_boxes):
            if taken[j] or gt is None:
                continue
            iou = iou_fn(mean_boxes[i], gt)
            if iou > best_iou or (iou == best_iou and best_j < 0 and iou >= iou_threshold):
                best_j, best_iou = j, iou
        if best_j >= 0:
            taken[best_j] = True
            matched[i] = True
    return matched


def _projected_gt(gt_boxes, calib):
    out = []
    for gt in gt_boxes:
        try:
            out.append(project_box3d(gt, calib))
        except ProjectionError:
            out.append(None)
    return out


DEFAULT_TP_IOU = {LIDAR: 0.7, CAMERA: 0.5}


def compute_validation_stats(frames, detections=None, tp_iou=None,
                             cfg: ScoringConfig = ScoringConfig()) -> ValidationStats:
    """Collect per-modality TP statistics from a validation set.

    frames must expose gt_boxes, calib, lidar_proposals, camera_proposals;
    detections optionally overrides the per-frame proposal lists as
    (lidar, camera) tuples. A modality with zero TPs falls back to
    documented defaults and emits an EmptyPopulation warning.
    """
    thresholds = dict(DEFAULT_TP_IOU)
    if tp_iou:
        thresholds.update(tp_iou)
    pools = {m: {"entropy": [], "score": [], "reg": []} for m in MODALITIES}
    n_classes = {m: 2 for m in MODALITIES}

    for fi, frame in enumerate(frames):
        if detections is None:
            per_modality = {LIDAR: frame.lidar_proposals, CAMERA: frame.camera_proposals}
        else:
            per_modality = {LIDAR: detections[fi][0], CAMERA: detections[fi][1]}
        gt_projected = None
        for modality, proposals in per_modality.items():
            if not proposals:
                continue
            n_classes[modality] = proposals[0].n_classes
            probs = [mc_mean_probs(p) for p in proposals]
            boxes = [mc_mean_box(p) for p in proposals]
            fg = [float(pr[0]) for pr in probs]
            if modality == LIDAR:
                gts, iou_fn = list(frame.gt_boxes), iou_3d
            else:
                if gt_projected is None:
                    gt_projected = _projected_gt(frame.gt_boxes, frame.calib)
                gts, iou_fn = gt_projected, iou_2d
            mask = match_to_ground_truth(boxes, fg, gts, iou_fn, thresholds[modality])
            for i, is_tp in enumerate(mask):
                if not is_tp:
                    continue
                pool = pools[modality]
                pool["entropy"].append(entropy_score(probs[i]))
                pool["score"].append(predicted_class_prob(probs[i]))
                pool["reg"].append(raw_regression_score(
                    proposals[i], cfg, stream=(cfg.seed, fi, i)))

    modalities = {}
    for m in MODALITIES:
        pool = pools[m]
        if not pool["entropy"]:
            warnings.warn(f"no validation true positives for {m}; using fallback stats",
                          EmptyPopulation, stacklevel=2)
            modalities[m] = fallback_stats(n_classes[m])
            continue
        ent = np.asarray(pool["entropy"])
        sc = np.asarray(pool["score"])
        reg = np.asarray(pool["reg"])
        modalities[m] = ModalityStats(
            entropy_mean=float(ent.mean()), entropy_std=float(ent.std()),
            score_mean=float(sc.mean()), score_std=float(sc.std()),
            reg_mean=float(reg.mean()), reg_std=float(reg.std()),
        )
    return ValidationStats(modalities)


def stats_to_dict(stats: ValidationStats) -> dict:
    return {
        "version": STATS_VERSION,
        "modalities": {
            m: {
                "entropy_mean": ms.entropy_mean, "entropy_std": ms.entropy_std,
                "score_mean": ms.score_mean, "score_std": ms.score_std,
                "reg_mean": ms.reg_mean, "reg_std": ms.reg_std,
            }
            for m, ms in stats.modalities.items()
        },
    }


def stats_from_dict(doc: dict) -> ValidationStats:
    if doc.get("version") != STATS_VERSION:
        raise ValueError(f"unsupported stats version {doc.get('version')!r}")
    return ValidationStats({m: ModalityStats(**entry)
                            for m, entry in doc["modalities"].items()})


def save_stats(path, stats: ValidationStats):
    Path(path).write_text(json.dumps(stats_to_dict(stats), indent=2) + "\n",
                          encoding="utf-8")


def load_stats(path) -> ValidationStats:
    return stats_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
