"""Seeded synthetic scene and virtual-detector generator.

Frames hold ground-truth cars plus the proposal-level output of two
virtual detectors (a 3D LiDAR detector and a 2D camera detector), each
emitting N MC-dropout samples per proposal. Degradation profiles
(clear, blind, adversarial, fog, snow) perturb miss rates, false
positive rates, box noise, MC sample dispersion, and confidence.

The model is proposal-level: scenario effects are expressed directly in
detector-output statistics rather than rendered sensor data. Profile
constants are surrogates tuned so that TP/FP uncertainty separations
and cross-profile shifts hold on 500-frame datasets, then frozen here.

Determinism: all randomness derives from (seed, frame_index, substream)
so per-frame generation is order- and thread-independent, and the scene
and LiDAR streams are bit-identical across profiles that leave the
LiDAR detector untouched.

False positives of both detectors are correlated: a fraction of camera
false positives spawn at the image projection of a LiDAR false positive
(clutter tends to fool both sensors at the same spot), which gives the
fusion stage realistic cross-modal corroboration traps.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box2D, Box3D, Calibration, ProjectionError, diagonal, iou_2d, iou_3d, project_box3d
from .uncertainty import (
    CAMERA, LIDAR, McProposal, McSample, ScoredProposal,
    match_to_ground_truth, mc_mean_box,
)

PROFILE_NAMES = ("clear", "blind", "adversarial", "fog", "snow")


class InvalidProfile(ValueError):
    """Unknown profile name or malformed profile parameters."""


@dataclass(frozen=True)
class ModalityDegradation:
    """How a scenario perturbs one virtual detector."""

    miss_rate: float
    fp_rate_per_frame: float
    tp_noise_scale: float
    sample_spread_scale: float
    confidence_bias: float
    fp_confidence_boost: float

    def __post_init__(self):
        if not 0.0 <= self.miss_rate <= 1.0:
            raise InvalidProfile(f"miss_rate {self.miss_rate} outside [0,1]")
        if self.fp_rate_per_frame < 0.0:
            raise InvalidProfile("fp_rate_per_frame must be >= 0")
        if self.tp_noise_scale < 0.0 or self.sample_spread_scale < 0.0:
            raise InvalidProfile("noise scales must be >= 0")


@dataclass(frozen=True)
class DegradationProfile:
    name: str
    lidar: ModalityDegradation
    camera: ModalityDegradation

    def for_modality(self, modality: str) -> ModalityDegradation:
        return self.lidar if modality == LIDAR else self.camera


# Baseline detector behavior; every other profile perturbs one or both
# modalities away from these numbers.
_CLEAR = ModalityDegradation(
    miss_rate=0.05, fp_rate_per_frame=0.45, tp_noise_scale=1.0,
    sample_spread_scale=1.0, confidence_bias=0.0, fp_confidence_boost=0.0,
)


def default_profiles() -> dict[str, DegradationProfile]:
    """Shipped scenario constants.

    blind and adversarial leave the LiDAR detector untouched: blinding
    floods the camera with misses and diffuse false positives, the
    adversarial profile with numerous confident ones. fog degrades both
    modalities (camera worse); snow degrades both mildly.
    """
    blind_cam = ModalityDegradation(
        miss_rate=0.65, fp_rate_per_frame=4.2, tp_noise_scale=1.3,
        sample_spread_scale=1.5, confidence_bias=-0.2, fp_confidence_boost=2.6,
    )
    adv_cam = ModalityDegradation(
        miss_rate=0.10, fp_rate_per_frame=3.2, tp_noise_scale=1.2,
        sample_spread_scale=1.4, confidence_bias=0.0, fp_confidence_boost=2.4,
    )
    fog_lidar = ModalityDegradation(
        miss_rate=0.22, fp_rate_per_frame=1.5, tp_noise_scale=1.5,
        sample_spread_scale=1.7, confidence_bias=-0.9, fp_confidence_boost=1.6,
    )
    fog_cam = ModalityDegradation(
        miss_rate=0.35, fp_rate_per_frame=1.9, tp_noise_scale=1.7,
        sample_spread_scale=1.9, confidence_bias=-0.6, fp_confidence_boost=1.0,
    )
    snow_lidar = ModalityDegradation(
        miss_rate=0.12, fp_rate_per_frame=0.9, tp_noise_scale=1.2,
        sample_spread_scale=1.3, confidence_bias=-0.3, fp_confidence_boost=0.5,
    )
    snow_cam = ModalityDegradation(
        miss_rate=0.15, fp_rate_per_frame=1.0, tp_noise_scale=1.25,
        sample_spread_scale=1.35, confidence_bias=-0.3, fp_confidence_boost=0.5,
    )
    return {
        "clear": DegradationProfile("clear", _CLEAR, _CLEAR),
        "blind": DegradationProfile("blind", _CLEAR, blind_cam),
        "adversarial": DegradationProfile("adversarial", _CLEAR, adv_cam),
        "fog": DegradationProfile("fog", fog_lidar, fog_cam),
        "snow": DegradationProfile("snow", snow_lidar, snow_cam),
    }


@dataclass(frozen=True)
class GeneratorConfig:
    """Scene layout and virtual-detector constants.

    Noise magnitudes grow linearly with range (range_gain), which spreads
    proposals across the easy/moderate/hard difficulty bins.
    """

    n_mc_samples: int = 10
    min_cars: int = 1
    max_cars: int = 8
    x_range: tuple[float, float] = (8.0, 72.0)
    y_abs_max: float = 22.0
    fov_frac: float = 0.55          # cars kept inside |y| <= fov_frac * x
    min_spacing: float = 7.0
    z_mean: float = -1.0
    z_sigma: float = 0.05
    car_length: tuple[float, float] = (4.2, 0.25)
    car_width: tuple[float, float] = (1.85, 0.08)
    car_height: tuple[float, float] = (1.60, 0.07)

    focal: float = 700.0
    image_width: int = 1280
    image_height: int = 384

    range_gain: float = 1.0

    # LiDAR detector.
    lidar_tp_pos_noise: float = 0.07
    lidar_tp_dim_noise: float = 0.03
    lidar_tp_yaw_noise: float = 0.02
    lidar_spread: tuple[float, ...] = (0.05, 0.05, 0.03, 0.025, 0.025, 0.025, 0.012)
    lidar_tp_logit: float = 3.1
    lidar_tp_logit_range_penalty: float = 1.3

    # Camera detector (relative to projected-box diagonal).
    cam_tp_center_noise: float = 0.02
    cam_tp_size_noise: float = 0.03
    cam_tp_spread_rel: float = 0.018
    cam_tp_logit: float = 3.0
    cam_tp_logit_range_penalty: float = 1.1

    # Shared confidence model.
    tp_logit_jitter: float = 0.45
    tp_sample_logit_sigma: float = 0.30
    fp_logit: float = -0.30
    fp_logit_jitter: float = 0.70

    # False positives come in two flavors: (box spread multiplier,
    # per-sample logit sigma, class confusion). Flavor one is invisible
    # to the regression score (true-positive-level box spread) but
    # class-ambiguous; flavor two has wild boxes and clean classification.
    # Each uncertainty channel therefore carries a disjoint part of the
    # TP/FP signal.
    fp_flavors: tuple[tuple[float, float, float], ...] = ((1.0, 1.8, 0.65),
                                                          (4.5, 0.4, 0.08))

    # Residual probability mass a true positive leaks to the confusable
    # object class (class 2); the rest goes to plain background.
    tp_confusion: float = 0.05

    # Fraction of camera false positives anchored at the projection of a
    # LiDAR false positive (correlated cross-modal clutter).
    ghost_fraction: float = 0.85

    data_var_log_sigma: float = 0.25
    min_box_dim: float = 0.15

    def principal_point(self) -> tuple[float, float]:
        return self.image_width / 2.0, self.image_height / 2.0

    def make_calibration(self) -> Calibration:
        cx, cy = self.principal_point()
        # LiDAR x is depth; image u grows against y, v against z.
        p = np.array([
            [cx, -self.focal, 0.0, 0.0],
            [cy, 0.0, -self.focal, 0.0],
            [1.0, 0.0, 0.0, 0.0],
        ])
        return Calibration(p, self.image_width, self.image_height)


@dataclass(frozen=True)
class Frame:
    frame_id: str
    gt_boxes: tuple[Box3D, ...]
    calib: Calibration
    lidar_proposals: tuple[McProposal, ...]
    camera_proposals: tuple[McProposal, ...]
    profile_tag: str


def resolve_profile(profile) -> DegradationProfile:
    if isinstance(profile, DegradationProfile):
        return profile
    try:
        return default_profiles()[profile]
    except (KeyError, TypeError):
        raise InvalidProfile(
            f"unknown profile {profile!r}; valid names: {', '.join(PROFILE_NAMES)}"
        ) from None


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64)))


def _make_scene(cfg: GeneratorConfig, rng: np.random.Generator) -> list[Box3D]:
    """1-8 cars at min-spacing-separated ground positions inside the
    camera frustum."""
    n_target = int(rng.integers(cfg.min_cars, cfg.max_cars + 1))
    placed: list[tuple[float, float]] = []
    boxes: list[Box3D] = []
    attempts = 0
    while len(boxes) < n_target and attempts < 20 * cfg.max_cars:
        attempts += 1
        x = rng.uniform(*cfg.x_range)
        y_lim = min(cfg.y_abs_max, cfg.fov_frac * x)
        y = rng.uniform(-y_lim, y_lim)
        if any(math.hypot(x - px, y - py) < cfg.min_spacing for px, py in placed):
            continue
        length = max(cfg.min_box_dim, rng.normal(*cfg.car_length))
        width = max(cfg.min_box_dim, rng.normal(*cfg.car_width))
        height = max(cfg.min_box_dim, rng.normal(*cfg.car_height))
        z = rng.normal(cfg.z_mean, cfg.z_sigma)
        yaw = rng.uniform(-math.pi, math.pi)
        placed.append((x, y))
        boxes.append(Box3D(x, y, z, length, width, height, yaw))
    return boxes


def _class_probs(mean_logit: float, logit_sigma: float, confusion: float,
                 n: int, rng: np.random.Generator) -> np.ndarray:
    """Three-class distributions (object, background, confusable clutter).

    confusion is the share of residual mass placed on the clutter class;
    class-ambiguous proposals raise the entropy of the mean distribution
    without changing the foreground score.
    """
    logits = mean_logit + rng.normal(0.0, logit_sigma, size=n)
    fg = _sigmoid(logits)
    rest = 1.0 - fg
    return np.stack([fg, (1.0 - confusion) * rest, confusion * rest], axis=1)


def _lidar_proposal(det_vec: np.ndarray, spread: np.ndarray, mean_logit: float,
                    logit_sigma: float, confusion: float, cfg: GeneratorConfig,
                    rng: np.random.Generator) -> McProposal:
    n = cfg.n_mc_samples
    data_var = spread ** 2 * rng.lognormal(0.0, cfg.data_var_log_sigma, size=7)
    deltas = rng.normal(0.0, 1.0, size=(n, 7)) * spread
    probs = _class_probs(mean_logit, logit_sigma, confusion, n, rng)
    samples = []
    for k in range(n):
        vec = det_vec + deltas[k]
        vec[3:6] = np.maximum(vec[3:6], cfg.min_box_dim)
        samples.append(McSample(Box3D(*vec), probs[k]))
    return McProposal(LIDAR, tuple(samples), data_var)


def _camera_proposal(corners: np.ndarray, dispersion: float, mean_logit: float,
                     logit_sigma: float, confusion: float, cfg: GeneratorConfig,
                     rng: np.random.Generator) -> McProposal:
    n = cfg.n_mc_samples
    spread = np.full(4, dispersion)
    data_var = spread ** 2 * rng.lognormal(0.0, cfg.data_var_log_sigma, size=4)
    deltas = rng.normal(0.0, dispersion, size=(n, 4))
    probs = _class_probs(mean_logit, logit_sigma, confusion, n, rng)
    samples = []
    for k in range(n):
        x1, y1, x2, y2 = corners + deltas[k]
        # Dispersion can invert tiny boxes; keep them valid.
        if x2 - x1 < 1.0:
            cx = 0.5 * (x1 + x2)
            x1, x2 = cx - 0.5, cx + 0.5
        if y2 - y1 < 1.0:
            cy = 0.5 * (y1 + y2)
            y1, y2 = cy - 0.5, cy + 0.5
        samples.append(McSample(Box2D(x1, y1, x2, y2), probs[k]))
    return McProposal(CAMERA, tuple(samples), data_var)


def _emit_lidar(gt_boxes: list[Box3D], deg: ModalityDegradation,
                cfg: GeneratorConfig, rng: np.random.Generator) -> list[McProposal]:
    proposals: list[McProposal] = []
    spread_base = np.asarray(cfg.lidar_spread)
    for gt in gt_boxes:
        missed = rng.random() < deg.miss_rate
        if missed:
            continue
        rng_range = math.hypot(gt.cx, gt.cy)
        rfac = 1.0 + cfg.range_gain * rng_range / 80.0
        noise = np.array([
            cfg.lidar_tp_pos_noise, cfg.lidar_tp_pos_noise, cfg.lidar_tp_pos_noise / 2,
            cfg.lidar_tp_dim_noise, cfg.lidar_tp_dim_noise, cfg.lidar_tp_dim_noise,
            cfg.lidar_tp_yaw_noise,
        ]) * deg.tp_noise_scale * rfac
        det_vec = gt.as_array() + rng.normal(0.0, 1.0, size=7) * noise
        det_vec[3:6] = np.maximum(det_vec[3:6], cfg.min_box_dim)
        spread = spread_base * deg.sample_spread_scale * rfac
        logit = (cfg.lidar_tp_logit
                 - cfg.lidar_tp_logit_range_penalty * rng_range / 80.0
                 + deg.confidence_bias
                 + rng.normal(0.0, cfg.tp_logit_jitter))
        proposals.append(_lidar_proposal(det_vec, spread, logit,
                                         cfg.tp_sample_logit_sigma,
                                         cfg.tp_confusion, cfg, rng))
    n_fp = int(rng.poisson(deg.fp_rate_per_frame))
    for _ in range(n_fp):
        x = rng.uniform(*cfg.x_range)
        y_lim = min(cfg.y_abs_max, cfg.fov_frac * x)
        y = rng.uniform(-y_lim, y_lim)
        vec = np.array([
            x, y, rng.normal(cfg.z_mean, cfg.z_sigma),
            max(cfg.min_box_dim, rng.normal(*cfg.car_length)),
            max(cfg.min_box_dim, rng.normal(*cfg.car_width)),
            max(cfg.min_box_dim, rng.normal(*cfg.car_height)),
            rng.uniform(-math.pi, math.pi),
        ])
        rfac = 1.0 + cfg.range_gain * math.hypot(x, y) / 80.0
        spread_mult, logit_sigma, confusion = cfg.fp_flavors[
            int(rng.integers(len(cfg.fp_flavors)))]
        spread = spread_base * spread_mult * deg.sample_spread_scale * rfac
        logit = cfg.fp_logit + deg.fp_confidence_boost + rng.normal(0.0, cfg.fp_logit_jitter)
        proposals.append(_lidar_proposal(vec, spread, logit, logit_sigma,
                                         confusion, cfg, rng))
    return proposals


def _synth_camera_box(cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    """A camera false-positive box at a plausible pseudo-range."""
    pseudo_x = rng.uniform(10.0, 60.0)
    h = cfg.focal * 1.6 / pseudo_x * math.exp(rng.normal(0.0, 0.15))
    w = h * rng.uniform(0.9, 1.6)
    u = rng.uniform(0.08 * cfg.image_width, 0.92 * cfg.image_width)
    v = cfg.image_height / 2.0 + cfg.focal * 1.0 / pseudo_x + rng.normal(0.0, 8.0)
    return np.array([u - w / 2, v - h, u + w / 2, v])


def _emit_camera(gt_boxes: list[Box3D], lidar_proposals: list[McProposal],
                 calib: Calibration, deg: ModalityDegradation,
                 cfg: GeneratorConfig, rng: np.random.Generator) -> list[McProposal]:
    proposals: list[McProposal] = []
    for gt in gt_boxes:
        try:
            proj = project_box3d(gt, calib)
        except ProjectionError:
            continue
        if rng.random() < deg.miss_rate:
            continue
        diag = diagonal(proj)
        rng_range = math.hypot(gt.cx, gt.cy)
        cx = 0.5 * (proj.x1 + proj.x2) + rng.normal(0.0, cfg.cam_tp_center_noise * diag * deg.tp_noise_scale)
        cy = 0.5 * (proj.y1 + proj.y2) + rng.normal(0.0, cfg.cam_tp_center_noise * diag * deg.tp_noise_scale)
        w = proj.width * math.exp(rng.normal(0.0, cfg.cam_tp_size_noise * deg.tp_noise_scale))
        h = proj.height * math.exp(rng.normal(0.0, cfg.cam_tp_size_noise * deg.tp_noise_scale))
        corners = np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
        dispersion = cfg.cam_tp_spread_rel * diag * deg.sample_spread_scale
        logit = (cfg.cam_tp_logit
                 - cfg.cam_tp_logit_range_penalty * rng_range / 80.0
                 + deg.confidence_bias
                 + rng.normal(0.0, cfg.tp_logit_jitter))
        proposals.append(_camera_proposal(corners, dispersion, logit,
                                          cfg.tp_sample_logit_sigma,
                                          cfg.tp_confusion, cfg, rng))
    # Anchors for correlated clutter: projections of LiDAR false
    # positives (proposals that match no ground-truth box).
    anchors: list[np.ndarray] = []
    for p in lidar_proposals:
        mean_box = mc_mean_box(p)
        if any(iou_3d(mean_box, gt) >= 0.5 for gt in gt_boxes):
            continue
        try:
            proj = project_box3d(mean_box, calib)
        except ProjectionError:
            continue
        anchors.append(proj.as_array())
    n_fp = int(rng.poisson(deg.fp_rate_per_frame))
    for _ in range(n_fp):
        use_ghost = rng.random() < cfg.ghost_fraction and anchors
        if use_ghost:
            base = anchors[int(rng.integers(len(anchors)))]
            diag = math.hypot(base[2] - base[0], base[3] - base[1])
            corners = base + rng.normal(0.0, 0.04 * diag, size=4)
        else:
            corners = _synth_camera_box(cfg, rng)
            diag = math.hypot(corners[2] - corners[0], corners[3] - corners[1])
        if corners[2] - corners[0] < 2.0:
            corners[2] = corners[0] + 2.0
        if corners[3] - corners[1] < 2.0:
            corners[3] = corners[1] + 2.0
        diag = math.hypot(corners[2] - corners[0], corners[3] - corners[1])
        spread_mult, logit_sigma, confusion = cfg.fp_flavors[
            int(rng.integers(len(cfg.fp_flavors)))]
        dispersion = cfg.cam_tp_spread_rel * diag * spread_mult * deg.sample_spread_scale
        logit = cfg.fp_logit + deg.fp_confidence_boost + rng.normal(0.0, cfg.fp_logit_jitter)
        proposals.append(_camera_proposal(corners, dispersion, logit,
                                          logit_sigma, confusion, cfg, rng))
    return proposals


def generate_frame(seed: int, frame_index: int, profile: DegradationProfile,
                   cfg: GeneratorConfig, calib: Calibration) -> Frame:
    """One frame from its three per-frame RNG substreams (scene, LiDAR,
    camera). The scene and LiDAR streams do not depend on the profile's
    camera parameters, so camera-only profiles leave them bit-identical."""
    rng_scene = np.random.default_rng([seed, frame_index, 0])
    rng_lidar = np.random.default_rng([seed, frame_index, 1])
    rng_camera = np.random.default_rng([seed, frame_index, 2])
    gt = _make_scene(cfg, rng_scene)
    lidar = _emit_lidar(gt, profile.lidar, cfg, rng_lidar)
    camera = _emit_camera(gt, lidar, calib, profile.camera, cfg, rng_camera)
    return Frame(
        frame_id=f"{profile.name}-{seed}-{frame_index:05d}",
        gt_boxes=tuple(gt),
        calib=calib,
        lidar_proposals=tuple(lidar),
        camera_proposals=tuple(camera),
        profile_tag=profile.name,
    )


def generate_dataset(seed: int, profile, n_frames: int,
                     cfg: GeneratorConfig = GeneratorConfig()) -> list[Frame]:
    """n_frames frames under one degradation profile, deterministic in
    (seed, profile, n_frames, cfg)."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    prof = resolve_profile(profile)
    calib = cfg.make_calibration()
    return [generate_frame(seed, i, prof, cfg, calib) for i in range(n_frames)]


@dataclass(frozen=True)
class PopulationCell:
    """Mean uncertainty channels of one (modality, TP/FP) population."""

    count: int
    entropy_mean: float | None
    deviation_mean: float | None
    reg_mean: float | None


def population_stats(frames, scored) -> dict[tuple[str, str], PopulationCell]:
    """Per (modality, tp/fp) means of the scored uncertainty channels.

    scored holds one (lidar, camera) pair of ScoredProposal lists per
    frame. TP/FP assignment uses the same greedy matching as validation
    statistics (3D IoU 0.7 for LiDAR, image IoU 0.5 for camera).
    """
    pools: dict[tuple[str, str], list[ScoredProposal]] = {
        (m, kind): [] for m in (LIDAR, CAMERA) for kind in ("tp", "fp")
    }
    for frame, (scored_l, scored_c) in zip(frames, scored):
        for modality, props in ((LIDAR, scored_l), (CAMERA, scored_c)):
            if not props:
                continue
            boxes = [p.mean_box for p in props]
            conf = [p.score for p in props]
            if modality == LIDAR:
                gts, iou_fn, thr = list(frame.gt_boxes), iou_3d, 0.7
            else:
                gts = []
                for gt in frame.gt_boxes:
                    try:
                        gts.append(project_box3d(gt, frame.calib))
                    except ProjectionError:
                        gts.append(None)
                iou_fn, thr = iou_2d, 0.5
            mask = match_to_ground_truth(boxes, conf, gts, iou_fn, thr)
            for p, is_tp in zip(props, mask):
                pools[(modality, "tp" if is_tp else "fp")].append(p)
    table = {}
    for key, props in pools.items():
        if props:
            table[key] = PopulationCell(
                count=len(props),
                entropy_mean=float(np.mean([p.cls_entropy for p in props])),
                deviation_mean=float(np.mean([p.cls_deviation_ratio for p in props])),
                reg_mean=float(np.mean([p.reg_uncertainty for p in props])),
            )
        else:
            table[key] = PopulationCell(count=0, entropy_mean=None,
                                        deviation_mean=None, reg_mean=None)
    return table


def frame_to_dict(frame: Frame) -> dict:
    def proposal_doc(p: McProposal) -> dict:
        return {
            "samples": [
                {"box": s.box.as_array().tolist(), "probs": s.class_probs.tolist()}
                for s in p.samples
            ],
            "data_var": p.data_var.tolist(),
        }

    return {
        "frame_id": frame.frame_id,
        "profile_tag": frame.profile_tag,
        "gt": [b.as_array().tolist() for b in frame.gt_boxes],
        "calib": {
            "P": frame.calib.p.ravel().tolist(),
            "w": frame.calib.image_width,
            "h": frame.calib.image_height,
        },
        "lidar": [proposal_doc(p) for p in frame.lidar_proposals],
        "camera": [proposal_doc(p) for p in frame.camera_proposals],
    }


def frame_from_dict(doc: dict) -> Frame:
    calib = Calibration(np.asarray(doc["calib"]["P"]).reshape(3, 4),
                        doc["calib"]["w"], doc["calib"]["h"])

    def parse(modality: str, entries) -> tuple[McProposal, ...]:
        out = []
        for entry in entries:
            samples = []
            for s in entry["samples"]:
                box = Box3D(*s["box"]) if modality == LIDAR else Box2D(*s["box"])
                samples.append(McSample(box, np.asarray(s["probs"])))
            out.append(McProposal(modality, tuple(samples), np.asarray(entry["data_var"])))
        return tuple(out)

    return Frame(
        frame_id=doc["frame_id"],
        gt_boxes=tuple(Box3D(*row) for row in doc["gt"]),
        calib=calib,
        lidar_proposals=parse(LIDAR, doc["lidar"]),
        camera_proposals=parse(CAMERA, doc["camera"]),
        profile_tag=doc.get("profile_tag", ""),
    )


def save_dataset(path, frames) -> None:
    """One frame per JSON line."""
    with open(path, "w", encoding="utf-8") as fh:
        for frame in frames:
            fh.write(json.dumps(frame_to_dict(frame)) + "\n")


def load_dataset(path) -> list[Frame]:
    frames = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                frames.append(frame_from_dict(json.loads(line)))
    return frames
