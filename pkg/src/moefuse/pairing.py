"""Construction of per-frame LiDAR x camera proposal pairs.

Each pair carries the image-plane IoU between the projected 3D box and
the 2D box, the LiDAR proposal's ground-plane range, and one 3-channel
row per modality: [score, cls_deviation_ratio, reg_uncertainty].

A LiDAR proposal with no overlapping camera partner still produces one
null pair (camera channels zeroed) so no 3D candidate is dropped when
the camera is blinded or the box leaves the image.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Calibration, ProjectionError, iou_2d, project_box3d
from .uncertainty import ScoredProposal

# camera_index of a null pair.
NULL_CAMERA = -1

PAIRING_MODES = ("sparse", "full")


@dataclass(frozen=True)
class PairingConfig:
    """sparse keeps only positive-IoU combinations (plus null pairs);
    full emits every LiDAR x camera combination regardless of overlap."""

    mode: str = "sparse"

    def __post_init__(self):
        if self.mode not in PAIRING_MODES:
            raise ValueError(f"unknown pairing mode {self.mode!r}")


@dataclass(frozen=True)
class ProposalPair:
    lidar_index: int
    camera_index: int
    image_iou: float
    distance_m: float

    @property
    def is_null(self) -> bool:
        return self.camera_index == NULL_CAMERA


@dataclass(frozen=True)
class ProposalPairSet:
    """All pairs of one frame plus the stacked per-modality channel rows."""

    frame_id: str
    pairs: tuple[ProposalPair, ...]
    t_lidar: np.ndarray
    t_camera: np.ndarray

    def __len__(self) -> int:
        return len(self.pairs)


def _channels(p: ScoredProposal) -> list[float]:
    return [p.score, p.cls_deviation_ratio, p.reg_uncertainty]


def build_pairs(lidar: list[ScoredProposal], camera: list[ScoredProposal],
                calib: Calibration, cfg: PairingConfig = PairingConfig(),
                frame_id: str = "") -> ProposalPairSet:
    """Pair every LiDAR proposal with its overlapping camera proposals.

    Pairs are ordered by (lidar_index, camera_index) with null pairs last
    within their LiDAR group. Empty inputs yield an empty set.
    """
    pairs: list[ProposalPair] = []
    rows_l: list[list[float]] = []
    rows_c: list[list[float]] = []
    for i, lp in enumerate(lidar):
        distance = math.hypot(lp.mean_box.cx, lp.mean_box.cy)
        try:
            projected = project_box3d(lp.mean_box, calib)
        except ProjectionError:
            projected = None
        found = False
        for j, cp in enumerate(camera):
            iou = iou_2d(projected, cp.mean_box) if projected is not None else 0.0
            if cfg.mode == "sparse" and iou <= 0.0:
                continue
            pairs.append(ProposalPair(i, j, iou, distance))
            rows_l.append(_channels(lp))
            rows_c.append(_channels(cp))
            found = True
        if not found:
            pairs.append(ProposalPair(i, NULL_CAMERA, 0.0, distance))
            rows_l.append(_channels(lp))
            rows_c.append([0.0, 0.0, 0.0])
    t_lidar = np.asarray(rows_l, dtype=np.float64).reshape(len(pairs), 3)
    t_camera = np.asarray(rows_c, dtype=np.float64).reshape(len(pairs), 3)
    if not (np.all(np.isfinite(t_lidar)) and np.all(np.isfinite(t_camera))):
        raise ValueError("non-finite channel values in pair set")
    return ProposalPairSet(frame_id, tuple(pairs), t_lidar, t_camera)


def tensor_channels(pair_set: ProposalPairSet, use_dr: bool = True,
                    use_reg: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Channel tensors with disabled ablation channels zeroed in place of
    removal, keeping the network input arity unchanged."""
    t_lidar = pair_set.t_lidar.copy()
    t_camera = pair_set.t_camera.copy()
    if not use_dr:
        t_lidar[:, 1] = 0.0
        t_camera[:, 1] = 0.0
    if not use_reg:
        t_lidar[:, 2] = 0.0
        t_camera[:, 2] = 0.0
    return t_lidar, t_camera
