"""Late fusion of LiDAR and camera detection candidates.

Each LiDAR/camera proposal pair carries confidence and uncertainty
channels (see pairing). A small per-pair network maps those channels to
a fused confidence per LiDAR candidate. Three variants share the
machinery:

* moe (default): per-modality expert stacks compress each side's three
  channels into features, two gate heads read the joint feature and emit
  recalibrated quality scores, and the fusion head then sees
  [image IoU, camera quality, lidar quality, normalized distance].
* flat (use_moe=False): no expert stage; the fusion head consumes the
  raw channels of both modalities directly through an 8-channel input.
* baseline: the head sees only the original detector confidences
  [image IoU, camera score, lidar score, normalized distance].

Training is joint and end-to-end: focal loss on the fused per-candidate
logits against greedy IoU-assigned targets, Adam with decoupled weight
decay under a one-cycle schedule, snapshotting the epoch with the best
validation moderate AP.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .evaluation import NoGroundTruth, ap_3d
from .geometry import Box3D, Calibration, iou_3d, nms
from .pairing import NULL_CAMERA, PairingConfig, ProposalPairSet, build_pairs
from .uncertainty import ScoredProposal, ScoringConfig, ValidationStats, score_frame
from . import nn
from .nn import (
    NonFiniteValues,
    Parameter,
    ResBlock,
    ShapeMismatch,
    Tensor,
    adam_step,
    concat_channels,
    focal_loss,
    gather,
    one_cycle_lr,
    segment_reduce,
    sigmoid,
    sigmoid_values,
)

AGGREGATIONS = ("max", "mean", "sum")

LOG_FIELDS = ("epoch", "loss", "val_ap_easy", "val_ap_moderate", "val_ap_hard", "lr")


class EmptyDataset(ValueError):
    """Raised when training is asked to run on zero usable frames."""


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces non-finite values."""

    def __init__(self, epoch: int, step: int, cause: str):
        super().__init__(f"training diverged at epoch {epoch}, step {step}: {cause}")
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class FusionConfig:
    """Variant switches plus loss/optimizer hyperparameters.

    baseline=True ignores the ablation flags and trains the confidence-
    only head; use_moe=False routes the six uncertainty channels straight
    into an extended 8-channel head.
    """

    baseline: bool = False
    use_moe: bool = True
    use_dr: bool = True
    use_reg: bool = True
    aggregation: str = "max"
    d_max: float = 80.0
    nms_threshold: float | None = None   # 0.5 baseline / 0.7 otherwise
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    epochs: int = 20
    lr_initial: float = 6e-5
    lr_max: float = 6e-4
    pct_start: float = 0.3
    final_div: float = 25.0
    weight_decay: float = 0.01
    target_iou: float = 0.7
    pairing_mode: str = "sparse"
    seed: int = 0

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.d_max <= 0:
            raise ValueError("d_max must be positive")
        if self.nms_threshold is None:
            object.__setattr__(self, "nms_threshold",
                               0.5 if self.baseline else 0.7)

    @property
    def method(self) -> str:
        """Stable label for result tables."""
        if self.baseline:
            return "baseline"
        name = "fused" if self.use_moe else "fused_no_moe"
        if not self.use_dr:
            name += "_no_dr"
        if not self.use_reg:
            name += "_no_reg"
        return name


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float
    frame_id: str


@dataclass(frozen=True)
class FrameBatch:
    """One frame's pairing flattened into arrays the networks consume.

    Pair channels stay unablated here; ablation masks are applied at
    forward time so one prepared dataset serves every variant.
    """

    frame_id: str
    profile_tag: str
    gt_boxes: tuple[Box3D, ...]
    calib: Calibration
    lidar_boxes: tuple[Box3D, ...]
    t_lidar: np.ndarray            # (K, 3) per-pair lidar channels
    t_camera: np.ndarray           # (K, 3) per-pair camera channels
    image_iou: np.ndarray          # (K,)
    distance: np.ndarray           # (K,) meters, unnormalized
    pair_lidar_index: np.ndarray   # (K,) int
    pair_camera_pos: np.ndarray    # (K,) compact camera position, -1 for null
    null_mask: np.ndarray          # (K,) 1.0 real pair / 0.0 null pair
    lidar_segments: tuple          # per lidar proposal: pair index arrays
    camera_segments: tuple         # per paired camera: pair index arrays
    labels: np.ndarray             # (n_lidar,) training targets

    @property
    def n_pairs(self) -> int:
        return int(self.pair_lidar_index.shape[0])

    @property
    def n_lidar(self) -> int:
        return len(self.lidar_boxes)


def assign_targets(lidar_boxes, gt_boxes, iou_threshold: float = 0.7) -> np.ndarray:
    """Greedy one-to-one labels: 1 iff matched to some GT at IoU >= threshold.

    Candidate matches are ranked by descending IoU over all (proposal, gt)
    combinations; each side is used at most once.
    """
    n = len(lidar_boxes)
    labels = np.zeros(n, dtype=np.float64)
    if not gt_boxes or n == 0:
        return labels
    cands = []
    for i, box in enumerate(lidar_boxes):
        for j, gt in enumerate(gt_boxes):
            iou = iou_3d(box, gt)
            if iou >= iou_threshold:
                cands.append((-iou, i, j))
    used_gt = set()
    for _, i, j in sorted(cands):
        if labels[i] == 1.0 or j in used_gt:
            continue
        labels[i] = 1.0
        used_gt.add(j)
    return labels


def prepare_frame(frame, stats: ValidationStats,
                  scoring: ScoringConfig = ScoringConfig(),
                  pairing: PairingConfig = PairingConfig(),
                  frame_index: int = 0,
                  target_iou: float = 0.7) -> FrameBatch:
    """Score a frame's proposals, pair them, and flatten to arrays."""
    scored_l, scored_c = score_frame(
        list(frame.lidar_proposals), list(frame.camera_proposals), stats,
        scoring, stream_base=(scoring.seed, frame_index))
    pair_set = build_pairs(scored_l, scored_c, frame.calib, pairing, frame.frame_id)

    k = len(pair_set)
    pli = np.array([p.lidar_index for p in pair_set.pairs], dtype=np.int64)
    iou = np.array([p.image_iou for p in pair_set.pairs], dtype=np.float64)
    dist = np.array([p.distance_m for p in pair_set.pairs], dtype=np.float64)
    pli = pli.reshape(k)
    iou = iou.reshape(k)
    dist = dist.reshape(k)

    lidar_segments = tuple(np.flatnonzero(pli == i) for i in range(len(scored_l)))
    real_cams = sorted({p.camera_index for p in pair_set.pairs
                        if p.camera_index != NULL_CAMERA})
    pos_of = {c: n for n, c in enumerate(real_cams)}
    cam_pos = np.array([pos_of.get(p.camera_index, -1) for p in pair_set.pairs],
                       dtype=np.int64).reshape(k)
    camera_segments = tuple(np.flatnonzero(cam_pos == n) for n in range(len(real_cams)))

    boxes = tuple(p.mean_box for p in scored_l)
    return FrameBatch(
        frame_id=frame.frame_id,
        profile_tag=getattr(frame, "profile_tag", ""),
        gt_boxes=tuple(frame.gt_boxes),
        calib=frame.calib,
        lidar_boxes=boxes,
        t_lidar=pair_set.t_lidar,
        t_camera=pair_set.t_camera,
        image_iou=iou,
        distance=dist,
        pair_lidar_index=pli,
        pair_camera_pos=cam_pos,
        null_mask=(cam_pos >= 0).astype(np.float64),
        lidar_segments=lidar_segments,
        camera_segments=camera_segments,
        labels=assign_targets(boxes, tuple(frame.gt_boxes), target_iou),
    )


def prepare_dataset(frames, stats: ValidationStats,
                    scoring: ScoringConfig = ScoringConfig(),
                    pairing: PairingConfig = PairingConfig(),
                    target_iou: float = 0.7) -> list[FrameBatch]:
    return [prepare_frame(f, stats, scoring, pairing, i, target_iou)
            for i, f in enumerate(frames)]


class ExpertGateNetwork:
    """Per-modality expert stacks plus joint-feature gate heads.

    Each expert lifts its modality's (K, 3) channels to (K, 18); the two
    outputs concatenate to a (K, 36) joint feature read by one gate per
    modality, whose sigmoid output is the recalibrated quality score.
    """

    EXPERT_TOPOLOGY = ((3, 9), (9, 18), (18, 18))

    def __init__(self, rng: np.random.Generator):
        self.expert_l = [ResBlock(f"expert_l{i}", c_in, c_out, rng)
                         for i, (c_in, c_out) in enumerate(self.EXPERT_TOPOLOGY)]
        self.expert_i = [ResBlock(f"expert_i{i}", c_in, c_out, rng)
                         for i, (c_in, c_out) in enumerate(self.EXPERT_TOPOLOGY)]
        self.gate_l = ResBlock("gate_l", 36, 1, rng, final_relu=False)
        self.gate_i = ResBlock("gate_i", 36, 1, rng, final_relu=False)

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for block in (*self.expert_l, *self.expert_i, self.gate_l, self.gate_i):
            params += block.parameters()
        return params

    def forward(self, t_lidar: Tensor, t_camera: Tensor) -> tuple[Tensor, Tensor]:
        """(1, K, 3) channel tensors -> two (K,) recalibrated scores."""
        if t_lidar.shape != t_camera.shape:
            raise ShapeMismatch(f"modality tensors differ: "
                                f"{t_lidar.shape} vs {t_camera.shape}")
        k = t_lidar.shape[1]
        f_l = t_lidar
        for block in self.expert_l:
            f_l = block(f_l)
        f_i = t_camera
        for block in self.expert_i:
            f_i = block(f_i)
        joint = concat_channels([f_l, f_i])
        s_l = sigmoid(nn.reshape(self.gate_l(joint), (k,)))
        s_i = sigmoid(nn.reshape(self.gate_i(joint), (k,)))
        return s_l, s_i

    def forward_values(self, t_lidar: np.ndarray,
                       t_camera: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Gradient-free twin of forward() on plain (K, 3) arrays."""
        f_l = t_lidar
        for block in self.expert_l:
            f_l = block.forward_values(f_l)
        f_i = t_camera
        for block in self.expert_i:
            f_i = block.forward_values(f_i)
        joint = np.concatenate([f_l, f_i], axis=1)
        s_l = sigmoid_values(self.gate_l.forward_values(joint)[:, 0])
        s_i = sigmoid_values(self.gate_i.forward_values(joint)[:, 0])
        return s_l, s_i


class PairFusionHead:
    """Residual 1x1-conv stack mapping per-pair channels to one logit.

    The input layout is [image_iou, camera score, lidar score, distance]
    for 4-channel heads; the 8-channel variant appends the four raw
    uncertainty channels [dr_L, u_L, dr_I, u_I].
    """

    def __init__(self, c_in: int, rng: np.random.Generator):
        widths = ((c_in, 18), (18, 36), (36, 36), (36, 1))
        self.c_in = c_in
        self.blocks = [ResBlock(f"head{i}", a, b, rng,
                                final_relu=(i < len(widths) - 1))
                       for i, (a, b) in enumerate(widths)]

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for block in self.blocks:
            params += block.parameters()
        return params

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x

    def forward_values(self, x: np.ndarray) -> np.ndarray:
        for block in self.blocks:
            x = block.forward_values(x)
        return x[:, 0]


def recalibrate_scores(net: ExpertGateNetwork, t_lidar: np.ndarray,
                       t_camera: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair recalibrated quality scores for both modalities.

    Accepts (K, 3) or (1, K, 3) channel arrays; returns two (K,) arrays.
    """
    t_l = np.asarray(t_lidar, dtype=np.float64)
    t_c = np.asarray(t_camera, dtype=np.float64)
    if t_l.ndim == 3:
        t_l = t_l[0]
    if t_c.ndim == 3:
        t_c = t_c[0]
    if t_l.shape != t_c.shape or t_l.ndim != 2 or t_l.shape[1] != 3:
        raise ShapeMismatch(f"expected (K, 3) channels, got {t_l.shape} / {t_c.shape}")
    return net.forward_values(t_l, t_c)


def substitute_scores(pair_set: ProposalPairSet, s_l_pair, s_i_pair,
                      lidar: list[ScoredProposal],
                      camera: list[ScoredProposal]):
    """Replace proposal confidences with the max of their pair scores.

    Every LiDAR proposal appears in at least one pair (null fallback), so
    its score is always replaced. Camera proposals outside any pair keep
    their original score; null pairs contribute to the LiDAR side only.
    """
    s_l_pair = np.asarray(s_l_pair, dtype=np.float64).reshape(-1)
    s_i_pair = np.asarray(s_i_pair, dtype=np.float64).reshape(-1)
    if s_l_pair.shape[0] != len(pair_set) or s_i_pair.shape[0] != len(pair_set):
        raise ShapeMismatch("one score per pair required")
    best_l = {}
    best_i = {}
    for k, pair in enumerate(pair_set.pairs):
        i = pair.lidar_index
        best_l[i] = max(best_l.get(i, -np.inf), s_l_pair[k])
        if not pair.is_null:
            j = pair.camera_index
            best_i[j] = max(best_i.get(j, -np.inf), s_i_pair[k])
    new_l = [replace(p, score=float(best_l[i])) for i, p in enumerate(lidar)]
    new_c = [replace(p, score=float(best_i[j])) if j in best_i else p
             for j, p in enumerate(camera)]
    return new_l, new_c


def fuse_pairs(head: PairFusionHead, pair_set: ProposalPairSet,
               scores_l, scores_i, d_max: float = 80.0,
               aggregation: str = "max") -> tuple[np.ndarray, np.ndarray]:
    """Per-pair logits and per-LiDAR-proposal fused scores.

    scores_l / scores_i are per-proposal confidences (recalibrated or
    original); null pairs read a camera score of zero. The fused score of
    a proposal is sigmoid of the aggregate of its pair logits.
    """
    scores_l = np.asarray(scores_l, dtype=np.float64)
    scores_i = np.asarray(scores_i, dtype=np.float64)
    k = len(pair_set)
    if k == 0:
        return np.zeros(0), np.zeros(0)
    feats = np.empty((k, 4), dtype=np.float64)
    for n, pair in enumerate(pair_set.pairs):
        s_i = 0.0 if pair.is_null else float(scores_i[pair.camera_index])
        feats[n] = (pair.image_iou, s_i, float(scores_l[pair.lidar_index]),
                    pair.distance_m / d_max)
    logits = head.forward_values(feats)
    n_lidar = max(p.lidar_index for p in pair_set.pairs) + 1
    fused = np.empty(n_lidar, dtype=np.float64)
    for i in range(n_lidar):
        group = logits[[n for n, p in enumerate(pair_set.pairs) if p.lidar_index == i]]
        fused[i] = _aggregate(group, aggregation)
    return logits, sigmoid_values(fused)


def _aggregate(values: np.ndarray, mode: str) -> float:
    if mode == "max":
        return float(values.max())
    if mode == "mean":
        return float(values.mean())
    if mode == "sum":
        return float(values.sum())
    raise ValueError(f"unknown aggregation {mode!r}")


class FusionModel:
    """Config-selected variant bundling the networks and their forward paths."""

    def __init__(self, config: FusionConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        if config.baseline or not config.use_moe:
            self.expert_gate = None
        else:
            self.expert_gate = ExpertGateNetwork(rng)
        c_in = 4 if (config.baseline or config.use_moe) else 8
        self.head = PairFusionHead(c_in, rng)

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        if self.expert_gate is not None:
            params += self.expert_gate.parameters()
        params += self.head.parameters()
        return params

    def _channels(self, batch: FrameBatch) -> tuple[np.ndarray, np.ndarray]:
        """Ablation-masked copies of the pair channel arrays."""
        t_l = batch.t_lidar.copy()
        t_c = batch.t_camera.copy()
        if not self.config.use_dr:
            t_l[:, 1] = 0.0
            t_c[:, 1] = 0.0
        if not self.config.use_reg:
            t_l[:, 2] = 0.0
            t_c[:, 2] = 0.0
        return t_l, t_c

    # Graph path (training).

    def fused_logits(self, batch: FrameBatch) -> Tensor:
        """Differentiable per-LiDAR-proposal fused logits."""
        k = batch.n_pairs
        if k == 0:
            raise EmptyDataset(f"frame {batch.frame_id!r} has no pairs")
        cfg = self.config
        iou_col = Tensor(batch.image_iou.reshape(1, k, 1))
        dist_col = Tensor((batch.distance / cfg.d_max).reshape(1, k, 1))
        if cfg.baseline:
            x = concat_channels([
                iou_col,
                Tensor(batch.t_camera[:, 0].reshape(1, k, 1)),
                Tensor(batch.t_lidar[:, 0].reshape(1, k, 1)),
                dist_col,
            ])
        elif cfg.use_moe:
            t_l, t_c = self._channels(batch)
            s_pair_l, s_pair_i = self.expert_gate.forward(
                Tensor(t_l[None]), Tensor(t_c[None]))
            s_prop_l = segment_reduce(s_pair_l, list(batch.lidar_segments),
                                      cfg.aggregation)
            s_l = gather(s_prop_l, batch.pair_lidar_index)
            if batch.camera_segments:
                s_prop_i = segment_reduce(s_pair_i, list(batch.camera_segments),
                                          cfg.aggregation)
                s_i = gather(s_prop_i, batch.pair_camera_pos, mask=batch.null_mask)
            else:
                s_i = Tensor(np.zeros(k))
            x = concat_channels([
                iou_col,
                nn.reshape(s_i, (1, k, 1)),
                nn.reshape(s_l, (1, k, 1)),
                dist_col,
            ])
        else:
            t_l, t_c = self._channels(batch)
            x = concat_channels([
                iou_col,
                Tensor(t_c[:, 0].reshape(1, k, 1)),
                Tensor(t_l[:, 0].reshape(1, k, 1)),
                dist_col,
                Tensor(t_l[:, 1].reshape(1, k, 1)),
                Tensor(t_l[:, 2].reshape(1, k, 1)),
                Tensor(t_c[:, 1].reshape(1, k, 1)),
                Tensor(t_c[:, 2].reshape(1, k, 1)),
            ])
        if x.shape[2] != self.head.c_in:
            raise ShapeMismatch(f"head expects {self.head.c_in} channels, "
                                f"got {x.shape[2]}")
        pair_logits = nn.reshape(self.head.forward(x), (k,))
        return segment_reduce(pair_logits, list(batch.lidar_segments),
                              cfg.aggregation)

    def loss(self, batch: FrameBatch) -> Tensor:
        fused = self.fused_logits(batch)
        return focal_loss(fused, batch.labels,
                          self.config.focal_alpha, self.config.focal_gamma)

    # Value path (inference): bit-identical arithmetic, no graph.

    def fused_scores(self, batch: FrameBatch) -> np.ndarray:
        if batch.n_lidar == 0:
            return np.zeros(0)
        k = batch.n_pairs
        cfg = self.config
        dist = batch.distance / cfg.d_max
        if cfg.baseline:
            feats = np.column_stack([batch.image_iou, batch.t_camera[:, 0],
                                     batch.t_lidar[:, 0], dist])
        elif cfg.use_moe:
            t_l, t_c = self._channels(batch)
            s_pair_l, s_pair_i = self.expert_gate.forward_values(t_l, t_c)
            s_prop_l = np.array([_aggregate(s_pair_l[idx], cfg.aggregation)
                                 for idx in batch.lidar_segments])
            s_l = s_prop_l[batch.pair_lidar_index]
            if batch.camera_segments:
                s_prop_i = np.array([_aggregate(s_pair_i[idx], cfg.aggregation)
                                     for idx in batch.camera_segments])
                safe = np.clip(batch.pair_camera_pos, 0, len(s_prop_i) - 1)
                s_i = s_prop_i[safe] * batch.null_mask
            else:
                s_i = np.zeros(k)
            feats = np.column_stack([batch.image_iou, s_i, s_l, dist])
        else:
            t_l, t_c = self._channels(batch)
            feats = np.column_stack([batch.image_iou, t_c[:, 0], t_l[:, 0], dist,
                                     t_l[:, 1], t_l[:, 2], t_c[:, 1], t_c[:, 2]])
        pair_logits = self.head.forward_values(feats)
        fused = np.array([_aggregate(pair_logits[idx], cfg.aggregation)
                          for idx in batch.lidar_segments])
        return sigmoid_values(fused)


def infer(model: FusionModel, batch: FrameBatch) -> list[Detection]:
    """Fused scores followed by NMS; detections come out score-descending."""
    scores = model.fused_scores(batch)
    if scores.size == 0:
        return []
    kept = nms(list(zip(batch.lidar_boxes, map(float, scores))),
               model.config.nms_threshold)
    return [Detection(box, score, batch.frame_id) for box, score in kept]


def baseline_infer(model: FusionModel, batch: FrameBatch) -> list[Detection]:
    """Inference with the confidence-only head; model must be a baseline."""
    if not model.config.baseline:
        raise ValueError("baseline_infer requires a baseline model")
    return infer(model, batch)


def infer_dataset(model: FusionModel, batches, max_workers: int | None = None
                  ) -> list[Detection]:
    """Frame-ordered inference; results are identical for any worker count."""
    batches = list(batches)
    if max_workers is None or max_workers <= 1:
        per_frame = [infer(model, b) for b in batches]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            per_frame = list(pool.map(lambda b: infer(model, b), batches))
    out: list[Detection] = []
    for dets in per_frame:
        out.extend(dets)
    return out


@dataclass
class TrainResult:
    model: FusionModel
    log: list[dict]
    best_epoch: int
    best_moderate: float | None


def _validation_ap(model: FusionModel, val_batches) -> tuple:
    dets = infer_dataset(model, val_batches)
    try:
        res = ap_3d(dets, val_batches)
    except NoGroundTruth:
        return None, None, None
    return res.easy.ap, res.moderate.ap, res.hard.ap


def train(train_batches, val_batches, config: FusionConfig = FusionConfig()
          ) -> TrainResult:
    """End-to-end training of the configured variant.

    One optimizer step per frame, frames reshuffled each epoch with a
    seeded generator, a one-cycle schedule over epochs * frames total
    steps, and per-epoch validation AP. Returns the snapshot with the
    best validation moderate AP (ties keep the earlier epoch); without
    usable validation AP the final epoch wins.
    """
    usable = [b for b in train_batches if b.n_pairs > 0]
    if not usable:
        raise EmptyDataset("no frames with proposal pairs to train on")
    val_batches = list(val_batches)

    model = FusionModel(config)
    params = model.parameters()
    total_steps = config.epochs * len(usable)
    shuffle_rng = np.random.default_rng([config.seed, 101])

    log: list[dict] = []
    best_metric = -np.inf
    best_epoch = 0
    best_moderate: float | None = None
    best_values = [p.data.copy() for p in params]

    step = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(usable))
        epoch_losses = []
        lr = config.lr_initial
        for idx in order:
            lr = one_cycle_lr(step, total_steps, initial=config.lr_initial,
                              max_lr=config.lr_max, pct_start=config.pct_start,
                              final_div=config.final_div)
            try:
                loss = model.loss(usable[idx])
                epoch_losses.append(float(loss.data))
                loss.backward()
                adam_step(params, lr, step + 1,
                          weight_decay=config.weight_decay)
            except NonFiniteValues as exc:
                raise TrainingDiverged(epoch, step, str(exc)) from exc
            step += 1

        easy, moderate, hard = _validation_ap(model, val_batches)
        log.append({"epoch": epoch, "loss": float(np.mean(epoch_losses)),
                    "val_ap_easy": easy, "val_ap_moderate": moderate,
                    "val_ap_hard": hard, "lr": lr})
        metric = moderate if moderate is not None else float(epoch)
        if metric > best_metric:
            best_metric = metric
            best_epoch = epoch
            best_moderate = moderate
            best_values = [p.data.copy() for p in params]

    for p, values in zip(params, best_values):
        p.tensor.data = values.copy()
    return TrainResult(model=model, log=log, best_epoch=best_epoch,
                       best_moderate=best_moderate)


def save_model(path, model: FusionModel, extra_meta: dict | None = None):
    """Checkpoint the parameters with the config embedded in the metadata."""
    meta = {"config": asdict(model.config)}
    if extra_meta:
        meta.update(extra_meta)
    nn.save_checkpoint(path, model.parameters(), meta)


def load_model(path) -> tuple[FusionModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, metadata)."""
    meta, stored = nn.load_checkpoint(path)
    if "config" not in meta:
        raise nn.CheckpointError("checkpoint metadata lacks a fusion config")
    model = FusionModel(FusionConfig(**meta["config"]))
    nn.restore_parameters(model.parameters(), stored)
    return model, meta
