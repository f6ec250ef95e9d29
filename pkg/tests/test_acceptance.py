"""Release gate: one test per acceptance criterion, each printing a
CRITERION n: PASS line with the measured numbers and asserting its time
budget. Oracles are independent re-derivations (batched finite
differences, Monte-Carlo volume sampling, prefix-rematch AP), never the
library's own code paths.
"""

import contextlib
import io
import math
import time
from types import SimpleNamespace

import numpy as np
import pytest

from moefuse.cli import main as cli_main
from moefuse.evaluation import (DIFFICULTIES, ApResult, BinResult, ap_3d,
                                difficulty_bin, paired_significance)
from moefuse.fusion import (FrameBatch, FusionConfig, FusionModel,
                            infer_dataset, prepare_dataset, train)
from moefuse.geometry import (Box2D, Box3D, Calibration, ProjectionError,
                              iou_2d, iou_3d, project_box3d)
from moefuse.nn import Tensor, attenuated_l1, focal_loss
from moefuse.simgen import generate_dataset
from moefuse.uncertainty import (CAMERA, LIDAR, McProposal, McSample,
                                 ModalityStats, ValidationStats,
                                 compute_validation_stats, data_variance_term,
                                 deviation_ratio, entropy_score,
                                 match_to_ground_truth, regression_score,
                                 score_frame, total_variance)

PROFILES = ("clear", "blind", "adversarial", "fog", "snow")
N_FRAMES = 500

FOCAL = 700.0
CALIB = Calibration(np.array([[640.0, -FOCAL, 0.0, 0.0],
                              [192.0, 0.0, -FOCAL, 0.0],
                              [1.0, 0.0, 0.0, 0.0]]), 1280, 384)


def elapsed_since(t0):
    return time.perf_counter() - t0


# ---------------------------------------------------------------------------
# Shared full-scale data: 500 frames per profile, statistics from the clear
# validation split, train mix of 250 clear + 250 fog training frames.

def split_indices(n, seed=0):
    perm = np.random.default_rng([seed, 17]).permutation(n)
    n_tr = int(0.70 * n)
    n_va = int(0.15 * n)
    return perm[:n_tr], perm[n_tr:n_tr + n_va], perm[n_tr + n_va:]


@pytest.fixture(scope="module")
def corpus():
    return {p: generate_dataset(0, p, N_FRAMES) for p in PROFILES}


@pytest.fixture(scope="module")
def val_stats(corpus):
    _, va, _ = split_indices(N_FRAMES)
    return compute_validation_stats([corpus["clear"][i] for i in va])


@pytest.fixture(scope="module")
def headline_sets(corpus, val_stats):
    tr, va, te = split_indices(N_FRAMES)
    mix = ([corpus["clear"][i] for i in tr[:250]]
           + [corpus["fog"][i] for i in tr[:250]])
    train_b = prepare_dataset(mix, val_stats)
    val_b = prepare_dataset([corpus["clear"][i] for i in va], val_stats)
    tests = {p: ([corpus[p][i] for i in te],
                 prepare_dataset([corpus[p][i] for i in te], val_stats))
             for p in ("clear", "blind", "fog")}
    return SimpleNamespace(train=train_b, val=val_b, tests=tests)


def run_one(sets, config):
    """Train one configuration and report per-profile test moderate AP."""
    result = train(sets.train, sets.val, config)
    out = {}
    for profile, (frames, batches) in sets.tests.items():
        dets = infer_dataset(result.model, batches)
        out[profile] = ap_3d(dets, frames).moderate.ap
    return out


# ---------------------------------------------------------------------------
# Criterion 1: formula unit suite on the tabulated examples.

REF_STATS = ValidationStats({
    LIDAR: ModalityStats(0.3, 0.1, 0.8, 0.1, 0.0, 1.0),
    CAMERA: ModalityStats(0.3, 0.1, 0.8, 0.1, 0.0, 1.0),
})

PROBS = np.array([0.7, 0.2, 0.1])


def lidar_prop(boxes, data_var=None):
    samples = tuple(McSample(b, PROBS) for b in boxes)
    dv = np.zeros(7) if data_var is None else np.asarray(data_var, float)
    return McProposal(LIDAR, samples, dv)


def camera_prop(boxes, data_var=None):
    samples = tuple(McSample(b, PROBS) for b in boxes)
    dv = np.zeros(4) if data_var is None else np.asarray(data_var, float)
    return McProposal(CAMERA, samples, dv)


def test_criterion_1_formula_unit_suite():
    t0 = time.perf_counter()
    tol = 1e-9

    # Entropy of the MC-mean class distribution.
    assert abs(entropy_score([0.5, 0.5]) - math.log(2.0)) <= tol
    assert abs(entropy_score([1.0, 0.0]) - 0.0) <= tol
    assert abs(entropy_score([0.9, 0.1])
               - (-(0.9 * math.log(0.9) + 0.1 * math.log(0.1)))) <= tol

    # Deviation ratio against mu_u=0.3, sigma_u=0.1, mu_s=0.8, sigma_s=0.1.
    assert abs(deviation_ratio(0.25, 0.95, REF_STATS, LIDAR) - 1.0) <= tol
    assert abs(deviation_ratio(0.5, 0.95, REF_STATS, LIDAR) - 0.75) <= tol
    assert abs(deviation_ratio(0.6, 0.6, REF_STATS, LIDAR)
               - (0.3 / 0.5) * (0.8 / 1.1)) <= tol

    # Total variance: trace of the biased sample covariance.
    assert abs(total_variance(np.array([[1.0, 2.0], [1.0, 2.0]])) - 0.0) <= tol
    assert abs(total_variance(np.array([[0.0], [2.0]])) - 1.0) <= tol
    assert abs(total_variance(np.array([[0.0, 0.0], [2.0, 2.0]])) - 2.0) <= tol

    # Data-variance term: deterministic sum and the sampled estimator.
    det_prop = camera_prop([Box2D(0.0, 0.0, 3.0, 4.0)],
                           data_var=[1.0, 2.0, 3.0, 4.0])
    assert abs(data_variance_term(det_prop, "deterministic") - 10.0) <= tol
    ones_prop = camera_prop([Box2D(0.0, 0.0, 3.0, 4.0)],
                            data_var=[1.0, 1.0, 1.0, 1.0])
    sampled = data_variance_term(ones_prop, "sampled", n_samples=100_000)
    assert abs(sampled - 4.0) <= 0.05 * 4.0

    # Regression score: diagonal normalization (camera) and standardization.
    cam = camera_prop([Box2D(0.0, 0.0, 3.0, 4.0)],
                      data_var=[1.0, 2.0, 3.0, 4.0])
    assert abs(regression_score(cam, REF_STATS) - 2.0) <= tol
    lid_stats = ValidationStats({
        LIDAR: ModalityStats(0.3, 0.1, 0.8, 0.1, 4.0, 2.0),
        CAMERA: ModalityStats(0.3, 0.1, 0.8, 0.1, 4.0, 2.0),
    })
    lid = lidar_prop([Box3D(0, 0, 0, 4.0, 2.0, 1.5, 0.0),
                      Box3D(2, 2, 2, 4.0, 2.0, 1.5, 0.0)],
                     data_var=[1.0, 0, 0, 0, 0, 0, 0])
    assert abs(regression_score(lid, lid_stats) - 0.0) <= tol
    single = lidar_prop([Box3D(10, 0, 0, 4.0, 2.0, 1.5, 0.0)])
    assert abs(regression_score(single, REF_STATS) - 0.0) <= tol

    # Attenuated L1 regression loss.
    assert abs(attenuated_l1([1.0, 2.0], [1.0, 2.0], [0.0, 0.0]) - 0.0) <= tol
    assert abs(attenuated_l1([0.0], [2.0], [0.0]) - 1.0) <= tol
    assert abs(attenuated_l1([2.0], [2.0], [1.0]) - 0.5) <= tol

    # Focal loss: hand value, confident limit, BCE reduction.
    half = focal_loss(Tensor(np.array([0.0])), [1.0])
    assert abs(float(half.data) - 0.25 * 0.25 * math.log(2.0)) <= tol
    confident = focal_loss(Tensor(np.array([40.0])), [1.0])
    assert abs(float(confident.data)) <= tol
    rng = np.random.default_rng(11)
    z = rng.normal(size=24)
    p = 1.0 / (1.0 + np.exp(-z))
    bce = float(-np.log(p).mean())
    got = focal_loss(Tensor(z), np.ones(24), alpha=1.0, gamma=0.0)
    assert abs(float(got.data) - bce) <= 1e-10

    dt = elapsed_since(t0)
    assert dt < 1.0
    print(f"CRITERION 1: PASS -- all tabulated formula examples within "
          f"1e-9 ({dt:.2f}s)")


# ---------------------------------------------------------------------------
# Criterion 2: gradient fidelity of the composite fusion loss against a
# batched central-finite-difference oracle (independent numpy forward).

FD_H = 1e-6
EXPERT_TOPO = ((3, 9), (9, 18), (18, 18))
HEAD_TOPO = ((4, 18), (18, 36), (36, 36), (36, 1))
HEAD_BLOCKS = tuple((f"head{i}", i < len(HEAD_TOPO) - 1)
                    for i in range(len(HEAD_TOPO)))
FINAL_RELU = {f"expert_{m}{i}": True
              for m in "li" for i in range(len(EXPERT_TOPO))}
FINAL_RELU.update({"gate_l": False, "gate_i": False})
FINAL_RELU.update({name: fr for name, fr in HEAD_BLOCKS})


def synth_batch(seed, k):
    """A structurally valid FrameBatch with exactly k pairs."""
    rng = np.random.default_rng([97, seed, k])
    n_lidar = int(rng.integers(1, k + 1))
    pli = np.concatenate([np.arange(n_lidar),
                          rng.integers(0, n_lidar, k - n_lidar)])
    rng.shuffle(pli)
    if k == 1:
        # Alternate seeds cover the no-camera branch (empty segments).
        pos = np.array([-1 if seed % 2 == 0 else 0], dtype=np.int64)
    else:
        raw = rng.integers(0, max(1, (k + 2) // 3), k)
        raw[rng.uniform(size=k) < 0.3] = -1
        uniq = sorted({c for c in raw.tolist() if c >= 0})
        remap = {c: i for i, c in enumerate(uniq)}
        pos = np.array([remap.get(c, -1) for c in raw], dtype=np.int64)
    pli = pli.astype(np.int64)
    n_cam = int(pos.max()) + 1 if pos.max() >= 0 else 0
    boxes = tuple(Box3D(20.0 + 3.0 * i, 0.0, -1.0, 4.0, 1.8, 1.5, 0.0)
                  for i in range(n_lidar))
    return FrameBatch(
        frame_id=f"synth-{seed}-{k}",
        profile_tag="synth",
        gt_boxes=(),
        calib=CALIB,
        lidar_boxes=boxes,
        t_lidar=rng.uniform(0.05, 1.2, (k, 3)),
        t_camera=rng.uniform(0.05, 1.2, (k, 3)),
        image_iou=rng.uniform(0.0, 1.0, k),
        distance=rng.uniform(1.0, 75.0, k),
        pair_lidar_index=pli,
        pair_camera_pos=pos,
        null_mask=(pos >= 0).astype(np.float64),
        lidar_segments=tuple(np.flatnonzero(pli == i) for i in range(n_lidar)),
        camera_segments=tuple(np.flatnonzero(pos == n) for n in range(n_cam)),
        labels=rng.integers(0, 2, n_lidar).astype(np.float64),
    )


def _sigm(x):
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _focal_batch(z, t, alpha, gamma):
    """Mean focal loss per batch row; z (B, n), t (n,)."""
    zt = np.where(t[None, :] > 0.5, z, -z)
    log_q = np.minimum(zt, 0.0) - np.log1p(np.exp(-np.abs(zt)))
    q = np.exp(log_q)
    a = np.where(t > 0.5, alpha, 1.0 - alpha)[None, :]
    return (-a * np.power(1.0 - q, gamma) * log_q).mean(axis=1)


class GradientOracle:
    """Numpy re-implementation of the fused forward pass whose finite
    differences run batched: each perturbed copy touches exactly one
    parameter scalar, so every layer is either a shared matrix or a
    single-column update, and all heavy work folds into large GEMMs."""

    def __init__(self, weights, batch, config):
        self.w = weights
        self.b = batch
        self.alpha = config.focal_alpha
        self.gamma = config.focal_gamma
        self.d_max = config.d_max
        self.cache = {}
        self._base_forward()

    # Unbatched forward, caching each block's internals for perturbation.

    def _block(self, name, x, final_relu):
        w = self.w
        pre1 = x @ w[name + ".w1"] + w[name + ".b1"]
        h = np.maximum(pre1, 0.0)
        out2 = h @ w[name + ".w2"] + w[name + ".b2"]
        sc = (x @ w[name + ".wp"] + w[name + ".bp"]) if name + ".wp" in w else x
        self.cache[name] = (x, pre1, h, out2, sc)
        out = out2 + sc
        return np.maximum(out, 0.0) if final_relu else out

    def _base_forward(self):
        b = self.b
        f_l = b.t_lidar
        f_i = b.t_camera
        for j in range(len(EXPERT_TOPO)):
            f_l = self._block(f"expert_l{j}", f_l, True)
            f_i = self._block(f"expert_i{j}", f_i, True)
        self.f_l0, self.f_i0 = f_l, f_i
        joint = np.concatenate([f_l, f_i], axis=1)
        self.s_pair_l0 = _sigm(self._block("gate_l", joint, False)[:, 0])
        self.s_pair_i0 = _sigm(self._block("gate_i", joint, False)[:, 0])
        s_prop_l = np.array([self.s_pair_l0[idx].max()
                             for idx in b.lidar_segments])
        s_l = s_prop_l[b.pair_lidar_index]
        if b.camera_segments:
            s_prop_i = np.array([self.s_pair_i0[idx].max()
                                 for idx in b.camera_segments])
            safe = np.clip(b.pair_camera_pos, 0, len(b.camera_segments) - 1)
            s_i = s_prop_i[safe] * b.null_mask
        else:
            s_i = np.zeros_like(s_l)
        x = np.column_stack([b.image_iou, s_i, s_l, b.distance / self.d_max])
        for name, fr in HEAD_BLOCKS:
            x = self._block(name, x, fr)
        logits = x[:, 0]
        fused = np.array([logits[idx].max() for idx in b.lidar_segments])
        self.base_loss = float(_focal_batch(fused[None], b.labels,
                                            self.alpha, self.gamma)[0])

    # Batched downstream flows (B perturbed copies at once).

    @staticmethod
    def _gemm(x, w):
        n_b, k, c = x.shape
        return (x.reshape(n_b * k, c) @ w).reshape(n_b, k, -1)

    def _bfwd(self, name, x, final_relu):
        w = self.w
        h = np.maximum(self._gemm(x, w[name + ".w1"]) + w[name + ".b1"], 0.0)
        out = self._gemm(h, w[name + ".w2"]) + w[name + ".b2"]
        if name + ".wp" in w:
            out = out + self._gemm(x, w[name + ".wp"]) + w[name + ".bp"]
        else:
            out = out + x
        return np.maximum(out, 0.0) if final_relu else out

    def _loss_from_expert(self, side, j, f_b):
        for nxt in range(j + 1, len(EXPERT_TOPO)):
            f_b = self._bfwd(f"expert_{side}{nxt}", f_b, True)
        other = self.f_i0 if side == "l" else self.f_l0
        other_b = np.broadcast_to(other, f_b.shape)
        parts = (f_b, other_b) if side == "l" else (other_b, f_b)
        joint = np.concatenate(parts, axis=2)
        g_l = self._bfwd("gate_l", joint, False)[..., 0]
        g_i = self._bfwd("gate_i", joint, False)[..., 0]
        return self._loss_from_spair(_sigm(g_l), _sigm(g_i))

    def _loss_from_gate(self, side, logit_b):
        if side == "l":
            s_l = _sigm(logit_b)
            s_i = np.broadcast_to(self.s_pair_i0, logit_b.shape)
        else:
            s_l = np.broadcast_to(self.s_pair_l0, logit_b.shape)
            s_i = _sigm(logit_b)
        return self._loss_from_spair(s_l, s_i)

    def _loss_from_spair(self, sl_b, si_b):
        b = self.b
        s_prop_l = np.stack([sl_b[:, idx].max(axis=1)
                             for idx in b.lidar_segments], axis=1)
        s_l = s_prop_l[:, b.pair_lidar_index]
        if b.camera_segments:
            s_prop_i = np.stack([si_b[:, idx].max(axis=1)
                                 for idx in b.camera_segments], axis=1)
            safe = np.clip(b.pair_camera_pos, 0, len(b.camera_segments) - 1)
            s_i = s_prop_i[:, safe] * b.null_mask
        else:
            s_i = np.zeros_like(s_l)
        x = np.empty(sl_b.shape + (4,))
        x[..., 0] = b.image_iou
        x[..., 1] = s_i
        x[..., 2] = s_l
        x[..., 3] = b.distance / self.d_max
        return self._loss_from_head(x, 0)

    def _loss_from_head(self, x_b, j0):
        for name, fr in HEAD_BLOCKS[j0:]:
            x_b = self._bfwd(name, x_b, fr)
        logits = x_b[..., 0]
        fused = np.stack([logits[:, idx].max(axis=1)
                          for idx in self.b.lidar_segments], axis=1)
        return _focal_batch(fused, self.b.labels, self.alpha, self.gamma)

    # Single-scalar perturbations of one parameter tensor, both FD signs.

    def _perturbed_block_out(self, block, role, value, steps):
        x0, pre1, h0, out2, sc0 = self.cache[block]
        n = value.size
        rows = np.arange(2 * n)
        signed = np.concatenate([steps, -steps])
        if role in ("w1", "b1"):
            comp, src = pre1, x0
        elif role in ("w2", "b2"):
            comp, src = out2, h0
        else:
            comp, src = sc0, x0
        comp_b = np.repeat(comp[None], 2 * n, axis=0)
        if role in ("w1", "w2", "wp"):
            c_idx, d_idx = np.divmod(np.arange(n), value.shape[1])
            c2, d2 = np.tile(c_idx, 2), np.tile(d_idx, 2)
            comp_b[rows, :, d2] += signed[:, None] * src[:, c2].T
        else:
            d2 = np.tile(np.arange(n), 2)
            comp_b[rows, :, d2] += signed[:, None]
        w = self.w
        if role in ("w1", "b1"):
            h_b = np.maximum(comp_b, 0.0)
            out_b = self._gemm(h_b, w[block + ".w2"]) + w[block + ".b2"] + sc0
        elif role in ("w2", "b2"):
            out_b = comp_b + sc0
        else:
            out_b = comp_b + out2
        return np.maximum(out_b, 0.0) if FINAL_RELU[block] else out_b

    def fd_for_param(self, name, value):
        block, role = name.split(".")
        steps = FD_H * np.maximum(1.0, np.abs(value.ravel()))
        out_b = self._perturbed_block_out(block, role, value, steps)
        if block.startswith("expert_"):
            side, j = block[7], int(block[8:])
            losses = self._loss_from_expert(side, j, out_b)
        elif block.startswith("gate_"):
            losses = self._loss_from_gate(block[5], out_b[..., 0])
        else:
            losses = self._loss_from_head(out_b, int(block[4:]) + 1)
        n = steps.size
        return (losses[:n] - losses[n:]) / (2.0 * steps)


def test_criterion_2_gradient_fidelity():
    t0 = time.perf_counter()
    worst = 0.0
    total = checked = 0
    for seed in range(5):
        for k in (1, 7, 32):
            batch = synth_batch(seed, k)
            config = FusionConfig(seed=seed)
            model = FusionModel(config)
            weights = {p.name: p.data.copy() for p in model.parameters()}
            loss = model.loss(batch)
            oracle = GradientOracle(weights, batch, config)
            assert abs(float(loss.data) - oracle.base_loss) <= 1e-12
            loss.backward()
            analytic, fd = [], []
            for p in model.parameters():
                g = p.tensor.grad
                analytic.append((np.zeros_like(p.data) if g is None
                                 else g).ravel().copy())
                fd.append(oracle.fd_for_param(p.name, p.data))
            a = np.concatenate(analytic)
            f = np.concatenate(fd)
            denom = np.maximum(np.abs(a), np.abs(f))
            live = denom >= 1e-6
            rel = np.abs(a - f)[live] / denom[live]
            assert np.abs(a - f)[~live].max(initial=0.0) <= 1e-8
            if rel.size:
                assert rel.max() <= 1e-4, (seed, k, float(rel.max()))
                worst = max(worst, float(rel.max()))
            total += a.size
            checked += int(live.sum())
    dt = elapsed_since(t0)
    assert dt < 30.0
    print(f"CRITERION 2: PASS -- {checked}/{total} scalar gradients over "
          f"15 seed/K combinations, max rel err {worst:.2e} <= 1e-4 "
          f"({dt:.1f}s)")


# ---------------------------------------------------------------------------
# Criterion 3: geometry against Monte-Carlo volume and prefix-rematch AP.

def random_box3d(rng, spread=2.0):
    return Box3D(cx=float(rng.uniform(-spread, spread)),
                 cy=float(rng.uniform(-spread, spread)),
                 cz=float(rng.uniform(-2.0, 2.0)),
                 length=float(rng.uniform(0.8, 6.0)),
                 width=float(rng.uniform(0.8, 4.0)),
                 height=float(rng.uniform(0.8, 3.0)),
                 yaw=float(rng.uniform(-math.pi, math.pi)))


def contains(box, pts):
    d = pts - np.array([box.cx, box.cy, box.cz])
    c, s = math.cos(-box.yaw), math.sin(-box.yaw)
    x = c * d[:, 0] - s * d[:, 1]
    y = s * d[:, 0] + c * d[:, 1]
    return ((np.abs(x) <= box.length / 2) & (np.abs(y) <= box.width / 2)
            & (np.abs(d[:, 2]) <= box.height / 2))


def mc_iou_3d(a, b, n, seed):
    ca = np.array(list(a.corners()))
    cb = np.array(list(b.corners()))
    lo = np.minimum(ca.min(axis=0), cb.min(axis=0))
    hi = np.maximum(ca.max(axis=0), cb.max(axis=0))
    pts = np.random.default_rng(seed).uniform(lo, hi, size=(n, 3))
    in_a = contains(a, pts)
    in_b = contains(b, pts)
    union = np.count_nonzero(in_a | in_b)
    return np.count_nonzero(in_a & in_b) / union if union else 0.0


_COUNTED = {"easy": {"easy"},
            "moderate": {"easy", "moderate"},
            "hard": {"easy", "moderate", "hard"}}


def _match_prefix(dets_by_frame, frames, counted_bins, thr):
    tp = fp = 0
    for f in frames:
        bins = [difficulty_bin(g, f.calib) for g in f.gt_boxes]
        counted = [j for j, b in enumerate(bins) if b in counted_bins]
        ignored = [j for j, b in enumerate(bins) if b not in counted_bins]
        free = set(counted)
        for _, _, box in dets_by_frame[f.frame_id]:
            ious = [iou_3d(box, g) for g in f.gt_boxes]
            cands = [(ious[j], -j) for j in free if ious[j] >= thr]
            if cands:
                free.discard(-max(cands)[1])
                tp += 1
            elif any(ious[j] >= thr for j in ignored):
                continue
            else:
                fp += 1
    return tp, fp


def oracle_ap(detections, frames, thr=0.7):
    """Threshold-sweep AP: a full greedy rematch for every score prefix."""
    order = sorted(range(len(detections)),
                   key=lambda i: (-float(detections[i].score), i))
    result = {}
    for difficulty in DIFFICULTIES:
        counted_bins = _COUNTED[difficulty]
        n_gt = sum(1 for f in frames for g in f.gt_boxes
                   if difficulty_bin(g, f.calib) in counted_bins)
        if n_gt == 0:
            result[difficulty] = BinResult(None, 0, 0, 0)
            continue
        points = []
        for k in range(1, len(detections) + 1):
            by_frame = {f.frame_id: [] for f in frames}
            for i in order[:k]:
                d = detections[i]
                by_frame[d.frame_id].append((-float(d.score), i, d.box))
            for rows in by_frame.values():
                rows.sort(key=lambda t: t[:2])
            tp, fp = _match_prefix(by_frame, frames, counted_bins, thr)
            points.append((tp / n_gt, tp / max(tp + fp, 1)))
        total = 0.0
        for j in range(1, 41):
            r = j / 40
            reachable = [p for rec, p in points if rec >= r - 1e-12]
            total += max(reachable) if reachable else 0.0
        by_frame = {f.frame_id: [] for f in frames}
        for i in order:
            d = detections[i]
            by_frame[d.frame_id].append((-float(d.score), i, d.box))
        for rows in by_frame.values():
            rows.sort(key=lambda t: t[:2])
        n_tp, n_fp = _match_prefix(by_frame, frames, counted_bins, thr)
        result[difficulty] = BinResult(100.0 * total / 40, n_gt, n_tp, n_fp)
    return ApResult(**result)


def random_ap_instance(rng):
    frames, dets = [], []
    for fi in range(int(rng.integers(1, 4))):
        fid = f"f{fi}"
        gts = []
        for _ in range(int(rng.integers(0, 4))):
            depth = float(rng.uniform(12.0, 80.0))
            gts.append(Box3D(depth, float(rng.uniform(-0.25, 0.25)) * depth,
                             -1.0, float(rng.uniform(3.5, 4.5)),
                             float(rng.uniform(1.6, 2.0)),
                             float(rng.uniform(1.4, 1.8)),
                             float(rng.uniform(-math.pi, math.pi))))
        frames.append(SimpleNamespace(frame_id=fid, gt_boxes=gts, calib=CALIB))
        for g in gts:
            if rng.random() < 0.75:
                jit = Box3D(g.cx + rng.normal(0, 0.15),
                            g.cy + rng.normal(0, 0.15),
                            g.cz + rng.normal(0, 0.05),
                            g.length * (1 + rng.normal(0, 0.04)),
                            g.width * (1 + rng.normal(0, 0.04)),
                            g.height * (1 + rng.normal(0, 0.04)),
                            g.yaw + rng.normal(0, 0.05))
                dets.append(SimpleNamespace(box=jit, score=float(rng.random()),
                                            frame_id=fid))
        for _ in range(rng.poisson(1.5)):
            dets.append(SimpleNamespace(
                box=Box3D(float(rng.uniform(8, 80)),
                          float(rng.uniform(-15, 15)), -1.0, 4.0, 1.8, 1.5,
                          float(rng.uniform(-math.pi, math.pi))),
                score=float(rng.random()), frame_id=fid))
    if rng.random() < 0.5:
        for d in dets:
            d.score = round(d.score, 1)
    if not any(f.gt_boxes for f in frames):
        frames[0].gt_boxes.append(Box3D(25.0, 0.0, -1.0, 0.6, 0.6, 1.6, 0.0))
    return dets[:10], frames


def test_criterion_3_geometry_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(31)
    worst_iou = 0.0
    for pair in range(50):
        a = random_box3d(rng)
        b = random_box3d(rng)
        got = iou_3d(a, b)
        want = mc_iou_3d(a, b, 1_000_000, seed=pair)
        worst_iou = max(worst_iou, abs(got - want))
        assert abs(got - want) <= 1e-2, (pair, got, want)

    for seed in range(100):
        dets, frames = random_ap_instance(np.random.default_rng([3, seed]))
        got = ap_3d(dets, frames)
        want = oracle_ap(dets, frames)
        for d in DIFFICULTIES:
            g, w = got.bin(d), want.bin(d)
            assert (g.n_gt, g.n_tp, g.n_fp) == (w.n_gt, w.n_tp, w.n_fp)
            if w.ap is None:
                assert g.ap is None
            else:
                assert g.ap == pytest.approx(w.ap, abs=1e-12)

    dt = elapsed_since(t0)
    assert dt < 120.0
    print(f"CRITERION 3: PASS -- 50 MC-IoU pairs (max |diff| "
          f"{worst_iou:.4f} <= 0.01), 100 AP instances exact ({dt:.1f}s)")


# ---------------------------------------------------------------------------
# Criterion 4: uncertainty statistics directions on 500 frames per profile.

def population_means(frames, stats):
    """Mean u_reg and deviation ratio per (modality, tp/fp) pool."""
    pools = {(m, k): [] for m in ("lidar", "camera") for k in ("tp", "fp")}
    for f in frames:
        sl, sc = score_frame(list(f.lidar_proposals),
                             list(f.camera_proposals), stats)
        gt3 = list(f.gt_boxes)
        m_l = match_to_ground_truth([s.mean_box for s in sl],
                                    [s.score for s in sl], gt3, iou_3d, 0.7)
        gt2 = []
        for g in gt3:
            try:
                gt2.append(project_box3d(g, f.calib))
            except ProjectionError:
                gt2.append(None)
        m_c = match_to_ground_truth([s.mean_box for s in sc],
                                    [s.score for s in sc], gt2, iou_2d, 0.5)
        for s, is_tp in zip(sl, m_l):
            pools[("lidar", "tp" if is_tp else "fp")].append(s)
        for s, is_tp in zip(sc, m_c):
            pools[("camera", "tp" if is_tp else "fp")].append(s)
    out = {}
    for key, items in pools.items():
        assert items, f"empty population {key}"
        out[key] = (float(np.mean([s.reg_uncertainty for s in items])),
                    float(np.mean([s.cls_deviation_ratio for s in items])))
    return out


def test_criterion_4_statistics_reproduction(corpus, val_stats):
    t0 = time.perf_counter()
    means = {p: population_means(corpus[p], val_stats) for p in PROFILES}

    # (a) regression uncertainty separates FP from TP everywhere.
    for p in PROFILES:
        for m in ("lidar", "camera"):
            assert means[p][(m, "fp")][0] > means[p][(m, "tp")][0], (p, m)

    # (b) camera-only degradations move camera FP u_reg by >= +50% while
    # LiDAR pools stay within 15% of clear.
    shifts = {}
    for p in ("blind", "adversarial"):
        cam = means[p][("camera", "fp")][0] / means["clear"][("camera", "fp")][0] - 1
        assert cam >= 0.50, (p, cam)
        shifts[p] = cam
        for kind in ("tp", "fp"):
            lid = abs(means[p][("lidar", kind)][0]
                      / means["clear"][("lidar", kind)][0] - 1)
            assert lid < 0.15, (p, kind, lid)

    # (c) deviation ratio separates TP from FP everywhere.
    for p in PROFILES:
        for m in ("lidar", "camera"):
            assert means[p][(m, "tp")][1] > means[p][(m, "fp")][1], (p, m)

    dt = elapsed_since(t0)
    assert dt < 120.0
    print(f"CRITERION 4: PASS -- u_reg FP>TP and dr TP>FP on every profile; "
          f"camera FP shift blind {shifts['blind']:+.0%}, adversarial "
          f"{shifts['adversarial']:+.0%}, lidar within 15% ({dt:.1f}s)")


# ---------------------------------------------------------------------------
# Criterion 5: robustness headline, fused vs uncertainty-regardless baseline.

def test_criterion_5_robustness_headline(headline_sets):
    t0 = time.perf_counter()
    fused = run_one(headline_sets, FusionConfig(seed=0))
    base = run_one(headline_sets, FusionConfig(baseline=True, seed=0))
    assert fused["blind"] >= base["blind"] + 2.0, (fused, base)
    assert fused["fog"] >= base["fog"] + 2.0, (fused, base)
    assert fused["clear"] >= base["clear"] - 1.5, (fused, base)
    dt = elapsed_since(t0)
    assert dt < 900.0
    print(f"CRITERION 5: PASS -- moderate AP deltas blind "
          f"{fused['blind'] - base['blind']:+.2f}, fog "
          f"{fused['fog'] - base['fog']:+.2f} (both >= +2.0), clear "
          f"{fused['clear'] - base['clear']:+.2f} (>= -1.5) ({dt:.0f}s)")


# ---------------------------------------------------------------------------
# Criterion 6: ten-seed paired significance on the blind profile.

def test_criterion_6_significance(headline_sets):
    t0 = time.perf_counter()
    fused, base = [], []
    for seed in range(10):
        fused.append(run_one(headline_sets, FusionConfig(seed=seed))["blind"])
        base.append(run_one(headline_sets,
                            FusionConfig(baseline=True, seed=seed))["blind"])
    p = paired_significance(np.array(fused), np.array(base))
    assert p < 0.05, (p, fused, base)
    dt = elapsed_since(t0)
    assert dt < 1800.0
    wins = sum(f > b for f, b in zip(fused, base))
    print(f"CRITERION 6: PASS -- blind moderate AP over 10 seeds: fused "
          f"{np.mean(fused):.2f} vs baseline {np.mean(base):.2f}, "
          f"{wins}/10 wins, paired p={p:.2e} < 0.05 ({dt:.0f}s)")


# ---------------------------------------------------------------------------
# Criterion 7: ablation ordering on the fog profile, 3 seeds each.

def test_criterion_7_ablation_ordering(headline_sets):
    t0 = time.perf_counter()
    variants = {"full": {}, "no_dr": {"use_dr": False},
                "no_reg": {"use_reg": False}, "no_moe": {"use_moe": False}}
    means = {}
    for name, kw in variants.items():
        vals = [run_one(headline_sets, FusionConfig(seed=s, **kw))["fog"]
                for s in range(3)]
        means[name] = float(np.mean(vals))
    assert means["full"] >= means["no_dr"], means
    assert means["full"] >= means["no_reg"], means
    assert means["full"] >= means["no_moe"], means
    assert means["no_moe"] < means["full"], means
    dt = elapsed_since(t0)
    assert dt < 1800.0
    print(f"CRITERION 7: PASS -- fog moderate AP: full {means['full']:.2f} "
          f">= no_dr {means['no_dr']:.2f}, no_reg {means['no_reg']:.2f}, "
          f"no_moe {means['no_moe']:.2f} (no_moe trailing) ({dt:.0f}s)")


# ---------------------------------------------------------------------------
# Criterion 8: byte-identical artifacts across repeats and worker counts.

def run_cli(argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli_main([str(a) for a in argv])
    assert code == 0, (argv, err.getvalue())
    return out.getvalue()


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def pipeline(monkeypatch, root, workers=None):
    """Identical argv (relative paths) run from a dedicated directory."""
    root.mkdir()
    monkeypatch.chdir(root)
    run_cli(["gen", "--out", "data", "--n-frames", 20, "--profile", "clear",
             "--profile", "fog", "--seed", 0])
    run_cli(["stats", "--data", "data"])
    run_cli(["train", "--data", "data/clear", "--data", "data/fog",
             "--epochs", 2, "--out", "runs", "--seed", 0])
    extra = ["--workers", workers] if workers else []
    run_cli(["eval", "--checkpoint", "runs/fused_seed0.json",
             "--data", "data/fog", "--out", "report", *extra])


def test_criterion_8_determinism(tmp_path, monkeypatch):
    t0 = time.perf_counter()
    pipeline(monkeypatch, tmp_path / "a")
    pipeline(monkeypatch, tmp_path / "b", workers=3)
    a = tree_bytes(tmp_path / "a")
    b = tree_bytes(tmp_path / "b")
    assert sorted(a) == sorted(b)
    differing = [name for name in a if a[name] != b[name]]
    assert not differing, differing
    dt = elapsed_since(t0)
    print(f"CRITERION 8: PASS -- {len(a)} artifacts byte-identical across "
          f"a repeated gen/stats/train/eval pipeline with differing worker "
          f"counts ({dt:.0f}s)")
