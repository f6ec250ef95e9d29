"""Minimal reverse-mode autodiff over dense tensors, plus the layers,
losses, optimizer, and LR schedule the fusion networks need.

Tensors are float64 numpy arrays of up to three axes (1 x K x C). The
graph is recorded during the forward pass and freed by backward(); a
second backward() through the same graph raises GraphConsumed.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


class ShapeMismatch(ValueError):
    pass


class GraphConsumed(RuntimeError):
    pass


class NonFiniteValues(FloatingPointError):
    pass


class OutOfRange(ValueError):
    pass


class CheckpointError(ValueError):
    """Checkpoint file missing, malformed, or schema-incompatible."""


class Tensor:
    """Dense value array with a lazily allocated gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValues("tensor holds NaN or Inf")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from a scalar tensor onto every requires_grad leaf."""
        if self.data.size != 1:
            raise ShapeMismatch(f"backward needs a scalar, got shape {self.shape}")
        if self._consumed:
            raise GraphConsumed("graph already backpropagated and freed")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
            node._consumed = True
            if node._parents:
                # Free the graph; leaves keep their accumulated grads.
                node._parents = ()
                node._backward = None
                node.grad = None

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def constant(data) -> Tensor:
    return Tensor(data)


def _unop(parent: Tensor, out_data, grad_fn) -> Tensor:
    if not parent.requires_grad:
        return Tensor(out_data)

    def backward(g):
        parent._accumulate(grad_fn(g))

    return Tensor(out_data, requires_grad=True, _parents=(parent,), _backward=backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add {a.shape} vs {b.shape}")
    needs = a.requires_grad or b.requires_grad
    if not needs:
        return Tensor(a.data + b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return Tensor(a.data + b.data, requires_grad=True, _parents=(a, b), _backward=backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul {a.shape} vs {b.shape}")
    needs = a.requires_grad or b.requires_grad
    if not needs:
        return Tensor(a.data * b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return Tensor(a.data * b.data, requires_grad=True, _parents=(a, b), _backward=backward)


def relu(x: Tensor) -> Tensor:
    # Subgradient at exactly 0 is 0.
    mask = x.data > 0.0
    return _unop(x, np.where(mask, x.data, 0.0), lambda g: g * mask)


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic on raw arrays; shared by graph and value paths."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = sigmoid_values(x.data)
    return _unop(x, out, lambda g: g * out * (1.0 - out))


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return _unop(x, x.data.reshape(shape), lambda g: g.reshape(orig))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _unop(x, np.asarray(x.data.mean()), lambda g: np.full(shape, float(g) / n))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _unop(x, np.asarray(x.data.sum()), lambda g: np.full(shape, float(g)))


def square(x: Tensor) -> Tensor:
    return _unop(x, x.data * x.data, lambda g: g * 2.0 * x.data)


def conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-position linear map (1, K, c_in) -> (1, K, c_out).

    The (1, 1) kernel mixes channels only, never positions.
    """
    if x.data.ndim != 3 or x.shape[0] != 1:
        raise ShapeMismatch(f"conv1x1 input must be (1, K, C), got {x.shape}")
    if x.shape[2] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"conv1x1 {x.shape} @ {w.shape} + {b.shape}")
    flat = x.data[0]
    out = flat @ w.data + b.data
    needs = x.requires_grad or w.requires_grad or b.requires_grad
    if not needs:
        return Tensor(out[None])

    def backward(g):
        g2 = g[0]
        if x.requires_grad:
            x._accumulate((g2 @ w.data.T)[None])
        if w.requires_grad:
            w._accumulate(flat.T @ g2)
        if b.requires_grad:
            b._accumulate(g2.sum(axis=0))

    return Tensor(out[None], requires_grad=True, _parents=(x, w, b), _backward=backward)


def concat_channels(parts: list[Tensor]) -> Tensor:
    """Concatenate (1, K, C_i) tensors along the channel axis."""
    k = parts[0].shape[1]
    for p in parts:
        if p.data.ndim != 3 or p.shape[0] != 1 or p.shape[1] != k:
            raise ShapeMismatch(f"concat over K={k} got {p.shape}")
    widths = [p.shape[2] for p in parts]
    offsets = np.cumsum([0] + widths)
    out = np.concatenate([p.data for p in parts], axis=2)
    needs = any(p.requires_grad for p in parts)
    if not needs:
        return Tensor(out)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(g[:, :, lo:hi])

    return Tensor(out, requires_grad=True, _parents=tuple(parts), _backward=backward)


def segment_reduce(x: Tensor, segments: list[np.ndarray], mode: str = "max") -> Tensor:
    """Reduce a flat (K,) tensor over index groups to an (M,) tensor.

    "max" routes the gradient to the first maximal element of each group,
    "mean" and "sum" distribute it across the group.
    """
    if x.data.ndim != 1:
        raise ShapeMismatch(f"segment_reduce wants a flat vector, got {x.shape}")
    vals = x.data
    out = np.empty(len(segments))
    argmaxes = np.empty(len(segments), dtype=np.int64)
    for i, idx in enumerate(segments):
        group = vals[idx]
        if mode == "max":
            j = int(np.argmax(group))
            out[i] = group[j]
            argmaxes[i] = idx[j]
        elif mode == "mean":
            out[i] = group.mean()
        elif mode == "sum":
            out[i] = group.sum()
        else:
            raise ValueError(f"unknown segment mode {mode!r}")
    if not x.requires_grad:
        return Tensor(out)

    def backward(g):
        gx = np.zeros_like(vals)
        if mode == "max":
            np.add.at(gx, argmaxes, g)
        else:
            for i, idx in enumerate(segments):
                share = g[i] / len(idx) if mode == "mean" else g[i]
                gx[idx] += share
        x._accumulate(gx)

    return Tensor(out, requires_grad=True, _parents=(x,), _backward=backward)


def gather(x: Tensor, index: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Row lookup out[k] = x[index[k]], with masked rows forced to zero.

    mask entries of 0 drop both the value and the gradient; used for
    null-pair channels where no camera proposal backs the row.
    """
    index = np.asarray(index, dtype=np.int64)
    safe = np.clip(index, 0, x.data.shape[0] - 1)
    out = x.data[safe]
    if mask is not None:
        out = out * mask
    if not x.requires_grad:
        return Tensor(out)

    def backward(g):
        gx = np.zeros_like(x.data)
        gm = g if mask is None else g * mask
        np.add.at(gx, safe, gm)
        x._accumulate(gx)

    return Tensor(out, requires_grad=True, _parents=(x,), _backward=backward)


def _log_sigmoid(z: np.ndarray) -> np.ndarray:
    # log(sigmoid(z)) = min(z, 0) - log1p(exp(-|z|)), stable at both tails.
    return np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))


def focal_loss(pred_logits: Tensor, targets, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Alpha-balanced binary focal loss on sigmoid(logit), mean over entries.

    Accepts (K,), (1, K, 1), or any shape matching targets after flattening.
    """
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    z = pred_logits.data.reshape(-1)
    if z.shape != t.shape:
        raise ShapeMismatch(f"focal loss logits {z.shape} vs targets {t.shape}")
    zt = np.where(t > 0.5, z, -z)        # logit of the true class
    log_q = _log_sigmoid(zt)
    q = np.exp(log_q)                    # probability of the true class
    a = np.where(t > 0.5, alpha, 1.0 - alpha)
    per = -a * np.power(1.0 - q, gamma) * log_q
    out = np.asarray(per.mean())
    if not pred_logits.requires_grad:
        return Tensor(out)

    shape = pred_logits.shape
    n = z.size

    def backward(g):
        # d(per)/d(zt) = a * (1-q)^gamma * (gamma * q * log q - (1 - q))
        dz = a * np.power(1.0 - q, gamma) * (gamma * q * log_q - (1.0 - q))
        dz = np.where(t > 0.5, dz, -dz)
        pred_logits._accumulate((float(g) / n * dz).reshape(shape))

    return Tensor(out, requires_grad=True, _parents=(pred_logits,), _backward=backward)


def attenuated_l1(b_pred, b_gt, log_var) -> float:
    """Variance-attenuated regression loss for direct-modeling heads.

    Per element: 0.5 * exp(-log_var) * |b_gt - b_pred| + 0.5 * log_var,
    summed over the box elements. Predicting a large variance discounts
    the error term but pays the log-variance penalty.
    """
    b_pred = np.asarray(b_pred, dtype=np.float64)
    b_gt = np.asarray(b_gt, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    err = np.abs(b_gt - b_pred)
    return float(np.sum(0.5 * np.exp(-log_var) * err + 0.5 * log_var))


class Parameter:
    """Named trainable tensor with its Adam moment buffers."""

    __slots__ = ("name", "tensor", "m", "v")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.tensor = Tensor(value, requires_grad=True)
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def zero_grad(self):
        self.tensor.grad = None


def adam_step(params: list[Parameter], lr: float, step: int, *,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.01):
    """One Adam update with decoupled weight decay (step counts from 1)."""
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    for p in params:
        g = p.tensor.grad
        if g is None:
            g = np.zeros_like(p.tensor.data)
        if weight_decay:
            p.tensor.data -= lr * weight_decay * p.tensor.data
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        p.tensor.data -= lr * (p.m / bc1) / (np.sqrt(p.v / bc2) + eps)
        p.zero_grad()


def one_cycle_lr(step: int, total_steps: int, *, initial: float = 6e-5,
                 max_lr: float = 6e-4, pct_start: float = 0.3,
                 final_div: float = 25.0) -> float:
    """Cosine ramp to max_lr over the first pct_start of training, then a
    cosine anneal down to initial / final_div."""
    if not 0 <= step < total_steps:
        raise OutOfRange(f"step {step} outside [0, {total_steps})")
    peak = int(math.floor(pct_start * total_steps))
    if step <= peak:
        if peak == 0:
            return max_lr
        t = step / peak
        return initial + (max_lr - initial) * 0.5 * (1.0 - math.cos(math.pi * t))
    final = initial / final_div
    span = (total_steps - 1) - peak
    t = (step - peak) / span if span > 0 else 1.0
    return final + (max_lr - final) * 0.5 * (1.0 + math.cos(math.pi * t))


class ResBlock:
    """Per-position residual block: ReLU(conv2(ReLU(conv1(x))) + proj(x)).

    Both convs are 1x1 (channel mixing only). The shortcut is the identity
    when c_in == c_out, otherwise a 1x1 projection. Blocks that emit
    logits are built with final_relu=False, which drops the closing
    activation so outputs can go negative.
    """

    def __init__(self, name: str, c_in: int, c_out: int, rng: np.random.Generator,
                 final_relu: bool = True):
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        self.final_relu = final_relu
        self.w1 = Parameter(f"{name}.w1", _init_linear(rng, c_in, c_out))
        self.b1 = Parameter(f"{name}.b1", _init_bias(rng, c_in, c_out))
        self.w2 = Parameter(f"{name}.w2", _init_linear(rng, c_out, c_out))
        self.b2 = Parameter(f"{name}.b2", _init_bias(rng, c_out, c_out))
        if c_in != c_out:
            self.wp = Parameter(f"{name}.wp", _init_linear(rng, c_in, c_out))
            self.bp = Parameter(f"{name}.bp", _init_bias(rng, c_in, c_out))
        else:
            self.wp = None
            self.bp = None

    def parameters(self) -> list[Parameter]:
        params = [self.w1, self.b1, self.w2, self.b2]
        if self.wp is not None:
            params += [self.wp, self.bp]
        return params

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] != self.c_in:
            raise ShapeMismatch(f"{self.name}: expected {self.c_in} channels, got {x.shape[2]}")
        h = relu(conv1x1(x, self.w1.tensor, self.b1.tensor))
        h = conv1x1(h, self.w2.tensor, self.b2.tensor)
        if self.wp is not None:
            shortcut = conv1x1(x, self.wp.tensor, self.bp.tensor)
        else:
            shortcut = x
        out = add(h, shortcut)
        return relu(out) if self.final_relu else out

    __call__ = forward

    def forward_values(self, x: np.ndarray) -> np.ndarray:
        """Gradient-free forward on a plain (K, c_in) array.

        Bit-identical to forward(); used on inference paths where no
        graph is needed.
        """
        h = np.maximum(x @ self.w1.data + self.b1.data, 0.0)
        h = h @ self.w2.data + self.b2.data
        if self.wp is not None:
            shortcut = x @ self.wp.data + self.bp.data
        else:
            shortcut = x
        out = h + shortcut
        return np.maximum(out, 0.0) if self.final_relu else out


def _init_linear(rng: np.random.Generator, c_in: int, c_out: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(c_in)
    return rng.uniform(-bound, bound, size=(c_in, c_out))


def _init_bias(rng: np.random.Generator, c_in: int, c_out: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(c_in)
    return rng.uniform(-bound, bound, size=(c_out,))


def save_checkpoint(path, params: list[Parameter], meta: dict):
    """Write parameters plus optimizer moments as versioned JSON."""
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ValueError("duplicate parameter names in checkpoint")
    doc = {
        "version": CHECKPOINT_VERSION,
        "meta": meta,
        "params": {
            p.name: {
                "shape": list(p.tensor.data.shape),
                "values": p.tensor.data.ravel().tolist(),
                "m": p.m.ravel().tolist(),
                "v": p.v.ravel().tolist(),
            }
            for p in params
        },
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read a checkpoint, returning (meta, name -> {shape, values, m, v})."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {doc.get('version')!r} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    if "params" not in doc or "meta" not in doc:
        raise CheckpointError("checkpoint missing params/meta sections")
    return doc["meta"], doc["params"]


def restore_parameters(params: list[Parameter], stored: dict):
    """Load stored values and moments into an existing parameter list."""
    for p in params:
        if p.name not in stored:
            raise CheckpointError(f"checkpoint missing parameter {p.name}")
        entry = stored[p.name]
        shape = tuple(entry["shape"])
        if shape != p.tensor.data.shape:
            raise CheckpointError(
                f"parameter {p.name} shape {shape} != expected {p.tensor.data.shape}"
            )
        p.tensor.data = np.array(entry["values"], dtype=np.float64).reshape(shape)
        p.m = np.array(entry["m"], dtype=np.float64).reshape(shape)
        p.v = np.array(entry["v"], dtype=np.float64).reshape(shape)
