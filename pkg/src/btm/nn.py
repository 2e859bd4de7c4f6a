"""Minimal deterministic MLP training core.

Forward pass, backprop, SGD with momentum and additive weight decay,
cosine schedule, freeze masks for backbone/classifier splits, optional
mixup and label smoothing. Parameters live in a single flat vector
ordered layer by layer (weight matrix row-major, then bias); the final
linear layer is the classifier, everything before it the backbone.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

CHECKPOINT_MAGIC = b"BTMCKPT1"

ACTIVATIONS = ("relu", "tanh")
SCHEDULES = ("cosine", "constant")
FREEZE_MODES = ("none", "backbone", "classifier")


@dataclass(frozen=True)
class Architecture:
    """MLP shape: [d_in, hidden..., n_classes] plus the activation."""

    layer_dims: tuple
    activation: str = "relu"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2:
            raise ValueError("architecture needs at least input and output dims")
        if any(d < 1 for d in dims):
            raise ValueError("all layer dims must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        object.__setattr__(self, "layer_dims", dims)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_dims, self.layer_dims[1:]))

    def layer_spans(self):
        """(weight_start, bias_start, end) offsets of each linear layer."""
        spans = []
        off = 0
        for a, b in zip(self.layer_dims, self.layer_dims[1:]):
            spans.append((off, off + a * b, off + a * b + b))
            off += a * b + b
        return spans

    def classifier_start(self) -> int:
        """First flat index of the final linear layer; the backbone is
        everything before it."""
        return self.layer_spans()[-1][0]

    def to_dict(self) -> dict:
        return {"layer_dims": list(self.layer_dims), "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(tuple(d["layer_dims"]), d["activation"])


@dataclass
class ParamVector:
    """Flat float64 parameter vector bound to an architecture."""

    values: np.ndarray
    arch: Architecture

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if len(self.values) != self.arch.n_params:
            raise ValueError(
                f"expected {self.arch.n_params} parameters, got {len(self.values)}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameters must be finite")

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.arch)

    def layers(self):
        """Views (W, b) per layer; W has shape (fan_in, fan_out)."""
        out = []
        dims = self.arch.layer_dims
        for (ws, bs, end), a, b in zip(self.arch.layer_spans(), dims, dims[1:]):
            out.append((self.values[ws:bs].reshape(a, b), self.values[bs:end]))
        return out

    def backbone_values(self) -> np.ndarray:
        return self.values[: self.arch.classifier_start()]

    def classifier_values(self) -> np.ndarray:
        return self.values[self.arch.classifier_start():]


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one SGD training job."""

    epochs: int
    batch_size: int
    lr_init: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    mixup_alpha: float = 0.0
    label_smoothing: float = 0.0
    class_balanced_sampling: bool = False
    freeze: str = "none"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_init <= 0:
            raise ValueError("lr_init must be positive")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.freeze not in FREEZE_MODES:
            raise ValueError(f"freeze must be one of {FREEZE_MODES}")
        if self.mixup_alpha < 0:
            raise ValueError("mixup_alpha must be >= 0")
        if not (0.0 <= self.label_smoothing < 1.0):
            raise ValueError("label_smoothing must be in [0, 1)")


def init_params(arch: Architecture, seed: int) -> ParamVector:
    """Uniform weights on +-1/sqrt(fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    values = np.empty(arch.n_params)
    dims = arch.layer_dims
    for (ws, bs, end), fan_in, fan_out in zip(arch.layer_spans(), dims, dims[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        values[ws:bs] = rng.uniform(-bound, bound, size=fan_in * fan_out)
        values[bs:end] = 0.0
    return ParamVector(values, arch)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def forward(params: ParamVector, features: np.ndarray) -> np.ndarray:
    """MLP forward pass returning raw logits (no randomness)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.arch.in_dim:
        raise ValueError(
            f"features must be (n, {params.arch.in_dim}), got {x.shape}"
        )
    layers = params.layers()
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        h = _activate(z, params.arch.activation) if i < len(layers) - 1 else z
    return h


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(params: ParamVector, batch_features: np.ndarray,
                  batch_targets: np.ndarray, label_smoothing: float = 0.0):
    """Mean softmax cross-entropy and its backprop gradient.

    Targets are soft-label rows summing to 1 (one-hot, smoothed, or
    mixup-blended). Smoothing mixes targets toward uniform:
    t <- (1-eps) t + eps/C. Weight decay is the optimizer's job, not the
    loss's.
    """
    x = np.asarray(batch_features, dtype=np.float64)
    t = np.asarray(batch_targets, dtype=np.float64)
    arch = params.arch
    if x.ndim != 2 or x.shape[1] != arch.in_dim:
        raise ValueError(f"features must be (n, {arch.in_dim}), got {x.shape}")
    if t.shape != (x.shape[0], arch.n_classes):
        raise ValueError(f"targets must be (n, {arch.n_classes}), got {t.shape}")
    if not np.allclose(t.sum(axis=1), 1.0, atol=1e-8):
        raise ValueError("target rows must sum to 1")
    if label_smoothing > 0.0:
        t = (1.0 - label_smoothing) * t + label_smoothing / arch.n_classes

    layers = params.layers()
    n = x.shape[0]
    # Forward, keeping the activations needed for backprop.
    acts = [x]
    pre = []
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        pre.append(z)
        if i < len(layers) - 1:
            h = _activate(z, arch.activation)
            acts.append(h)

    logits = pre[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-np.sum(t * log_probs) / n)

    gview = ParamVector(np.zeros_like(params.values), arch)
    glayers = gview.layers()
    dz = (np.exp(log_probs) - t) / n
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        gw, gb = glayers[i]
        gw[...] = acts[i].T @ dz
        gb[...] = dz.sum(axis=0)
        if i > 0:
            dh = dz @ w.T
            if arch.activation == "relu":
                dz = dh * (pre[i - 1] > 0.0)
            else:
                dz = dh * (1.0 - np.tanh(pre[i - 1]) ** 2)
    return loss, gview


def mixup_batch(features: np.ndarray, one_hot_targets: np.ndarray,
                alpha: float, rng):
    """Blend each row with a permuted partner row.

    One mixing coefficient per batch, drawn from Beta(alpha, alpha).
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    lam = rng.beta(alpha, alpha)
    perm = rng.permutation(len(features))
    mixed_x = lam * features + (1.0 - lam) * features[perm]
    mixed_t = lam * one_hot_targets + (1.0 - lam) * one_hot_targets[perm]
    return mixed_x, mixed_t


def cosine_lr(epoch: int, total_epochs: int, lr_init: float) -> float:
    """Half-cosine decay from lr_init toward 0 over the epoch count."""
    if not (0 <= epoch < total_epochs):
        raise ValueError("epoch must satisfy 0 <= epoch < total_epochs")
    return lr_init * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _frozen_mask(arch: Architecture, freeze: str) -> np.ndarray | None:
    if freeze == "none":
        return None
    mask = np.zeros(arch.n_params, dtype=bool)
    split = arch.classifier_start()
    if freeze == "backbone":
        mask[:split] = True
    else:
        mask[split:] = True
    return mask


def _balanced_batch_indices(rng, class_index_lists, batch_size: int) -> np.ndarray:
    """Draw classes uniformly, then one sample uniformly within each."""
    n_classes = len(class_index_lists)
    flat = np.concatenate(class_index_lists)
    sizes = np.array([len(ix) for ix in class_index_lists])
    starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    cls = rng.integers(0, n_classes, size=batch_size)
    offs = rng.integers(0, sizes[cls])
    return flat[starts[cls] + offs]


def train(start: ParamVector, data, cfg: TrainConfig) -> ParamVector:
    """Mini-batch SGD with momentum; deterministic per cfg.seed.

    Weight decay enters as an additive lambda*w gradient term. Frozen
    slices receive zero gradient, so they stay bit-identical to start.
    Class-balanced sampling draws each batch class-uniformly.
    """
    arch = start.arch
    if data.dim != arch.in_dim:
        raise ValueError(f"data dim {data.dim} does not match model input {arch.in_dim}")
    if data.n_classes != arch.n_classes:
        raise ValueError(
            f"data has {data.n_classes} classes, model outputs {arch.n_classes}"
        )
    params = start.values.copy()
    if cfg.epochs == 0:
        return ParamVector(params, arch)

    rng = np.random.default_rng(cfg.seed)
    velocity = np.zeros_like(params)
    frozen = _frozen_mask(arch, cfg.freeze)
    targets = one_hot(data.labels, arch.n_classes)
    n = data.n_samples
    class_lists = [data.class_indices(k) for k in range(data.n_classes)]
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size

    for epoch in range(cfg.epochs):
        if cfg.schedule == "cosine":
            lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init)
        else:
            lr = cfg.lr_init
        if cfg.class_balanced_sampling:
            batches = [
                _balanced_batch_indices(rng, class_lists, cfg.batch_size)
                for _ in range(steps_per_epoch)
            ]
        elif cfg.batch_size >= n:
            batches = [np.arange(n)]
        else:
            order = rng.permutation(n)
            batches = [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
        for idx in batches:
            xb = data.features[idx]
            tb = targets[idx]
            if cfg.mixup_alpha > 0.0:
                xb, tb = mixup_batch(xb, tb, cfg.mixup_alpha, rng)
            _, grad = loss_and_grad(ParamVector(params, arch), xb, tb,
                                    cfg.label_smoothing)
            g = grad.values  # freshly allocated; safe to mutate
            if cfg.weight_decay > 0.0:
                g += cfg.weight_decay * params
            if frozen is not None:
                g[frozen] = 0.0
            velocity = cfg.momentum * velocity + g
            params -= lr * velocity
    return ParamVector(params, arch)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Checkpoint:
    """A parameter snapshot with stage/seed provenance.

    Values are quantized to f32 at creation so the in-memory state, the
    persisted bytes, and the content hash always agree.
    """

    params: ParamVector
    stage_tag: str
    seed: int
    parent_checkpoint_hash: str | None = None

    @property
    def arch(self) -> Architecture:
        return self.params.arch

    def serialize(self) -> bytes:
        header = {
            "version": 1,
            "arch": self.arch.to_dict(),
            "stage_tag": self.stage_tag,
            "seed": int(self.seed),
            "parent_checkpoint_hash": self.parent_checkpoint_hash,
        }
        raw = json.dumps(header, sort_keys=True).encode("utf-8")
        weights = self.params.values.astype("<f4").tobytes()
        return CHECKPOINT_MAGIC + struct.pack("<I", len(raw)) + raw + weights

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.serialize()).hexdigest()

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.serialize())


def make_checkpoint(params: ParamVector, stage_tag: str, seed: int,
                    parent: Checkpoint | None = None) -> Checkpoint:
    quantized = params.values.astype(np.float32).astype(np.float64)
    return Checkpoint(
        params=ParamVector(quantized, params.arch),
        stage_tag=stage_tag,
        seed=int(seed),
        parent_checkpoint_hash=parent.hash if parent is not None else None,
    )


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic in {path}")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    arch = Architecture.from_dict(header["arch"])
    off = 12 + hlen
    if len(blob) != off + 4 * arch.n_params:
        raise ValueError(f"truncated checkpoint payload in {path}")
    weights = np.frombuffer(blob, dtype="<f4", count=arch.n_params, offset=off)
    return Checkpoint(
        params=ParamVector(weights.astype(np.float64), arch),
        stage_tag=header["stage_tag"],
        seed=header["seed"],
        parent_checkpoint_hash=header["parent_checkpoint_hash"],
    )
