"""Cross-entropy SGD for engine models, with an optional DP-SGD mode.

Training runs on batches of raw arrays in whatever float dtype the parameters
carry, so the gradient check can run the same code in float64. Max-pool
backward routes gradient through the first-occurrence argmax, which is what
both pooling variants select on NaN-free data.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .engine import (
    AvgPool,
    Conv2d,
    Dense,
    Flatten,
    MaxPool,
    ModelSpec,
    ReLU,
    Softmax,
)
from .errors import AlignmentError, ShapeMismatch, ValidationError
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")


@dataclass(frozen=True)
class DPConfig:
    enabled: bool = False
    clip_norm: float = 1.0
    noise_multiplier: float = 0.5
    epsilon_label: float | None = None  # reported budget, bookkeeping only

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValidationError("clip_norm must be > 0")
        if self.noise_multiplier < 0:
            raise ValidationError("noise_multiplier must be >= 0")


@dataclass(frozen=True)
class LabeledDataset:
    inputs: tuple
    labels: tuple
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "labels", tuple(int(l) for l in self.labels))
        if len(self.inputs) != len(self.labels):
            raise ValidationError("inputs and labels differ in length")
        if any(not 0 <= l < self.class_count for l in self.labels):
            raise ValidationError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    def stacked(self) -> np.ndarray:
        return np.stack([x.array if isinstance(x, Tensor) else np.asarray(x) for x in self.inputs])

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        return LabeledDataset(
            [self.inputs[i] for i in indices], [self.labels[i] for i in indices], self.class_count
        )

    def concat(self, other: "LabeledDataset") -> "LabeledDataset":
        return LabeledDataset(
            self.inputs + other.inputs, self.labels + other.labels,
            max(self.class_count, other.class_count),
        )

    def by_class(self) -> dict[int, list]:
        groups: dict[int, list] = {c: [] for c in range(self.class_count)}
        for x, y in zip(self.inputs, self.labels):
            groups[y].append(x)
        return groups


# ------------------------------------------------------------- batched ops


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (B, C, oh, ow, kh, kw) view."""
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _out_hw(h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def _scatter_windows(dwin: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: (B, C, oh, ow, kh, kw) -> (B, C, Hp, Wp)."""
    b, c, oh, ow, kh, kw = dwin.shape
    out = np.zeros((b, c, hp, wp), dtype=dwin.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dwin[..., i, j]
    return out


def forward_batch(model: ModelSpec, params: Sequence[np.ndarray], x: np.ndarray):
    """Forward pass over a batch. Returns (pre-softmax scores, caches).

    The trailing Softmax layer is not applied; the loss works on log-softmax
    of the scores directly.
    """
    caches = []
    it = iter(params)
    a = x
    layers = model.layers
    if not layers or not isinstance(layers[-1], Softmax):
        raise ShapeMismatch("training needs a model ending in Softmax")
    for layer in layers[:-1]:
        if isinstance(layer, Conv2d):
            w, bias = next(it), next(it)
            o, c, kh, kw = w.shape
            bsz, _, h, wd = a.shape
            oh, ow = _out_hw(h, wd, kh, kw, layer.stride, layer.padding)
            xp = _pad(a, layer.padding)
            cols = _windows(xp, kh, kw, layer.stride, oh, ow)
            cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(bsz, oh * ow, c * kh * kw)
            out = cols @ w.reshape(o, -1).T + bias
            caches.append(("conv", layer, cols, xp.shape, w))
            a = out.transpose(0, 2, 1).reshape(bsz, o, oh, ow)
        elif isinstance(layer, ReLU):
            mask = a > 0
            caches.append(("relu", mask))
            a = a * mask
        elif isinstance(layer, (MaxPool, AvgPool)):
            kh, kw = layer.kernel
            bsz, c, h, wd = a.shape
            oh, ow = _out_hw(h, wd, kh, kw, layer.stride, layer.padding)
            xp = _pad(a, layer.padding)
            win = _windows(xp, kh, kw, layer.stride, oh, ow).reshape(bsz, c, oh, ow, kh * kw)
            if isinstance(layer, MaxPool):
                arg = np.argmax(win, axis=-1)  # first occurrence on ties
                a = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
                caches.append(("maxpool", layer, arg, xp.shape))
            else:
                a = win.mean(axis=-1)
                caches.append(("avgpool", layer, xp.shape))
        elif isinstance(layer, Flatten):
            caches.append(("flatten", a.shape))
            a = a.reshape(a.shape[0], -1)
        elif isinstance(layer, Dense):
            w, bias = next(it), next(it)
            caches.append(("dense", a, w))
            a = a @ w.T + bias
        else:
            raise ShapeMismatch(f"layer {layer.kind} cannot appear before the output")
    return a, caches


def backward_batch(caches, dscores: np.ndarray, per_example: bool) -> list[np.ndarray]:
    """Reverse pass. Returns gradients aligned with ``model.params()``.

    With ``per_example`` every gradient carries a leading batch axis.
    """
    grads: list[np.ndarray] = []
    g = dscores
    for cache in reversed(caches):
        tag = cache[0]
        if tag == "dense":
            _, a, w = cache
            if per_example:
                dw = g[:, :, None] * a[:, None, :]
                db = g
            else:
                dw = g.T @ a
                db = g.sum(axis=0)
            grads.extend([db, dw])
            g = g @ w
        elif tag == "flatten":
            g = g.reshape(cache[1])
        elif tag == "relu":
            g = g * cache[1]
        elif tag == "maxpool":
            _, layer, arg, xp_shape = cache
            kh, kw = layer.kernel
            bsz, c, oh, ow = g.shape
            dwin = np.zeros((bsz, c, oh, ow, kh * kw), dtype=g.dtype)
            np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
            dxp = _scatter_windows(dwin.reshape(bsz, c, oh, ow, kh, kw), xp_shape[2], xp_shape[3], layer.stride)
            g = _crop(dxp, layer.padding)
        elif tag == "avgpool":
            _, layer, xp_shape = cache
            kh, kw = layer.kernel
            dwin = np.broadcast_to((g / (kh * kw))[..., None, None], g.shape + (kh, kw))
            dxp = _scatter_windows(dwin, xp_shape[2], xp_shape[3], layer.stride)
            g = _crop(dxp, layer.padding)
        elif tag == "conv":
            _, layer, cols, xp_shape, w = cache
            o, c, kh, kw = w.shape
            bsz, _, oh, ow = g.shape
            g2 = g.reshape(bsz, o, oh * ow).transpose(0, 2, 1)  # (B, P, O)
            if per_example:
                dw = np.matmul(g2.transpose(0, 2, 1), cols).reshape(bsz, o, c, kh, kw)
                db = g2.sum(axis=1)
            else:
                dw = (g2.reshape(-1, o).T @ cols.reshape(-1, c * kh * kw)).reshape(o, c, kh, kw)
                db = g2.sum(axis=(0, 1))
            grads.extend([db, dw])
            dcols = (g2 @ w.reshape(o, -1)).reshape(bsz, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = _scatter_windows(dcols, xp_shape[2], xp_shape[3], layer.stride)
            g = _crop(dxp, layer.padding)
    grads.reverse()
    return grads


def _crop(a: np.ndarray, p: int) -> np.ndarray:
    return a if p == 0 else a[:, :, p:-p, p:-p]


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _loss_grad(model, params, x, y, per_example):
    scores, caches = forward_batch(model, params, x)
    logp = _log_softmax(scores)
    n = len(y)
    loss = float(-logp[np.arange(n), y].mean())
    d = np.exp(logp)
    d[np.arange(n), y] -= 1
    # per-example grads are of each example's own loss; the batch grad is the mean
    d = d if per_example else d / n
    grads = backward_batch(caches, d.astype(scores.dtype), per_example)
    return loss, grads, scores


def loss_and_gradients(
    model: ModelSpec,
    inputs: np.ndarray,
    labels: Sequence[int],
    params: Sequence[np.ndarray] | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy over the batch and its gradient for every
    Conv2d/Dense weight and bias (ordered as ``model.params()``)."""
    x = np.asarray(inputs)
    y = np.asarray(labels, dtype=np.int64)
    if len(y) == 0:
        raise ShapeMismatch("empty batch")
    if x.shape[1:] != model.input_shape:
        raise ShapeMismatch(f"batch inputs {x.shape[1:]} != model input {model.input_shape}")
    params = model.params() if params is None else params
    loss, grads, _ = _loss_grad(model, params, x.astype(params[0].dtype, copy=False), y, False)
    return loss, grads


def per_example_gradients(model, inputs, labels, params=None):
    params = model.params() if params is None else params
    x = np.asarray(inputs).astype(params[0].dtype, copy=False)
    loss, grads, scores = _loss_grad(model, params, x, np.asarray(labels, dtype=np.int64), True)
    return loss, grads, scores


def sgd_step(model: ModelSpec, grads: Sequence[np.ndarray], lr: float) -> ModelSpec:
    params = model.params()
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise AlignmentError("gradients do not match model parameters")
    return model.with_params([p - np.asarray(lr * g, dtype=p.dtype) for p, g in zip(params, grads)])


def clip_per_example(per_example: Sequence[np.ndarray], clip_norm: float):
    """Scale each example's full gradient vector to L2 norm <= clip_norm.

    Returns (clipped grads with batch axis, pre-clip norms, post-clip norms).
    """
    bsz = per_example[0].shape[0]
    sq = np.zeros(bsz, dtype=np.float64)
    for g in per_example:
        sq += np.square(g.reshape(bsz, -1), dtype=np.float64).sum(axis=1)
    norms = np.sqrt(sq)
    scale = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-12))
    clipped = [g * scale.reshape((bsz,) + (1,) * (g.ndim - 1)).astype(g.dtype) for g in per_example]
    return clipped, norms, norms * scale


def dp_sanitize(
    per_example: Sequence[np.ndarray],
    dp: DPConfig,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """Clip each example to ``clip_norm``, average, then add Gaussian noise
    with std ``noise_multiplier * clip_norm / batch`` per coordinate."""
    if not per_example or per_example[0].shape[0] < 1:
        raise ValueError("need at least one example")
    bsz = per_example[0].shape[0]
    clipped, _, _ = clip_per_example(per_example, dp.clip_norm)
    std = dp.noise_multiplier * dp.clip_norm / bsz
    out = []
    for g in clipped:
        mean = g.mean(axis=0, dtype=np.float64)
        noise = rng.standard_normal(mean.shape) * std
        out.append((mean + noise).astype(g.dtype))
    return out


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    train_accuracy: float

    def to_json(self) -> str:
        return json.dumps({"epoch": self.epoch, "mean_loss": self.mean_loss,
                           "train_accuracy": self.train_accuracy}, sort_keys=True)


@dataclass
class TrainResult:
    model: ModelSpec
    log: list[EpochRecord] = field(default_factory=list)
    post_clip_max_norm: float = 0.0


def train(
    model: ModelSpec,
    data: LabeledDataset,
    cfg: TrainConfig,
    dp: DPConfig | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    on_batch: Callable[[np.ndarray], None] | None = None,
) -> TrainResult:
    """Seeded mini-batch SGD over ``data``.

    Shuffling and DP noise draw from two generators derived from
    ``cfg.seed``, so equal seeds give bit-identical weights. ``on_batch``
    receives the post-clip per-example norms of every DP batch.
    """
    if len(data) == 0:
        raise ValidationError("training data is empty")
    dp = dp or DPConfig()
    x_all = data.stacked().astype(np.float32)
    y_all = np.asarray(data.labels, dtype=np.int64)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(seeds[0])
    noise_rng = np.random.default_rng(seeds[1])
    params = [p.copy() for p in model.params()]
    result = TrainResult(model)
    n = len(y_all)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        losses, correct = [], 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if dp.enabled:
                loss, per_ex, scores = per_example_gradients(model, xb, yb, params)
                clipped, _, post = clip_per_example(per_ex, dp.clip_norm)
                result.post_clip_max_norm = max(result.post_clip_max_norm, float(post.max()))
                if on_batch is not None:
                    on_batch(post)
                grads = dp_sanitize(per_ex, dp, noise_rng)
            else:
                loss, grads, scores = _loss_grad(model, params, xb, yb, False)
            params = [p - np.float32(cfg.learning_rate) * g.astype(p.dtype) for p, g in zip(params, grads)]
            losses.append(loss * len(idx))
            correct += int((scores.argmax(axis=1) == yb).sum())
        rec = EpochRecord(epoch, float(sum(losses) / n), correct / n)
        result.log.append(rec)
        log.debug("epoch %d loss %.4f acc %.3f", rec.epoch, rec.mean_loss, rec.train_accuracy)
        if on_epoch is not None:
            on_epoch(rec)
    result.model = model.with_params(params)
    return result


def accuracy(model: ModelSpec, data: LabeledDataset, batch: int = 128) -> float:
    x = data.stacked().astype(np.float32)
    y = np.asarray(data.labels)
    params = model.params()
    hits = 0
    for s in range(0, len(y), batch):
        scores, _ = forward_batch(model, params, x[s : s + batch])
        hits += int((scores.argmax(axis=1) == y[s : s + batch]).sum())
    return hits / len(y)
