"""Profiled label-recovery attack on timing medians and the membership test.

The attacker's features for one row are the per-input median timings of P
inputs of the same class. A small MLP learns class labels from these rows.
For membership inference the classifier is fitted on timings under Model 1
and scored on the same queries under Model 2, retrained with Q included.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .analyzer import median
from .data import substream, substream_seed
from .engine import ModelSpec, PoolVariant, build_custom_cnn
from .errors import DegenerateInput, FormatError, InsufficientInputs, TooFewRows, ValidationError
from .harness import Channel, CollectionProtocol
from .trainer import DPConfig, LabeledDataset, TrainConfig, accuracy, train

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ dataset


@dataclass
class AttackDataset:
    rows: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)
    draws: np.ndarray | None = None  # pool indices behind every feature

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.rows.ndim != 2 or self.rows.shape[0] != self.labels.size:
            raise ValidationError("rows must be R x P with one label per row")

    @property
    def P(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return self.labels.size

    def subset(self, idx) -> "AttackDataset":
        idx = np.asarray(idx, dtype=np.int64)
        draws = None if self.draws is None else self.draws[idx]
        return AttackDataset(self.rows[idx], self.labels[idx], dict(self.meta), draws)

    def save(self, path) -> None:
        header = dict(self.meta, P=self.P, rows=len(self))
        with open(path, "w") as fh:
            fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
            for y, row in zip(self.labels, self.rows):
                fh.write(",".join([str(int(y))] + [repr(float(v)) for v in row]) + "\n")

    @classmethod
    def load(cls, path) -> "AttackDataset":
        with open(path) as fh:
            first = fh.readline()
            if not first.startswith("# "):
                raise FormatError("attack dataset lacks its header line")
            meta = json.loads(first[2:])
            labels, rows = [], []
            for line in fh:
                parts = line.strip().split(",")
                if len(parts) != meta["P"] + 1:
                    raise FormatError(f"row has {len(parts) - 1} features, expected {meta['P']}")
                labels.append(int(parts[0]))
                rows.append([float(v) for v in parts[1:]])
        meta.pop("rows", None)
        meta.pop("P", None)
        return cls(np.array(rows).reshape(len(labels), -1), labels, meta)


def build_attack_dataset(
    model: ModelSpec,
    pools: Mapping[int, Sequence],
    P: int,
    N: int,
    M: int,
    channel: Channel,
    rng: np.random.Generator,
    warmup: int = 0,
) -> AttackDataset:
    """One row per (round, class): medians of N-rep traces of P pool inputs.

    Each round draws P distinct inputs from the class pool; rows are then
    shuffled. ``draws`` records the pool indices for every row.
    """
    classes = sorted(pools)
    short = [c for c in classes if len(pools[c]) < P]
    if short:
        raise InsufficientInputs(f"classes {short} have fewer than P={P} pool inputs")
    rows, labels, draws = [], [], []
    for _ in range(M):
        for c in classes:
            pick = rng.choice(len(pools[c]), size=P, replace=False)
            rows.append([median(channel.trace(model, pools[c][k], N, warmup).samples_ns) for k in pick])
            labels.append(c)
            draws.append(pick)
    order = rng.permutation(len(rows))
    meta = {"classes": classes, "N": N, "M": M, "channel": channel.describe()}
    return AttackDataset(np.array(rows)[order], np.array(labels)[order], meta, np.array(draws)[order])


def split_indices(labels, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < train_fraction < 1:
        raise ValidationError("train_fraction must lie in (0, 1)")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    tr, te = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < 2:
            raise TooFewRows(f"class {c} has {idx.size} row(s)")
        idx = rng.permutation(idx)
        k = min(max(int(round(train_fraction * idx.size)), 1), idx.size - 1)
        tr.append(idx[:k])
        te.append(idx[k:])
    return np.sort(np.concatenate(tr)), np.sort(np.concatenate(te))


def split_dataset(ds: AttackDataset, train_fraction: float, seed: int) -> tuple[AttackDataset, AttackDataset]:
    tr, te = split_indices(ds.labels, train_fraction, seed)
    return ds.subset(tr), ds.subset(te)


# ---------------------------------------------------------------------- MLP

ACTIVATIONS = ("relu", "tanh", "logistic")


@dataclass(frozen=True)
class MLPSpec:
    hidden_layers: tuple[int, ...] = (32,)
    activation: str = "relu"
    learning_rate: float = 0.01
    epochs: int = 300
    seed: int = 0
    batch_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if any(h < 1 for h in self.hidden_layers) or self.learning_rate <= 0 or self.epochs < 1:
            raise ValidationError("MLP sizes, rate and epochs must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        return {"hidden_layers": list(self.hidden_layers), "activation": self.activation,
                "learning_rate": self.learning_rate, "epochs": self.epochs, "seed": self.seed,
                "batch_size": self.batch_size}


def default_space(epochs: int = 300, seed: int = 0) -> list[MLPSpec]:
    return [
        MLPSpec(h, a, lr, epochs, seed)
        for h, a, lr in itertools.product([(32,), (64, 32)], ["relu", "tanh"], [0.01, 0.001])
    ]


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0)
    if name == "tanh":
        return np.tanh(z)
    return 1.0 / (1.0 + np.exp(-z))


def _act_grad(name: str, a: np.ndarray) -> np.ndarray:
    # derivative expressed through the activation output
    if name == "relu":
        return (a > 0).astype(a.dtype)
    if name == "tanh":
        return 1.0 - a * a
    return a * (1.0 - a)


@dataclass
class MLP:
    spec: MLPSpec
    classes: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    keep: np.ndarray
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def standardize(self, rows: np.ndarray) -> np.ndarray:
        return (np.asarray(rows, dtype=np.float64)[:, self.keep] - self.mean) / self.scale

    def _forward(self, z: np.ndarray) -> list[np.ndarray]:
        acts = [z]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w + b
            acts.append(z if k == len(self.weights) - 1 else _act(self.spec.activation, z))
        return acts

    def scores(self, rows) -> np.ndarray:
        with np.errstate(over="ignore", invalid="ignore"):
            return self._forward(self.standardize(rows))[-1]

    def predict(self, rows) -> np.ndarray:
        return self.classes[np.argmax(self.scores(rows), axis=1)]


def mlp_train(data: AttackDataset, spec: MLPSpec) -> MLP:
    """Mini-batch SGD on softmax cross-entropy over standardized features."""
    classes = np.unique(data.labels)
    if classes.size < 2:
        raise DegenerateInput("need at least two classes")
    x = data.rows
    std = x.std(axis=0)
    keep = std > 0
    if not keep.any():
        raise DegenerateInput("every feature has zero variance")
    if not keep.all():
        log.warning("dropping %d zero-variance feature(s)", int((~keep).sum()))
    mean, scale = x[:, keep].mean(axis=0), std[keep]
    xs = (x[:, keep] - mean) / scale
    y = np.searchsorted(classes, data.labels)
    rng = np.random.default_rng(spec.seed)
    sizes = [xs.shape[1], *spec.hidden_layers, classes.size]
    weights = [rng.standard_normal((a, b)) * np.sqrt(2.0 / (a + b)) for a, b in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(b) for b in sizes[1:]]
    net = MLP(spec, classes, mean, scale, keep, weights, biases)
    n = len(y)
    # overflow in a diverging run is caught below, not reported per op
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(spec.epochs):
            order = rng.permutation(n)
            for s in range(0, n, spec.batch_size):
                idx = order[s : s + spec.batch_size]
                acts = net._forward(xs[idx])
                logits = acts[-1]
                p = np.exp(logits - logits.max(axis=1, keepdims=True))
                p /= p.sum(axis=1, keepdims=True)
                p[np.arange(idx.size), y[idx]] -= 1.0
                delta = p / idx.size
                for k in range(len(weights) - 1, -1, -1):
                    gw = acts[k].T @ delta
                    gb = delta.sum(axis=0)
                    if k:
                        delta = (delta @ weights[k].T) * _act_grad(spec.activation, acts[k])
                    weights[k] -= spec.learning_rate * gw
                    biases[k] -= spec.learning_rate * gb
                if not np.isfinite(weights[-1]).all():
                    # a diverged net predicts garbage; stop spending time on it
                    return net
    return net


@dataclass
class ConfusionMatrix:
    classes: list[int]
    counts: np.ndarray

    @property
    def accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else 0.0

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "counts": self.counts.tolist()}


def evaluate(model: MLP, test: AttackDataset) -> tuple[float, ConfusionMatrix]:
    classes = sorted(set(model.classes.tolist()) | set(test.labels.tolist()))
    pos = {c: k for k, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(test.labels, model.predict(test.rows)):
        cm[pos[int(t)], pos[int(p)]] += 1
    conf = ConfusionMatrix(classes, cm)
    return conf.accuracy, conf


def kfold_indices(labels, K: int, seed: int) -> list[np.ndarray]:
    """Stratified folds: each class's rows are shuffled and dealt round-robin."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(K)]
    for c in np.unique(labels):
        for pos, i in enumerate(rng.permutation(np.flatnonzero(labels == c))):
            folds[pos % K].append(int(i))
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


def grid_search(data: AttackDataset, space: Sequence[MLPSpec], K: int = 10, seed: int = 0) -> tuple[MLPSpec, list[float]]:
    """Best spec by stratified K-fold mean validation accuracy (earliest wins ties)."""
    if K < 2:
        raise ValidationError("K must be >= 2")
    if not space:
        raise ValidationError("empty search space")
    if len(space) == 1:
        return space[0], [float("nan")]
    folds = kfold_indices(data.labels, K, seed)
    everything = np.arange(len(data))
    scores = []
    for spec in space:
        accs = []
        for f in folds:
            if f.size == 0:
                continue
            net = mlp_train(data.subset(np.setdiff1d(everything, f)), spec)
            accs.append(evaluate(net, data.subset(f))[0])
        scores.append(float(np.mean(accs)))
    return space[int(np.argmax(scores))], scores


# ---------------------------------------------------------------------- MIA


@dataclass
class MIAResult:
    acc_S1: float
    acc_S2: float
    details: dict = field(default_factory=dict)

    @property
    def gap(self) -> float:
        return self.acc_S1 - self.acc_S2

    def to_dict(self) -> dict:
        return {"acc_S1": self.acc_S1, "acc_S2": self.acc_S2, "gap": self.gap, "details": self.details}


@dataclass
class OverlapSweepResult:
    ratios: list[float]
    accuracies: list[float]
    baseline: float

    def to_dict(self) -> dict:
        return {"ratios": self.ratios, "accuracies": self.accuracies, "baseline": self.baseline}


RETRAIN_MODES = ("scratch", "finetune")
MODEL2_INITS = ("fresh", "shared")


class MIAExperiment:
    """Shared state of the membership test: Model 1, the fitted classifier
    and the held-out rows whose inputs get re-timed under each Model 2.

    Measurement noise is common across models: before every dataset build
    the channel restarts from the same noise seed and the same input draws
    are replayed, so S1 and S2 differ only through the models.
    """

    def __init__(
        self,
        T: LabeledDataset,
        Q: LabeledDataset,
        train_cfg: TrainConfig,
        dp_cfg: DPConfig,
        protocol: CollectionProtocol,
        channel: Channel,
        *,
        seed: int = 0,
        variant: PoolVariant | str = PoolVariant.NAIVE,
        space: Sequence[MLPSpec] | None = None,
        K: int = 5,
        train_fraction: float = 0.8,
        retrain_mode: str = "scratch",
        model2_init: str = "fresh",
    ):
        if retrain_mode not in RETRAIN_MODES:
            raise ValidationError(f"retrain_mode must be one of {RETRAIN_MODES}")
        if model2_init not in MODEL2_INITS:
            raise ValidationError(f"model2_init must be one of {MODEL2_INITS}")
        self.T, self.Q = T, Q
        self.train_cfg, self.dp_cfg = train_cfg, dp_cfg
        self.protocol, self.channel = protocol, channel
        self.seed = seed
        self.variant = PoolVariant.parse(variant)
        self.space = list(space) if space is not None else default_space(seed=seed)
        self.K = K
        self.train_fraction = train_fraction
        self.retrain_mode = retrain_mode
        self.model2_init = model2_init
        self.noise_seed = getattr(channel, "seed", None)
        self.shape = T.inputs[0].shape
        self.details: dict = {}

    def _fresh_model(self, name: str) -> ModelSpec:
        return build_custom_cnn(self.shape, self.T.class_count, substream_seed(self.seed, name), self.variant)

    def _timings(self, model: ModelSpec) -> AttackDataset:
        if hasattr(self.channel, "reset"):
            self.channel.reset(self.noise_seed)
        p = self.protocol
        return build_attack_dataset(model, self.Q.by_class(), p.P, p.N, p.M, self.channel,
                                    substream(self.seed, "attack-draw"), p.warmup)

    def setup(self) -> float:
        """Train Model 1, fit the classifier, return the S1 accuracy."""
        self.model1 = train(self._fresh_model("model-init/1"), self.T, self.train_cfg, self.dp_cfg).model
        ds = self._timings(self.model1)
        self.train_idx, self.test_idx = split_indices(ds.labels, self.train_fraction, substream_seed(self.seed, "split"))
        train_part = ds.subset(self.train_idx)
        self.best, scores = grid_search(train_part, self.space, self.K, substream_seed(self.seed, "kfold"))
        self.classifier = mlp_train(train_part, self.best)
        self.acc_S1, self.cm_S1 = evaluate(self.classifier, ds.subset(self.test_idx))
        self.details.update(
            model1_train_accuracy=accuracy(self.model1, self.T),
            best_spec=self.best.to_dict(),
            grid_scores=scores,
            rows=len(ds),
            test_rows=int(self.test_idx.size),
        )
        return self.acc_S1

    def model2(self, data: LabeledDataset) -> ModelSpec:
        if self.retrain_mode == "finetune":
            start = self.model1
        else:
            start = self._fresh_model("model-init/2" if self.model2_init == "fresh" else "model-init/1")
        return train(start, data, self.train_cfg, self.dp_cfg).model

    def score(self, model: ModelSpec) -> float:
        return evaluate(self.classifier, self._timings(model).subset(self.test_idx))[0]

    def run(self) -> MIAResult:
        if not hasattr(self, "classifier"):
            self.setup()
        m2 = self.model2(self.T.concat(self.Q))
        acc2 = self.score(m2)
        details = dict(self.details, model2_train_accuracy=accuracy(m2, self.T.concat(self.Q)),
                       retrain_mode=self.retrain_mode, model2_init=self.model2_init)
        return MIAResult(float(self.acc_S1), float(acc2), details)

    def sweep(self, ratios: Sequence[float]) -> OverlapSweepResult:
        if any(not 0 < r < 1 for r in ratios):
            raise ValidationError("overlap ratios must lie in (0, 1)")
        if not hasattr(self, "classifier"):
            self.setup()
        order = substream(self.seed, "overlap-order").permutation(len(self.Q))
        accs = []
        for r in ratios:
            added = self.Q.subset(order[: math.ceil(r * len(self.Q))])
            accs.append(float(self.score(self.model2(self.T.concat(added)))))
        return OverlapSweepResult([float(r) for r in ratios], accs, float(self.acc_S1))


def mia_run(T, Q, train_cfg, dp_cfg, protocol, channel, **kw) -> MIAResult:
    return MIAExperiment(T, Q, train_cfg, dp_cfg, protocol, channel, **kw).run()


def overlap_sweep(T, Q, ratios, train_cfg, dp_cfg, protocol, channel, **kw) -> OverlapSweepResult:
    return MIAExperiment(T, Q, train_cfg, dp_cfg, protocol, channel, **kw).sweep(ratios)
