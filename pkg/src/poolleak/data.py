"""Seeded synthetic image classes and named random sub-streams.

Each class is a fixed seeded Gaussian texture confined to a class-dependent
band of rows on an otherwise flat image; samples perturb the texture with
small Gaussian noise.
"""

from __future__ import annotations

import os
import zlib
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError
from .tensor import Tensor, dumps, loads
from .trainer import LabeledDataset


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named stage (model-init, data-gen, ...)."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])


def substream_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(0, 2**63 - 1))


def textured_rows(cls: int, class_count: int, height: int) -> int:
    """Number of textured leading rows for class ``cls`` (2 .. height - 2).

    The band stops two rows short of the bottom: a 3x3 stride-2 pool over an
    even height never reads the last row, so a taller band would not change
    the update count.
    """
    span = max(height - 4, 0)
    if class_count == 1:
        return min(2 + span, height)
    return min(2 + (cls * span) // (class_count - 1), height)


class SyntheticTask:
    """Fixed per-class Gaussian templates; samples add small instance noise.

    Class ``c`` textures its first :func:`textured_rows` rows with the class
    template and leaves the rest at exactly zero. Constant regions give
    constant feature maps, where a max-pool scan updates once per window, so
    the update count grows with the textured area.
    """

    def __init__(self, class_count: int = 10, shape: Sequence[int] = (3, 16, 16),
                 seed: int = 0, noise: float = 0.1):
        self.class_count = class_count
        self.shape = tuple(int(d) for d in shape)
        self.noise = noise
        c_dim, h, w = self.shape
        self.templates = []
        for c in range(class_count):
            rows = textured_rows(c, class_count, h)
            rng = substream(seed, f"template/{c}")
            self.templates.append(rng.standard_normal((c_dim, rows, w)))

    def image(self, cls: int, rng: np.random.Generator) -> np.ndarray:
        tpl = self.templates[cls]
        img = np.zeros(self.shape)
        img[:, : tpl.shape[1]] = tpl + self.noise * rng.standard_normal(tpl.shape)
        return img.astype(np.float32)

    def sample(self, per_class: int, rng: np.random.Generator) -> LabeledDataset:
        inputs, labels = [], []
        for _ in range(per_class):
            for c in range(self.class_count):
                inputs.append(Tensor.from_array(self.image(c, rng)))
                labels.append(c)
        return LabeledDataset(inputs, labels, self.class_count)


def make_synthetic(
    per_class: int,
    class_count: int = 10,
    shape: Sequence[int] = (3, 16, 16),
    seed: int = 0,
    stream: str = "data-gen",
    noise: float = 0.1,
) -> LabeledDataset:
    task = SyntheticTask(class_count, shape, seed, noise)
    return task.sample(per_class, substream(seed, stream))


def make_train_query(
    train_per_class: int,
    query_per_class: int,
    class_count: int = 10,
    shape: Sequence[int] = (3, 16, 16),
    seed: int = 0,
    noise: float = 0.1,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Training set T and query set Q: same class templates, independent
    instance noise streams, so the two sets are disjoint."""
    task = SyntheticTask(class_count, shape, seed, noise)
    t = task.sample(train_per_class, substream(seed, "data-gen/T"))
    q = task.sample(query_per_class, substream(seed, "data-gen/Q"))
    return t, q


def load_directory(path: str | os.PathLike, class_count: int | None = None) -> LabeledDataset:
    """Load ``<path>/<label>/*.json`` tensor files, sorted by name."""
    root = Path(path)
    dirs = sorted((d for d in root.iterdir() if d.is_dir()), key=lambda d: int(d.name))
    if not dirs:
        raise FormatError(f"no class directories under {root}")
    inputs, labels = [], []
    for d in dirs:
        for f in sorted(d.glob("*.json")):
            inputs.append(loads(f.read_text()))
            labels.append(int(d.name))
    count = class_count if class_count is not None else max(labels) + 1
    return LabeledDataset(inputs, labels, count)


def save_directory(data: LabeledDataset, path: str | os.PathLike) -> None:
    root = Path(path)
    for i, (x, y) in enumerate(zip(data.inputs, data.labels)):
        d = root / str(y)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{i:06d}.json").write_text(dumps(x))
