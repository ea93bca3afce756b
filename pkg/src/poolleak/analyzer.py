"""Median-sign distinguishability statistics over timing distributions."""

from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateInput, EmptyInput, LengthError, MissingData, RangeError
from .harness import TimingDistribution


class Verdict(str, enum.Enum):
    DISTINGUISHABLE = "Distinguishable"
    INDISTINGUISHABLE = "Indistinguishable"


def median(samples) -> float:
    """Lower median: the element of rank ``(n - 1) // 2`` in sorted order."""
    a = np.asarray(samples, dtype=np.float64).ravel()
    if a.size == 0:
        raise EmptyInput("median of an empty sample")
    k = (a.size - 1) // 2
    return float(np.partition(a, k)[k])


def indicator_B(median_i: float, median_j: float) -> int:
    # a tie counts as 0
    return 1 if median_i > median_j else 0


def decision_D(bits: Sequence[int]) -> int:
    b = np.asarray(bits, dtype=np.int64).ravel()
    if b.size == 0:
        raise LengthError("need at least one run")
    return int(b.sum())


def classify_pair(D: int, M: int) -> Verdict:
    if M < 1 or not 0 <= D <= M:
        raise RangeError(f"D={D} outside [0, M={M}]")
    half = M // 2
    if D <= half - 2 or D >= half + 2:
        return Verdict.DISTINGUISHABLE
    return Verdict.INDISTINGUISHABLE


@dataclass
class PairDecision:
    class_i: int
    class_j: int
    B_per_run: list[int]
    D: int
    verdict: Verdict
    ties: int = 0

    def to_dict(self) -> dict:
        return {"i": self.class_i, "j": self.class_j, "D": self.D,
                "ties": self.ties, "verdict": self.verdict.value}


@dataclass
class LeakageReport:
    classes: list[int]
    M: int
    pairs: list[PairDecision]
    params: dict = field(default_factory=dict)

    @property
    def total_pairs(self) -> int:
        return len(self.pairs)

    @property
    def distinguishable_count(self) -> int:
        return sum(p.verdict is Verdict.DISTINGUISHABLE for p in self.pairs)

    @property
    def fraction(self) -> float:
        return self.distinguishable_count / self.total_pairs if self.pairs else 0.0

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "classes": self.classes,
            "M": self.M,
            "total_pairs": self.total_pairs,
            "distinguishable_count": self.distinguishable_count,
            "pairs": [p.to_dict() for p in self.pairs],
        }


def decide_pair(medians_i: Sequence[float], medians_j: Sequence[float], ci: int = 0, cj: int = 1) -> PairDecision:
    """B per run, D and verdict for one pair of per-run median lists.

    A pair whose medians tie in every run carries no ordering evidence at
    all, so it is reported Indistinguishable even though D = 0.
    """
    if len(medians_i) != len(medians_j):
        raise LengthError("median lists differ in length")
    bits = [indicator_B(a, b) for a, b in zip(medians_i, medians_j)]
    ties = sum(a == b for a, b in zip(medians_i, medians_j))
    D = decision_D(bits)
    M = len(bits)
    verdict = Verdict.INDISTINGUISHABLE if ties == M else classify_pair(D, M)
    return PairDecision(ci, cj, bits, D, verdict, ties)


def median_table(dists: Mapping[tuple[int, int], object]) -> tuple[list[int], int, np.ndarray]:
    """(classes, M, medians[class_pos, run]) from a (class, run) keyed map.

    Values may be :class:`TimingDistribution` objects or raw sample arrays.
    """
    classes = sorted({c for c, _ in dists})
    runs = sorted({m for _, m in dists})
    if not classes or not runs:
        raise MissingData("no distributions")
    table = np.empty((len(classes), len(runs)))
    for a, c in enumerate(classes):
        for b, m in enumerate(runs):
            if (c, m) not in dists:
                raise MissingData(f"missing distribution for class {c}, run {m}")
            d = dists[(c, m)]
            table[a, b] = median(d.flattened if isinstance(d, TimingDistribution) else d)
    return classes, len(runs), table


def analyze_medians(classes: Sequence[int], table: np.ndarray, params: dict | None = None) -> LeakageReport:
    pairs = [
        decide_pair(table[a], table[b], classes[a], classes[b])
        for a, b in itertools.combinations(range(len(classes)), 2)
    ]
    return LeakageReport(list(classes), table.shape[1], pairs, dict(params or {}))


def analyze_pairs(dists: Mapping[tuple[int, int], object], params: dict | None = None) -> LeakageReport:
    classes, _, table = median_table(dists)
    return analyze_medians(classes, table, params)


@dataclass
class LayerwiseReport:
    layer_names: list[str]
    reports: list[LeakageReport]
    params: dict = field(default_factory=dict)

    @property
    def counts(self) -> list[int]:
        return [r.distinguishable_count for r in self.reports]

    @property
    def total_pairs(self) -> int:
        return self.reports[0].total_pairs if self.reports else 0

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "total_pairs": self.total_pairs,
            "layers": [
                {"index": k, "kind": name.split(":", 1)[1], "distinguishable_count": r.distinguishable_count,
                 "pairs": [p.to_dict() for p in r.pairs]}
                for k, (name, r) in enumerate(zip(self.layer_names, self.reports))
            ],
        }


def analyze_layer_samples(
    layer_names: Sequence[str],
    samples: Mapping[tuple[int, int], np.ndarray],
    params: dict | None = None,
) -> LayerwiseReport:
    """Pairwise analysis per layer; ``samples[(class, run)]`` is (P*N, layers)."""
    reports = []
    for k in range(len(layer_names)):
        column = {key: arr[:, k] for key, arr in samples.items()}
        reports.append(analyze_pairs(column))
    return LayerwiseReport(list(layer_names), reports, dict(params or {}))


def analyze_layerwise(model, groups, protocol, channel, params: dict | None = None) -> LayerwiseReport:
    from .harness import run_protocol_layers

    samples = run_protocol_layers(model, groups, protocol, channel)
    return analyze_layer_samples(model.layer_names, samples, params)


def _spearman(a: np.ndarray, b: np.ndarray) -> float:
    def ranks(v):
        # average ranks for ties
        order = np.argsort(v, kind="stable")
        r = np.empty(v.size)
        r[order] = np.arange(v.size)
        for val in np.unique(v):
            mask = v == val
            r[mask] = r[mask].mean()
        return r

    ra, rb = ranks(a), ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra**2).sum() * (rb**2).sum())
    return float((ra * rb).sum() / denom) if denom else 0.0


def correlate_updates_time(counts: Sequence[float], medians: Sequence[float]) -> tuple[float, float]:
    """(share of sign-consistent class pairs, Spearman rho over classes)."""
    c = np.asarray(counts, dtype=np.float64)
    m = np.asarray(medians, dtype=np.float64)
    if c.shape != m.shape:
        raise LengthError("counts and medians cover different class sets")
    if c.size < 2 or np.all(c == c[0]):
        raise DegenerateInput("update counts are all equal")
    agree = total = 0
    for a, b in itertools.combinations(range(c.size), 2):
        s1, s2 = np.sign(c[a] - c[b]), np.sign(m[a] - m[b])
        if s1 == 0 or s2 == 0:
            continue
        total += 1
        agree += s1 == s2
    frac = agree / total if total else 0.0
    return float(frac), _spearman(c, m)


def _plain(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, enum.Enum):
        return o.value
    raise TypeError(f"cannot serialize {type(o).__name__}")


def report_json(obj) -> str:
    """Stable text form used for every emitted report."""
    data = obj.to_dict() if hasattr(obj, "to_dict") else obj
    return json.dumps(data, indent=2, sort_keys=True, default=_plain) + "\n"
