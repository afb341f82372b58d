"""Sample-level decisions: aggregate function verdicts, fit a linear SVM over
per-sample features, classify samples and score the result."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

BENIGN = "benign"
MALICIOUS = "malicious"
INDETERMINATE = "indeterminate"

SIZE_CLASSES = (("C1", 10), ("C2", 100), ("C3", 1000))


def size_class(n_functions: int) -> str | None:
    """Bucket a function count: C1 <= 10, C2 <= 100, C3 <= 1000, C4 above."""
    if n_functions <= 0:
        return None
    for name, upper in SIZE_CLASSES:
        if n_functions <= upper:
            return name
    return "C4"


@dataclass(frozen=True)
class SampleFeatures:
    sample_id: str
    n_functions: int
    malicious_count: int
    malicious_pct: float
    size_class: str | None

    @property
    def degenerate(self) -> bool:
        return self.n_functions == 0

    def vector(self) -> np.ndarray:
        return np.array([self.malicious_pct, math.log10(self.n_functions)])


def aggregate_sample(verdicts: Iterable, sample_id: str) -> SampleFeatures:
    """Count malicious verdicts; accepts FunctionVerdicts or plain label strings."""
    labels = [v if isinstance(v, str) else v.label for v in verdicts]
    n = len(labels)
    mal = sum(1 for lab in labels if lab == MALICIOUS)
    pct = 100.0 * mal / n if n else 0.0
    return SampleFeatures(sample_id, n, mal, pct, size_class(n))


@dataclass(frozen=True)
class Hyperplane:
    """Linear boundary in standardized (malicious_pct, log10 n_functions) space."""
    weights: tuple[float, float]
    bias: float
    feature_means: tuple[float, float]
    feature_stds: tuple[float, float]

    def __post_init__(self):
        if all(w == 0 for w in self.weights):
            raise ValueError("hyperplane weights are all zero")
        if any(s <= 0 for s in self.feature_stds):
            raise ValueError("feature stds must be positive")

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - np.array(self.feature_means)) / np.array(self.feature_stds)

    def decision(self, x: np.ndarray) -> np.ndarray:
        return self.standardize(x) @ np.array(self.weights) + self.bias

    def raw_space(self) -> tuple[np.ndarray, float]:
        """Equivalent (weights, bias) acting on unstandardized features."""
        w = np.array(self.weights) / np.array(self.feature_stds)
        b = self.bias - float(w @ np.array(self.feature_means))
        return w, b

    def scaled(self, factor: float) -> "Hyperplane":
        return Hyperplane(tuple(factor * w for w in self.weights), factor * self.bias,
                          self.feature_means, self.feature_stds)

    def to_dict(self) -> dict:
        w_raw, b_raw = self.raw_space()
        d = asdict(self)
        d["raw_weights"] = [float(v) for v in w_raw]
        d["raw_bias"] = float(b_raw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperplane":
        return cls(tuple(d["weights"]), d["bias"], tuple(d["feature_means"]), tuple(d["feature_stds"]))


def _label_array(labels: Sequence) -> np.ndarray:
    out = []
    for lab in labels:
        if lab in (MALICIOUS, 1, True):
            out.append(1.0)
        elif lab in (BENIGN, 0, False):
            out.append(-1.0)
        else:
            raise ValueError(f"unknown label {lab!r}")
    return np.array(out)


def fit_svm(features: Sequence[SampleFeatures], labels: Sequence, C: float = 1.0,
            epochs: int = 2000, seed: int = 0) -> Hyperplane:
    """Soft-margin linear SVM by full-batch sub-gradient descent.

    Minimizes ``0.5 |w|^2 + C * sum(hinge)`` with step ``eta0 / sqrt(t + 1)``
    and keeps the best iterate seen; the bias is not regularized.
    """
    if any(f.degenerate for f in features):
        raise ValueError("cannot fit on samples without functions")
    y = _label_array(labels)
    if len(y) != len(features):
        raise ValueError("features and labels differ in length")
    if len(set(y.tolist())) < 2:
        raise ValueError("SVM fit needs both benign and malicious samples")
    X = np.stack([f.vector() for f in features])
    means = X.mean(axis=0)
    stds = X.std(axis=0)
    stds = np.where(stds > 0, stds, 1.0)
    Z = (X - means) / stds

    rng = np.random.default_rng(seed)
    w = rng.normal(scale=1e-3, size=2)
    b = 0.0
    eta0 = 1.0 / max(1.0, C * len(y))

    def objective(w, b):
        return 0.5 * float(w @ w) + C * float(np.maximum(0.0, 1.0 - y * (Z @ w + b)).sum())

    best = (objective(w, b), w.copy(), b)
    for t in range(epochs):
        active = y * (Z @ w + b) < 1.0
        gw = w - C * (y[active, None] * Z[active]).sum(axis=0)
        gb = -C * y[active].sum()
        eta = eta0 / math.sqrt(t + 1)
        w = w - eta * gw
        b = b - eta * gb
        obj = objective(w, b)
        if obj < best[0]:
            best = (obj, w.copy(), b)
    _, w, b = best
    if np.all(w == 0):
        w = np.array([1e-12, 0.0])
    return Hyperplane((float(w[0]), float(w[1])), float(b),
                      (float(means[0]), float(means[1])), (float(stds[0]), float(stds[1])))


def classify_sample(h: Hyperplane, f: SampleFeatures) -> tuple[str, float | None]:
    """Return (verdict, signed decision value); empty samples are indeterminate."""
    if f.degenerate:
        return INDETERMINATE, None
    margin = float(h.decision(f.vector()))
    return (MALICIOUS if margin > 0 else BENIGN), margin


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
                "accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}


def compute_metrics(predictions: Sequence, truth: Sequence) -> Metrics:
    """Confusion counts with malicious as the positive class."""
    if len(predictions) != len(truth):
        raise ValueError("predictions and truth differ in length")
    p = _label_array(predictions) > 0
    t = _label_array(truth) > 0
    return Metrics(tp=int(np.sum(p & t)), fp=int(np.sum(p & ~t)),
                   fn=int(np.sum(~p & t)), tn=int(np.sum(~p & ~t)))


# -- reports ------------------------------------------------------------------

def verdict_record(f: SampleFeatures, family: str, verdict: str, margin: float | None, truth: str) -> dict:
    return {"sample_id": f.sample_id, "family": family, "n_functions": f.n_functions,
            "malicious_pct": round(f.malicious_pct, 6), "size_class": f.size_class,
            "margin": None if margin is None else round(margin, 9),
            "verdict": verdict, "truth": truth}


def write_verdicts(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def write_plot_data(csv_path, json_path, records: Iterable[dict], h: Hyperplane) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "malicious_pct", "n_functions", "size_class", "truth"])
        for r in records:
            if r["n_functions"]:
                w.writerow([r["sample_id"], r["malicious_pct"], r["n_functions"], r["size_class"], r["truth"]])
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(h.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
