"""Function-level corpus construction: dedup, cross-label and train/test leakage
filters, corpus statistics and rank-frequency (Zipf) analysis."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .normalize import NormalizedFunction
from .trace import RawSample

logger = logging.getLogger(__name__)


class InsufficientDataError(ValueError):
    pass


@dataclass
class CorpusStats:
    n_binaries: int = 0
    n_initial: int = 0
    n_deduplicated: int = 0
    n_filtered: int = 0
    pct_over_max_len: float = 0.0
    max_len: int = 256

    def check(self) -> None:
        if not (self.n_initial >= self.n_deduplicated >= self.n_filtered >= 0):
            raise AssertionError(f"non-monotone corpus stats: {self}")
        if not 0.0 <= self.pct_over_max_len <= 100.0:
            raise AssertionError(f"pct_over_max_len out of range: {self.pct_over_max_len}")

    def to_report(self) -> dict:
        return {"binaries": self.n_binaries, "initial": self.n_initial,
                "deduplicated": self.n_deduplicated, "filtered": self.n_filtered,
                f"pct_over_{self.max_len}": round(self.pct_over_max_len, 4)}


@dataclass
class LabeledCorpus:
    benign: set[str] = field(default_factory=set)
    malicious: set[str] = field(default_factory=set)
    per_sample: dict[str, list[str]] = field(default_factory=dict)
    stats: CorpusStats = field(default_factory=CorpusStats)
    n_shared_removed: int = 0

    @property
    def union(self) -> set[str]:
        return self.benign | self.malicious

    def examples(self) -> list[tuple[str, int]]:
        """Sorted ``(text, label)`` pairs, label 1 for malicious."""
        out = [(t, 0) for t in self.benign] + [(t, 1) for t in self.malicious]
        out.sort()
        return out


def deduplicate(functions: Iterable[str]) -> tuple[set[str], int, int]:
    """Return (distinct texts, n_initial, n_deduplicated)."""
    n = 0
    seen = set()
    for text in functions:
        n += 1
        seen.add(text)
    return seen, n, len(seen)


def cross_label_filter(malicious: set[str], benign: set[str]) -> set[str]:
    return malicious - benign


def remove_leakage(test_functions: Sequence[str], training_union: set[str]) -> list[str]:
    return [t for t in test_functions if t not in training_union]


def build_labeled_corpus(functions: Iterable[NormalizedFunction], *,
                         token_length: Callable[[str], int] | None = None,
                         max_len: int = 256, n_binaries: int | None = None) -> LabeledCorpus:
    """Build the training corpus from (already length-filtered) functions.

    ``token_length`` measures a function for the over-budget percentage; the
    word count is used when it is not given.
    """
    per_sample: dict[str, list[str]] = {}
    by_label: dict[str, list[str]] = {"benign": [], "malicious": []}
    for f in functions:
        per_sample.setdefault(f.sample_id, []).append(f.text)
        by_label[f.label].append(f.text)

    benign, n_b, _ = deduplicate(by_label["benign"])
    malicious_all, n_m, _ = deduplicate(by_label["malicious"])
    malicious = cross_label_filter(malicious_all, benign)

    measure = token_length or (lambda t: len(t.split()))
    kept = benign | malicious
    n_over = sum(1 for t in kept if measure(t) > max_len)
    stats = CorpusStats(
        n_binaries=len(per_sample) if n_binaries is None else n_binaries,
        n_initial=n_b + n_m,
        n_deduplicated=len(benign) + len(malicious_all),
        n_filtered=len(benign) + len(malicious),
        pct_over_max_len=100.0 * n_over / len(kept) if kept else 0.0,
        max_len=max_len,
    )
    stats.check()
    corpus = LabeledCorpus(benign=benign, malicious=malicious, per_sample=per_sample,
                           stats=stats, n_shared_removed=len(malicious_all) - len(malicious))
    logger.info("corpus: %s (shared functions removed: %d)", stats.to_report(), corpus.n_shared_removed)
    return corpus


def write_stats(path, stats: CorpusStats) -> None:
    Path(path).write_text(json.dumps(stats.to_report(), indent=2, sort_keys=True) + "\n")


# -- rank/frequency ----------------------------------------------------------

def instruction_frequencies(samples: Iterable[RawSample]) -> Counter:
    counts: Counter = Counter()
    for s in samples:
        counts.update(ins.text() for ins in s.instructions)
    return counts


def count_frequent(freqs: Mapping[str, int], above: int = 10) -> int:
    return sum(1 for c in freqs.values() if c > above)


@dataclass(frozen=True)
class ZipfSeries:
    words: tuple[str, ...]
    frequencies: tuple[int, ...]

    @property
    def ranks(self) -> range:
        return range(1, len(self.frequencies) + 1)

    @property
    def points(self) -> list[tuple[int, int]]:
        return list(zip(self.ranks, self.frequencies))

    def __len__(self):
        return len(self.frequencies)


@dataclass(frozen=True)
class PowerLawFit:
    exponent: float
    intercept: float
    r_squared: float

    def to_dict(self) -> dict:
        return asdict(self)


def zipf_rank_frequency(freqs: Mapping[str, int]) -> ZipfSeries:
    ordered = sorted(freqs.items(), key=lambda kv: (-kv[1], kv[0]))
    return ZipfSeries(tuple(w for w, _ in ordered), tuple(c for _, c in ordered))


def fit_power_law(series: ZipfSeries | Sequence[tuple[int, float]]) -> PowerLawFit:
    """Least-squares line through (ln rank, ln frequency); the slope is the exponent."""
    points = series.points if isinstance(series, ZipfSeries) else list(series)
    points = [(r, f) for r, f in points if f > 0]
    if len(points) < 3:
        raise InsufficientDataError(f"need at least 3 positive points, got {len(points)}")
    x = np.log(np.array([p[0] for p in points], dtype=np.float64))
    y = np.log(np.array([p[1] for p in points], dtype=np.float64))
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return PowerLawFit(float(slope), float(intercept), min(max(r2, 0.0), 1.0))


def write_zipf(csv_path, series: ZipfSeries, fit: PowerLawFit | None = None, fit_path=None) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "frequency", "instruction"])
        for r, f, word in zip(series.ranks, series.frequencies, series.words):
            w.writerow([r, f, word])
    if fit is not None and fit_path is not None:
        Path(fit_path).write_text(json.dumps(fit.to_dict(), indent=2, sort_keys=True) + "\n")
