"""Measurement instruments for activations, attention and generations."""

from __future__ import annotations

import csv
import json
import re
import zlib
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import ForwardTrace
from .tensor import percentile

__all__ = [
    "ActivationMetrics",
    "DiversityScore",
    "OPERATORS",
    "CONJUNCTIONS",
    "activation_metrics",
    "classify_token",
    "column_mean_below_diag",
    "gini",
    "histogram",
    "l1_norm",
    "l2_norm",
    "ngram_diversity",
    "near_zero_proportion_by_class",
    "pass_at_k",
    "relative_sparsity",
    "tokenize",
]

TOKEN_CLASSES = ("digit", "operator", "conjunction", "other")
OPERATORS = frozenset("+ - − * / = < > ^ % ( )".split())
CONJUNCTIONS = frozenset(
    "and or but so because then thus therefore since hence if".split()
)


# -- attention ----------------------------------------------------------------

def column_mean_below_diag(attn) -> np.ndarray:
    """Per position ``j``: mean of ``attn[i, j]`` over ``i > j``.

    The last column has no entries below the diagonal and scores 0. A 3-D
    input ``[H, S, S]`` gives one profile per head.
    """
    a = np.asarray(attn, dtype=np.float64)
    if a.ndim == 3:
        return np.stack([column_mean_below_diag(h) for h in a])
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"column_mean_below_diag: need a square matrix, got {a.shape}")
    S = a.shape[0]
    below = np.tril(a, k=-1).sum(axis=0)
    counts = np.arange(S - 1, -1, -1, dtype=np.float64)
    return np.divide(below, counts, out=np.zeros(S), where=counts > 0)


# -- activation distribution -------------------------------------------------

def histogram(acts, n_bins: int = 100, range: Optional[tuple] = None):
    """Equal-width ``(edges, counts)``; values equal to ``hi`` land in the last bin.

    ``range=None`` uses ``[min, max]`` (widened by 0.5 each side for
    constant input). Values outside an explicit range are not counted.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    x = np.asarray(acts, dtype=np.float64).ravel()
    if range is None:
        if x.size == 0:
            lo, hi = 0.0, 1.0
        else:
            lo, hi = float(x.min()), float(x.max())
            if lo == hi:
                lo, hi = lo - 0.5, hi + 0.5
    else:
        lo, hi = map(float, range)
        if not lo < hi:
            raise ValueError(f"histogram: need lo < hi, got ({lo}, {hi})")
    counts, edges = np.histogram(x, bins=n_bins, range=(lo, hi))
    return edges, counts.astype(np.int64)


def symmetric_range(acts) -> tuple[float, float]:
    m = float(np.max(np.abs(np.asarray(acts, dtype=np.float64)))) if np.size(acts) else 0.0
    if m == 0.0:
        m = 0.5
    return -m, m


def l1_norm(acts) -> float:
    return float(np.abs(np.asarray(acts, dtype=np.float64)).sum())


def l2_norm(acts) -> float:
    return float(np.sqrt(np.square(np.asarray(acts, dtype=np.float64)).sum()))


def gini(counts) -> float:
    """``sum_ij |c_i - c_j| / (2 n sum c)`` via the sorted-rank identity."""
    c = np.asarray(counts, dtype=np.float64).ravel()
    if c.size == 0:
        raise ValueError("gini: empty counts")
    if np.any(c < 0):
        raise ValueError("gini: negative counts")
    total = c.sum()
    if total <= 0:
        raise ValueError("gini: zero total")
    n = c.size
    s = np.sort(c)
    ranks = 2 * np.arange(1, n + 1) - n - 1
    return float(2 * np.dot(ranks, s) / (2 * n * total))


def relative_sparsity(base, new, quantile_q: float = 50.0) -> tuple[float, float]:
    """``(share of |new| below tau, tau)`` with ``tau = percentile(|base|, q)``."""
    b = np.asarray(base, dtype=np.float64).ravel()
    x = np.asarray(new, dtype=np.float64).ravel()
    if b.size == 0 or x.size == 0:
        raise ValueError("relative_sparsity: empty input")
    tau = percentile(np.abs(b), quantile_q)
    return int(np.count_nonzero(np.abs(x) < tau)) / x.size, tau


@dataclass
class ActivationMetrics:
    relative_sparsity: float
    l1: float
    l2: float
    gini: float
    tau: float
    q: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def activation_metrics(base, new, q: float = 50.0, n_bins: int = 100) -> ActivationMetrics:
    """The four distribution indicators of ``new`` relative to ``base``."""
    rs, tau = relative_sparsity(base, new, q)
    _, counts = histogram(new, n_bins, symmetric_range(new))
    return ActivationMetrics(rs, l1_norm(new), l2_norm(new), gini(counts), tau, q)


# -- token classes ------------------------------------------------------------

_TOKEN_RE = re.compile(r"\d|[A-Za-z]+|[^\sA-Za-z\d]")


def tokenize(text: str, vocab_size: int) -> tuple[list[str], list[int]]:
    """Toy splitter: single digits, letter runs and single symbols.

    Each piece maps to ``crc32(piece) % vocab_size``.
    """
    pieces = _TOKEN_RE.findall(text)
    return pieces, [zlib.crc32(p.encode("utf-8")) % vocab_size for p in pieces]


def classify_token(text: str) -> str:
    t = text.strip()
    alnum = [ch for ch in t if ch.isalnum()]
    if alnum and all("0" <= ch <= "9" for ch in alnum):
        return "digit"
    if t in OPERATORS:
        return "operator"
    if t.lower() in CONJUNCTIONS:
        return "conjunction"
    return "other"


def near_zero_proportion_by_class(trace: ForwardTrace, token_texts: Sequence[str],
                                  epsilon: float, layer: int = 0) -> dict:
    """Class -> mean over its tokens of the share of dims with ``|a| <= eps``.

    Classes with no tokens are left out.
    """
    acts = np.asarray(trace.layers[layer].act_post, dtype=np.float64)
    if acts.shape[0] != len(token_texts):
        raise ValueError(
            f"{len(token_texts)} token texts for {acts.shape[0]} trace positions"
        )
    per_tok = (np.abs(acts) <= epsilon).mean(axis=1)
    groups: dict[str, list[float]] = {}
    for text, share in zip(token_texts, per_tok):
        groups.setdefault(classify_token(text), []).append(float(share))
    return {c: float(np.mean(groups[c])) for c in TOKEN_CLASSES if c in groups}


# -- generations --------------------------------------------------------------

@dataclass
class DiversityScore:
    distinct_n: int
    total_n: int
    ratio: float


def ngram_diversity(sequences: Iterable[Sequence], n: int = 2) -> DiversityScore:
    """Distinct n-grams over total n-gram occurrences, pooled across sequences."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seen = set()
    total = 0
    for seq in sequences:
        s = tuple(seq)
        for i in range(len(s) - n + 1):
            seen.add(s[i:i + n])
            total += 1
    return DiversityScore(len(seen), total, len(seen) / total if total else 0.0)


def pass_at_k(outcomes: Sequence[Sequence[bool]], k: int) -> float:
    """Share of problems with a correct answer among the first ``k`` samples."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not outcomes:
        raise ValueError("pass_at_k: no problems")
    for i, o in enumerate(outcomes):
        if len(o) < k:
            raise ValueError(f"problem {i} has {len(o)} samples, need {k}")
    return sum(any(o[:k]) for o in outcomes) / len(outcomes)


# -- CSV helpers ----------------------------------------------------------------

def write_histogram_csv(path, edges, counts) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def write_profile_csv(path, scores) -> None:
    """``position, head_0, ..., mean`` for ``[H, S]`` scores (or one column for ``[S]``)."""
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["position"] + [f"head_{h}" for h in range(s.shape[0])] + ["mean"])
        mean = s.mean(axis=0)
        for j in range(s.shape[1]):
            w.writerow([j] + [repr(float(v)) for v in s[:, j]] + [repr(float(mean[j]))])
