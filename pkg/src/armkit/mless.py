"""Filler-token insertion emulator.

Inserting ``k`` filler tokens changes the attention output of an original
token ``t`` from ``sum_j W[t,j] V[j]`` to

    lambda_t * sum_j W[t,j] V[j]  +  sum_i W'[t,i] V[i]

where ``lambda_t`` is the attention mass ``t`` still puts on original
tokens and the second sum (``sigma_t``) runs over inserted positions. In
layer 1 of a model without positional encodings the split is exact per
head; this module builds insertion scenarios, extracts ``lambda`` and
``sigma`` from traces and measures how well the affine form predicts the
real post-insertion output.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import ForwardTrace, ModelConfig, ModelWeights, forward
from .tensor import RngStream

__all__ = [
    "AffineParams",
    "EmulationResult",
    "InsertionSpec",
    "apply_affine",
    "compute_bias",
    "emulate_vs_actual",
    "extract_lambda",
    "filler_mass",
    "insert_tokens",
    "sweep_lengths",
    "write_sweep_csv",
]

POSITIONS = ("begin", "between", "end", "random")


@dataclass(frozen=True)
class InsertionSpec:
    """``count`` copies of ``token_id`` (or the explicit ``fillers``).

    ``between`` inserts before original index ``boundary_index``; ``random``
    draws the insertion point from ``seed``.
    """

    token_id: int = 0
    count: int = 0
    position: str = "between"
    boundary_index: Optional[int] = None
    seed: int = 0
    fillers: Optional[tuple] = None

    def __post_init__(self):
        if self.position not in POSITIONS:
            raise ValueError(f"unknown insertion position {self.position!r}")
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if self.position == "between" and self.boundary_index is None:
            raise ValueError("position 'between' requires boundary_index")
        if self.fillers is not None and len(self.fillers) != self.count:
            raise ValueError("len(fillers) must equal count")

    def filler_tokens(self) -> list[int]:
        if self.fillers is not None:
            return [int(t) for t in self.fillers]
        return [int(self.token_id)] * self.count


def insert_tokens(tokens: Sequence[int], spec: InsertionSpec,
                  max_seq: Optional[int] = None):
    """New sequence and the map original position -> new position."""
    toks = [int(t) for t in tokens]
    n = len(toks)
    if max_seq is not None and n + spec.count > max_seq:
        raise ValueError(f"insertion overflows max_seq={max_seq}")
    if spec.position == "begin":
        at = 0
    elif spec.position == "end":
        at = n
    elif spec.position == "between":
        at = spec.boundary_index
        if not 0 <= at <= n:
            raise ValueError(f"boundary_index {at} outside [0, {n}]")
    else:
        at = int(RngStream(spec.seed).random() * (n + 1))
    fill = spec.filler_tokens()
    seq = toks[:at] + fill + toks[at:]
    index_map = np.array([i if i < at else i + spec.count for i in range(n)],
                         dtype=np.int64)
    return seq, index_map


def _inserted_positions(index_map: np.ndarray, new_len: int) -> np.ndarray:
    mask = np.ones(new_len, bool)
    mask[index_map] = False
    return np.flatnonzero(mask)


def _check(trace_base: Optional[ForwardTrace], trace_ins: ForwardTrace,
           index_map, layer: int):
    new_len = trace_ins.layers[layer].attn.shape[-1]
    if trace_base is not None:
        if trace_base.layers[layer].attn.shape[-1] != len(index_map):
            raise ValueError("base trace length does not match index_map")
    if len(index_map) and index_map.max() >= new_len:
        raise ValueError("index_map points past the inserted trace")


def _heads(attn: np.ndarray, head: Optional[int]):
    return range(attn.shape[0]) if head is None else [head]


def extract_lambda(trace_base: ForwardTrace, trace_ins: ForwardTrace, index_map,
                   layer: int = 0, head: Optional[int] = 0) -> np.ndarray:
    """Retained original-token attention mass per original token.

    Shape ``[S]`` for one head, ``[H, S]`` when ``head`` is None.
    """
    index_map = np.asarray(index_map)
    _check(trace_base, trace_ins, index_map, layer)
    A0 = trace_base.layers[layer].attn.astype(np.float64)
    A1 = trace_ins.layers[layer].attn.astype(np.float64)
    out = []
    for h in _heads(A1, head):
        kept = A1[h][np.ix_(index_map, index_map)].sum(axis=1)
        base = A0[h].sum(axis=1)
        out.append(kept / base)
    return out[0] if head is not None else np.stack(out)


def filler_mass(trace_ins: ForwardTrace, index_map, layer: int = 0,
                head: Optional[int] = 0) -> np.ndarray:
    """Attention mass each original token puts on inserted positions."""
    index_map = np.asarray(index_map)
    A1 = trace_ins.layers[layer].attn.astype(np.float64)
    ins = _inserted_positions(index_map, A1.shape[-1])
    out = [A1[h][np.ix_(index_map, ins)].sum(axis=1) for h in _heads(A1, head)]
    return out[0] if head is not None else np.stack(out)


def compute_bias(trace_ins: ForwardTrace, index_map, layer: int = 0,
                 head: Optional[int] = 0) -> np.ndarray:
    """``sigma_t = sum_i W[t, i] V[i]`` over inserted positions ``i``.

    Shape ``[S, d_head]`` for one head, ``[H, S, d_head]`` for all heads.
    """
    index_map = np.asarray(index_map)
    _check(None, trace_ins, index_map, layer)
    lt = trace_ins.layers[layer]
    ins = _inserted_positions(index_map, lt.attn.shape[-1])
    out = []
    for h in _heads(lt.attn, head):
        W = lt.attn[h][np.ix_(index_map, ins)].astype(np.float64)
        out.append(W @ lt.values[h][ins].astype(np.float64))
    return out[0] if head is not None else np.stack(out)


@dataclass
class AffineParams:
    lam: np.ndarray  # [S]
    sigma: np.ndarray  # [S, d]


def apply_affine(attn_out: np.ndarray, params: AffineParams) -> np.ndarray:
    """Row ``t`` -> ``lam[t] * attn_out[t] + sigma[t]``."""
    attn_out = np.asarray(attn_out)
    lam = np.asarray(params.lam)
    sigma = np.asarray(params.sigma)
    if attn_out.ndim != 2 or lam.shape != (attn_out.shape[0],) or sigma.shape != attn_out.shape:
        raise ValueError(
            f"apply_affine: shapes {attn_out.shape}, lam {lam.shape}, sigma {sigma.shape}"
        )
    return lam[:, None] * attn_out + sigma


def _coherence(sig: np.ndarray) -> Optional[float]:
    """Mean pairwise cosine between the non-zero rows of ``sig``."""
    norms = np.linalg.norm(sig, axis=1)
    keep = norms > 0
    if keep.sum() < 2:
        return None
    u = sig[keep] / norms[keep, None]
    g = u @ u.T
    m = g.shape[0]
    return float((g.sum() - np.trace(g)) / (m * (m - 1)))


@dataclass
class EmulationResult:
    residuals: np.ndarray  # [H, S] relative L2 of affine prediction
    mean_residual: float
    lam: np.ndarray  # [H, S]
    lambda_mean: float
    lambda_min: float
    lambda_max: float
    sigma_l2_mean: float
    coherence: Optional[float]  # mean over heads of per-head coherence
    mass_identity_max_err: float

    def summary(self) -> dict:
        return {
            "mean_residual": self.mean_residual,
            "lambda_mean": self.lambda_mean,
            "lambda_min": self.lambda_min,
            "lambda_max": self.lambda_max,
            "lambda_per_head": [float(x) for x in self.lam.mean(axis=1)],
            "sigma_l2_mean": self.sigma_l2_mean,
            "coherence": self.coherence,
            "mass_identity_max_err": self.mass_identity_max_err,
        }


def emulate_vs_actual(tokens: Sequence[int], spec: InsertionSpec,
                      weights: ModelWeights, cfg: ModelConfig,
                      layer: int = 0, head: Optional[int] = None) -> EmulationResult:
    """Compare the affine prediction with the real post-insertion output.

    Comparison is per head, before the output projection.
    """
    _, base = forward(tokens, weights, cfg)
    seq, imap = insert_tokens(tokens, spec, cfg.max_seq)
    _, ins = forward(seq, weights, cfg)
    heads = list(_heads(base.layers[layer].attn, head))
    lam = extract_lambda(base, ins, imap, layer, None)[heads]
    mass = filler_mass(ins, imap, layer, None)[heads]
    sig = compute_bias(ins, imap, layer, None)[heads]
    h0 = base.layers[layer].head_out[heads].astype(np.float64)
    h1 = ins.layers[layer].head_out[heads][:, imap].astype(np.float64)
    res = np.empty_like(lam)
    cohs = []
    for j in range(len(heads)):
        pred = apply_affine(h0[j], AffineParams(lam[j], sig[j]))
        denom = np.maximum(np.linalg.norm(h1[j], axis=1), 1e-30)
        res[j] = np.linalg.norm(h1[j] - pred, axis=1) / denom
        c = _coherence(sig[j])
        if c is not None:
            cohs.append(c)
    return EmulationResult(
        residuals=res,
        mean_residual=float(res.mean()),
        lam=lam,
        lambda_mean=float(lam.mean()),
        lambda_min=float(lam.min()),
        lambda_max=float(lam.max()),
        sigma_l2_mean=float(np.linalg.norm(sig, axis=2).mean()),
        coherence=float(np.mean(cohs)) if cohs else None,
        mass_identity_max_err=float(np.abs(lam + mass - 1).max()),
    )


def sweep_lengths(tokens: Sequence[int], filler: int, counts: Sequence[int],
                  weights: ModelWeights, cfg: ModelConfig, position: str = "begin",
                  boundary_index: Optional[int] = None, layer: int = 0):
    """One row ``(k, lambda_mean, sigma_l2_mean, residual_mean)`` per count."""
    rows = []
    for k in counts:
        spec = InsertionSpec(token_id=filler, count=int(k), position=position,
                             boundary_index=boundary_index)
        r = emulate_vs_actual(tokens, spec, weights, cfg, layer)
        rows.append((int(k), r.lambda_mean, r.sigma_l2_mean, r.mean_residual))
    return rows


SWEEP_HEADER = ("k", "lambda_mean", "sigma_l2_mean", "residual_mean")


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for k, lam, sig, res in rows:
            w.writerow([k, repr(float(lam)), repr(float(sig)), repr(float(res))])


def sweep_flags(rows) -> dict:
    lam = [r[1] for r in rows]
    sig = [r[2] for r in rows]
    return {
        "lambda_nonincreasing": all(b <= a + 1e-12 for a, b in zip(lam, lam[1:])),
        "sigma_nondecreasing": all(b >= a - 1e-12 for a, b in zip(sig, sig[1:])),
    }
