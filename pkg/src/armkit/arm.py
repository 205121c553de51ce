"""Activation redistribution: push near-zero MLP activations outward.

One application to an activation tensor ``acts``:

* ``eps = kappa * MAD(acts) * c`` marks the near-zero band ``[-eps, eps]``;
* ``p`` is the share of entries inside the band, clipped to
  ``[p_min, p_max]`` (``direct_p`` mode skips the band and uses ``p`` as
  given);
* the ``round(fraction * N)`` smallest-magnitude entries are selected;
* each selected entry gets a uniform draw added, from ``[0, Q_p1(acts)]``
  when it is non-negative and from ``[min(acts), 0]`` when negative.

Statistics are taken once over the whole tensor before anything changes
(``scope="row"`` instead treats each last-axis row as its own tensor).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import _select
from .tensor import RngStream, mad, percentile

__all__ = [
    "ArmConfig",
    "ArmHook",
    "ArmReport",
    "ArmSelection",
    "apply",
    "clip_fraction",
    "near_zero_threshold",
    "perturbation_range",
    "raw_fraction",
    "select",
]

# Gaussian consistency constant: 1 / Phi^-1(3/4)
KAPPA_GAUSSIAN = 1.4826

# below this size the plain numpy path is as fast as the kernels
FAST_MIN_SIZE = 1 << 15


@dataclass(frozen=True)
class ArmConfig:
    c: float = 0.13
    kappa: float = KAPPA_GAUSSIAN
    p_min: float = 0.02
    p_max: float = 0.25
    p1: float = 99.5
    mode: str = "mad_threshold"
    p: Optional[float] = None
    seed: int = 0
    scope: str = "tensor"

    def __post_init__(self):
        if self.scope not in ("tensor", "row"):
            raise ValueError(f"unknown ARM scope {self.scope!r}")
        if not 0 < self.p_min <= self.p_max <= 1:
            raise ValueError(f"need 0 < p_min <= p_max <= 1, got {self.p_min}, {self.p_max}")
        if not 0 < self.p1 <= 100:
            raise ValueError(f"p1 must be in (0, 100], got {self.p1}")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.mode == "mad_threshold":
            if self.c <= 0:
                raise ValueError("c must be positive")
        elif self.mode == "direct_p":
            if self.p is None or not 0 < self.p <= 1:
                raise ValueError("direct_p mode needs p in (0, 1]")
        else:
            raise ValueError(f"unknown ARM mode {self.mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ArmConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown ARM config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ArmSelection:
    indices: np.ndarray  # flat, ascending
    signs: np.ndarray  # +1 / -1, zero counts as +1


@dataclass
class ArmReport:
    epsilon: Optional[float]
    p_raw: float
    fraction: float
    n_modified: int
    n_total: int
    q_upper: float
    min_act: float
    degenerate_pos: bool = False
    degenerate_neg: bool = False
    mode: str = "mad_threshold"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def near_zero_threshold(acts, cfg: ArmConfig) -> float:
    flat = np.asarray(acts).ravel()
    if flat.size == 0:
        raise ValueError("near_zero_threshold: empty activations")
    return cfg.kappa * mad(flat) * cfg.c


def raw_fraction(acts, epsilon: float) -> float:
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    flat = np.asarray(acts).ravel()
    return int(np.count_nonzero(np.abs(flat.astype(np.float64)) <= epsilon)) / flat.size


def clip_fraction(p: float, cfg: ArmConfig) -> float:
    if not 0 <= p <= 1:
        raise ValueError(f"p={p} outside [0, 1]")
    return min(max(p, cfg.p_min), cfg.p_max)


def _count(fraction: float, n: int) -> int:
    # round half up
    return min(n, int(math.floor(fraction * n + 0.5)))


def select(acts, fraction: float) -> ArmSelection:
    """The ``round(fraction * N)`` entries of smallest magnitude.

    Ties go to the lower flat index.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction={fraction} outside (0, 1]")
    flat = np.asarray(acts).ravel()
    k = _count(fraction, flat.size)
    order = np.argsort(np.abs(flat.astype(np.float64)), kind="stable")
    idx = np.sort(order[:k])
    return ArmSelection(idx, np.where(flat[idx] >= 0, 1, -1).astype(np.int8))


def perturbation_range(acts, sign: int, cfg: ArmConfig) -> tuple[float, float, bool]:
    """``(lo, hi, degenerate)`` for entries of the given sign.

    A range whose bounds cross zero the wrong way (e.g. ``Q_p1 < 0``)
    collapses to ``(0, 0)`` with ``degenerate`` set.
    """
    flat = np.asarray(acts).ravel()
    if flat.size == 0:
        raise ValueError("perturbation_range: empty activations")
    if sign > 0:
        lo, hi = 0.0, percentile(flat, cfg.p1)
    else:
        lo, hi = float(flat.min()), 0.0
    return _collapse(lo, hi)


def _collapse(lo: float, hi: float) -> tuple[float, float, bool]:
    if hi < lo:
        return 0.0, 0.0, True
    return lo, hi, False


@dataclass
class _Stats:
    epsilon: Optional[float]
    p_raw: float
    fraction: float
    k: int
    q_upper: float
    min_act: float
    thr: float  # select |a| < thr, then `ties` entries with |a| == thr
    ties: int


def _stats_reference(flat: np.ndarray, cfg: ArmConfig) -> _Stats:
    n = flat.size
    absf = np.abs(flat.astype(np.float64))
    if cfg.mode == "direct_p":
        eps = None
        p_raw = cfg.p
        fraction = cfg.p
    else:
        eps = cfg.kappa * mad(flat) * cfg.c
        p_raw = int(np.count_nonzero(absf <= eps)) / n
        fraction = clip_fraction(p_raw, cfg)
    k = _count(fraction, n)
    if k:
        t = float(np.partition(absf, k - 1)[k - 1])
        ties = k - int(np.count_nonzero(absf < t))
    else:
        t, ties = 0.0, 0
    return _Stats(eps, p_raw, fraction, k, percentile(flat, cfg.p1),
                  float(flat.min()), t, ties)


def _stats_fast(flat: np.ndarray, cfg: ArmConfig) -> _Stats:
    n = flat.size
    h = n // 2
    med_ranks = (h,) if n % 2 else (h - 1, h)
    rank = cfg.p1 / 100.0 * (n - 1)
    q_lo = int(math.floor(rank))
    q_ranks = (q_lo, min(q_lo + 1, n - 1))
    got = _select.order_stats(flat, _select.VALUE, 0.0, [med_ranks, q_ranks])
    if got is None:
        return _stats_reference(flat, cfg)
    m = sum(got[r] for r in med_ranks) / len(med_ranks)
    q_upper = got[q_ranks[0]] + (got[q_ranks[1]] - got[q_ranks[0]]) * (rank - q_lo)
    if cfg.mode == "direct_p":
        eps = None
        p_raw = fraction = cfg.p
    else:
        got_dev = _select.order_stats(flat, _select.ABS_DEV, m, [med_ranks])
        if got_dev is None:
            return _stats_reference(flat, cfg)
        mad_ = sum(got_dev[r] for r in med_ranks) / len(med_ranks)
        eps = cfg.kappa * mad_ * cfg.c
        p_raw = int(_select.count_abs_le(flat, eps)) / n
        fraction = clip_fraction(p_raw, cfg)
    k = _count(fraction, n)
    if k == 0:
        t, ties = 0.0, 0
    elif eps is not None and fraction == p_raw:
        # unclipped: the selection is exactly the band |a| <= eps
        t, ties = eps, n
    else:
        got_abs = _select.order_stats(flat, _select.ABS_DEV, 0.0, [(k - 1,)])
        if got_abs is None:
            return _stats_reference(flat, cfg)
        t = got_abs[k - 1]
        ties = k - int(_select.count_abs_lt(flat, t))
    return _Stats(eps, p_raw, fraction, k, q_upper, float(flat.min()), t, ties)


def apply(acts, cfg: ArmConfig, rng: RngStream, fast: Optional[bool] = None):
    """Redistribute near-zero activations; returns ``(new_acts, ArmReport)``.

    The input is not modified. Entries outside the selection are returned
    bit-identical. ``rng`` advances by one draw per modified entry, in
    ascending flat-index order. ``fast`` forces (or disables) the kernel
    path; by default it is used for large tensors. Both paths give
    bit-identical results.
    """
    arr = np.asarray(acts)
    if arr.size == 0:
        raise ValueError("apply: empty activations")
    if cfg.scope == "row" and arr.ndim > 1:
        return _apply_rows(arr, cfg, rng, fast)
    return _apply_flat(arr, cfg, rng, fast)


def _apply_rows(arr: np.ndarray, cfg: ArmConfig, rng: RngStream, fast):
    """Row scope: every last-axis row gets its own statistics.

    The combined report sums ``n_modified``, takes the global minimum and
    averages the remaining per-row statistics.
    """
    rows = np.ascontiguousarray(arr).reshape(-1, arr.shape[-1])
    out = np.empty_like(rows)
    reps = []
    for i, row in enumerate(rows):
        out[i], r = _apply_flat(row, cfg, rng, fast)
        reps.append(r)
    mean = lambda k: float(np.mean([getattr(r, k) for r in reps]))
    report = ArmReport(
        epsilon=None if cfg.mode == "direct_p" else mean("epsilon"),
        p_raw=mean("p_raw"),
        fraction=mean("fraction"),
        n_modified=sum(r.n_modified for r in reps),
        n_total=int(rows.size),
        q_upper=mean("q_upper"),
        min_act=min(r.min_act for r in reps),
        degenerate_pos=any(r.degenerate_pos for r in reps),
        degenerate_neg=any(r.degenerate_neg for r in reps),
        mode=cfg.mode,
    )
    return out.reshape(arr.shape), report


def _apply_flat(arr: np.ndarray, cfg: ArmConfig, rng: RngStream, fast):
    flat = np.ascontiguousarray(arr).ravel()
    if fast is None:
        fast = flat.size >= FAST_MIN_SIZE
    st = _stats_fast(flat, cfg) if fast else _stats_reference(flat, cfg)

    pos_lo, pos_hi, deg_pos = _collapse(0.0, st.q_upper)
    neg_lo, neg_hi, deg_neg = _collapse(st.min_act, 0.0)
    out = flat.copy()
    idx = np.empty(flat.size + 1, np.int64)
    if st.k:
        if st.ties >= flat.size:
            k = _select.select_band(flat, st.thr, idx)
        else:
            k = _select.select_indices(flat, st.thr, st.ties, idx)
    else:
        k = 0
    _select.perturb_selected(flat, out, idx, k, np.uint64(rng.key),
                             np.uint64(rng.counter), pos_hi, neg_lo)
    rng.counter += int(k)
    report = ArmReport(
        epsilon=st.epsilon,
        p_raw=st.p_raw,
        fraction=st.fraction,
        n_modified=int(k),
        n_total=int(flat.size),
        q_upper=st.q_upper,
        min_act=st.min_act,
        degenerate_pos=deg_pos,
        degenerate_neg=deg_neg,
        mode=cfg.mode,
    )
    return out.reshape(arr.shape), report


@dataclass
class ArmHook:
    """Activation transform for :class:`armkit.model.HookSpec`.

    Keeps one RNG stream across calls and a report per call. With
    ``prompt_only`` only the first call is modified.
    """

    cfg: ArmConfig
    prompt_only: bool = False
    fast: Optional[bool] = None
    reports: list = field(default_factory=list)

    def __post_init__(self):
        self.rng = RngStream(self.cfg.seed)

    def __call__(self, acts: np.ndarray) -> np.ndarray:
        if self.prompt_only and self.reports:
            return acts
        out, rep = apply(acts, self.cfg, self.rng, fast=self.fast)
        self.reports.append(rep)
        return out
