"""Wall-clock cost of the ARM hook relative to the MLP block it sits in."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from .arm import ArmConfig, apply
from .model import LayerWeights, ModelConfig, mlp_block
from .tensor import RngStream, activation_fn


@dataclass
class OverheadRow:
    d_model: int
    d_ff: int
    seq_len: int
    mlp_median_s: float
    arm_median_s: float

    @property
    def ratio(self) -> float:
        return self.arm_median_s / self.mlp_median_s


def _layer(d: int, f: int, seed: int) -> LayerWeights:
    rng = RngStream(seed)

    def draw(shape, fan_in):
        a = 1.0 / np.sqrt(fan_in)
        return rng.uniform_array(-a, a, int(np.prod(shape))).astype(np.float32).reshape(shape)

    ones = np.ones(d, np.float32)
    z = np.zeros((d, d), np.float32)  # attention weights are unused here
    return LayerWeights(z, z, z, z, draw((d, f), d), draw((d, f), d), draw((f, d), f),
                        ones, ones)


def _median_time(fn, reps: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def measure(d_model: int, d_ff: int, seq_len: int, arm_cfg: ArmConfig,
            enabled: bool = True, reps: int = 30, warmup: int = 3,
            seed: int = 0) -> OverheadRow:
    """Median time of one MLP block and of one ARM application on its
    activation tensor ``[seq_len, d_ff]``."""
    cfg = ModelConfig(d_model=d_model, d_ff=d_ff, n_heads=1, max_seq=seq_len)
    lw = _layer(d_model, d_ff, seed)
    rng = RngStream(seed ^ 0xB)
    x = rng.uniform_array(-1.0, 1.0, seq_len * d_model).astype(np.float32)
    x = x.reshape(seq_len, d_model)
    t_mlp = _median_time(lambda: mlp_block(x, lw, cfg), reps, warmup)
    if not enabled:
        return OverheadRow(d_model, d_ff, seq_len, t_mlp, 0.0)
    acts = activation_fn(x @ lw.w_gate, cfg.activation)
    arm_rng = RngStream(arm_cfg.seed)
    t_arm = _median_time(lambda: apply(acts, arm_cfg, arm_rng), reps, warmup)
    return OverheadRow(d_model, d_ff, seq_len, t_mlp, t_arm)


def cost_model_ratio(d_model: int) -> float:
    """Operation-count ratio: ARM is linear in the activation count, the
    MLP does ``2 * d_model`` flops per activation per projection."""
    return 1.0 / (2 * d_model)
