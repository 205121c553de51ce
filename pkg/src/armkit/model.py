"""Tiny decoder-only transformer with per-layer tracing and MLP hooks.

Layer layout (pre-norm, no positional encoding)::

    h = h + Wo . attn(rmsnorm(h))
    h = h + W_down . (hook(phi(rmsnorm(h) W_gate)) * (rmsnorm(h) W_up))

followed by a final rmsnorm and the unembedding. Without positional
encodings, layer-1 queries, keys and values depend only on token identity;
causal masking is the only source of order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import RngStream, activation_fn, rmsnorm, softmax_rows

__all__ = [
    "Greedy",
    "HookSpec",
    "LayerTrace",
    "LayerWeights",
    "ModelConfig",
    "ModelWeights",
    "Sample",
    "ForwardTrace",
    "attention_block",
    "decode",
    "forward",
    "init_weights",
    "mlp_block",
]

Transform = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 1
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    vocab_size: int = 128
    activation: str = "silu"
    norm_eps: float = 1e-6
    max_seq: int = 256

    def __post_init__(self):
        for name in ("n_layers", "d_model", "d_ff", "n_heads", "vocab_size", "max_seq"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.activation not in ("silu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.norm_eps <= 0:
            raise ValueError("norm_eps must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    gamma_attn: np.ndarray
    gamma_mlp: np.ndarray


@dataclass
class ModelWeights:
    embed: np.ndarray  # [vocab, d_model]
    layers: list[LayerWeights]
    gamma_final: np.ndarray
    unembed: np.ndarray  # [d_model, vocab]

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        """Fixed-order (name, tensor) list used by the weight container."""
        out = [("embed", self.embed)]
        for i, lw in enumerate(self.layers):
            for f in LayerWeights.__dataclass_fields__:
                out.append((f"layers.{i}.{f}", getattr(lw, f)))
        out += [("gamma_final", self.gamma_final), ("unembed", self.unembed)]
        return out

    @classmethod
    def from_named(cls, tensors: dict, n_layers: int) -> "ModelWeights":
        layers = [
            LayerWeights(**{f: tensors[f"layers.{i}.{f}"]
                            for f in LayerWeights.__dataclass_fields__})
            for i in range(n_layers)
        ]
        return cls(tensors["embed"], layers, tensors["gamma_final"], tensors["unembed"])

    def validate(self, cfg: ModelConfig) -> None:
        d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
        want = {"embed": (v, d), "gamma_final": (d,), "unembed": (d, v)}
        shapes = {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
                  "w_gate": (d, f), "w_up": (d, f), "w_down": (f, d),
                  "gamma_attn": (d,), "gamma_mlp": (d,)}
        if len(self.layers) != cfg.n_layers:
            raise ValueError(f"expected {cfg.n_layers} layers, got {len(self.layers)}")
        for i in range(cfg.n_layers):
            for k, s in shapes.items():
                want[f"layers.{i}.{k}"] = s
        for name, t in self.named_tensors():
            if t.shape != want[name]:
                raise ValueError(f"{name}: shape {t.shape}, expected {want[name]}")
            if not np.all(np.isfinite(t)):
                raise ValueError(f"{name}: non-finite weights")


def init_weights(cfg: ModelConfig, seed: int) -> ModelWeights:
    """Uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in))``; norms start at one.

    Tensors draw from one stream in :meth:`ModelWeights.named_tensors`
    order, so a seed fixes every weight bit-for-bit.
    """
    rng = RngStream(seed)
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size

    def draw(shape, fan_in):
        a = 1.0 / math.sqrt(fan_in)
        n = int(np.prod(shape))
        return rng.uniform_array(-a, a, n).astype(np.float32).reshape(shape)

    embed = draw((v, d), 1)
    layers = []
    for _ in range(cfg.n_layers):
        layers.append(LayerWeights(
            wq=draw((d, d), d), wk=draw((d, d), d), wv=draw((d, d), d),
            wo=draw((d, d), d),
            w_gate=draw((d, f), d), w_up=draw((d, f), d), w_down=draw((f, d), f),
            gamma_attn=np.ones(d, np.float32), gamma_mlp=np.ones(d, np.float32),
        ))
    return ModelWeights(embed, layers, np.ones(d, np.float32), draw((d, v), d))


@dataclass
class HookSpec:
    transform: Transform
    layer_index: int = 0


@dataclass
class LayerTrace:
    attn: np.ndarray  # [H, S, S]
    values: np.ndarray  # [H, S, d_head]
    head_out: np.ndarray  # [H, S, d_head], before the output projection
    attn_out: np.ndarray  # [S, d_model], after the output projection
    gate_in: np.ndarray  # [S, d_ff], pre-activation
    act_pre: np.ndarray  # [S, d_ff], phi(gate_in)
    act_post: np.ndarray  # [S, d_ff], after the hook


@dataclass
class ForwardTrace:
    layers: list[LayerTrace] = field(default_factory=list)
    logits: Optional[np.ndarray] = None


def attention_block(x: np.ndarray, lw: LayerWeights, cfg: ModelConfig,
                    head_transform: Optional[Transform] = None):
    """Causal multi-head attention.

    Returns ``(output, attn, values, head_out)``. ``head_transform`` sees
    the concatenated head outputs ``[S, d_model]`` before ``Wo``.
    """
    S = x.shape[0]
    if S > cfg.max_seq:
        raise ValueError(f"sequence length {S} exceeds max_seq={cfg.max_seq}")
    if x.shape[1] != cfg.d_model:
        raise ValueError(f"attention_block: expected d_model={cfg.d_model}, got {x.shape}")
    H, dh = cfg.n_heads, cfg.d_head
    q = (x @ lw.wq).reshape(S, H, dh).transpose(1, 0, 2)
    k = (x @ lw.wk).reshape(S, H, dh).transpose(1, 0, 2)
    v = (x @ lw.wv).reshape(S, H, dh).transpose(1, 0, 2)
    scale = np.float32(1.0 / math.sqrt(dh))
    attn = np.stack([softmax_rows((q[h] @ k[h].T) * scale, causal_mask=True)
                     for h in range(H)])
    head_out = attn @ v
    cat = head_out.transpose(1, 0, 2).reshape(S, cfg.d_model)
    if head_transform is not None:
        cat = np.asarray(head_transform(cat), dtype=x.dtype)
    return cat @ lw.wo, attn, v, head_out


def mlp_block(x: np.ndarray, lw: LayerWeights, cfg: ModelConfig,
              hook: Optional[Transform] = None, trace: Optional[dict] = None):
    """Gated MLP; ``hook`` rewrites the post-activation gate tensor."""
    gate_in = x @ lw.w_gate
    act = activation_fn(gate_in, cfg.activation)
    act2 = act if hook is None else hook(act)
    if act2.shape != act.shape:
        raise ValueError("MLP hook changed the activation shape")
    out = (act2 * (x @ lw.w_up)) @ lw.w_down
    if trace is not None:
        trace.update(gate_in=gate_in, act_pre=act, act_post=act2)
    return out


def forward(tokens: Sequence[int], weights: ModelWeights, cfg: ModelConfig,
            hook: Optional[HookSpec] = None, attn_hook: Optional[HookSpec] = None):
    """Logits ``[S, vocab]`` and a :class:`ForwardTrace`.

    ``hook`` rewrites MLP activations at its layer; ``attn_hook`` rewrites
    the pre-projection attention output at its layer.
    """
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim != 1 or toks.size == 0:
        raise ValueError("tokens must be a non-empty 1-D sequence")
    if toks.size > cfg.max_seq:
        raise ValueError(f"sequence length {toks.size} exceeds max_seq={cfg.max_seq}")
    if toks.min() < 0 or toks.max() >= cfg.vocab_size:
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    for hs in (hook, attn_hook):
        if hs is not None and not 0 <= hs.layer_index < cfg.n_layers:
            raise ValueError(f"hook layer {hs.layer_index} out of range")

    trace = ForwardTrace()
    h = weights.embed[toks]
    for i, lw in enumerate(weights.layers):
        ht = attn_hook.transform if attn_hook and attn_hook.layer_index == i else None
        a_out, attn, v, head_out = attention_block(
            rmsnorm(h, lw.gamma_attn, cfg.norm_eps), lw, cfg, ht)
        h = h + a_out
        mt = hook.transform if hook and hook.layer_index == i else None
        rec: dict = {}
        h = h + mlp_block(rmsnorm(h, lw.gamma_mlp, cfg.norm_eps), lw, cfg, mt, rec)
        trace.layers.append(LayerTrace(attn, v, head_out, a_out, **rec))
    logits = rmsnorm(h, weights.gamma_final, cfg.norm_eps) @ weights.unembed
    trace.logits = logits
    return logits, trace


@dataclass(frozen=True)
class Greedy:
    pass


@dataclass(frozen=True)
class Sample:
    temperature: float = 1.0
    top_p: float = 1.0
    seed: int = 0


def _sample_token(logits: np.ndarray, pol: Sample, rng: RngStream) -> int:
    z = logits.astype(np.float64) / max(pol.temperature, 1e-8)
    p = np.exp(z - z.max())
    p /= p.sum()
    order = np.argsort(-p, kind="stable")
    ps = p[order]
    keep = int(np.searchsorted(np.cumsum(ps), pol.top_p) + 1)
    ps = ps[:keep] / ps[:keep].sum()
    u = rng.random()
    j = min(int(np.searchsorted(np.cumsum(ps), u, side="right")), keep - 1)
    return int(order[j])


def decode(prompt: Sequence[int], weights: ModelWeights, cfg: ModelConfig,
           hook: Optional[HookSpec] = None, policy=Greedy(), max_new: int = 16):
    """Autoregressive generation, recomputing the full prefix every step.

    The hook runs on every forward; wrap it (e.g. ``ArmHook(prompt_only=True)``)
    to restrict it to the prompt pass.
    """
    seq = [int(t) for t in prompt]
    rng = RngStream(policy.seed) if isinstance(policy, Sample) else None
    for _ in range(max_new):
        if len(seq) >= cfg.max_seq:
            break
        logits, _ = forward(seq, weights, cfg, hook)
        last = logits[-1]
        if rng is None:
            nxt = int(np.argmax(last))
        else:
            nxt = _sample_token(last, policy, rng)
        seq.append(nxt)
    return seq
