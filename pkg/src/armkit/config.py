"""Experiment configuration: TOML sections, presets and seed derivation.

Example::

    seed = 7
    preset = "mathlike-small"
    output_dir = "runs/a"

    [model]
    d_model = 64
    d_ff = 256

    [arm]
    enabled = true
    c = 0.13

    [insertion]
    token_id = 5
    position = "between"
    boundary_index = 4
    counts = [0, 1, 8, 64]

Unknown keys anywhere are an error.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .arm import ArmConfig
from .model import ModelConfig

# Per-purpose sub-seeds: stream seed = top-level seed XOR constant.
SUBSEEDS = {
    "weights": 0x57E1_6475_0000_0001,
    "arm": 0xA5A5_0000_0000_0002,
    "prompt": 0x9B0C_0000_0000_0003,
    "sample": 0x5A3F_0000_0000_0004,
    "insertion": 0x1C5E_0000_0000_0005,
    "theory": 0x7E0C_0000_0000_0006,
    "experiment": 0xE6E6_0000_0000_0007,
}

PRESETS = {
    "mathlike-small": {"mode": "mad_threshold", "c": 0.13, "p1": 99.5},
    "direct-p": {"mode": "direct_p", "p": 0.25, "p1": 85.0},
}

DEFAULT_PROMPT = (
    "System: solve the problem step by step. "
    "Question: if 3 pens cost 12 dollars and 2 books cost 7, "
    "then what do 5 pens and 4 books cost? Answer:"
)


def subseed(seed: int, purpose: str) -> int:
    return (int(seed) ^ SUBSEEDS[purpose]) & ((1 << 64) - 1)


class ConfigError(ValueError):
    pass


def _strict(cls, d: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")
    return cls(**d)


@dataclass(frozen=True)
class ArmSection:
    enabled: bool = False
    prompt_only: bool = False
    c: float = 0.13
    kappa: float = 1.4826
    p_min: float = 0.02
    p_max: float = 0.25
    p1: float = 99.5
    mode: str = "mad_threshold"
    p: Optional[float] = None
    scope: str = "tensor"


@dataclass(frozen=True)
class InsertionSection:
    token_id: int = 0
    count: int = 8
    position: str = "begin"
    boundary_index: Optional[int] = None
    counts: tuple = (0, 1, 8, 64)
    layer: int = 0


@dataclass(frozen=True)
class AnalysisSection:
    n_bins: int = 100
    quantile: float = 50.0
    epsilon: Optional[float] = None  # None: the ARM near-zero threshold
    ngram_n: int = 2
    n_samples: int = 4
    lam: float = 0.9
    bias_scale: float = 0.01


@dataclass(frozen=True)
class RunSection:
    prompt: str = DEFAULT_PROMPT
    max_new: int = 16
    temperature: float = 0.0  # 0: greedy
    top_p: float = 1.0


@dataclass(frozen=True)
class TheorySection:
    n_samples: int = 1_000_000
    jacobian_points: int = 100


@dataclass(frozen=True)
class BenchSection:
    d_models: tuple = (256, 512, 1024)
    ff_mult: int = 4
    seq_len: int = 256
    reps: int = 30
    warmup: int = 3


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    preset: Optional[str] = None
    output_dir: str = "out"
    weights: Optional[str] = None  # weight directory; None: init from seed
    model: ModelConfig = field(default_factory=ModelConfig)
    arm: ArmSection = field(default_factory=ArmSection)
    insertion: InsertionSection = field(default_factory=InsertionSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    run: RunSection = field(default_factory=RunSection)
    theory: TheorySection = field(default_factory=TheorySection)
    bench: BenchSection = field(default_factory=BenchSection)

    def arm_config(self) -> ArmConfig:
        a = asdict(self.arm)
        a.pop("enabled")
        a.pop("prompt_only")
        return ArmConfig(**a, seed=subseed(self.seed, "arm"))

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """SHA-256 of the resolved config; the output directory is left out."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()


_SECTIONS = {
    "model": ModelConfig,
    "arm": ArmSection,
    "insertion": InsertionSection,
    "analysis": AnalysisSection,
    "run": RunSection,
    "theory": TheorySection,
    "bench": BenchSection,
}
_TOP = {"seed", "preset", "output_dir", "weights"}


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def from_dict(raw: dict, seed: Optional[int] = None, preset: Optional[str] = None,
              output_dir: Optional[str] = None, base_dir: Optional[Path] = None
              ) -> ExperimentConfig:
    """Build a config; explicit arguments override the file's top-level keys.

    The preset fills ARM defaults; keys in ``[arm]`` still win.
    """
    unknown = set(raw) - _TOP - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    for name in _SECTIONS:
        if name in raw and not isinstance(raw[name], dict):
            raise ConfigError(f"[{name}] must be a table")
    preset = preset if preset is not None else raw.get("preset")
    arm_raw = dict(raw.get("arm", {}))
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
        arm_raw = {**PRESETS[preset], **arm_raw}
    try:
        sections = {
            name: _strict(cls, _tuples(arm_raw if name == "arm" else raw.get(name, {})), name)
            for name, cls in _SECTIONS.items()
        }
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    weights = raw.get("weights")
    if weights is not None:
        wp = Path(weights)
        if base_dir is not None and not wp.is_absolute():
            wp = base_dir / wp
        if not (wp / "weights.json").exists():
            raise ConfigError(f"weights directory {wp} has no weights.json")
        weights = str(wp)
    cfg = ExperimentConfig(
        seed=int(seed if seed is not None else raw.get("seed", 0)),
        preset=preset,
        output_dir=str(output_dir if output_dir is not None else raw.get("output_dir", "out")),
        weights=weights,
        **sections,
    )
    try:
        cfg.arm_config()
    except ValueError as exc:
        raise ConfigError(f"[arm] {exc}") from exc
    return cfg


def load(path=None, **overrides) -> ExperimentConfig:
    if path is None:
        return from_dict({}, **overrides)
    p = Path(path)
    with open(p, "rb") as fh:
        raw = tomllib.load(fh)
    return from_dict(raw, base_dir=p.parent, **overrides)


def with_model(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(cfg, model=replace(cfg.model, **changes))
