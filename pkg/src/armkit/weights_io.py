"""Weight container: a JSON manifest plus one little-endian float32 blob.

Manifest layout::

    {"format": "armkit-weights", "version": 1,
     "config": {...ModelConfig...},
     "blob": "weights.bin", "total_bytes": N,
     "tensors": [{"name": ..., "shape": [...], "dtype": "f32",
                  "byte_offset": ...}, ...]}

Tensors are packed back to back in manifest order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelWeights

FORMAT = "armkit-weights"
MANIFEST = "weights.json"
BLOB = "weights.bin"


class WeightFileError(ValueError):
    pass


def save_weights(directory, weights: ModelWeights, cfg: ModelConfig) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(d / BLOB, "wb") as fh:
        for name, t in weights.named_tensors():
            raw = np.ascontiguousarray(t, dtype="<f4").tobytes()
            entries.append({"name": name, "shape": list(t.shape), "dtype": "f32",
                            "byte_offset": offset})
            fh.write(raw)
            offset += len(raw)
    manifest = {"format": FORMAT, "version": 1, "config": cfg.to_dict(),
                "blob": BLOB, "total_bytes": offset, "tensors": entries}
    (d / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return [d / MANIFEST, d / BLOB]


def load_weights(directory) -> tuple[ModelWeights, ModelConfig]:
    d = Path(directory)
    manifest = json.loads((d / MANIFEST).read_text())
    if manifest.get("format") != FORMAT:
        raise WeightFileError(f"{d / MANIFEST}: not an {FORMAT} manifest")
    cfg = ModelConfig.from_dict(manifest["config"])
    blob = (d / manifest["blob"]).read_bytes()
    tensors = {}
    end = 0
    for e in manifest["tensors"]:
        if e["dtype"] != "f32":
            raise WeightFileError(f"{e['name']}: unsupported dtype {e['dtype']}")
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = int(e["byte_offset"])
        end = start + 4 * n
        if start < 0 or end > len(blob):
            raise WeightFileError(
                f"{e['name']}: needs bytes [{start}, {end}) but blob has {len(blob)}"
            )
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=start)
        tensors[e["name"]] = arr.astype(np.float32).reshape(e["shape"])
    if len(blob) != manifest["total_bytes"] or end != len(blob):
        last = manifest["tensors"][-1]["name"] if manifest["tensors"] else "<none>"
        raise WeightFileError(
            f"blob size {len(blob)} != expected {manifest['total_bytes']} "
            f"(last tensor {last})"
        )
    weights = ModelWeights.from_named(tensors, cfg.n_layers)
    weights.validate(cfg)
    return weights, cfg
