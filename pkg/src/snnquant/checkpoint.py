"""Versioned ``.npz`` checkpoints with a config hash and architecture guard."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DataError, FormatError
from .network import LayerSpec, Network, SpikingLayer
from .quant import QuantPolicy

__all__ = ["FORMAT_VERSION", "Checkpoint", "save_checkpoint", "load_checkpoint"]

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    network: Network
    classes: np.ndarray
    config: dict
    config_hash: str
    policy: Optional[QuantPolicy] = None  # set after quantized fine-tuning

    def architecture(self) -> list:
        return [s.to_dict() for s in self.network.specs]

    def check_architecture(self, specs):
        want = [s.to_dict() if isinstance(s, LayerSpec) else dict(s) for s in specs]
        have = self.architecture()
        if len(want) != len(have):
            raise ConfigurationError(f"checkpoint has {len(have)} layers, config describes {len(want)}")
        for i, (a, b) in enumerate(zip(have, want)):
            if a != b:
                raise ConfigurationError(f"layers[{i}]: checkpoint architecture {a} differs from {b}")


def save_checkpoint(path, network: Network, classes, config: dict, config_hash: str, policy=None):
    arrays = {}
    for i, layer in enumerate(network.layers):
        arrays[f"w{i}"] = layer.w
        arrays[f"b{i}"] = layer.readout
    meta = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "config": config,
        "architecture": [s.to_dict() for s in network.specs],
        "n_classes": network.n_classes,
        "policy": None if policy is None else policy.to_dict(),
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    arrays["classes"] = np.asarray(classes)
    path = Path(path)
    with open(path, "wb") as f:  # keep the exact name, np.savez would append .npz
        np.savez(f, **arrays)


def load_checkpoint(path, *, expect_hash: Optional[str] = None, expect_specs=None) -> Checkpoint:
    """Load a checkpoint, refusing a different architecture or config hash if given."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            files = {k: z[k] for k in z.files}
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"{path}: not a checkpoint ({exc})") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    specs = [LayerSpec.from_dict(d) for d in meta["architecture"]]
    layers = []
    for i, spec in enumerate(specs):
        w, b = files.get(f"w{i}"), files.get(f"b{i}")
        if w is None or b is None or w.shape != spec.weight_shape:
            raise FormatError(f"{path}: layer {i} arrays missing or misshapen")
        layers.append(SpikingLayer(spec, w.astype(np.float64), b.astype(np.float64)))
    policy = None if meta.get("policy") is None else QuantPolicy.from_dict(meta["policy"])
    ck = Checkpoint(Network(layers, meta["n_classes"]), files["classes"], meta["config"], meta["config_hash"], policy)
    if expect_specs is not None:
        ck.check_architecture(expect_specs)
    if expect_hash is not None and expect_hash != ck.config_hash:
        raise ConfigurationError(f"{path}: config hash {ck.config_hash[:12]} does not match {expect_hash[:12]}")
    return ck
