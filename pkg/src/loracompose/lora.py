"""Low-rank adapter algebra: apply, merge, load, save.

An adapter is a per-layer pair of low-rank matrices plus a scaling alpha;
its effect on a base weight W is W + scale * (alpha / rank) * up @ down.
Files follow the common community layout: paired ``.lora_down.weight`` /
``.lora_up.weight`` tensors with a per-layer ``.alpha`` scalar, key prefix
``lora_unet_`` or ``lora_te_`` separating denoiser from text-encoder
deltas.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

import torch

from .errors import AdapterMismatch, InvalidSpec, MissingAlphaWarning, UnsupportedFormat

UNET_PREFIX = "lora_unet_"
TEXT_PREFIX = "lora_te_"


@dataclass(frozen=True)
class LoRALayerDelta:
    """Low-rank update for a single layer: ``(alpha/rank) * up @ down``."""

    layer_key: str
    down: torch.Tensor
    up: torch.Tensor
    alpha: float
    rank: int

    def __post_init__(self):
        if self.rank < 1:
            raise InvalidSpec(f"{self.layer_key}: rank must be >= 1")
        if self.alpha <= 0:
            raise InvalidSpec(f"{self.layer_key}: alpha must be > 0")
        if self.down.dim() != 2 or self.up.dim() != 2:
            raise AdapterMismatch(f"{self.layer_key}: down/up must be matrices")
        if self.down.shape[0] != self.rank or self.up.shape[1] != self.rank:
            raise AdapterMismatch(
                f"{self.layer_key}: rank {self.rank} inconsistent with shapes "
                f"{tuple(self.up.shape)} x {tuple(self.down.shape)}"
            )

    @property
    def out_features(self) -> int:
        return int(self.up.shape[0])

    @property
    def in_features(self) -> int:
        return int(self.down.shape[1])

    def materialize(self, scale: float = 1.0) -> torch.Tensor:
        """Dense delta matrix ``scale * (alpha/rank) * up @ down``."""
        return scale * (self.alpha / self.rank) * (self.up @ self.down)


def apply_delta(base: torch.Tensor, delta: LoRALayerDelta, scale: float = 1.0) -> torch.Tensor:
    """Patched weight ``base + scale * (alpha/rank) * up @ down``."""
    if base.shape != (delta.out_features, delta.in_features):
        raise AdapterMismatch(
            f"{delta.layer_key}: base {tuple(base.shape)} does not match delta "
            f"({delta.out_features}, {delta.in_features})"
        )
    return base + delta.materialize(scale).to(base.dtype)


@dataclass(frozen=True)
class LoRAAdapter:
    """A named bundle of layer deltas for the denoiser and, optionally, the text encoder."""

    lora_id: str
    deltas: dict[str, LoRALayerDelta] = field(default_factory=dict)
    text_encoder_deltas: dict[str, LoRALayerDelta] = field(default_factory=dict)
    trigger: str = ""

    def __post_init__(self):
        if not self.trigger:
            object.__setattr__(self, "trigger", self.lora_id)
        for key, d in {**self.deltas, **self.text_encoder_deltas}.items():
            if d.layer_key != key:
                raise AdapterMismatch(f"delta stored under {key!r} names layer {d.layer_key!r}")


@dataclass(frozen=True)
class LoRASet:
    """Adapters active for one compute pass, each with a scalar weight.

    The empty set is the base model.
    """

    entries: tuple[tuple[LoRAAdapter, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        for adapter, weight in self.entries:
            if not (isinstance(weight, (int, float)) and math.isfinite(weight)):
                raise InvalidSpec(f"{adapter.lora_id}: weight must be finite, got {weight!r}")

    @classmethod
    def of(cls, *adapters: LoRAAdapter, weight: float = 1.0) -> "LoRASet":
        return cls(tuple((a, weight) for a in adapters))

    def __bool__(self) -> bool:
        return bool(self.entries)

    def delta_for(self, layer_key: str, text_encoder: bool = False) -> Optional[torch.Tensor]:
        """Summed dense delta for one layer across the set, or None if untouched."""
        total = None
        for adapter, weight in self.entries:
            table = adapter.text_encoder_deltas if text_encoder else adapter.deltas
            delta = table.get(layer_key)
            if delta is None:
                continue
            dense = delta.materialize(weight)
            total = dense if total is None else total + dense
        return total

    def text_patch_ids(self) -> list[str]:
        return [a.lora_id for a, _ in self.entries if a.text_encoder_deltas]


def _merge_layer(key: str, parts: list[tuple[LoRALayerDelta, float]]) -> LoRALayerDelta:
    out_f, in_f = parts[0][0].out_features, parts[0][0].in_features
    for delta, _ in parts:
        if (delta.out_features, delta.in_features) != (out_f, in_f):
            raise AdapterMismatch(
                f"{key}: incompatible shapes across adapters "
                f"({delta.out_features}x{delta.in_features} vs {out_f}x{in_f})"
            )
    down = torch.cat([d.down for d, _ in parts], dim=0)
    up = torch.cat([w * (d.alpha / d.rank) * d.up for d, w in parts], dim=1)
    rank = int(down.shape[0])
    return LoRALayerDelta(layer_key=key, down=down, up=up, alpha=float(rank), rank=rank)


def weighted_merge(lora_set: LoRASet, lora_id: str = "merged") -> LoRAAdapter:
    """Fold a weighted set of adapters into one by rank-stacking.

    Weights are folded into the up matrices, so the merged adapter's effect
    equals the weighted sum of the originals' effects; layers an adapter
    does not cover contribute nothing there.
    """
    unet: dict[str, list[tuple[LoRALayerDelta, float]]] = {}
    text: dict[str, list[tuple[LoRALayerDelta, float]]] = {}
    for adapter, weight in lora_set.entries:
        for key, delta in adapter.deltas.items():
            unet.setdefault(key, []).append((delta, weight))
        for key, delta in adapter.text_encoder_deltas.items():
            text.setdefault(key, []).append((delta, weight))
    return LoRAAdapter(
        lora_id=lora_id,
        deltas={k: _merge_layer(k, parts) for k, parts in unet.items()},
        text_encoder_deltas={k: _merge_layer(k, parts) for k, parts in text.items()},
        trigger=lora_id,
    )


def _file_key(layer_key: str, text_encoder: bool) -> str:
    prefix = TEXT_PREFIX if text_encoder else UNET_PREFIX
    return prefix + layer_key.replace(".", "_")


def save_adapter(adapter: LoRAAdapter, path: Union[str, Path]) -> Path:
    """Write an adapter in the community tensor-container layout.

    ``.safetensors`` and ``.pt`` are supported; the original layer keys ride
    along in metadata so round-trips are exact.
    """
    path = Path(path)
    tensors: dict[str, torch.Tensor] = {}
    layer_map: dict[str, str] = {}
    for text_encoder, table in ((False, adapter.deltas), (True, adapter.text_encoder_deltas)):
        for layer_key, delta in table.items():
            base = _file_key(layer_key, text_encoder)
            layer_map[base] = layer_key
            tensors[f"{base}.lora_down.weight"] = delta.down.contiguous()
            tensors[f"{base}.lora_up.weight"] = delta.up.contiguous()
            tensors[f"{base}.alpha"] = torch.tensor(float(delta.alpha))
    metadata = {
        "lora_id": adapter.lora_id,
        "trigger": adapter.trigger,
        "layer_map": json.dumps(layer_map, sort_keys=True),
    }
    if path.suffix == ".safetensors":
        from safetensors.torch import save_file

        save_file(tensors, str(path), metadata=metadata)
    elif path.suffix in (".pt", ".bin"):
        torch.save({"tensors": tensors, "metadata": metadata}, path)
    else:
        raise UnsupportedFormat(f"unsupported adapter extension: {path.suffix!r}")
    return path


def _read_container(path: Path) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    if path.suffix == ".safetensors":
        from safetensors.torch import safe_open

        tensors: dict[str, torch.Tensor] = {}
        with safe_open(str(path), framework="pt", device="cpu") as f:
            metadata = dict(f.metadata() or {})
            for key in f.keys():
                tensors[key] = f.get_tensor(key)
        return tensors, metadata
    if path.suffix in (".pt", ".bin"):
        payload = torch.load(path, map_location="cpu", weights_only=True)
        if not isinstance(payload, dict) or "tensors" not in payload:
            raise UnsupportedFormat(f"{path}: not an adapter container")
        return dict(payload["tensors"]), dict(payload.get("metadata", {}))
    raise UnsupportedFormat(f"unsupported adapter extension: {path.suffix!r}")


def load_adapter(path: Union[str, Path]) -> LoRAAdapter:
    """Load an adapter saved in the community layout.

    Layers missing their alpha scalar default to alpha=rank (with a
    warning); keys outside the down/up/alpha scheme are rejected.
    """
    path = Path(path)
    tensors, metadata = _read_container(path)
    layer_map: dict[str, str] = json.loads(metadata.get("layer_map", "{}"))

    groups: dict[str, dict[str, torch.Tensor]] = {}
    for key, tensor in tensors.items():
        for suffix, slot in ((".lora_down.weight", "down"), (".lora_up.weight", "up"), (".alpha", "alpha")):
            if key.endswith(suffix):
                groups.setdefault(key[: -len(suffix)], {})[slot] = tensor
                break
        else:
            raise UnsupportedFormat(f"{path}: unrecognized tensor key {key!r}")

    deltas: dict[str, LoRALayerDelta] = {}
    text_deltas: dict[str, LoRALayerDelta] = {}
    for base, slots in sorted(groups.items()):
        if "down" not in slots or "up" not in slots:
            raise UnsupportedFormat(f"{path}: {base!r} lacks a down/up pair")
        if base.startswith(UNET_PREFIX):
            text_encoder, stripped = False, base[len(UNET_PREFIX):]
        elif base.startswith(TEXT_PREFIX):
            text_encoder, stripped = True, base[len(TEXT_PREFIX):]
        else:
            raise UnsupportedFormat(f"{path}: key {base!r} has no known prefix")
        layer_key = layer_map.get(base, stripped)
        rank = int(slots["down"].shape[0])
        if "alpha" in slots:
            alpha = float(slots["alpha"].item())
        else:
            alpha = float(rank)
            warnings.warn(f"{path}: {base!r} has no alpha, assuming alpha=rank={rank}", MissingAlphaWarning)
        delta = LoRALayerDelta(layer_key=layer_key, down=slots["down"], up=slots["up"], alpha=alpha, rank=rank)
        (text_deltas if text_encoder else deltas)[layer_key] = delta

    return LoRAAdapter(
        lora_id=metadata.get("lora_id", path.stem),
        deltas=deltas,
        text_encoder_deltas=text_deltas,
        trigger=metadata.get("trigger", "") or path.stem,
    )


def load_adapters(paths: Iterable[Union[str, Path]]) -> dict[str, LoRAAdapter]:
    adapters = {}
    for p in paths:
        adapter = load_adapter(p)
        adapters[adapter.lora_id] = adapter
    return adapters
