"""The trainable model: backbone plus adapter(s), and its checkpoint format."""

from __future__ import annotations

from dataclasses import replace
from typing import Optional, Tuple

import torch
from torch import nn

from .adapter import AdapterConfig, FeatureAdapter
from .backbone import Backbone, BackboneConfig
from .batching import Batch
from .checkpoint import checksum, load_checkpoint, load_into, save_checkpoint, state_arrays
from .errors import ArtifactIOError, MissingArtifactError

# parameter namespaces that exist at random init in every configuration
PHASE1_NAMESPACES = ("backbone.audio_encoder", "adapter")
BACKBONE_NAMESPACES = ("backbone.video_encoder", "backbone.context")


class AVSyncModel(nn.Module):
    def __init__(self, backbone_cfg: BackboneConfig, adapter_cfg: AdapterConfig, with_cross_adapter: bool = False):
        super().__init__()
        self.backbone = Backbone(backbone_cfg)
        self.adapter = FeatureAdapter(adapter_cfg)
        self.xadapter = FeatureAdapter(self.cross_config(adapter_cfg)) if with_cross_adapter else None

    @staticmethod
    def cross_config(cfg: AdapterConfig) -> AdapterConfig:
        return replace(cfg, attention_mode="cross", use_attention=True)

    def add_cross_adapter(self) -> FeatureAdapter:
        if self.xadapter is None:
            self.xadapter = FeatureAdapter(self.cross_config(self.adapter.cfg))
        return self.xadapter

    def features(self, batch: Batch, mode: str) -> torch.Tensor:
        return self.backbone(batch.log_mel, batch.video, mode, batch.lengths)

    def memory(self, batch: Batch, mode: str) -> Tuple[torch.Tensor, torch.Tensor]:
        """Adapted (B, 2T, D_sr) features for the SR head, and their valid lengths."""
        return self.adapter(self.features(batch, mode), batch.lengths), 2 * batch.lengths

    def cross_memory(self, batch: Batch, audio_query: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if self.xadapter is None:
            raise MissingArtifactError("model has no cross-attention adapter (train one with cross_adapter_steps > 0)")
        feats = self.features(batch, "V")
        return self.xadapter(feats, batch.lengths, audio_query=audio_query), 2 * batch.lengths

    def namespace_checksum(self, prefixes) -> str:
        arrays = {k: v for k, v in state_arrays(self).items() if k.startswith(tuple(p + "." for p in prefixes))}
        return checksum(arrays)


def save_model(path, model: AVSyncModel, meta: Optional[dict] = None):
    arrays = state_arrays(model)
    info = {
        "kind": "avsync",
        "backbone": model.backbone.cfg.to_dict(),
        "adapter": model.adapter.cfg.to_dict(),
        "has_cross_adapter": model.xadapter is not None,
        "checksum": checksum(arrays),
    }
    info.update(meta or {})
    return save_checkpoint(path, arrays, info)


def load_model(path) -> Tuple[AVSyncModel, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "avsync":
        raise ArtifactIOError(f"{path} is not a model checkpoint")
    model = AVSyncModel(
        BackboneConfig.from_dict(meta["backbone"]),
        AdapterConfig.from_dict(meta["adapter"]),
        with_cross_adapter=meta.get("has_cross_adapter", False),
    )
    load_into(model, arrays)
    model.eval()
    return model, meta

