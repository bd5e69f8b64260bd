"""End-to-end models: the full relation network and the encoder-only baseline."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from thorn.config import ExperimentConfig
from thorn.encoder import ReferenceEncoder
from thorn.heads import PredictionBundle, PredictionHeads
from thorn.orf import ObjectRepresentationFilter
from thorn.orr import RelationReasoning


@dataclass
class ModelOutput:
    bundle: PredictionBundle
    adjacency: torch.Tensor | None = None  # (B, blocks, heads, C_o, C_o)
    nodes: torch.Tensor | None = None  # (B, T, C_o, D2) after relation reasoning
    scene: torch.Tensor | None = None  # encoder output fed to the filter


class ThornModel(nn.Module):
    def __init__(self, config: ExperimentConfig):
        super().__init__()
        self.config = config
        c = config
        self.encoder = ReferenceEncoder(c.d1, c.d_global, c.input_size, grid_size=c.grid_size or None)
        grid = self.encoder.grid_size
        in_features = grid * grid * c.d1 if c.node_mode == "spatio_temporal" else c.d_global
        self.orf = ObjectRepresentationFilter(
            in_features, c.num_objects, c.d2, c.dropout, c.shared_classifier, c.strict_eq3
        )
        self.orr = RelationReasoning(
            c.num_objects, c.d2, c.n_blocks, c.heads, c.d_e, c.tcn_kernel,
            c.share_base, c.attention_scale, c.attention_norm,
        )
        self.heads = PredictionHeads(
            c.num_objects, c.num_verbs, c.d2, verb_from_nodes=c.verb_head == "nodes", verb_init_gain=c.verb_init_gain
        )

    def forward(self, clips: torch.Tensor, generator: torch.Generator | None = None, scene: torch.Tensor | None = None) -> ModelOutput:
        """``scene`` lets callers inject a precomputed encoder output (used for CAM)."""
        if scene is None:
            scene = self.encoder(clips, self.config.node_mode)
        nodes, object_logits = self.orf(scene, generator)
        refined, adjacency = self.orr(nodes)
        bundle = self.heads(refined, adjacency, object_logits)
        return ModelOutput(bundle, adjacency, refined, scene)


class BaselineModel(nn.Module):
    """Encoder, global average pool over frames, two linear heads."""

    def __init__(self, config: ExperimentConfig):
        super().__init__()
        self.config = config
        self.encoder = ReferenceEncoder(config.d1, config.d_global, config.input_size, grid_size=config.grid_size or None)
        self.verb = nn.Linear(config.d_global, config.num_verbs)
        self.noun = nn.Linear(config.d_global, config.num_objects)

    def forward(self, clips: torch.Tensor, generator: torch.Generator | None = None, scene=None) -> ModelOutput:
        if scene is None:
            scene = self.encoder(clips, "temporal")
        pooled = scene.mean(dim=1)
        return ModelOutput(PredictionBundle(self.verb(pooled), self.noun(pooled)), scene=scene)


def build_model(config: ExperimentConfig, dtype: torch.dtype = torch.float32) -> nn.Module:
    """Instantiate the configured model with weights drawn from ``config.seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = ThornModel(config) if config.architecture == "thorn" else BaselineModel(config)
    return model.to(dtype)
