"""Temporal human-object relation network for compositional action recognition."""

from thorn.encoder import ReferenceEncoder, encode, reference_encoder_init, validate_clip
from thorn.orf import (
    ObjectRepresentationFilter,
    classify_objects,
    filter_objects,
    object_pseudo_label_loss,
)
from thorn.orr import (
    GraphBlock,
    RelationReasoning,
    attention_adjacency,
    block_forward,
    graph_convolve,
    stack_forward,
)
from thorn.heads import (
    PredictionBundle,
    PredictionHeads,
    action_prediction,
    fuse_noun_scores,
    joint_loss,
    predict,
)
from thorn.model import BaselineModel, ThornModel, build_model

__version__ = "0.1.0"

__all__ = [
    "ReferenceEncoder",
    "encode",
    "reference_encoder_init",
    "validate_clip",
    "ObjectRepresentationFilter",
    "filter_objects",
    "classify_objects",
    "object_pseudo_label_loss",
    "GraphBlock",
    "RelationReasoning",
    "attention_adjacency",
    "graph_convolve",
    "block_forward",
    "stack_forward",
    "PredictionBundle",
    "PredictionHeads",
    "predict",
    "joint_loss",
    "fuse_noun_scores",
    "action_prediction",
    "ThornModel",
    "BaselineModel",
    "build_model",
]
