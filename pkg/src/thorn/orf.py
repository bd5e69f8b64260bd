"""Object representation filter.

One linear filter per object class turns the mixed scene feature into a
class-specific node vector; a per-class scalar head on top of the nodes gives
frame-level object presence logits supervised with detector pseudo labels.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def flatten_scene(scene: torch.Tensor, in_features: int) -> torch.Tensor:
    """Reshape a scene feature to ``(..., T, in_features)``.

    Accepts either an already flat ``(..., T, F)`` tensor or a spatial grid
    ``(..., T, H', W', D1)``.
    """
    if scene.shape[-1] == in_features:
        return scene
    if scene.ndim >= 4 and math.prod(scene.shape[-3:]) == in_features:
        return scene.reshape(*scene.shape[:-3], in_features)
    raise ValueError(
        f"scene shape {tuple(scene.shape)} does not match filter input size {in_features}"
    )


def dropout(x: torch.Tensor, p: float, training: bool, generator: torch.Generator | None = None) -> torch.Tensor:
    """Inverted dropout drawing its mask from an explicit generator."""
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p
    return x * keep / (1.0 - p)


def filter_objects(
    scene: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
    p: float = 0.0,
    training: bool = False,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Class-specific node features ``ReLU(scene @ W_i + b_i)`` for every class i.

    ``weight`` is ``(C_o, F, D2)``, ``bias`` is ``(C_o, D2)``; the result is
    ``(..., T, C_o, D2)``.
    """
    if weight.ndim != 3 or bias.shape != (weight.shape[0], weight.shape[2]):
        raise ValueError(
            f"filter weight {tuple(weight.shape)} and bias {tuple(bias.shape)} are inconsistent"
        )
    flat = flatten_scene(scene, weight.shape[1])
    nodes = F.relu(torch.einsum("...tf,cfd->...tcd", flat, weight) + bias)
    return dropout(nodes, p, training, generator)


def classify_objects(
    nodes: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, strict_eq3: bool = False
) -> torch.Tensor:
    """Per-frame object presence logits ``(..., T, C_o)``.

    Each class's logit reads only its own node vector. ``weight`` is either
    ``(C_o, D2)`` (per class) or ``(D2,)`` (shared); ``bias`` is ``(C_o,)``
    or a scalar. ``strict_eq3`` rectifies the logits.
    """
    if nodes.shape[-1] != weight.shape[-1]:
        raise ValueError(
            f"node width {nodes.shape[-1]} does not match classifier weight {tuple(weight.shape)}"
        )
    if weight.ndim == 2 and weight.shape[0] != nodes.shape[-2]:
        raise ValueError(
            f"classifier has {weight.shape[0]} classes, nodes have {nodes.shape[-2]}"
        )
    logits = (nodes * weight).sum(-1) + bias
    return F.relu(logits) if strict_eq3 else logits


def object_pseudo_label_loss(logits: torch.Tensor, presence: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy between presence logits and multi-hot labels."""
    presence = torch.as_tensor(presence, dtype=logits.dtype, device=logits.device)
    if presence.shape != logits.shape:
        raise ValueError(f"presence shape {tuple(presence.shape)} != logits shape {tuple(logits.shape)}")
    if not ((presence == 0) | (presence == 1)).all():
        raise ValueError("presence labels must be 0 or 1")
    return F.binary_cross_entropy_with_logits(logits, presence)


def binarize_scores(scores, threshold: float = 0.5):
    """Pseudo presence labels from detector confidences."""
    return (torch.as_tensor(scores) >= threshold).to(torch.float32)


class ObjectRepresentationFilter(nn.Module):
    def __init__(
        self,
        in_features: int,
        num_objects: int,
        d2: int = 128,
        p: float = 0.3,
        shared_classifier: bool = False,
        strict_eq3: bool = False,
    ):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {p}")
        self.in_features = in_features
        self.num_objects = num_objects
        self.d2 = d2
        self.p = p
        self.strict_eq3 = strict_eq3

        bound = 1.0 / math.sqrt(in_features)
        self.weight = nn.Parameter(torch.empty(num_objects, in_features, d2).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(num_objects, d2).uniform_(-bound, bound))
        cbound = 1.0 / math.sqrt(d2)
        cls_shape = (d2,) if shared_classifier else (num_objects, d2)
        self.cls_weight = nn.Parameter(torch.empty(cls_shape).uniform_(-cbound, cbound))
        bias_shape = () if shared_classifier else (num_objects,)
        self.cls_bias = nn.Parameter(torch.empty(bias_shape).uniform_(-cbound, cbound))

    def forward(self, scene: torch.Tensor, generator: torch.Generator | None = None):
        nodes = filter_objects(scene, self.weight, self.bias, self.p, self.training, generator)
        logits = classify_objects(nodes, self.cls_weight, self.cls_bias, self.strict_eq3)
        return nodes, logits
