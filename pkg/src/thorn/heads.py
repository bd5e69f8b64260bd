"""Verb/noun predictors, the joint loss, detector-score fusion and accuracy helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from thorn.orf import object_pseudo_label_loss


@dataclass
class PredictionBundle:
    verb_logits: torch.Tensor  # (..., C_v)
    noun_logits: torch.Tensor  # (..., C_o)
    object_logits: torch.Tensor | None = None  # (..., T, C_o)


@dataclass
class LossComponents:
    total: torch.Tensor
    verbs: torch.Tensor
    nouns: torch.Tensor
    objects: torch.Tensor


class PredictionHeads(nn.Module):
    """Noun head on time-pooled nodes, verb head on the last block's adjacency.

    With ``verb_from_nodes`` the verb head reads the flattened pooled nodes
    instead of the adjacency.
    """

    def __init__(
        self,
        num_objects: int,
        num_verbs: int,
        d2: int = 128,
        verb_from_nodes: bool = False,
        verb_init_gain: float = 30.0,
    ):
        super().__init__()
        self.num_objects = num_objects
        self.num_verbs = num_verbs
        self.verb_from_nodes = verb_from_nodes
        bound = 1.0 / math.sqrt(d2)
        self.noun_weight = nn.Parameter(torch.empty(num_objects, d2).uniform_(-bound, bound))
        self.noun_bias = nn.Parameter(torch.empty(num_objects).uniform_(-bound, bound))
        verb_in = num_objects * d2 if verb_from_nodes else num_objects * num_objects
        self.verb = nn.Linear(verb_in, num_verbs)
        if not verb_from_nodes:
            # adjacency entries are O(1/C_o) with small spread across videos, so the
            # usual fan-in init leaves the verb path with a tiny upstream gradient
            nn.init.uniform_(self.verb.weight, -verb_init_gain / math.sqrt(verb_in), verb_init_gain / math.sqrt(verb_in))

    def forward(self, nodes: torch.Tensor, adjacency: torch.Tensor, object_logits=None) -> PredictionBundle:
        return predict(nodes, adjacency, self, object_logits)


def predict(
    nodes: torch.Tensor,
    adjacency: torch.Tensor,
    head: PredictionHeads,
    object_logits: torch.Tensor | None = None,
) -> PredictionBundle:
    """Verb and noun logits from final nodes ``(..., T, C_o, D2)`` and
    adjacency state ``(..., blocks, heads, C_o, C_o)``."""
    c = nodes.shape[-2]
    if adjacency.shape[-1] != c or adjacency.shape[-2] != c:
        raise ValueError(
            f"nodes have {c} classes but adjacency is {tuple(adjacency.shape)}"
        )
    if adjacency.ndim < 4 or adjacency.shape[-4] < 1:
        raise ValueError("adjacency state must hold at least one block")
    pooled = nodes.mean(dim=-3)  # (..., C_o, D2)
    noun_logits = (pooled * head.noun_weight).sum(-1) + head.noun_bias
    if head.verb_from_nodes:
        verb_in = pooled.flatten(-2)
    else:
        verb_in = adjacency[..., -1, :, :, :].mean(dim=-3).flatten(-2)
    return PredictionBundle(head.verb(verb_in), noun_logits, object_logits)


def nll_from_logits(logits: torch.Tensor, target) -> torch.Tensor:
    target = torch.as_tensor(target, device=logits.device)
    n = logits.shape[-1]
    if ((target < 0) | (target >= n)).any():
        raise ValueError(f"label {target.tolist()} out of range for {n} classes")
    if logits.ndim == 1:
        return F.cross_entropy(logits.unsqueeze(0), target.reshape(1))
    return F.cross_entropy(logits, target)


def joint_loss(bundle: PredictionBundle, verb_gt, noun_gt, presence=None) -> LossComponents:
    """Unweighted sum of verb NLL, noun NLL and frame-level object BCE."""
    verbs = nll_from_logits(bundle.verb_logits, verb_gt)
    nouns = nll_from_logits(bundle.noun_logits, noun_gt)
    if bundle.object_logits is not None and presence is not None:
        objects = object_pseudo_label_loss(bundle.object_logits, presence)
    else:
        objects = torch.zeros((), dtype=verbs.dtype, device=verbs.device)
    return LossComponents(verbs + nouns + objects, verbs, nouns, objects)


def detector_clip_scores(scores, threshold: float = 0.3) -> np.ndarray:
    """Mean detector confidence over frames; values below ``threshold`` are zeroed.

    ``scores`` is ``(..., T, C_o)``. A mean exactly at the threshold is kept.
    """
    s = np.asarray(scores, dtype=np.float64)
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    if s.size and (s.min() < 0.0 or s.max() > 1.0):
        raise ValueError("detector scores must lie in [0, 1]")
    clip = s.mean(axis=-2)
    return np.where(clip >= threshold, clip, 0.0)


def softmax_np(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def fuse_noun_scores(noun_logits, detector_scores, threshold: float = 0.3) -> np.ndarray:
    """Equal-weight average of model noun probabilities and thresholded detector clip scores."""
    if isinstance(noun_logits, torch.Tensor):
        noun_logits = noun_logits.detach().cpu().numpy()
    return 0.5 * softmax_np(noun_logits) + 0.5 * detector_clip_scores(detector_scores, threshold)


def action_prediction(verb_scores, noun_scores) -> tuple[int, int, tuple[int, int]]:
    """Top-1 verb, noun and the (verb, noun) action pair for one clip."""
    verb = int(np.argmax(_np(verb_scores)))
    noun = int(np.argmax(_np(noun_scores)))
    return verb, noun, (verb, noun)


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def topk_hits(scores, labels, k: int) -> np.ndarray:
    """Boolean per clip: true label among the ``k`` highest scores.

    Ties are broken towards the lower class index, matching ``argmax``.
    """
    s = _np(scores)
    labels = np.asarray(labels)
    k = min(k, s.shape[-1])
    order = np.argsort(-s, axis=-1, kind="stable")[..., :k]
    return (order == labels[..., None]).any(axis=-1)


def action_hits(verb_scores, noun_scores, verb_labels, noun_labels, k: int) -> np.ndarray:
    """An action counts only when both verb and noun are within top-k."""
    return topk_hits(verb_scores, verb_labels, k) & topk_hits(noun_scores, noun_labels, k)
