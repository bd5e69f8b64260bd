"""Object relation reasoning: stacked graph blocks over object-class nodes.

Each block builds, per head, a video-dependent adjacency by adding a
row-softmaxed attention score matrix to a learnable base graph, runs a graph
convolution shared across frames, sums the heads, aggregates over time with a
1-D convolution and adds the block input back.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

LN_EPS = 1e-5


class GraphBlock(nn.Module):
    def __init__(
        self,
        num_objects: int,
        d2: int = 128,
        d_e: int | None = None,
        heads: int = 3,
        kernel_size: int = 9,
        share_base: bool = False,
        attention_scale: bool = True,
        attention_norm: bool = True,
    ):
        super().__init__()
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError(f"temporal kernel size must be odd, got {kernel_size}")
        if heads < 1:
            raise ValueError(f"need at least one head, got {heads}")
        d_e = d_e or max(1, d2 // 4)
        self.num_objects = num_objects
        self.d2 = d2
        self.d_e = d_e
        self.heads = heads
        self.kernel_size = kernel_size
        self.attention_scale = attention_scale
        self.attention_norm = attention_norm

        base_heads = 1 if share_base else heads
        self.base = nn.Parameter(torch.full((base_heads, num_objects, num_objects), 1.0 / num_objects))
        bound = 1.0 / math.sqrt(d2)
        self.w1 = nn.Parameter(torch.empty(heads, d2, d_e).uniform_(-bound, bound))
        self.w2 = nn.Parameter(torch.empty(heads, d2, d_e).uniform_(-bound, bound))
        self.w3 = nn.Parameter(torch.empty(heads, d2, d2).uniform_(-bound, bound))
        self.tcn = nn.Conv1d(d2, d2, kernel_size, padding=kernel_size // 2)

    def base_adjacency(self, head: int) -> torch.Tensor:
        return self.base[head % self.base.shape[0]]

    def zero_(self) -> "GraphBlock":
        """Zero every parameter, including the base graph."""
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self

    def forward(self, nodes: torch.Tensor, training: bool | None = None):
        return block_forward(nodes, self, self.training if training is None else training)


def _check_nodes(nodes: torch.Tensor, block: GraphBlock) -> None:
    if nodes.ndim < 3:
        raise ValueError(f"nodes must be (..., T, C_o, D2), got {tuple(nodes.shape)}")
    if nodes.shape[-3] < 1:
        raise ValueError("nodes must contain at least one frame")
    if nodes.shape[-2] != block.num_objects or nodes.shape[-1] != block.d2:
        raise ValueError(
            f"nodes {tuple(nodes.shape)} do not match block (C_o={block.num_objects}, D2={block.d2})"
        )


def attention_scores(
    nodes: torch.Tensor,
    w1: torch.Tensor,
    w2: torch.Tensor,
    scale: bool = True,
    normalize: bool = True,
) -> torch.Tensor:
    """Row-softmaxed ``(C_o, C_o)`` attention from embedded nodes.

    Both embeddings are contracted jointly over embedding channels and frames.
    ``normalize`` standardizes each node vector (no learned affine) before
    embedding and ``scale`` divides the scores by ``sqrt(D_e * T)``. Both keep
    the bilinear scores from saturating the softmax as node magnitudes grow
    through the stack; the residual path itself is left untouched.
    """
    if normalize:
        nodes = F.layer_norm(nodes, nodes.shape[-1:], eps=LN_EPS)
    e1 = nodes @ w1  # (..., T, C, De)
    e2 = nodes @ w2
    scores = torch.einsum("...tie,...tje->...ij", e1, e2)
    if scale:
        scores = scores / math.sqrt(e1.shape[-1] * e1.shape[-3])
    return torch.softmax(scores, dim=-1)


def attention_adjacency(nodes: torch.Tensor, block: GraphBlock, head: int) -> torch.Tensor:
    """Superimposed adjacency ``A[head] + softmax(scores)`` for one head."""
    _check_nodes(nodes, block)
    att = attention_scores(nodes, block.w1[head], block.w2[head], block.attention_scale, block.attention_norm)
    return block.base_adjacency(head) + att


def graph_convolve(nodes: torch.Tensor, adjacency: torch.Tensor, block: GraphBlock, head: int) -> torch.Tensor:
    """Per-frame message passing ``adjacency @ nodes[t] @ W3[head]``."""
    c = nodes.shape[-2]
    if adjacency.shape[-2:] != (c, c):
        raise ValueError(f"adjacency {tuple(adjacency.shape)} does not match {c} node classes")
    mixed = torch.einsum("...ij,...tjd->...tid", adjacency, nodes)
    return mixed @ block.w3[head]


def temporal_conv(x: torch.Tensor, conv: nn.Conv1d) -> torch.Tensor:
    """Same-length 1-D convolution over frames, independently per class."""
    lead = x.shape[:-3]
    t, c, d = x.shape[-3:]
    flat = x.reshape(-1, t, c, d).permute(0, 2, 3, 1).reshape(-1, d, t)
    out = conv(flat)
    return out.reshape(-1, c, d, t).permute(0, 3, 1, 2).reshape(*lead, t, c, d)


def block_forward(nodes: torch.Tensor, block: GraphBlock, training: bool = False):
    """One relation-reasoning block.

    Returns the updated nodes and the per-head superimposed adjacencies with
    shape ``(..., heads, C_o, C_o)``.
    """
    _check_nodes(nodes, block)
    out = None
    adjacencies = []
    for h in range(block.heads):
        adj = attention_adjacency(nodes, block, h)
        adjacencies.append(adj)
        g = graph_convolve(nodes, adj, block, h)
        out = g if out is None else out + g
    out = temporal_conv(out, block.tcn) + nodes
    return out, torch.stack(adjacencies, dim=-3)


def stack_forward(nodes: torch.Tensor, blocks: Sequence[GraphBlock], training: bool = False):
    """Chain blocks; adjacency state is ``(..., blocks, heads, C_o, C_o)``."""
    if len(blocks) == 0:
        raise ValueError("relation reasoning needs at least one block")
    states = []
    for block in blocks:
        nodes, adj = block_forward(nodes, block, training)
        states.append(adj)
    return nodes, torch.stack(states, dim=-4)


class RelationReasoning(nn.Module):
    def __init__(
        self,
        num_objects: int,
        d2: int = 128,
        n_blocks: int = 5,
        heads: int = 3,
        d_e: int | None = None,
        kernel_size: int = 9,
        share_base: bool = False,
        attention_scale: bool = True,
        attention_norm: bool = True,
    ):
        super().__init__()
        if n_blocks < 1:
            raise ValueError("relation reasoning needs at least one block")
        self.blocks = nn.ModuleList(
            GraphBlock(num_objects, d2, d_e, heads, kernel_size, share_base, attention_scale, attention_norm)
            for _ in range(n_blocks)
        )

    def forward(self, nodes: torch.Tensor):
        return stack_forward(nodes, list(self.blocks), self.training)


def export_adjacency(
    adjacency: torch.Tensor | np.ndarray,
    out_dir: str | Path,
    class_names: Sequence[str] | None = None,
    prefix: str = "adjacency",
) -> list[Path]:
    """Write ``(blocks, heads, C_o, C_o)`` adjacencies as one CSV grid per block/head."""
    adj = np.asarray(adjacency.detach().cpu() if isinstance(adjacency, torch.Tensor) else adjacency, dtype=np.float64)
    if adj.ndim != 4 or adj.shape[-1] != adj.shape[-2]:
        raise ValueError(f"adjacency must be (blocks, heads, C_o, C_o), got {adj.shape}")
    c = adj.shape[-1]
    names = list(class_names) if class_names is not None else [f"class_{i}" for i in range(c)]
    if len(names) != c:
        raise ValueError(f"{len(names)} class names for {c} classes")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for b in range(adj.shape[0]):
        for h in range(adj.shape[1]):
            path = out_dir / f"{prefix}_block{b}_head{h}.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(names)
                for row in adj[b, h]:
                    writer.writerow([repr(float(v)) for v in row])
            paths.append(path)
    return paths


def read_adjacency_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])
