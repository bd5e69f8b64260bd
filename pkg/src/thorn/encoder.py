"""Reference 3D-convolutional clip encoder.

Any backbone can stand in here as long as it maps a channels-last clip
``(B, T, H, W, 3)`` to a grid ``(B, T, H', W', D1)`` without pooling over
time. The reference network centres the pixels, then applies four 3x3x3
convolutions (each group-normalized) with a spatial stride schedule of
(2, 2, 2, 1), followed by a linear pointwise expansion to ``D1``.
"""

from __future__ import annotations

from typing import Literal

import torch
import torch.nn as nn
import torch.nn.functional as F

NodeMode = Literal["spatio_temporal", "temporal"]

SPATIAL_STRIDES = (2, 2, 2, 1)
# pixels in [0, 1] are shifted and scaled to roughly unit range before the first conv
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25
NORM_GROUPS = 8
DEFAULT_CHANNELS = (16, 32, 64, 64)


def _conv_out(size: int, stride: int) -> int:
    # kernel 3, padding 1
    return (size - 1) // stride + 1


def grid_size_for(input_size: int, strides=SPATIAL_STRIDES) -> int:
    size = input_size
    for s in strides:
        size = _conv_out(size, s)
    return size


def validate_clip(clip: torch.Tensor) -> torch.Tensor:
    """Check a clip tensor and return it with a leading batch axis."""
    if clip.ndim == 4:
        clip = clip.unsqueeze(0)
    if clip.ndim != 5 or clip.shape[-1] != 3:
        raise ValueError(f"clip must have shape (T, H, W, 3) or (B, T, H, W, 3), got {tuple(clip.shape)}")
    if clip.shape[1] < 1:
        raise ValueError("clip must contain at least one frame")
    if clip.shape[2] < 8 or clip.shape[3] < 8:
        raise ValueError(f"clip frames must be at least 8x8, got {clip.shape[2]}x{clip.shape[3]}")
    if not torch.isfinite(clip).all():
        raise ValueError("clip contains non-finite values")
    return clip


class ReferenceEncoder(nn.Module):
    """Small stand-in for a video backbone that keeps full temporal resolution.

    ``grid_size`` is the spatial side the encoder must produce; construction
    fails if ``input_size`` does not reduce to it under the stride schedule.
    """

    def __init__(
        self,
        d1: int = 432,
        d_global: int = 256,
        input_size: int = 56,
        grid_size: int | None = 7,
        channels: tuple[int, ...] = DEFAULT_CHANNELS,
    ):
        super().__init__()
        if d1 < 8:
            raise ValueError(f"d1 must be >= 8, got {d1}")
        if d_global < 1:
            raise ValueError(f"d_global must be positive, got {d_global}")
        reached = grid_size_for(input_size)
        if grid_size is not None and reached != grid_size:
            raise ValueError(
                f"input resolution {input_size} reduces to {reached}x{reached}, "
                f"not the required {grid_size}x{grid_size}"
            )
        self.d1 = d1
        self.d_global = d_global
        self.input_size = input_size
        self.grid_size = reached

        convs, norms = [], []
        in_ch = 3
        for out_ch, stride in zip(channels, SPATIAL_STRIDES):
            convs.append(nn.Conv3d(in_ch, out_ch, kernel_size=3, stride=(1, stride, stride), padding=1))
            norms.append(nn.GroupNorm(min(NORM_GROUPS, out_ch), out_ch))
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        # per-clip group norm keeps the activation scale stable without batch statistics
        self.norms = nn.ModuleList(norms)
        self.expand = nn.Conv3d(in_ch, d1, kernel_size=1)
        self.global_proj = nn.Conv3d(d1, d_global, kernel_size=1)
        # He init keeps activation scale through the ReLU stack
        for m in [*self.convs, self.expand, self.global_proj]:
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)

    def forward_grid(self, clip: torch.Tensor) -> torch.Tensor:
        x = validate_clip(clip)
        if x.shape[2] != self.input_size or x.shape[3] != self.input_size:
            raise ValueError(
                f"encoder expects {self.input_size}x{self.input_size} frames, "
                f"got {x.shape[2]}x{x.shape[3]}"
            )
        x = ((x - PIXEL_MEAN) / PIXEL_STD).permute(0, 4, 1, 2, 3)  # (B, 3, T, H, W)
        for conv, norm in zip(self.convs, self.norms):
            x = F.relu(norm(conv(x)))
        # linear expansion: a signed grid keeps the class filters' ReLUs from dying together
        x = self.expand(x)
        return x.permute(0, 2, 3, 4, 1)  # (B, T, H', W', D1)

    def pool(self, grid: torch.Tensor) -> torch.Tensor:
        """Pointwise projection of the grid to ``d_global`` then spatial mean."""
        x = F.relu(self.global_proj(grid.permute(0, 4, 1, 2, 3)))
        return x.mean(dim=(3, 4)).transpose(1, 2)  # (B, T, D_g)

    def forward(self, clip: torch.Tensor, mode: NodeMode = "spatio_temporal") -> torch.Tensor:
        grid = self.forward_grid(clip)
        if mode == "spatio_temporal":
            return grid
        if mode == "temporal":
            return self.pool(grid)
        raise ValueError(f"unknown encoder mode {mode!r}")


def reference_encoder_init(
    seed: int,
    d1: int = 432,
    d_global: int = 256,
    input_size: int = 56,
    grid_size: int | None = 7,
    dtype: torch.dtype = torch.float32,
) -> ReferenceEncoder:
    """Build a reference encoder whose weights depend only on ``seed``."""
    if d1 < 8:
        raise ValueError(f"d1 must be >= 8, got {d1}")
    devices = []
    with torch.random.fork_rng(devices=devices):
        torch.manual_seed(seed)
        enc = ReferenceEncoder(d1=d1, d_global=d_global, input_size=input_size, grid_size=grid_size)
    return enc.to(dtype)


def encode(clip: torch.Tensor, encoder: ReferenceEncoder, mode: NodeMode = "spatio_temporal") -> torch.Tensor:
    """Encode a clip; unbatched input gives unbatched output."""
    unbatched = clip.ndim == 4
    out = encoder(clip, mode)
    return out[0] if unbatched else out
