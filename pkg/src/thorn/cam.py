"""Gradient-weighted activation maps over the encoder grid for each object class.

For class c and frame t the map scores every spatial cell by
``sum_d  d(logit_c[t]) / d(F[t, y, x, d]) * F[t, y, x, d]``, rectified and
divided by the frame maximum. Only spatio-temporal models have a spatial axis
to attribute to.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from thorn.encoder import validate_clip

log = logging.getLogger(__name__)


class CamError(ValueError):
    pass


@dataclass
class CamResult:
    maps: np.ndarray  # (C_o, T, H', W') in [0, 1]
    degenerate: bool
    class_names: list[str]

    def centroid(self, cls: int, image_size: tuple[int, int]) -> tuple[float, float] | None:
        """Mass centroid ``(x, y)`` in pixels of one class's maps summed over frames."""
        return cam_centroid(self.maps[cls], image_size)


def _require_spatial(model) -> None:
    config = getattr(model, "config", None)
    if config is None or getattr(config, "architecture", "thorn") != "thorn":
        raise CamError("activation maps need a relation model with an object filter")
    if config.node_mode != "spatio_temporal":
        raise CamError(
            f"activation maps need a spatio_temporal checkpoint; this one uses {config.node_mode!r} nodes "
            "and has no spatial axis"
        )


def class_activation_maps(
    model,
    clip: torch.Tensor | np.ndarray,
    classes: Sequence[int] | None = None,
    class_names: Sequence[str] | None = None,
) -> CamResult:
    """Per-class, per-frame maps ``(C_o, T, H', W')`` for a single clip ``(T, H, W, 3)``."""
    _require_spatial(model)
    clip = torch.as_tensor(clip)
    if clip.ndim != 4:
        raise CamError(f"expected a single clip (T, H, W, 3), got {tuple(clip.shape)}")
    param = next(model.parameters())
    clip = validate_clip(clip.to(param.dtype))
    c_o = model.config.num_objects
    classes = list(range(c_o)) if classes is None else list(classes)
    names = list(class_names) if class_names is not None else [f"class_{i}" for i in range(c_o)]
    if len(names) != c_o:
        raise CamError(f"{len(names)} class names for {c_o} classes")

    model.eval()
    with torch.no_grad():
        grid = model.encoder.forward_grid(clip)  # (1, T, H', W', D1)
    t_len, gh, gw = grid.shape[1:4]
    maps = np.zeros((c_o, t_len, gh, gw))
    # a constant clip has no structure to attribute; report it instead of normalizing noise
    if float(clip.max() - clip.min()) == 0.0:
        log.warning("clip is uniform; activation maps are degenerate and left at zero")
        return CamResult(maps, True, names)

    scene = grid.detach().requires_grad_(True)
    _, logits = model.orf(scene)  # (1, T, C_o)
    for c in classes:
        (grad,) = torch.autograd.grad(logits[0, :, c].sum(), scene, retain_graph=True)
        cam = torch.relu((grad * scene).sum(-1))[0]  # (T, H', W')
        peak = cam.flatten(1).max(dim=1).values
        cam = torch.where(peak[:, None, None] > 0, cam / peak.clamp_min(1e-30)[:, None, None], torch.zeros_like(cam))
        maps[c] = cam.detach().cpu().double().numpy()
    return CamResult(maps, False, names)


def cam_centroid(maps: np.ndarray, image_size: tuple[int, int]) -> tuple[float, float] | None:
    """Centroid ``(x, y)`` in image pixels of ``(T, H', W')`` or ``(H', W')`` maps; None if empty."""
    m = np.asarray(maps, dtype=np.float64)
    if m.ndim == 3:
        m = m.sum(axis=0)
    total = m.sum()
    if total <= 0:
        return None
    gh, gw = m.shape
    h, w = image_size
    ys = (np.arange(gh) + 0.5) * h / gh
    xs = (np.arange(gw) + 0.5) * w / gw
    return float((m.sum(axis=0) * xs).sum() / total), float((m.sum(axis=1) * ys).sum() / total)


def quadrant(x: float, y: float, image_size: tuple[int, int]) -> tuple[int, int]:
    """``(column, row)`` half of the image a pixel falls in."""
    h, w = image_size
    return int(x >= w / 2), int(y >= h / 2)


def write_cam_csvs(result: CamResult, out_dir: str | Path, classes: Sequence[int] | None = None) -> list[Path]:
    """One CSV grid per (class, frame): ``cam_class{c}_frame{t}.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    classes = range(result.maps.shape[0]) if classes is None else classes
    paths = []
    for c in classes:
        for t in range(result.maps.shape[1]):
            path = out_dir / f"cam_class{c}_frame{t}.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                for row in result.maps[c, t]:
                    writer.writerow([repr(float(v)) for v in row])
            paths.append(path)
    with open(out_dir / "cam_summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "name", "degenerate", "mean_activation"])
        for c in classes:
            writer.writerow([c, result.class_names[c], int(result.degenerate), repr(float(result.maps[c].mean()))])
    paths.append(out_dir / "cam_summary.csv")
    return paths


def read_cam_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])
