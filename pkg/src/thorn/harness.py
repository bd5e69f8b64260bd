"""Training and evaluation driver."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from thorn.checkpoint import file_hash, load_checkpoint, resolve_checkpoint, save_checkpoint
from thorn.config import ConfigError, ExperimentConfig, write_flat_toml
from thorn.heads import (
    action_hits,
    detector_clip_scores,
    fuse_noun_scores,
    joint_loss,
    softmax_np,
    topk_hits,
)
from thorn.model import build_model
from thorn.synthdata import ClipAnnotation, load_splits, read_meta

log = logging.getLogger(__name__)

METRIC_KEYS = [
    "n_clips",
    "loss_total", "loss_verbs", "loss_nouns", "loss_objects",
    "verb_top1", "verb_top5", "noun_top1", "noun_top5", "action_top1", "action_top5",
    "fused_noun_top1", "fused_noun_top5", "fused_action_top1", "fused_action_top5",
    "detector_noun_top1",
]


class DatasetMismatch(ConfigError):
    pass


# ---------------------------------------------------------------- data


class ClipStore:
    """In-memory cache of clip tensors keyed by clip id."""

    def __init__(self, dtype: torch.dtype = torch.float32):
        self.dtype = dtype
        self._cache: dict[str, torch.Tensor] = {}

    def get(self, ann: ClipAnnotation) -> torch.Tensor:
        if ann.clip_id not in self._cache:
            self._cache[ann.clip_id] = torch.from_numpy(ann.load_clip()).to(self.dtype)
        return self._cache[ann.clip_id]

    def batch(self, anns: Sequence[ClipAnnotation]):
        clips = torch.stack([self.get(a) for a in anns])
        verbs = torch.tensor([a.verb for a in anns])
        nouns = torch.tensor([a.noun for a in anns])
        presence = torch.from_numpy(np.stack([a.presence for a in anns])).to(self.dtype)
        return clips, verbs, nouns, presence


def dihedral(clips: torch.Tensor, codes: Sequence[int]) -> torch.Tensor:
    """Apply one of the 8 square symmetries per clip of ``(B, T, H, W, 3)``.

    Bit 0 flips rows, bit 1 flips columns, bit 2 swaps the two spatial axes.
    Motion patterns and object identities are unchanged by these maps, so the
    labels stay valid.
    """
    out = []
    for clip, code in zip(clips, codes):
        if code & 4:
            if clip.shape[1] != clip.shape[2]:
                raise ValueError("axis swap needs square frames")
            clip = clip.transpose(1, 2)
        if code & 1:
            clip = clip.flip(1)
        if code & 2:
            clip = clip.flip(2)
        out.append(clip)
    return torch.stack(out)


def translate(clips: torch.Tensor, shifts: np.ndarray) -> torch.Tensor:
    """Cyclically shift each clip ``(B, T, H, W, 3)`` by ``(dy, dx)`` pixels."""
    return torch.stack([torch.roll(c, (int(dy), int(dx)), dims=(1, 2)) for c, (dy, dx) in zip(clips, shifts)])


AUGMENT_MODES = ("none", "dihedral", "dihedral_shift")


def augment_batch(clips: torch.Tensor, rng: np.random.Generator, mode: str = "dihedral") -> torch.Tensor:
    """Random square symmetry, optionally followed by a shift of up to an eighth of the frame."""
    if mode == "none":
        return clips
    if mode not in AUGMENT_MODES:
        raise ValueError(f"unknown augmentation {mode!r}")
    b, _, h, w, _ = clips.shape
    clips = dihedral(clips, rng.integers(0, 8, size=b))
    if mode == "dihedral_shift":
        reach = max(h, w) // 8
        clips = translate(clips, rng.integers(-reach, reach + 1, size=(b, 2)))
    return clips


def check_dataset(config: ExperimentConfig, annotations: Sequence[ClipAnnotation], meta: dict | None = None) -> None:
    """Fail early when the data does not fit the configured class counts."""
    meta = meta or {}
    for key in ("num_objects", "num_verbs"):
        if key in meta and meta[key] != getattr(config, key):
            raise DatasetMismatch(f"dataset has {key}={meta[key]}, config has {getattr(config, key)}")
    for ann in annotations:
        if ann.presence.shape[1] != config.num_objects:
            raise DatasetMismatch(
                f"clip {ann.clip_id} has {ann.presence.shape[1]} object classes, config has {config.num_objects}"
            )
        if not 0 <= ann.verb < config.num_verbs:
            raise DatasetMismatch(f"clip {ann.clip_id} verb {ann.verb} outside config num_verbs={config.num_verbs}")


# ---------------------------------------------------------------- scheduler


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once the monitored loss has
    failed to improve on its best value for ``patience`` consecutive epochs."""

    def __init__(self, optimizer: torch.optim.Optimizer, factor: float = 0.1, patience: int = 5):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, loss: float) -> bool:
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            for group in self.optimizer.param_groups:
                group["lr"] *= self.factor
            self.bad_epochs = 0
            return True
        return False


# ---------------------------------------------------------------- evaluation


@dataclass
class MetricsReport:
    metrics: dict[str, float]
    per_class: list[dict] = field(default_factory=list)
    predictions: list[dict] = field(default_factory=list)

    def __getitem__(self, key: str) -> float:
        return self.metrics[key]


def _pct(hits: np.ndarray) -> float:
    return float(100.0 * hits.mean()) if hits.size else float("nan")


@torch.no_grad()
def run_model(model, annotations: Sequence[ClipAnnotation], store: ClipStore, batch_size: int = 8) -> dict:
    """Forward every clip in evaluation mode, collecting logits and mean losses."""
    was_training = model.training
    model.eval()
    verb_logits, noun_logits = [], []
    sums = {"total": 0.0, "verbs": 0.0, "nouns": 0.0, "objects": 0.0}
    for start in range(0, len(annotations), batch_size):
        anns = annotations[start : start + batch_size]
        clips, verbs, nouns, presence = store.batch(anns)
        out = model(clips)
        loss = joint_loss(out.bundle, verbs, nouns, presence)
        for key in sums:
            sums[key] += float(getattr(loss, key)) * len(anns)
        verb_logits.append(out.bundle.verb_logits.double().numpy())
        noun_logits.append(out.bundle.noun_logits.double().numpy())
    model.train(was_training)
    n = max(len(annotations), 1)
    return {
        "verb_logits": np.concatenate(verb_logits) if verb_logits else np.zeros((0, 1)),
        "noun_logits": np.concatenate(noun_logits) if noun_logits else np.zeros((0, 1)),
        "losses": {k: v / n for k, v in sums.items()},
    }


def _top5(scores: np.ndarray) -> tuple[str, str]:
    order = np.argsort(-scores, kind="stable")[:5]
    return ";".join(str(int(i)) for i in order), ";".join(repr(float(scores[i])) for i in order)


def summarize(
    annotations: Sequence[ClipAnnotation],
    verb_logits: np.ndarray,
    noun_logits: np.ndarray,
    losses: dict | None = None,
    fusion: bool = True,
    threshold: float = 0.3,
) -> MetricsReport:
    """Top-1/top-5 metrics, optional fused-noun metrics, per-class table and prediction rows."""
    verbs = np.array([a.verb for a in annotations])
    nouns = np.array([a.noun for a in annotations])
    verb_p = softmax_np(verb_logits)
    noun_p = softmax_np(noun_logits)
    m: dict[str, float] = {"n_clips": float(len(annotations))}
    losses = losses or {}
    for key in ("total", "verbs", "nouns", "objects"):
        m[f"loss_{key}"] = float(losses.get(key, float("nan")))
    for k in (1, 5):
        m[f"verb_top{k}"] = _pct(topk_hits(verb_p, verbs, k))
        m[f"noun_top{k}"] = _pct(topk_hits(noun_p, nouns, k))
        m[f"action_top{k}"] = _pct(action_hits(verb_p, noun_p, verbs, nouns, k))

    have_scores = all(a.detector_scores is not None for a in annotations) and len(annotations) > 0
    if fusion and not have_scores:
        warnings.warn("detector scores missing; reporting model-only noun metrics", RuntimeWarning, stacklevel=2)
    fused = None
    if fusion and have_scores:
        scores = np.stack([a.detector_scores for a in annotations])
        fused = fuse_noun_scores(noun_logits, scores, threshold)
        det = detector_clip_scores(scores, threshold)
        for k in (1, 5):
            m[f"fused_noun_top{k}"] = _pct(topk_hits(fused, nouns, k))
            m[f"fused_action_top{k}"] = _pct(action_hits(verb_p, fused, verbs, nouns, k))
        m["detector_noun_top1"] = _pct(topk_hits(det, nouns, 1))
    else:
        for key in ("fused_noun_top1", "fused_noun_top5", "fused_action_top1", "fused_action_top5", "detector_noun_top1"):
            m[key] = float("nan")

    per_class = []
    for kind, labels, probs in (("verb", verbs, verb_p), ("noun", nouns, noun_p)):
        hits = topk_hits(probs, labels, 1) if len(labels) else np.zeros(0, dtype=bool)
        for c in range(probs.shape[-1]):
            sel = labels == c
            per_class.append({
                "kind": kind, "class": c, "n": int(sel.sum()), "correct": int(hits[sel].sum()),
                "accuracy": _pct(hits[sel]) if sel.any() else float("nan"),
            })

    predictions = []
    a1 = action_hits(verb_p, noun_p, verbs, nouns, 1)
    a5 = action_hits(verb_p, noun_p, verbs, nouns, 5)
    for i, ann in enumerate(annotations):
        vi, vs = _top5(verb_p[i])
        ni, ns = _top5(noun_p[i])
        row = {
            "clip_id": ann.clip_id, "verb": ann.verb, "noun": ann.noun,
            "verb_top5": vi, "verb_top5_scores": vs, "noun_top5": ni, "noun_top5_scores": ns,
            "fused_noun_top5": "", "fused_noun_top5_scores": "",
            "action_top1_correct": int(a1[i]), "action_top5_correct": int(a5[i]), "fused_action_top1_correct": "",
        }
        if fused is not None:
            fi, fs = _top5(fused[i])
            row["fused_noun_top5"], row["fused_noun_top5_scores"] = fi, fs
            row["fused_action_top1_correct"] = int(verb_p[i].argmax() == ann.verb and fused[i].argmax() == ann.noun)
        predictions.append(row)
    return MetricsReport(m, per_class, predictions)


def evaluate_model(model, annotations, config: ExperimentConfig, fusion: bool = True, store: ClipStore | None = None) -> MetricsReport:
    store = store or ClipStore(next(model.parameters()).dtype)
    out = run_model(model, list(annotations), store, config.batch_size)
    return summarize(annotations, out["verb_logits"], out["noun_logits"], out["losses"], fusion, config.fusion_threshold)


# ---------------------------------------------------------------- serialization


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_rows(path: str | Path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in columns])
    return path


def read_rows(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_report(report: MetricsReport, out_dir: str | Path, prefix: str = "eval") -> dict[str, Path]:
    out_dir = Path(out_dir)
    return {
        "metrics": write_rows(out_dir / f"{prefix}_metrics.csv", [report.metrics], METRIC_KEYS),
        "per_class": write_rows(out_dir / f"{prefix}_per_class.csv", report.per_class,
                                ["kind", "class", "n", "correct", "accuracy"]),
        "predictions": write_rows(out_dir / f"{prefix}_predictions.csv", report.predictions),
    }


def model_state(model) -> dict[str, torch.Tensor]:
    return {k: v for k, v in model.state_dict().items()}


def save_model(model, config: ExperimentConfig, path: str | Path, extra: dict | None = None) -> Path:
    meta = {"config": config.to_dict(), **(extra or {})}
    return save_checkpoint(path, model_state(model), meta)


def load_model(path: str | Path, dtype: torch.dtype = torch.float32):
    state, meta = load_checkpoint(resolve_checkpoint(path))
    config = ExperimentConfig.from_dict(meta["config"])
    model = build_model(config, dtype)
    model.load_state_dict({k: v.to(dtype) for k, v in state.items()})
    model.eval()
    return model, config, meta


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: torch.nn.Module
    config: ExperimentConfig
    history: list[dict]
    best_checkpoint: Path | None
    last_checkpoint: Path | None
    steps: int


def _losses_row(prefix: str, report: MetricsReport) -> dict:
    keys = ["loss_total", "loss_verbs", "loss_nouns", "loss_objects",
            "verb_top1", "verb_top5", "noun_top1", "noun_top5", "action_top1", "action_top5"]
    return {f"{prefix}_{k}": report.metrics[k] for k in keys}


def train_model(
    config: ExperimentConfig,
    train_set: Sequence[ClipAnnotation],
    val_set: Sequence[ClipAnnotation] = (),
    out_dir: str | Path | None = None,
    dtype: torch.dtype = torch.float32,
    store: ClipStore | None = None,
) -> TrainResult:
    """Joint end-to-end training with Adam and a plateau scheduler on validation loss.

    Every source of randomness derives from ``config.seed``. When ``out_dir``
    is given, ``best.ckpt``, ``last.ckpt``, ``metrics.csv`` and ``config.toml``
    are written there.
    """
    train_set, val_set = list(train_set), list(val_set)
    if not train_set:
        raise DatasetMismatch("training split is empty")
    check_dataset(config, train_set + val_set)
    torch.use_deterministic_algorithms(True)
    store = store or ClipStore(dtype)
    model = build_model(config, dtype)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    sched = PlateauScheduler(opt, config.scheduler_factor, config.scheduler_patience)
    dropout_gen = torch.Generator().manual_seed(config.seed + 1)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_flat_toml(config.to_dict(), out_dir / "config.toml")

    history: list[dict] = []
    best_loss = math.inf
    best_path = last_path = None
    steps = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_set))
        aug_rng = np.random.default_rng([config.seed, epoch, 1])
        running = {"total": 0.0, "verbs": 0.0, "nouns": 0.0, "objects": 0.0}
        seen = 0
        for start in range(0, len(order), config.batch_size):
            if config.max_steps and steps >= config.max_steps:
                break
            anns = [train_set[i] for i in order[start : start + config.batch_size]]
            clips, verbs, nouns, presence = store.batch(anns)
            clips = augment_batch(clips, aug_rng, config.augment)
            out = model(clips, dropout_gen)
            loss = joint_loss(out.bundle, verbs, nouns, presence)
            opt.zero_grad(set_to_none=True)
            loss.total.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            steps += 1
            seen += len(anns)
            for key in running:
                running[key] += getattr(loss, key).item() * len(anns)
        if seen == 0:
            break

        row = {"epoch": epoch + 1, "step": steps, "lr": opt.param_groups[0]["lr"]}
        row.update({f"batch_loss_{k}": v / seen for k, v in running.items()})
        if config.eval_train:
            row.update(_losses_row("train", evaluate_model(model, train_set, config, fusion=False, store=store)))
        monitor = row["batch_loss_total"]
        if val_set:
            val_report = evaluate_model(model, val_set, config, fusion=False, store=store)
            row.update(_losses_row("val", val_report))
            monitor = val_report["loss_total"]
        # the plateau schedule follows validation loss; without a validation split it stays idle
        row["lr_reduced"] = int(sched.step(monitor)) if val_set else 0
        history.append(row)
        log.info("epoch %d step %d loss %.4f monitor %.4f", epoch + 1, steps, row["batch_loss_total"], monitor)

        if out_dir is not None:
            last_path = save_model(model, config, out_dir / "last.ckpt", {"epoch": epoch + 1, "step": steps})
            if monitor < best_loss:
                best_loss = monitor
                best_path = save_model(model, config, out_dir / "best.ckpt", {"epoch": epoch + 1, "step": steps})
            write_rows(out_dir / "metrics.csv", history)
        if config.max_steps and steps >= config.max_steps:
            break
    return TrainResult(model, config, history, best_path, last_path, steps)


def train(config: ExperimentConfig, manifest: str | Path, out_dir: str | Path) -> TrainResult:
    splits = load_splits(manifest)
    check_dataset(config, splits["train"] + splits["val"] + splits["test"], read_meta(manifest))
    return train_model(config, splits["train"], splits["val"], out_dir)


def evaluate(
    checkpoint: str | Path,
    manifest: str | Path,
    split: str = "test",
    fusion: bool = True,
    out_dir: str | Path | None = None,
) -> MetricsReport:
    model, config, _ = load_model(checkpoint)
    splits = load_splits(manifest)
    anns = splits[split] if split != "all" else splits["train"] + splits["val"] + splits["test"]
    check_dataset(config, anns, read_meta(manifest))
    report = evaluate_model(model, anns, config, fusion)
    if out_dir is not None:
        write_report(report, out_dir, f"eval_{split}")
    return report


def per_class_deltas(report: MetricsReport, baseline: MetricsReport) -> list[dict]:
    """Per-class top-1 accuracy differences against a baseline run."""
    base = {(r["kind"], r["class"]): r["accuracy"] for r in baseline.per_class}
    return [
        {"kind": r["kind"], "class": r["class"], "accuracy": r["accuracy"],
         "baseline": base.get((r["kind"], r["class"]), float("nan")),
         "delta": r["accuracy"] - base.get((r["kind"], r["class"]), float("nan"))}
        for r in report.per_class
    ]


__all__ = [
    "ClipStore", "DatasetMismatch", "MetricsReport", "PlateauScheduler", "TrainResult",
    "check_dataset", "evaluate", "evaluate_model", "file_hash", "load_model", "per_class_deltas",
    "run_model", "save_model", "summarize", "train", "train_model", "write_report", "write_rows", "read_rows",
]
