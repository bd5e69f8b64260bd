"""Synthetic hand-object interaction clips and the on-disk annotation format.

Every object class has a fixed colour and shape. A hand blob (class 0) and the
noun object carry out the verb's motion pattern while smaller distractors
drift through part of the clip, so the verb is recoverable from motion and the
noun from appearance.

Layout written by :func:`generate_dataset`::

    out/manifest.csv          clip_id,verb,noun,frames_path,presence_path,scores_path
    out/splits.csv            clip_id,split
    out/meta.json             class counts, names, clip geometry, seed
    out/clips/<id>.bin        raw float32 clip with an 8 x int32 header
    out/labels/<id>_presence.csv, out/labels/<id>_scores.csv   T x C_o grids
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CLIP_MAGIC = 0x4E524854  # b"THRN" little-endian
CLIP_VERSION = 1
MANIFEST_HEADER = ["clip_id", "verb", "noun", "frames_path", "presence_path", "scores_path"]

VERBS = ["approach", "shake", "rotate-around", "merge", "split", "static-hold"]

# name, rgb, shape
PALETTE = [
    ("hand", (0.96, 0.76, 0.60), "ellipse"),
    ("red_disk", (0.90, 0.10, 0.10), "disk"),
    ("green_square", (0.10, 0.80, 0.20), "square"),
    ("blue_triangle", (0.15, 0.25, 0.95), "triangle"),
    ("yellow_diamond", (0.95, 0.90, 0.10), "diamond"),
    ("magenta_ring", (0.90, 0.10, 0.85), "ring"),
    ("cyan_cross", (0.10, 0.90, 0.90), "cross"),
    ("orange_square", (1.00, 0.55, 0.05), "square"),
    ("purple_disk", (0.50, 0.10, 0.60), "disk"),
    ("white_triangle", (1.00, 1.00, 1.00), "triangle"),
    ("black_diamond", (0.02, 0.02, 0.02), "diamond"),
    ("olive_ring", (0.55, 0.60, 0.10), "ring"),
]
CLASS_NAMES = [p[0] for p in PALETTE]


class ManifestError(ValueError):
    pass


@dataclass
class SynthConfig:
    num_objects: int = 10
    num_verbs: int = 6
    frames: int = 16
    height: int = 56
    width: int = 56
    clips_per_class: int = 5
    noise_level: float = 0.0
    detector_noise: float = 0.0
    seed: int = 0
    object_radius: int = 5

    def __post_init__(self):
        if not 1 <= self.num_verbs <= len(VERBS):
            raise ValueError(f"num_verbs must be in [1, {len(VERBS)}], got {self.num_verbs}")
        if not 1 <= self.num_objects <= len(PALETTE):
            raise ValueError(f"num_objects must be in [1, {len(PALETTE)}], got {self.num_objects}")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.height < 8 or self.width < 8:
            raise ValueError("frames must be at least 8x8 pixels")
        if not 0.0 <= self.noise_level < 1.0:
            raise ValueError(f"noise_level must be in [0, 1), got {self.noise_level}")
        if not 0.0 <= self.detector_noise <= 1.0:
            raise ValueError(f"detector_noise must be in [0, 1], got {self.detector_noise}")
        if self.object_radius < 1:
            raise ValueError("object_radius must be positive")


@dataclass(eq=False)
class ClipAnnotation:
    clip_id: str
    verb: int
    noun: int
    presence: np.ndarray  # (T, C_o) of 0/1
    detector_scores: np.ndarray | None = None  # (T, C_o) in [0, 1]
    frames_path: Path | None = None
    # renderer-side centre of the noun object per frame, (T, 2) as (x, y) pixels
    noun_track: np.ndarray | None = field(default=None, repr=False)

    def __eq__(self, other):
        if not isinstance(other, ClipAnnotation):
            return NotImplemented
        same_scores = (self.detector_scores is None) == (other.detector_scores is None) and (
            self.detector_scores is None or np.array_equal(self.detector_scores, other.detector_scores)
        )
        return (
            self.clip_id == other.clip_id
            and self.verb == other.verb
            and self.noun == other.noun
            and np.array_equal(self.presence, other.presence)
            and same_scores
        )

    def load_clip(self) -> np.ndarray:
        if self.frames_path is None:
            raise ManifestError(f"clip {self.clip_id} has no frames file")
        return read_clip(self.frames_path)


# ---------------------------------------------------------------- rendering


def _shape_mask(kind: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    if kind == "disk":
        return dx**2 + dy**2 <= r**2
    if kind == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.85 * r
    if kind == "triangle":
        return (dy <= 0.75 * r) & (dy >= -r) & (np.abs(dx) <= 0.6 * (dy + r))
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= 1.1 * r
    if kind == "ring":
        d2 = dx**2 + dy**2
        return (d2 <= r**2) & (d2 >= (0.5 * r) ** 2)
    if kind == "cross":
        return ((np.abs(dx) <= 0.35 * r) & (np.abs(dy) <= r)) | ((np.abs(dy) <= 0.35 * r) & (np.abs(dx) <= r))
    if kind == "ellipse":
        return (dx / (1.25 * r)) ** 2 + (dy / (0.85 * r)) ** 2 <= 1.0
    raise ValueError(f"unknown shape {kind!r}")


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = rng.uniform(0.30, 0.50)
    tint = rng.uniform(-0.04, 0.04, size=3)
    fx, fy = rng.uniform(0.1, 0.5, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    texture = 0.04 * np.sin(fx * xx + fy * yy + phase)
    return np.clip(base + tint[None, None, :] + texture[..., None], 0.0, 1.0)


def _unit(theta: float) -> np.ndarray:
    return np.array([np.cos(theta), np.sin(theta)])


def verb_tracks(verb: int, frames: int, anchor: np.ndarray, size: float, rng: np.random.Generator):
    """Noun-object and hand centres ``(T, 2)`` for a motion pattern.

    Distances are fractions of the frame side ``size``; the object never
    leaves a 0.1 * size neighbourhood of ``anchor``.
    """
    s = np.linspace(0.0, 1.0, frames) if frames > 1 else np.zeros(1)
    theta = rng.uniform(0, 2 * np.pi)
    d = _unit(theta)
    perp = _unit(theta + np.pi / 2)
    obj = np.repeat(anchor[None, :], frames, axis=0)
    name = VERBS[verb]
    if name == "approach":
        # the hand stops short of a still object
        hand = anchor + np.outer(0.40 - 0.18 * s, d) * size
    elif name == "shake":
        obj = anchor + np.outer(0.08 * np.sin(2 * np.pi * 2.5 * s), perp) * size
        hand = obj + 0.14 * d * size
    elif name == "rotate-around":
        ang = theta + 2 * np.pi * s
        hand = anchor + 0.24 * size * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    elif name in ("merge", "split"):
        # both move until the blobs overlap (merge) or from overlap apart (split)
        u = s if name == "merge" else 1.0 - s
        obj = anchor + np.outer(-0.10 + 0.10 * u, d) * size
        hand = anchor + np.outer(0.40 - 0.38 * u, d) * size
    elif name == "static-hold":
        hand = anchor + 0.10 * d * size + rng.normal(0, 0.005 * size, size=(frames, 2))
    else:  # pragma: no cover
        raise ValueError(name)
    return obj, hand


def generate_clip(
    config: SynthConfig,
    verb: int,
    noun: int,
    rng: np.random.Generator,
    clip_id: str = "clip",
    anchor: tuple[float, float] | None = None,
) -> tuple[np.ndarray, ClipAnnotation]:
    """Render one clip ``(T, H, W, 3)`` in [0, 1] and its annotation.

    ``anchor`` pins the noun object's rest position (pixel x, y); otherwise it
    is drawn from the central region of the frame.
    """
    if not 0 <= verb < config.num_verbs:
        raise ValueError(f"verb {verb} out of range for {config.num_verbs} verbs")
    if not 0 <= noun < config.num_objects:
        raise ValueError(f"noun {noun} out of range for {config.num_objects} objects")
    t_len, h, w, r = config.frames, config.height, config.width, config.object_radius
    size = float(min(h, w))
    if 4 * r + 2 > size:
        raise ValueError(f"object radius {r} is too large for a {h}x{w} frame")

    lo = np.array([r + 1.0, r + 1.0])
    hi = np.array([w - r - 2.0, h - r - 2.0])
    if anchor is None:
        anchor_xy = rng.uniform([0.3 * w, 0.3 * h], [0.7 * w, 0.7 * h])
    else:
        anchor_xy = np.asarray(anchor, dtype=np.float64)
    # resample the motion direction until both tracks fit inside the frame
    for _ in range(64):
        obj_track, hand_track = verb_tracks(verb, t_len, anchor_xy, size, rng)
        if (obj_track >= lo).all() and (obj_track <= hi).all() and (hand_track >= lo).all() and (hand_track <= hi).all():
            break
    obj_track = np.clip(obj_track, lo, hi)
    hand_track = np.clip(hand_track, lo, hi)

    # (class, radius, track, visible-frames mask)
    blobs = []
    candidates = [c for c in range(1, config.num_objects) if c != noun]
    n_distract = min(int(rng.integers(0, 3)), len(candidates))
    if n_distract:
        for c in rng.choice(candidates, size=n_distract, replace=False):
            length = int(rng.integers(1, max(1, t_len // 2) + 1))
            start = int(rng.integers(0, t_len - length + 1))
            visible = np.zeros(t_len, dtype=bool)
            visible[start : start + length] = True
            p0 = rng.uniform(lo, hi)
            vel = rng.uniform(-0.02, 0.02, size=2) * size
            track = np.clip(p0 + np.outer(np.arange(t_len) - start, vel), lo, hi)
            blobs.append((int(c), 0.7 * r, track, visible))
    always = np.ones(t_len, dtype=bool)
    blobs.append((noun, float(r), obj_track, always))
    blobs.append((0, float(r), hand_track, always))

    frame_bg = _background(rng, h, w)
    clip = np.repeat(frame_bg[None], t_len, axis=0)
    presence = np.zeros((t_len, config.num_objects), dtype=np.int64)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for cls, radius, track, visible in blobs:
        _, colour, kind = PALETTE[cls]
        for t in np.flatnonzero(visible):
            mask = _shape_mask(kind, xx - track[t, 0], yy - track[t, 1], radius)
            if mask.any():
                clip[t][mask] = colour
                presence[t, cls] = 1

    if config.noise_level > 0:
        clip = np.clip(clip + rng.normal(0.0, config.noise_level, size=clip.shape), 0.0, 1.0)

    scores = presence.astype(np.float64)
    if config.detector_noise > 0:
        q = config.detector_noise
        scores = scores * (1.0 - q * rng.uniform(size=scores.shape))
        false_pos = (presence == 0) & (rng.uniform(size=scores.shape) < 0.5 * q)
        scores = np.where(false_pos, rng.uniform(0.0, q, size=scores.shape), scores)
        missed = (presence == 1) & (rng.uniform(size=scores.shape) < 0.25 * q)
        scores = np.where(missed, rng.uniform(0.0, 0.5, size=scores.shape), scores)
        scores = np.clip(scores, 0.0, 1.0)

    ann = ClipAnnotation(clip_id, int(verb), int(noun), presence, scores, noun_track=obj_track)
    return clip.astype(np.float32), ann


# ---------------------------------------------------------------- file formats


def write_clip(path: str | Path, clip: np.ndarray) -> None:
    clip = np.asarray(clip, dtype="<f4")
    if clip.ndim != 4 or clip.shape[-1] != 3:
        raise ValueError(f"clip must be (T, H, W, 3), got {clip.shape}")
    t, h, w, _ = clip.shape
    header = np.array([CLIP_MAGIC, CLIP_VERSION, t, h, w, 3, 0, 0], dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(clip.tobytes())


def read_clip(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 32:
        raise ManifestError(f"{path}: truncated clip header")
    header = np.frombuffer(raw[:32], dtype="<i4")
    if header[0] != CLIP_MAGIC or header[1] != CLIP_VERSION:
        raise ManifestError(f"{path}: not a clip file (magic {header[0]:#x}, version {header[1]})")
    t, h, w, c = (int(v) for v in header[2:6])
    data = np.frombuffer(raw[32:], dtype="<f4")
    if data.size != t * h * w * c:
        raise ManifestError(f"{path}: expected {t * h * w * c} values, found {data.size}")
    return data.reshape(t, h, w, c).astype(np.float32)


def write_grid(path: str | Path, grid: np.ndarray, integer: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(grid):
            writer.writerow([str(int(v)) if integer else repr(float(v)) for v in row])


def read_grid(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    return np.array([[float(v) for v in r] for r in rows], dtype=np.float64)


# ---------------------------------------------------------------- datasets


@dataclass
class DatasetSplits:
    train: list[ClipAnnotation]
    val: list[ClipAnnotation]
    test: list[ClipAnnotation]
    manifest: Path | None = None


def assign_splits(pairs: list[tuple[int, int]], seed: int, fractions=(0.70, 0.15, 0.15)) -> list[str]:
    """Split labels per clip: 70/15/15, with every (verb, noun) pair in train."""
    n = len(pairs)
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    n_train = n - n_val - n_test
    distinct = sorted(set(pairs))
    if n_val < 1 or n_test < 1 or n_train < len(distinct):
        raise ValueError(
            f"{n} clips cannot fill train/val/test ({n_train}/{n_val}/{n_test}) "
            f"with all {len(distinct)} verb-noun pairs in train"
        )
    rng = np.random.default_rng([seed, 7919])
    order = rng.permutation(n)
    labels = [""] * n
    seen = set()
    rest = []
    for i in order:
        if pairs[i] not in seen:
            seen.add(pairs[i])
            labels[i] = "train"
        else:
            rest.append(i)
    quota = [("train", n_train - len(seen)), ("val", n_val), ("test", n_test)]
    pos = 0
    for name, count in quota:
        for i in rest[pos : pos + count]:
            labels[i] = name
        pos += count
    return labels


def generate_dataset(config: SynthConfig, out_dir: str | Path) -> DatasetSplits:
    """Render a balanced dataset and write manifest, splits, metadata and clip files."""
    if config.clips_per_class < 3:
        raise ValueError(f"clips_per_class must be >= 3, got {config.clips_per_class}")
    pairs = [
        (v, n)
        for v in range(config.num_verbs)
        for n in range(config.num_objects)
        for _ in range(config.clips_per_class)
    ]
    return write_clip_set(config, pairs, out_dir, assign_splits(pairs, config.seed))


def write_clip_set(
    config: SynthConfig,
    pairs: list[tuple[int, int]],
    out_dir: str | Path,
    splits: list[str] | None = None,
) -> DatasetSplits:
    """Render one clip per ``(verb, noun)`` entry and write the dataset layout.

    Clip ``k`` draws from its own stream seeded by ``(config.seed, k)``.
    Without ``splits`` every clip goes to train.
    """
    splits = splits or ["train"] * len(pairs)
    out_dir = Path(out_dir)
    (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    annotations = []
    for k, (verb, noun) in enumerate(pairs):
        rng = np.random.default_rng([config.seed, k])
        clip_id = f"clip_{k:05d}"
        clip, ann = generate_clip(config, verb, noun, rng, clip_id)
        frames_rel = f"clips/{clip_id}.bin"
        write_clip(out_dir / frames_rel, clip)
        write_grid(out_dir / f"labels/{clip_id}_presence.csv", ann.presence, integer=True)
        write_grid(out_dir / f"labels/{clip_id}_scores.csv", ann.detector_scores)
        ann.frames_path = out_dir / frames_rel
        annotations.append(ann)

    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for ann in annotations:
            writer.writerow([
                ann.clip_id, ann.verb, ann.noun, f"clips/{ann.clip_id}.bin",
                f"labels/{ann.clip_id}_presence.csv", f"labels/{ann.clip_id}_scores.csv",
            ])
    with open(out_dir / "splits.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clip_id", "split"])
        for ann, split in zip(annotations, splits):
            writer.writerow([ann.clip_id, split])
    meta = {
        "num_objects": config.num_objects,
        "num_verbs": config.num_verbs,
        "object_names": CLASS_NAMES[: config.num_objects],
        "verb_names": VERBS[: config.num_verbs],
        "synth_config": asdict(config),
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    by_split = {"train": [], "val": [], "test": []}
    for ann, split in zip(annotations, splits):
        by_split[split].append(ann)
    log.info("wrote %d clips to %s", len(annotations), out_dir)
    return DatasetSplits(by_split["train"], by_split["val"], by_split["test"], manifest)


def read_meta(manifest: str | Path) -> dict:
    path = Path(manifest).parent / "meta.json"
    return json.loads(path.read_text()) if path.exists() else {}


def load_annotations(
    manifest: str | Path, num_objects: int | None = None, num_verbs: int | None = None
) -> list[ClipAnnotation]:
    """Parse and validate a manifest; clip pixels stay on disk until requested.

    Class counts default to ``meta.json`` next to the manifest, then to the
    width of each presence grid.
    """
    manifest = Path(manifest)
    if not manifest.exists():
        raise ManifestError(f"manifest not found: {manifest}")
    meta = read_meta(manifest)
    num_objects = num_objects or meta.get("num_objects")
    num_verbs = num_verbs or meta.get("num_verbs")
    root = manifest.parent
    out = []
    with open(manifest, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ManifestError(f"{manifest}:1: expected header {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(f"{manifest}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            clip_id, verb_s, noun_s, frames, presence_p, scores_p = row
            try:
                verb, noun = int(verb_s), int(noun_s)
            except ValueError:
                raise ManifestError(f"{manifest}:{lineno}: verb/noun must be integers") from None
            try:
                presence = read_grid(root / presence_p)
            except (OSError, ValueError) as exc:
                raise ManifestError(f"{manifest}:{lineno}: cannot read presence grid ({exc})") from None
            if presence.ndim != 2 or not np.isin(presence, (0, 1)).all():
                raise ManifestError(f"{manifest}:{lineno}: presence for {clip_id} must be a 0/1 grid")
            c_o = num_objects or presence.shape[1]
            if presence.shape[1] != c_o:
                raise ManifestError(f"{manifest}:{lineno}: presence for {clip_id} has {presence.shape[1]} columns, expected {c_o}")
            if not 0 <= noun < c_o:
                raise ManifestError(f"{manifest}:{lineno}: clip {clip_id} noun {noun} out of range [0, {c_o})")
            if verb < 0 or (num_verbs is not None and verb >= num_verbs):
                raise ManifestError(f"{manifest}:{lineno}: clip {clip_id} verb {verb} out of range")
            scores = None
            if scores_p:
                path = root / scores_p
                if path.exists():
                    scores = read_grid(path)
                    if scores.shape != presence.shape or scores.min() < 0 or scores.max() > 1:
                        raise ManifestError(f"{manifest}:{lineno}: detector scores for {clip_id} malformed")
                else:
                    log.warning("detector scores for %s missing at %s", clip_id, path)
            out.append(ClipAnnotation(clip_id, verb, noun, presence.astype(np.int64), scores, root / frames))
    return out


def load_splits(manifest: str | Path) -> dict[str, list[ClipAnnotation]]:
    """Annotations grouped by the ``splits.csv`` sidecar of a manifest."""
    manifest = Path(manifest)
    anns = load_annotations(manifest)
    path = manifest.parent / "splits.csv"
    if not path.exists():
        raise ManifestError(f"no splits.csv next to {manifest}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assignment = {r[0]: r[1] for r in rows[1:] if r}
    out = {"train": [], "val": [], "test": []}
    for ann in anns:
        split = assignment.get(ann.clip_id)
        if split not in out:
            raise ManifestError(f"clip {ann.clip_id} has no valid split in {path}")
        out[split].append(ann)
    return out


def dataset_hash(manifest: str | Path) -> str:
    """SHA-256 over the manifest, its sidecars and every referenced file."""
    manifest = Path(manifest)
    h = hashlib.sha256(manifest.read_bytes())
    for extra in ("splits.csv", "meta.json"):
        p = manifest.parent / extra
        if p.exists():
            h.update(p.read_bytes())
    with open(manifest, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    for row in rows:
        for rel in row[3:]:
            if rel and (manifest.parent / rel).exists():
                h.update((manifest.parent / rel).read_bytes())
    return h.hexdigest()
