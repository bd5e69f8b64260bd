"""Command line entry point: ``thorn <subcommand> [flags]``.

Exit status is 0 on success, 2 for usage or configuration errors and 1 for
any other failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from thorn.config import ConfigError, coerce_fields, load_config, read_flat_toml

log = logging.getLogger("thorn")


def _synth_config(path: str | None, seed: int | None):
    from thorn.synthdata import SynthConfig

    data = read_flat_toml(path) if path else {}
    env_seed = os.environ.get("THORN_SEED")
    if env_seed is not None:
        try:
            data["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"THORN_SEED must be an integer, got {env_seed!r}") from exc
    if seed is not None:
        data["seed"] = seed
    try:
        return SynthConfig(**coerce_fields(SynthConfig, data))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _class_names(manifest: str | Path, count: int) -> list[str]:
    from thorn.synthdata import read_meta

    names = read_meta(manifest).get("object_names")
    if isinstance(names, list) and len(names) == count:
        return [str(n) for n in names]
    return [f"class_{i}" for i in range(count)]


def _pick_clips(manifest: str, clip_ids: list[str] | None, split: str, limit: int):
    from thorn.synthdata import load_annotations, load_splits

    if clip_ids:
        by_id = {a.clip_id: a for a in load_annotations(manifest)}
        missing = [c for c in clip_ids if c not in by_id]
        if missing:
            raise ConfigError(f"unknown clip ids: {', '.join(missing)}")
        return [by_id[c] for c in clip_ids]
    return load_splits(manifest)[split][:limit]


# ---------------------------------------------------------------- subcommands


def cmd_generate(args) -> int:
    from thorn.synthdata import dataset_hash, generate_dataset

    cfg = _synth_config(args.config, args.seed)
    splits = generate_dataset(cfg, args.out)
    print(f"wrote {splits.manifest} ({len(splits.train)}/{len(splits.val)}/{len(splits.test)} clips)")
    print(f"manifest hash {dataset_hash(splits.manifest)}")
    return 0


def cmd_train(args) -> int:
    from thorn.harness import read_rows, train
    from thorn.plotting import plot_loss_curves

    config = load_config(args.config, seed=args.seed)
    result = train(config, args.data, args.out)
    out = Path(args.out)
    if (out / "metrics.csv").exists():
        plot_loss_curves(read_rows(out / "metrics.csv"), out / "loss_curves.png")
    last = result.history[-1] if result.history else {}
    print(f"trained {result.steps} steps; best checkpoint {result.best_checkpoint}")
    for key in ("batch_loss_total", "val_loss_total", "val_verb_top1", "val_noun_top1", "val_action_top1"):
        if key in last:
            print(f"  {key} = {last[key]:.4f}")
    return 0


def cmd_eval(args) -> int:
    from thorn.harness import evaluate
    from thorn.plotting import plot_class_deltas

    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    report = evaluate(args.checkpoint, args.data, args.split, args.fusion, out)
    for key, value in report.metrics.items():
        print(f"{key},{value!r}")
    if args.baseline:
        from thorn.harness import per_class_deltas, write_rows

        base = evaluate(args.baseline, args.data, args.split, False, None)
        deltas = per_class_deltas(report, base)
        write_rows(out / f"eval_{args.split}_deltas.csv", deltas)
        for kind in ("verb", "noun"):
            plot_class_deltas(deltas, out / f"eval_{args.split}_{kind}_deltas.png", kind)
    return 0


def cmd_ablate(args) -> int:
    from thorn.ablation import ablate
    from thorn.plotting import plot_ablation, plot_class_deltas
    from thorn.harness import read_rows

    config = load_config(args.config, seed=args.seed)
    seeds = args.seeds if args.seeds else [config.seed]
    result = ablate(args.data, config, args.out, seeds=seeds, settings=args.settings)
    out = Path(args.out)
    plot_ablation(result.grid, out / "ablation.png")
    for path in sorted(out.glob("deltas_*.csv")):
        rows = read_rows(path)
        for kind in ("verb", "noun"):
            plot_class_deltas(rows, path.with_name(f"{path.stem}_{kind}.png"), kind)
    cols = ["setting", "verb_top1", "verb_top5", "noun_top1", "noun_top5", "action_top1", "action_top5"]
    print(",".join(cols))
    for row in result.grid:
        print(",".join([row["setting"]] + [f"{row[c]:.2f}" for c in cols[1:]]))
    return 0


def cmd_cam(args) -> int:
    from thorn.cam import class_activation_maps, write_cam_csvs
    from thorn.harness import load_model
    from thorn.plotting import plot_cam

    model, config, _ = load_model(args.checkpoint)
    names = _class_names(args.data, config.num_objects)
    out = Path(args.out)
    for ann in _pick_clips(args.data, args.clip_id, args.split, args.limit):
        clip = ann.load_clip()
        result = class_activation_maps(model, clip, class_names=names)
        classes = [ann.noun, 0] if not args.all_classes else None
        target = out / ann.clip_id
        write_cam_csvs(result, target, classes)
        plot_cam(clip, result.maps[ann.noun], target / "cam_noun.png", f"{ann.clip_id}: {names[ann.noun]}")
        flag = " (degenerate)" if result.degenerate else ""
        print(f"{ann.clip_id}: maps written to {target}{flag}")
    return 0


def cmd_export_adjacency(args) -> int:
    from thorn.harness import ClipStore, load_model
    from thorn.orr import export_adjacency
    from thorn.plotting import plot_adjacency

    model, config, _ = load_model(args.checkpoint)
    if config.architecture != "thorn":
        raise ConfigError("the baseline model has no adjacency to export")
    names = _class_names(args.data, config.num_objects)
    store = ClipStore()
    out = Path(args.out)
    for ann in _pick_clips(args.data, args.clip_id, args.split, args.limit):
        with torch.no_grad():
            adj = model(store.get(ann).unsqueeze(0)).adjacency[0]
        target = out / ann.clip_id
        export_adjacency(adj, target, names)
        plot_adjacency(adj.numpy(), target / "adjacency.png", names, ann.clip_id)
        print(f"{ann.clip_id}: {adj.shape[0] * adj.shape[1]} adjacency grids written to {target}")
    # the learned base graphs do not depend on the clip
    base = np.stack([np.stack([b.base_adjacency(h).detach().numpy() for h in range(b.heads)]) for b in model.orr.blocks])
    export_adjacency(base, out / "base", names, prefix="base")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="thorn", description="Train, evaluate and inspect human-object relation models.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--config", help="flat TOML file with generator settings")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="manifest.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--fusion", action="store_true", help="also report detector-fused noun metrics")
    p.add_argument("--baseline", help="checkpoint to compute per-class deltas against")
    p.add_argument("--out", help="report directory (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="baseline plus three relation settings on shared splits")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int, nargs="+", help="one run per seed (default: the config seed)")
    p.add_argument("--settings", nargs="+", help="subset of rows to run (default: all four)")
    p.set_defaults(func=cmd_ablate)

    for name, func, helptext in (
        ("cam", cmd_cam, "per-class activation maps for clips"),
        ("export-adjacency", cmd_export_adjacency, "per-video adjacency grids for clips"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--clip-id", nargs="+", help="clips to process (default: the first --limit clips of --split)")
        p.add_argument("--split", default="test", choices=["train", "val", "test"])
        p.add_argument("--limit", type=int, default=1)
        if name == "cam":
            p.add_argument("--all-classes", action="store_true", help="write maps for every class, not just noun and hand")
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"thorn {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"thorn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
