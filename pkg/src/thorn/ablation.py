"""Four-row ablation grid: encoder-only baseline and three relation-model settings."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from thorn.config import ExperimentConfig
from thorn.harness import (
    MetricsReport,
    evaluate_model,
    load_model,
    per_class_deltas,
    read_rows,
    train,
    write_report,
    write_rows,
)
from thorn.synthdata import load_splits

log = logging.getLogger(__name__)

GRID_METRICS = ["verb_top1", "verb_top5", "noun_top1", "noun_top5", "action_top1", "action_top5"]

# (row name, config overrides)
SETTINGS = [
    ("baseline", {"architecture": "baseline"}),
    ("temporal+nodes", {"architecture": "thorn", "node_mode": "temporal", "verb_head": "nodes"}),
    ("temporal+adjacency", {"architecture": "thorn", "node_mode": "temporal", "verb_head": "adjacency"}),
    ("spatio_temporal+adjacency", {"architecture": "thorn", "node_mode": "spatio_temporal", "verb_head": "adjacency"}),
]


@dataclass
class AblationResult:
    grid: list[dict]  # one row per setting, metrics averaged over seeds
    runs: list[dict] = field(default_factory=list)  # one row per (setting, seed)
    reports: dict[tuple[str, int], MetricsReport] = field(default_factory=dict)

    def row(self, setting: str) -> dict:
        for r in self.grid:
            if r["setting"] == setting:
                return r
        raise KeyError(setting)


def ablate(
    manifest: str | Path,
    config: ExperimentConfig,
    out_dir: str | Path,
    seeds: Sequence[int] | None = None,
    settings: Sequence[str] | None = None,
    split: str = "test",
) -> AblationResult:
    """Train and evaluate every setting on identical splits and seeds.

    Writes ``ablation.csv`` (seed-averaged grid), ``ablation_runs.csv`` and,
    per setting, the run directory plus ``deltas_<setting>.csv`` against the
    baseline when it was run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = list(seeds) if seeds is not None else [config.seed]
    chosen = [s for s in SETTINGS if settings is None or s[0] in settings]
    if not chosen:
        raise ValueError(f"no known settings among {settings}; choose from {[s[0] for s in SETTINGS]}")
    eval_set = load_splits(manifest)[split]

    result = AblationResult(grid=[])
    for name, overrides in chosen:
        for seed in seeds:
            cfg = config.replace(seed=seed, **overrides)
            run_dir = out_dir / name / f"seed{seed}"
            log.info("ablation: %s seed %d", name, seed)
            trained = train(cfg, manifest, run_dir)
            if trained.best_checkpoint is not None:
                model = load_model(trained.best_checkpoint)[0]
            else:
                model = trained.model
            report = evaluate_model(model, eval_set, cfg, fusion=False)
            write_report(report, run_dir, f"eval_{split}")
            result.reports[(name, seed)] = report
            result.runs.append({"setting": name, "seed": seed, **{k: report.metrics[k] for k in GRID_METRICS}})
        rows = [r for r in result.runs if r["setting"] == name]
        result.grid.append({"setting": name, **{k: float(np.mean([r[k] for r in rows])) for k in GRID_METRICS}})

    write_grid(out_dir / "ablation.csv", result.grid)
    write_rows(out_dir / "ablation_runs.csv", result.runs, ["setting", "seed", *GRID_METRICS])
    if any(name == "baseline" for name, _ in chosen):
        for name, _ in chosen:
            if name == "baseline":
                continue
            deltas = []
            for seed in seeds:
                for row in per_class_deltas(result.reports[(name, seed)], result.reports[("baseline", seed)]):
                    deltas.append({"seed": seed, **row})
            write_rows(out_dir / f"deltas_{name}.csv", deltas, ["seed", "kind", "class", "accuracy", "baseline", "delta"])
    return result


def write_grid(path: str | Path, grid: Sequence[dict]) -> Path:
    return write_rows(path, grid, ["setting", *GRID_METRICS])


def read_grid(path: str | Path) -> list[dict]:
    rows = read_rows(path)
    return [{"setting": r["setting"], **{k: float(r[k]) for k in GRID_METRICS}} for r in rows]
