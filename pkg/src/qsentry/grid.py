"""Attack x rate grid with repeats, per-cell artifacts, and the two summary tables."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import artifacts
from .experiment import CellResult, ExperimentConfig, run_cell

log = logging.getLogger(__name__)

ATTACK_TITLES = {
    "patch": "Patch Trigger",
    "blend": "Blend Trigger",
    "sinusoidal": "Sinusoidal Trigger",
    "qtrojan": "QTrojan Circuit",
}
CATEGORIES = ("source", "target", "backdoor")
# bump when a code change alters stored metrics, so older cells are recomputed
CACHE_FORMAT = 2


def cell_dir(root, attack: Optional[str], rate: float, repeat: int) -> Path:
    name = "clean" if attack is None else f"{attack}_{rate:g}"
    return Path(root) / "cells" / name / f"r{repeat}"


def write_cell(out: Path, cfg: ExperimentConfig, result: CellResult) -> dict:
    """Write every artifact of one cell and return its metrics."""
    h = cfg.hash()
    out.mkdir(parents=True, exist_ok=True)
    trained = result.trained
    artifacts.save_params(out / "model.bin", trained.params, trained.spec, h, cfg.model_hash())
    artifacts.write_training_log(out / "train_log.csv", trained.history, h)
    (out / "measurements.csv").write_text(result.matrix.to_csv(h))
    artifacts.write_json(out / "report.json", {
        "config_hash": h,
        "qsentry": result.qsentry.to_dict(),
        "raw": result.raw.to_dict(),
    })
    metrics = {**result.metrics(), "cache_format": CACHE_FORMAT}
    artifacts.write_json(out / "metrics.json", metrics)
    artifacts.write_json(out / "config.json", cfg.to_dict())
    return metrics


def cached_metrics(out: Path, cfg: ExperimentConfig) -> Optional[dict]:
    path = out / "metrics.json"
    if not path.exists():
        return None
    metrics = artifacts.read_json(path)
    if metrics.get("config_hash") != cfg.hash() or metrics.get("cache_format") != CACHE_FORMAT:
        return None
    return metrics


def run_one(cfg: ExperimentConfig, out: Path, reuse: bool = True) -> dict:
    if reuse:
        cached = cached_metrics(out, cfg)
        if cached is not None:
            return cached
    return write_cell(out, cfg, run_cell(cfg))


@dataclass
class GridResult:
    config: ExperimentConfig
    repeats: int
    clean: list = field(default_factory=list)
    cells: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    def runs(self, attack: str, rate: float) -> list:
        return self.cells.get((attack, rate), [])


def run_grid(cfg: ExperimentConfig, out_dir, repeats: Optional[int] = None, reuse: bool = True,
             progress: Callable[[str], None] = log.info) -> GridResult:
    """Clean baseline plus every attack x rate cell, ``repeats`` seeds each.

    A failing cell is recorded and the grid moves on.  Cells whose stored
    metrics carry the current config hash are reused unless ``reuse`` is off.
    """
    repeats = cfg.repeats if repeats is None else repeats
    out_dir = Path(out_dir)
    grid = GridResult(cfg, repeats)
    plan = [(None, 0.0)] + [(a, r) for a in cfg.attacks for r in cfg.rates]
    for attack, rate in plan:
        for rep in range(repeats):
            cell_cfg = cfg.cell(attack, rate).repeat(rep)
            label = f"{attack or 'clean'} rate={rate:g} repeat={rep}"
            try:
                metrics = run_one(cell_cfg, cell_dir(out_dir, attack, rate, rep), reuse)
            except Exception as exc:  # noqa: BLE001 - recorded per cell, grid continues
                grid.failures[(attack, rate, rep)] = f"{type(exc).__name__}: {exc}"
                progress(f"{label}: FAILED {exc}")
                continue
            if attack is None:
                grid.clean.append(metrics)
            else:
                grid.cells.setdefault((attack, rate), []).append(metrics)
            progress(f"{label}: {summary_line(metrics)}")
    write_tables(grid, out_dir)
    return grid


def summary_line(m: dict) -> str:
    parts = [f"CA={m['ca']:.4f}"]
    if m.get("asr") is not None:
        parts.append(f"ASR={m['asr']:.4f}")
    for name in ("qsentry", "raw"):
        d = m[name]
        f1 = "absent" if d["f1"] is None else f"{d['f1']:.4f}"
        parts.append(f"{name}: DA={d['da']:.4f} F1={f1} RCS={d['rcs']:.4f}")
    return " ".join(parts)


# ---------------------------------------------------------------------------
# tables


def _stats(values: list) -> tuple:
    vals = [v for v in values if v is not None]
    if not vals:
        return (math.nan, math.nan)
    arr = np.array(vals, dtype=np.float64)
    return (float(arr.mean()), float(arr.std()))


def table1_rows(grid: GridResult) -> list:
    rows = []
    for attack in grid.config.attacks:
        for rate in grid.config.rates:
            runs = grid.runs(attack, rate)
            if not runs:
                continue
            row = {"attack": attack, "rate": rate, "repeats": len(runs)}
            for key in ("ca", "asr"):
                row[f"{key}_mean"], row[f"{key}_std"] = _stats([r[key] for r in runs])
            for pipe in ("qsentry", "raw"):
                for key in ("da", "f1"):
                    row[f"{pipe}_{key}_mean"], row[f"{pipe}_{key}_std"] = _stats([r[pipe][key] for r in runs])
            rows.append(row)
    return rows


def table2_rows(grid: GridResult) -> list:
    rows = []
    for rate in grid.config.rates:
        for cat in CATEGORIES:
            for attack in grid.config.attacks:
                runs = grid.runs(attack, rate)
                if not runs:
                    continue
                act = float(np.mean([r["composition"]["act"][cat] for r in runs]))
                pred = float(np.mean([r["composition"]["pred"][cat] for r in runs]))
                rows.append({"rate": rate, "category": cat, "attack": attack, "act": act, "pred": pred, "delta": pred - act})
    return rows


def _pct(mean: float, std: float) -> str:
    if math.isnan(mean):
        return "absent"
    return f"{100 * mean:.1f}%" + (f"±{100 * std:.1f}" if std > 0 else "")


def table1_text(grid: GridResult) -> str:
    rows = {(r["attack"], r["rate"]): r for r in table1_rows(grid)}
    rates = grid.config.rates
    head = ["Attack Mode"] + [f"{100 * r:g}% QSentry DA / F1" for r in rates] + [f"{100 * r:g}% Raw DA / F1" for r in rates]
    lines = [" | ".join(head)]
    for attack in grid.config.attacks:
        cells = [ATTACK_TITLES.get(attack, attack)]
        for pipe in ("qsentry", "raw"):
            for rate in rates:
                r = rows.get((attack, rate))
                if r is None:
                    cells.append("failed")
                    continue
                cells.append(_pct(r[f"{pipe}_da_mean"], r[f"{pipe}_da_std"]) + " / " + _pct(r[f"{pipe}_f1_mean"], r[f"{pipe}_f1_std"]))
        lines.append(" | ".join(cells))
    return "\n".join(lines) + "\n"


def table2_text(grid: GridResult) -> str:
    rows = {(r["rate"], r["category"], r["attack"]): r for r in table2_rows(grid)}
    attacks = grid.config.attacks
    head = ["Poison Rate", "Category"] + [f"{ATTACK_TITLES.get(a, a)} Act/Pred/Delta" for a in attacks]
    lines = [" | ".join(head)]
    titles = {"source": f"Source {grid.config.source_digit}", "target": f"Target {grid.config.target_digit}", "backdoor": "Backdoor"}
    for rate in grid.config.rates:
        for cat in CATEGORIES:
            cells = [f"{100 * rate:g}%", titles[cat]]
            for a in attacks:
                r = rows.get((rate, cat, a))
                cells.append("failed" if r is None else f"{r['act']:g} / {r['pred']:g} / {r['delta']:+g}")
            lines.append(" | ".join(cells))
    return "\n".join(lines) + "\n"


def write_tables(grid: GridResult, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h = grid.config.hash()
    t1 = table1_rows(grid)
    t2 = table2_rows(grid)
    if t1:
        keys = list(t1[0])
        (out_dir / "table1.csv").write_text(artifacts.csv_text(["config_hash"] + keys, [[h] + [r[k] for k in keys] for r in t1]))
    if t2:
        keys = list(t2[0])
        (out_dir / "table2.csv").write_text(artifacts.csv_text(["config_hash"] + keys, [[h] + [r[k] for k in keys] for r in t2]))
    (out_dir / "table1.txt").write_text(f"# config_hash={h}\n" + table1_text(grid))
    (out_dir / "table2.txt").write_text(f"# config_hash={h}\n" + table2_text(grid))
    artifacts.write_json(out_dir / "summary.json", {
        "config_hash": h,
        "repeats": grid.repeats,
        "clean": grid.clean,
        "table1": t1,
        "table2": t2,
        "failures": {f"{a or 'clean'}_{r:g}_r{k}": msg for (a, r, k), msg in grid.failures.items()},
    })
