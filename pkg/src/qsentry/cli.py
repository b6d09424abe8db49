"""Command-line entry point: train, detect, grid, dump-triggered, report."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

from . import artifacts, attacks, experiment
from .detector import DetectionReport, collect_measurements, detect, detect_raw_baseline
from .errors import ConfigError, QSentryError
from .experiment import ExperimentConfig, TrainedModel
from .grid import run_grid, table1_text, table2_text

log = logging.getLogger("qsentry")


def _seed_override(text: str) -> tuple:
    stream, sep, value = text.partition("=")
    if not sep or stream not in experiment.SEED_STREAMS:
        raise argparse.ArgumentTypeError(f"expected <stream>=<u64> with stream in {experiment.SEED_STREAMS}, got {text!r}")
    try:
        seed = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {value!r}") from None
    if not 0 <= seed < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return stream, seed


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qsentry", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch and per-cell progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model: bool = False):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", help="output directory (default: out_dir from the config)")
        p.add_argument("--seed-override", action="append", default=[], type=_seed_override, metavar="STREAM=U64",
                       help="replace one seed stream (data, init, attack, detector); repeatable")
        if model:
            p.add_argument("--model", required=True, help="params file written by `train`")

    common(sub.add_parser("train", help="train a clean or poisoned classifier"))
    common(sub.add_parser("detect", help="run measurement clustering and the raw-pixel baseline"), model=True)
    g = sub.add_parser("grid", help="every attack x rate cell plus the clean baseline")
    common(g)
    g.add_argument("--repeats", type=int, help="seeds per cell (default: repeats from the config, 3)")
    g.add_argument("--no-reuse", action="store_true", help="recompute cells even when stored metrics match")
    d = sub.add_parser("dump-triggered", help="write triggered samples as PGM images")
    common(d)
    d.add_argument("--count", type=int, default=4, help="samples per attack")
    r = sub.add_parser("report", help="print the console summary of a stored detection report")
    r.add_argument("--report", required=True, help="report.json written by `detect`")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    for stream, value in args.seed_override:
        cfg = cfg.with_seed(stream, value)
    return cfg


def out_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out) if args.out else Path(cfg.out_dir)


def console_summary(report: dict) -> str:
    """Console text for a stored report; `detect` prints exactly this."""
    lines = [f"config_hash={report['config_hash']}"]
    for name in ("qsentry", "raw"):
        lines.append(DetectionReport.from_dict(report[name]).summary())
    return "\n".join(lines)


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = out_dir(args, cfg)
    dataset = experiment.prepare_data(cfg)
    trained = experiment.train_model(cfg, dataset)
    scores = experiment.attack_scores(cfg, dataset, trained)
    h = cfg.hash()
    out.mkdir(parents=True, exist_ok=True)
    artifacts.save_params(out / "model.bin", trained.params, trained.spec, h, cfg.model_hash())
    artifacts.write_training_log(out / "train_log.csv", trained.history, h)
    artifacts.write_json(out / "metrics.json", {"config_hash": h, **scores})
    line = f"config_hash={h} CA={scores['ca']:.4f}"
    if "asr" in scores:
        line += f" ASR={scores['asr']:.4f}"
    print(line)
    return 0


def cmd_detect(args) -> int:
    cfg = load_config(args)
    out = out_dir(args, cfg)
    spec, params, _ = artifacts.load_params(args.model, cfg.circuit_spec(), cfg.model_hash())
    if (cfg.attack == "qtrojan") != spec.has_trojan:
        raise ConfigError("config attack and model trojan layer disagree")
    dataset = experiment.prepare_data(cfg)
    trigger = experiment.resolve_trigger(cfg, dataset)
    test = experiment.detection_test_set(cfg, dataset, trigger)
    matrix = collect_measurements(spec, params, test)
    opts = cfg.detector_options()
    q = detect(spec, params, test, opts, matrix=matrix)
    r = detect_raw_baseline(test, opts)
    h = cfg.hash()
    out.mkdir(parents=True, exist_ok=True)
    (out / "measurements.csv").write_text(matrix.to_csv(h))
    report = {"config_hash": h, "qsentry": q.to_dict(), "raw": r.to_dict()}
    artifacts.write_json(out / "report.json", report)
    scores = experiment.attack_scores(cfg, dataset, TrainedModel(spec, params, [], trigger))
    artifacts.write_json(out / "metrics.json", {
        "config_hash": h,
        **scores,
        "composition": experiment.cluster_composition(q, test),
        "qsentry": {"da": q.da, "f1": q.f1, "sc": q.sc, "rcs": q.rcs, "k": q.k, "flagged": len(q.flagged_indices)},
        "raw": {"da": r.da, "f1": r.f1, "sc": r.sc, "rcs": r.rcs, "k": r.k, "flagged": len(r.flagged_indices)},
    })
    print(console_summary(report))
    return 0


def cmd_grid(args) -> int:
    cfg = load_config(args)
    out = out_dir(args, cfg)
    grid = run_grid(cfg, out, args.repeats, reuse=not args.no_reuse, progress=print)
    print(table1_text(grid), end="")
    print(table2_text(grid), end="")
    for (attack, rate, rep), msg in grid.failures.items():
        print(f"failed: {attack or 'clean'} rate={rate:g} repeat={rep}: {msg}", file=sys.stderr)
    return 1 if grid.failures else 0


def cmd_dump_triggered(args) -> int:
    cfg = load_config(args)
    out = out_dir(args, cfg)
    dataset = experiment.prepare_data(cfg)
    kinds = [cfg.attack] if cfg.attack else [a for a in cfg.attacks if a != "qtrojan"]
    source = [s for s in dataset.test if s.true_label == 0][: args.count]
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, s in enumerate(source):
        name = f"clean_{i}.pgm"
        (out / name).write_bytes(attacks.to_pgm(s.features))
        written.append(name)
    for kind in kinds:
        if kind == "qtrojan":
            continue  # the trigger lives in the circuit, the pixels are unchanged
        trigger = experiment.resolve_trigger(cfg.cell(kind, cfg.rates[0]), dataset)
        for i, s in enumerate(source):
            name = f"{kind}_{i}.pgm"
            (out / name).write_bytes(attacks.to_pgm(attacks.apply_trigger(s.features, trigger)))
            written.append(name)
    artifacts.write_json(out / "triggered.json", {"config_hash": cfg.hash(), "files": written})
    print(f"wrote {len(written)} images to {out}")
    return 0


def cmd_report(args) -> int:
    print(console_summary(artifacts.read_json(args.report)))
    return 0


COMMANDS = {
    "train": cmd_train,
    "detect": cmd_detect,
    "grid": cmd_grid,
    "dump-triggered": cmd_dump_triggered,
    "report": cmd_report,
}


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (QSentryError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
