"""Command-line entry point. Each subcommand runs the pipeline up to its stage
(reusing up-to-date stages) and prints a tab-separated summary."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, PipelineConfig
from .model import ContractViolation
from .normalize import STYLES
from .pipeline import Pipeline, StageError
from .synth import SyntheticSpec
from .trace import TraceError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CONTRACT = 0, 2, 3, 4

COMMANDS = {
    "synth": "synth",
    "ingest": "ingest",
    "normalize": "normalize",
    "stats": "corpus",
    "zipf": "corpus",
    "train-tokenizer": "tokenizer",
    "train-model": "model",
    "classify": "classify",
    "evaluate": "evaluate",
    "run": "evaluate",
}

HELP = {
    "synth": "generate a synthetic trace corpus",
    "ingest": "parse traces and count instructions",
    "normalize": "segment and normalize functions",
    "stats": "build the training corpus and report its statistics",
    "zipf": "rank-frequency analysis with a power-law fit",
    "train-tokenizer": "train the subword tokenizer",
    "train-model": "train the function classifier",
    "classify": "classify validation and test functions",
    "evaluate": "fit the sample boundary and score the test samples",
    "run": "full pipeline",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pulse", description="Trace-based ransomware detection pipeline.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="pipeline config (JSON); default is a synthetic desk-scale run")
    common.add_argument("--seed", type=int, help="global seed, overrides the config")
    common.add_argument("--mode", choices=STYLES, help="instruction normalization style")
    common.add_argument("--manifest", type=Path, help="corpus manifest, overrides the config")
    common.add_argument("--output-dir", type=Path, help="artifact directory, overrides the config")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    return parser


def load_config(args) -> PipelineConfig:
    if args.config is not None:
        cfg = PipelineConfig.load(args.config)
        base = args.config.resolve().parent
        if cfg.manifest and not Path(cfg.manifest).is_absolute():
            cfg = cfg.with_overrides(manifest=str(base / cfg.manifest))
    else:
        cfg = PipelineConfig(synthetic=SyntheticSpec())
    over = {"seed": args.seed, "style": args.mode,
            "output_dir": None if args.output_dir is None else str(args.output_dir)}
    if args.manifest is not None:
        over.update(manifest=str(args.manifest), synthetic=None)
    try:
        return PipelineConfig.from_dict({**cfg.to_dict(), **{k: v for k, v in over.items() if v is not None},
                                         **({"synthetic": None} if args.manifest is not None else {})})
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _flat(prefix: str, obj, out: list[tuple[str, str]]) -> None:
    if isinstance(obj, dict):
        for k in sorted(obj):
            _flat(f"{prefix}.{k}" if prefix else k, obj[k], out)
    elif isinstance(obj, list) and obj and isinstance(obj[0], (int, float)) and not isinstance(obj[0], bool):
        out.append((prefix, ",".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in obj)))
    elif isinstance(obj, list):
        out.append((prefix, ",".join(str(v) for v in obj)))
    elif isinstance(obj, float):
        out.append((prefix, f"{obj:.6g}"))
    else:
        out.append((prefix, str(obj)))


def _load(p: Pipeline, *parts):
    return json.loads(p.path(*parts).read_text(encoding="utf-8"))


def summary(command: str, p: Pipeline) -> dict:
    if command == "synth":
        m = p.load_manifest()
        return {"samples": len(m.entries), "manifest": str(p.manifest_path())}
    if command == "ingest":
        return _load(p, "ingest", "summary.json")
    if command == "normalize":
        counts = _load(p, "normalize", "counts.json")
        return {"samples": len(counts), "segmented": sum(c["segmented"] for c in counts.values()),
                "kept": sum(c["kept"] for c in counts.values())}
    if command == "stats":
        return {**_load(p, "corpus", "stats.json"), **_load(p, "corpus", "filtering.json")}
    if command == "zipf":
        out = {"csv": str(p.path("corpus", "zipf.csv"))}
        if p.path("corpus", "zipf_fit.json").exists():
            out.update(_load(p, "corpus", "zipf_fit.json"))
            out["figure"] = str(p.path("corpus", "zipf.png"))
        return out
    if command == "train-tokenizer":
        return _load(p, "tokenizer", "token_stats.json")
    if command == "train-model":
        r = _load(p, "model", "training_report.json")
        return {k: r[k] for k in ("n_train", "n_validation", "steps", "train_loss", "val_loss", "val_accuracy")}
    if command == "classify":
        rows = [json.loads(line) for line in
                p.path("classify", "sample_features.jsonl").read_text(encoding="utf-8").splitlines()]
        return {split: {"samples": sum(1 for r in rows if r["split"] == split),
                        "functions": sum(r["n_functions"] for r in rows if r["split"] == split),
                        "removed_as_seen_in_training": sum(r["n_removed"] for r in rows if r["split"] == split)}
                for split in ("validation", "test")}
    m = p.metrics()["test"]
    out = {k: m[k] for k in ("tp", "fp", "fn", "tn", "accuracy", "precision", "recall", "f1")}
    out["indeterminate"] = m["indeterminate"]
    out["leakage_audit"] = "passed" if _load(p, "evaluate", "leakage_audit.json")["passed"] else "failed"
    out["verdicts"] = str(p.path("evaluate", "verdicts.jsonl"))
    out["figure"] = str(p.path("evaluate", "bubble_test.png"))
    return out


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, ContractViolation):
        return EXIT_CONTRACT
    return EXIT_DATA


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "synth" and cfg.synthetic is None:
        print("config error: synth needs a synthetic corpus spec", file=sys.stderr)
        return EXIT_CONFIG
    p = Pipeline(cfg)
    try:
        p.run(COMMANDS[args.command])
        rows: list[tuple[str, str]] = []
        _flat("", summary(args.command, p), rows)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc.cause)
    except (TraceError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    for key, value in rows:
        print(f"{key}\t{value}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
