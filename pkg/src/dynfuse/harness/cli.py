"""Command-line entry point: ``dynfuse <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 run failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from ..checkpoint import load_checkpoint, save_checkpoint
from ..data import HARD, SyntheticSpec, export_csv, generate, load_dataset, save_dataset
from ..metrics import records_to_csv, records_to_json
from ..trainer import TrainConfig, evaluate, predict
from .config import ExperimentConfig, config_from_dict
from .runner import (
    reference_cost,
    robustness_summary,
    rows_to_dicts,
    run_ablation,
    run_dynamic,
    run_lambda_sweep,
    run_robustness,
    write_outputs,
)

log = logging.getLogger("dynfuse")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dynfuse", description="Dynamic multimodal fusion experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_, config=True):
        sp = sub.add_parser(name, help=help_)
        if config:
            sp.add_argument("--config", type=Path, help="experiment (or dataset spec) JSON")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", type=Path, default=None)
        sp.add_argument("--format", choices=("json", "csv"), default="json")
        return sp

    add("generate", "write a synthetic dataset (.dmmd)")
    sp = add("train", "train one dynamic model and save its checkpoint")
    sp.add_argument("--lambda", dest="lam", type=float, default=None)
    sp = add("evaluate", "evaluate a checkpoint", config=False)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--data", type=Path, default=None, help="dataset file; defaults to the checkpoint's test split")
    sp = add("sweep", "lambda sweep with paired static baselines")
    sp.add_argument("--jobs", type=int, default=1)
    add("robustness", "accuracy drop under Gaussian noise, dynamic vs static")
    add("ablate", "one-stage / frozen-backbone / full training comparison")
    sp = add("inspect", "per-sample gate decisions with difficulty labels", config=False)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--data", type=Path, default=None)
    sp.add_argument("--limit", type=int, default=None)
    return p


def _load_experiment(args) -> ExperimentConfig:
    raw = json.loads(args.config.read_text()) if args.config else {}
    cfg = config_from_dict(raw)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.out is not None:
        cfg.output_dir = str(args.out)
    return cfg


def _emit(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _dicts_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def cmd_generate(args) -> int:
    raw = json.loads(args.config.read_text()) if args.config else {}
    spec = SyntheticSpec(**raw.get("data", raw))
    if args.seed is not None:
        spec.seed = args.seed
    if args.out is None:
        raise UsageError("generate requires --out")
    train_set, test_set = generate(spec)
    out = args.out
    test_path = out.with_name(out.stem + ".test" + out.suffix)
    save_dataset(train_set, out)
    save_dataset(test_set, test_path)
    if args.format == "csv":
        export_csv(train_set, out.with_suffix(".csv"))
        export_csv(test_set, test_path.with_suffix(".csv"))
    _emit(json.dumps({"train": str(out), "test": str(test_path), "n_train": len(train_set),
                      "n_test": len(test_set)}))
    return 0


def cmd_train(args) -> int:
    cfg = _load_experiment(args)
    seed = cfg.seeds[0]
    lam = cfg.mid_lambda() if args.lam is None else args.lam
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = run_dynamic(cfg, lam, seed, checkpoint_dir=None)
    tc = cfg.train_config(lam, seed)
    save_checkpoint(res.model, out / "model.ckpt",
                    {"kind": "dynamic", "seed": seed, "train": tc.to_dict(),
                     "data": cfg.data_spec(seed).to_dict(), "static_branch": None})
    write_outputs(out, [res.record], res.log, cost_table=res.model.cost_table().to_dict())
    _emit(records_to_csv([res.record]) if args.format == "csv" else records_to_json([res.record]))
    return 0


def _checkpoint_data(args, header):
    if args.data is not None:
        return load_dataset(args.data)
    meta = header.get("meta", {})
    if "data" not in meta:
        raise UsageError("checkpoint carries no data spec; pass --data")
    return generate(SyntheticSpec(**meta["data"]))[1]


def cmd_evaluate(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    data = _checkpoint_data(args, header)
    meta = header.get("meta", {})
    tc = TrainConfig(**meta["train"]) if "train" in meta else TrainConfig()
    branch = meta.get("static_branch")
    kind = meta.get("kind", "dynamic")
    rec = evaluate(model, data, tc, static_branch=branch, reference_cost=reference_cost(model), kind=kind)
    if branch is not None:
        rec.ablation = "static"
    _emit(records_to_csv([rec]) if args.format == "csv" else records_to_json([rec]))
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_experiment(args)
    result = run_lambda_sweep(cfg, jobs=args.jobs, out_dir=cfg.output_dir)
    _emit(records_to_csv(result.records) if args.format == "csv" else records_to_json(result.records))
    return 2 if result.failures else 0


def cmd_robustness(args) -> int:
    cfg = _load_experiment(args)
    records = run_robustness(cfg)
    rows = [asdict(r) for r in records]
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "robustness.csv").write_text(_dicts_to_csv(rows))
    (out / "robustness.json").write_text(json.dumps({"records": rows, "summary": robustness_summary(records)},
                                                    indent=2))
    _emit(_dicts_to_csv(rows) if args.format == "csv" else json.dumps(robustness_summary(records), indent=2))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_experiment(args)
    rows, records = run_ablation(cfg)
    table = rows_to_dicts(rows)
    out = Path(cfg.output_dir)
    write_outputs(out, records, [], prefix="ablation_runs")
    (out / "ablation.csv").write_text(_dicts_to_csv(table))
    (out / "ablation.json").write_text(json.dumps(table, indent=2))
    _emit(_dicts_to_csv(table) if args.format == "csv" else json.dumps(table, indent=2))
    return 0


def cmd_inspect(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    data = _checkpoint_data(args, header)
    meta = header.get("meta", {})
    inference = meta.get("train", {}).get("inference", "hard")
    p = predict(model, data, inference)
    cheap = model.cheapest_branch()
    n = len(data) if args.limit is None else min(args.limit, len(data))
    rows = []
    for i in range(n):
        rows.append({"index": i, "difficulty": "hard" if data.difficulty[i] == HARD else "easy",
                     "selected": " ".join(str(int(s)) for s in p.selected[i])})
    hard = data.difficulty == HARD
    is_cheap = (p.selected == cheap).all(axis=1)
    crosstab = {
        "cheap_branch": cheap,
        "easy": {"n": int((~hard).sum()), "cheap": int((is_cheap & ~hard).sum())},
        "hard": {"n": int(hard.sum()), "cheap": int((is_cheap & hard).sum())},
    }
    if args.format == "csv":
        _emit(_dicts_to_csv(rows))
    else:
        _emit(json.dumps({"samples": rows, "crosstab": crosstab}, indent=1))
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "robustness": cmd_robustness,
    "ablate": cmd_ablate,
    "inspect": cmd_inspect,
}


def cli_main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"{parser.format_usage()}dynfuse: error: {exc}\n")
        return 1
    except (OSError, ValueError, TypeError, KeyError) as exc:
        if isinstance(exc, (ValueError, TypeError)) and _is_config_error(exc):
            sys.stderr.write(f"dynfuse: invalid configuration: {exc}\n")
            return 1
        log.error("run failed: %s", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported, not re-raised
        log.exception("run failed: %s", exc)
        return 2


def _is_config_error(exc: Exception) -> bool:
    return "__init__() got an unexpected keyword argument" in str(exc) or "schema" in str(exc)


def main() -> None:
    sys.exit(cli_main())
