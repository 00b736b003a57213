"""Experiment protocols: lambda sweeps, noise robustness and training ablations."""

from __future__ import annotations

import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..checkpoint import save_checkpoint
from ..data import Dataset, generate, inject_noise
from ..fusion import FusionNetwork, build_fusion_network
from ..metrics import MetricsRecord, records_to_csv, records_to_json
from ..moe import ModalityMoe, build_subset_model
from ..trainer import evaluate, predict, train, train_static
from .config import ExperimentConfig

__all__ = [
    "CellResult",
    "SweepResult",
    "RobustnessRecord",
    "AblationRow",
    "build_model",
    "static_branches",
    "reference_cost",
    "run_dynamic",
    "run_static",
    "run_lambda_sweep",
    "run_robustness",
    "run_ablation",
    "write_outputs",
]

log = logging.getLogger(__name__)


def build_model(cfg: ExperimentConfig, seed: int) -> ModalityMoe | FusionNetwork:
    mc = cfg.model_config()
    if cfg.architecture == "fusion_net":
        return build_fusion_network(mc, seed)
    return build_subset_model(mc, seed)


def static_branches(model) -> dict[str, int]:
    """Named fixed-path baselines: the cheapest and the most expensive branch."""
    if isinstance(model, FusionNetwork):
        costs = model.cost_table().op_matrix().sum(axis=0)
        return {"static_no_fuse": int(np.argmin(costs)), "static_all_fuse": int(np.argmax(costs))}
    costs = model.cost_table().expert_costs
    ordered = sorted(costs, key=lambda k: (costs[k], k))
    return {"static_cheap": ordered[0], "static_full": ordered[-1]}


def reference_cost(model) -> float:
    """Per-sample MAdds of the always-multimodal static network (no gate)."""
    table = model.cost_table()
    if isinstance(model, FusionNetwork):
        op = static_branches(model)["static_all_fuse"]
        return float(sum(table.block_costs[0]) + sum(table.block_costs[1]) + table.head_cost
                     + table.op_matrix()[:, op].sum())
    return float(max(table.expert_costs.values()) + table.shared_cost)


@dataclass
class CellResult:
    record: MetricsRecord | None
    log: list[dict] = field(default_factory=list)
    error: str | None = None
    model: object = None


def _data(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset]:
    return generate(cfg.data_spec(seed))


def _checkpoint_meta(cfg: ExperimentConfig, tc, seed: int, kind: str, static_branch=None) -> dict:
    return {"kind": kind, "seed": seed, "train": tc.to_dict(), "data": cfg.data_spec(seed).to_dict(),
            "static_branch": static_branch}


def run_dynamic(cfg: ExperimentConfig, lam: float, seed: int, ablation: str | None = None,
                checkpoint_dir: Path | None = None) -> CellResult:
    overrides = {"ablation": ablation} if ablation else {}
    tc = cfg.train_config(lam, seed, **overrides)
    train_set, test_set = _data(cfg, seed)
    lines: list[dict] = []
    tag = {"kind": "dynamic", "lam": lam, "seed": seed, "ablation": tc.ablation}
    t0 = time.perf_counter()
    model = build_model(cfg, seed)
    train(model, train_set, tc, lambda d: lines.append({**tag, **d}))
    record = evaluate(model, test_set, tc, reference_cost=reference_cost(model))
    record.wall_time_s = time.perf_counter() - t0
    if checkpoint_dir is not None:
        name = f"dynamic_{tc.ablation}_lam{lam:g}_seed{seed}.ckpt"
        save_checkpoint(model, checkpoint_dir / name, _checkpoint_meta(cfg, tc, seed, "dynamic"))
    return CellResult(record, lines, model=model)


def run_static(cfg: ExperimentConfig, seed: int, name: str, checkpoint_dir: Path | None = None) -> CellResult:
    tc = cfg.train_config(0.0, seed, gate_training="straight_through", inference="hard")
    train_set, test_set = _data(cfg, seed)
    lines: list[dict] = []
    t0 = time.perf_counter()
    model = build_model(cfg, seed)
    branch = static_branches(model)[name]
    train_static(model, train_set, tc, branch, lambda d: lines.append({"kind": name, "seed": seed, **d}))
    record = evaluate(model, test_set, tc, static_branch=branch, reference_cost=reference_cost(model), kind=name)
    record.lam = 0.0
    record.ablation = "static"
    record.wall_time_s = time.perf_counter() - t0
    if checkpoint_dir is not None:
        save_checkpoint(model, checkpoint_dir / f"{name}_seed{seed}.ckpt",
                        _checkpoint_meta(cfg, tc, seed, name, branch))
    return CellResult(record, lines, model=model)


def _run_task(task: tuple) -> CellResult:
    kind, cfg, arg, seed, ckpt = task
    try:
        if kind == "dynamic":
            res = run_dynamic(cfg, arg, seed, checkpoint_dir=ckpt)
        else:
            res = run_static(cfg, seed, arg, checkpoint_dir=ckpt)
        res.model = None
        return res
    except Exception as exc:  # one failed cell must not stop the sweep
        return CellResult(None, [{"kind": kind, "arg": arg, "seed": seed, "error": repr(exc)}],
                          error=traceback.format_exc())


def _map(tasks: list[tuple], jobs: int) -> list[CellResult]:
    if jobs <= 1:
        return [_run_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_task, tasks))


@dataclass
class SweepResult:
    records: list[MetricsRecord]
    log: list[dict]
    failures: list[str]


def run_lambda_sweep(cfg: ExperimentConfig, jobs: int = 1, out_dir: Path | str | None = None) -> SweepResult:
    """Train and evaluate every (lambda, seed) cell plus paired static baselines."""
    ckpt = None
    if out_dir is not None:
        ckpt = Path(out_dir) / "checkpoints"
        ckpt.mkdir(parents=True, exist_ok=True)
    probe = build_model(cfg, cfg.seeds[0])
    names = list(static_branches(probe))
    tasks = []
    for seed in cfg.seeds:
        tasks += [("static", cfg, name, seed, ckpt) for name in names]
        tasks += [("dynamic", cfg, lam, seed, ckpt) for lam in cfg.lambda_values]
    results = _map(tasks, jobs)
    records = [r.record for r in results if r.record is not None]
    lines = [line for r in results for line in r.log]
    failures = [r.error for r in results if r.error]
    for f in failures:
        log.error("sweep cell failed:\n%s", f)
    result = SweepResult(records, lines, failures)
    if out_dir is not None:
        write_outputs(out_dir, records, lines, failures, cost_table=probe.cost_table().to_dict())
    return result


def write_outputs(out_dir, records: list[MetricsRecord], lines: list[dict], failures=(), prefix: str = "metrics",
                  cost_table: dict | None = None):
    """CSV and JSON metrics plus the training log; the JSON carries the cost table when given."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{prefix}.csv").write_text(records_to_csv(records))
    doc = {"records": json.loads(records_to_json(records)), "cost_table": cost_table}
    (out / f"{prefix}.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    with open(out / "log.ndjson", "w") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    if failures:
        (out / "failures.txt").write_text("\n\n".join(failures))


# ---------------------------------------------------------------------------
# Robustness

@dataclass
class RobustnessRecord:
    seed: int
    sigma: float
    target: str
    dyn_accuracy: float
    static_accuracy: float
    dyn_drop: float
    static_drop: float
    dyn_mean_madds: float


def run_robustness(cfg: ExperimentConfig, lam: float | None = None) -> list[RobustnessRecord]:
    """Accuracy drop under noise for a dynamic model and the static full-fusion baseline.

    Both models see the same noisy copy of the test set for each (seed, sigma).
    """
    if cfg.noise_sweep is None:
        raise ValueError("config has no noise_sweep")
    lam = cfg.mid_lambda() if lam is None else lam
    sweep = cfg.noise_sweep
    out = []
    for seed in cfg.seeds:
        _, test_set = _data(cfg, seed)
        dyn = run_dynamic(cfg, lam, seed)
        full_name = [n for n in static_branches(dyn.model) if n in ("static_full", "static_all_fuse")][0]
        stat = run_static(cfg, seed, full_name)
        dyn_tc = cfg.train_config(lam, seed)
        branch = static_branches(stat.model)[full_name]
        dyn_clean = dyn.record.accuracy
        stat_clean = stat.record.accuracy
        for k, sigma in enumerate(sweep.sigmas):
            rng = np.random.default_rng([seed, k])
            noisy = inject_noise(test_set, sweep.spec(sigma), rng)
            dp = predict(dyn.model, noisy, dyn_tc.inference)
            d_rec = evaluate(dyn.model, noisy, dyn_tc, predictions=dp)
            s_rec = evaluate(stat.model, noisy, dyn_tc, static_branch=branch, kind=full_name)
            out.append(RobustnessRecord(seed, float(sigma), sweep.target, d_rec.accuracy, s_rec.accuracy,
                                        dyn_clean - d_rec.accuracy, stat_clean - s_rec.accuracy,
                                        d_rec.mean_madds_per_sample))
    return out


def robustness_summary(records: list[RobustnessRecord]) -> list[dict]:
    """Median drops per sigma across seeds (plotting data)."""
    out = []
    for sigma in sorted({r.sigma for r in records}):
        rs = [r for r in records if r.sigma == sigma]
        out.append({"sigma": sigma,
                    "dyn_drop": float(np.median([r.dyn_drop for r in rs])),
                    "static_drop": float(np.median([r.static_drop for r in rs]))})
    return out


# ---------------------------------------------------------------------------
# Ablation

@dataclass
class AblationRow:
    method: str
    two_stage: bool | None
    joint_optimization: bool | None
    median_accuracy: float
    median_madds: float
    degenerate_runs: int
    runs: int

    @property
    def median_degenerate(self) -> bool:
        return self.degenerate_runs * 2 > self.runs


ABLATION_VARIANTS = (
    ("one_stage", False, True),
    ("frozen_backbone", True, False),
    ("full", True, True),
)


def run_ablation(cfg: ExperimentConfig, lam: float | None = None) -> tuple[list[AblationRow], list[MetricsRecord]]:
    """Baseline row plus one row per training variant, aggregated over seeds."""
    lam = cfg.mid_lambda() if lam is None else lam
    records: list[MetricsRecord] = []
    for seed in cfg.seeds:
        model = build_model(cfg, seed)
        full_name = [n for n in static_branches(model) if n in ("static_full", "static_all_fuse")][0]
        records.append(run_static(cfg, seed, full_name).record)
        for variant, _, _ in ABLATION_VARIANTS:
            records.append(run_dynamic(cfg, lam, seed, ablation=variant).record)
    rows = []
    baseline = [r for r in records if r.ablation == "static"]
    rows.append(_ablation_row("baseline", None, None, baseline))
    for variant, two_stage, joint in ABLATION_VARIANTS:
        rows.append(_ablation_row(variant, two_stage, joint, [r for r in records if r.ablation == variant]))
    return rows, records


def _ablation_row(method, two_stage, joint, recs: list[MetricsRecord]) -> AblationRow:
    return AblationRow(method, two_stage, joint,
                       float(np.median([r.accuracy for r in recs])),
                       float(np.median([r.mean_madds_per_sample for r in recs])),
                       int(sum(r.degenerate_gate for r in recs)), len(recs))


def rows_to_dicts(rows) -> list[dict]:
    return [asdict(r) for r in rows]
