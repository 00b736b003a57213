"""Evaluation metrics and the flat record emitted per trained model."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "DEGENERATE_ENTROPY",
    "MetricsRecord",
    "accuracy",
    "f1_scores",
    "selection_ratios",
    "selection_entropy",
    "records_to_csv",
    "records_from_csv",
    "records_to_json",
    "records_from_json",
]

# Below this many nats of branch-selection entropy a slot counts as collapsed.
DEGENERATE_ENTROPY = 0.05


def accuracy(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(target)))


def f1_scores(pred: np.ndarray, target: np.ndarray, n_classes: int) -> tuple[float, float]:
    """(micro, macro) F1 over classes; classes absent from both sides are skipped in the macro mean."""
    pred, target = np.asarray(pred), np.asarray(target)
    tp = np.array([np.sum((pred == c) & (target == c)) for c in range(n_classes)], dtype=np.float64)
    fp = np.array([np.sum((pred == c) & (target != c)) for c in range(n_classes)], dtype=np.float64)
    fn = np.array([np.sum((pred != c) & (target == c)) for c in range(n_classes)], dtype=np.float64)
    denom = 2 * tp.sum() + fp.sum() + fn.sum()
    micro = float(2 * tp.sum() / denom) if denom else 0.0
    per = []
    for c in range(n_classes):
        d = 2 * tp[c] + fp[c] + fn[c]
        if d:
            per.append(2 * tp[c] / d)
    macro = float(np.mean(per)) if per else 0.0
    return micro, macro


def selection_ratios(selected: np.ndarray, branches: int) -> np.ndarray:
    """(slots, branches) fraction of samples routed to each branch."""
    selected = np.atleast_2d(np.asarray(selected))
    n = selected.shape[0]
    out = np.zeros((selected.shape[1], branches))
    for j in range(selected.shape[1]):
        out[j] = np.bincount(selected[:, j], minlength=branches)[:branches] / max(n, 1)
    return out


def selection_entropy(ratios: np.ndarray) -> np.ndarray:
    """Entropy in nats of each slot's selection distribution."""
    r = np.atleast_2d(ratios)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(r > 0, -r * np.log(r), 0.0)
    return terms.sum(axis=1)


@dataclass
class MetricsRecord:
    """One evaluated model.

    ``selection_ratio`` maps ``"s{slot}_b{branch}"`` to the fraction of test
    samples routed there; ``gate_entropy`` is the smallest per-slot entropy.
    Metrics that do not apply to the task are ``None``.
    """

    kind: str = "dynamic"
    architecture: str = "modality_moe"
    lam: float = 0.0
    seed: int = 0
    ablation: str = "full"
    accuracy: float | None = None
    f1_micro: float | None = None
    f1_macro: float | None = None
    mae: float | None = None
    mean_madds_per_sample: float = 0.0
    madds_reduction_vs_static: float = 0.0
    gate_entropy: float = 0.0
    degenerate_gate: bool = False
    cheap_ratio_easy: float | None = None
    cheap_ratio_hard: float | None = None
    selection_ratio: dict[str, float] = field(default_factory=dict)
    wall_time_s: float = 0.0

    # wall_time_s is excluded from CSV so repeated runs give identical files.
    CSV_EXCLUDE = ("wall_time_s", "selection_ratio")

    def ratio_matrix(self) -> np.ndarray:
        keys = [tuple(int(p[1:]) for p in k.split("_")) for k in self.selection_ratio]
        S = 1 + max(s for s, _ in keys)
        B = 1 + max(b for _, b in keys)
        m = np.zeros((S, B))
        for (s, b), v in zip(keys, self.selection_ratio.values()):
            m[s, b] = v
        return m

    def to_row(self) -> dict:
        row = {}
        for f in fields(self):
            if f.name in self.CSV_EXCLUDE:
                continue
            row[f.name] = getattr(self, f.name)
        for k, v in self.selection_ratio.items():
            row[f"sel_{k}"] = v
        return row

    @classmethod
    def from_row(cls, row: dict) -> MetricsRecord:
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        sel = {}
        for key, value in row.items():
            if key.startswith("sel_"):
                sel[key[4:]] = float(value)
                continue
            if key not in types:
                continue
            kwargs[key] = _parse(value, types[key])
        kwargs["selection_ratio"] = sel
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


def _parse(value, type_name: str):
    if value is None or value == "":
        return None
    t = str(type_name)
    if t.startswith("bool"):
        return value if isinstance(value, bool) else value == "True"
    if t.startswith("int"):
        return int(value)
    if t.startswith("float"):
        return float(value)
    return value


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_to_csv(records: Sequence[MetricsRecord]) -> str:
    rows = [r.to_row() for r in records]
    cols: list[str] = []
    for row in rows:
        for k in row:
            if k not in cols:
                cols.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in cols])
    return buf.getvalue()


def records_from_csv(text: str) -> list[MetricsRecord]:
    reader = csv.DictReader(io.StringIO(text))
    out = []
    for row in reader:
        row = {k: v for k, v in row.items() if not (k.startswith("sel_") and v == "")}
        out.append(MetricsRecord.from_row(row))
    return out


def records_to_json(records: Iterable[MetricsRecord]) -> str:
    return json.dumps([r.to_dict() for r in records], indent=2, sort_keys=True)


def records_from_json(text: str) -> list[MetricsRecord]:
    """Accepts a bare list of records or an object with a ``records`` list."""
    data = json.loads(text)
    if isinstance(data, dict):
        data = data["records"]
    return [MetricsRecord(**d) for d in data]
