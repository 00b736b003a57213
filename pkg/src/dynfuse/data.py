"""Synthetic multimodal data with easy and hard samples.

Each modality ``m`` embeds a low-dimensional latent code ``z_m`` through a fixed
orthonormal basis ``Q_m`` and adds isotropic noise. Writing ``c_y`` for the
label code and ``s`` for ``signal_scale``:

* easy: ``z_1 = s c_y``; every other modality carries ``weak_signal * s c_y``.
* hard: ``z_1 = s r`` and ``z_2 = 2 s c_y - s r`` with ``r ~ N(0, hard_spread^2)``.
  Modality 1 is then independent of the label, and only the sum of the two
  projections recovers it.

Difficulty is stored per sample for evaluation only; models see features.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

__all__ = [
    "SyntheticSpec",
    "NoiseSpec",
    "Dataset",
    "DatasetFormatError",
    "generate",
    "inject_noise",
    "save_dataset",
    "load_dataset",
    "export_csv",
    "EASY",
    "HARD",
]

EASY, HARD = 0, 1
MAGIC = b"DMMD"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


@dataclass
class SyntheticSpec:
    M: int = 2
    dims: tuple[int, ...] = (32, 32)
    n_train: int = 4000
    n_test: int = 2000
    p_hard: float = 0.2
    task: str = "binary_class"
    n_classes: int = 2
    signal_scale: float = 3.0
    noise_scale: float = 1.0
    weak_signal: float = 0.3
    hard_spread: float = 2.0
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.M < 2 or len(self.dims) != self.M or min(self.dims) <= 0:
            raise ValueError(f"need M >= 2 positive dims, got M={self.M}, dims={self.dims}")
        if not 0.0 <= self.p_hard <= 1.0:
            raise ValueError(f"p_hard must lie in [0, 1], got {self.p_hard}")
        if self.task not in ("binary_class", "multiclass", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "binary_class":
            self.n_classes = 2
        if self.task == "multiclass" and self.n_classes < 2:
            raise ValueError("multiclass needs n_classes >= 2")
        if min(self.dims) < self.code_dim:
            raise ValueError("feature dims must be at least the latent code size")
        if self.n_train < 0 or self.n_test < 0 or self.noise_scale < 0:
            raise ValueError("sample counts and noise scale must be non-negative")

    @property
    def code_dim(self) -> int:
        return self.n_classes if self.task == "multiclass" else 1

    @property
    def is_classification(self) -> bool:
        return self.task != "regression"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NoiseSpec:
    target: str = "modality_2"
    sigma: float = 0.0
    prob: float = 1.0 / 3.0

    def __post_init__(self):
        if self.target not in ("modality_1", "modality_2", "both"):
            raise ValueError(f"unknown noise target {self.target!r}")
        if self.sigma < 0 or not 0.0 <= self.prob <= 1.0:
            raise ValueError("need sigma >= 0 and prob in [0, 1]")

    def modalities(self) -> list[int]:
        return {"modality_1": [0], "modality_2": [1], "both": [0, 1]}[self.target]


@dataclass
class Dataset:
    features: list[np.ndarray]
    labels: np.ndarray
    difficulty: np.ndarray
    task: str = "binary_class"
    n_classes: int = 2
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.labels)
        if any(f.shape[0] != n for f in self.features) or len(self.difficulty) != n:
            raise ValueError("features, labels and difficulty must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(f.shape[1] for f in self.features)

    @property
    def is_classification(self) -> bool:
        return self.task != "regression"

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx)
        return replace(self, features=[f[idx] for f in self.features], labels=self.labels[idx],
                       difficulty=self.difficulty[idx])

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[Dataset]:
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            yield self.subset(order[start:start + batch_size])

    def equals(self, other: Dataset) -> bool:
        return (self.task == other.task and self.n_classes == other.n_classes
                and len(self.features) == len(other.features)
                and all(np.array_equal(a, b) for a, b in zip(self.features, other.features))
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.difficulty, other.difficulty))


def _bases(spec: SyntheticSpec, rng: np.random.Generator) -> list[np.ndarray]:
    out = []
    for d in spec.dims:
        q, _ = np.linalg.qr(rng.normal(size=(d, spec.code_dim)))
        out.append(q)
    return out


def _label_codes(spec: SyntheticSpec, n: int, rng: np.random.Generator):
    if spec.task == "binary_class":
        labels = rng.integers(0, 2, size=n)
        codes = (2.0 * labels - 1.0)[:, None]
    elif spec.task == "multiclass":
        labels = rng.integers(0, spec.n_classes, size=n)
        codes = np.eye(spec.n_classes)[labels]
    else:
        labels = rng.uniform(-1.0, 1.0, size=n)
        codes = labels[:, None]
    return labels, codes


def _draw(spec: SyntheticSpec, n: int, bases, rng: np.random.Generator) -> Dataset:
    s = spec.signal_scale
    labels, codes = _label_codes(spec, n, rng)
    hard = rng.random(n) < spec.p_hard
    r = rng.normal(scale=spec.hard_spread, size=codes.shape)
    latents = []
    for m in range(spec.M):
        if m == 0:
            z = np.where(hard[:, None], s * r, s * codes)
        elif m == 1:
            z = np.where(hard[:, None], 2.0 * s * codes - s * r, spec.weak_signal * s * codes)
        else:
            z = spec.weak_signal * s * codes
        latents.append(z)
    features = [z @ q.T + spec.noise_scale * rng.normal(size=(n, q.shape[0]))
                for z, q in zip(latents, bases)]
    labels = labels.astype(np.int64) if spec.is_classification else labels.astype(np.float64)
    return Dataset(features, labels, hard.astype(np.uint8), spec.task, spec.n_classes, {"spec": spec.to_dict()})


def generate(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Deterministic (train, test) split for ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    bases = _bases(spec, rng)
    train = _draw(spec, spec.n_train, bases, rng)
    test = _draw(spec, spec.n_test, bases, rng)
    train.meta["split"], test.meta["split"] = "train", "test"
    return train, test


def inject_noise(ds: Dataset, spec: NoiseSpec, rng: np.random.Generator) -> Dataset:
    """With probability ``prob`` per sample, add N(0, sigma^2) to the targeted modalities."""
    n = len(ds)
    hit = rng.random(n) < spec.prob
    features = [f.copy() for f in ds.features]
    if spec.sigma > 0 and hit.any():
        for m in spec.modalities():
            features[m][hit] += rng.normal(scale=spec.sigma, size=(int(hit.sum()), features[m].shape[1]))
    return replace(ds, features=features, labels=ds.labels.copy(), difficulty=ds.difficulty.copy(),
                   meta=dict(ds.meta))


# ---------------------------------------------------------------------------
# .dmmd files: "DMMD" | u16 version | u32 header length | JSON header | records

class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _record_dtype(dims, label_type: str) -> np.dtype:
    fields = [("difficulty", "u1"), ("label", "<u4" if label_type == "u32" else "<f8")]
    fields += [(f"m{m}", "<f8", (d,)) for m, d in enumerate(dims)]
    return np.dtype(fields)


def save_dataset(ds: Dataset, path) -> None:
    label_type = "u32" if ds.is_classification else "f64"
    header = {
        "M": len(ds.features),
        "dims": list(ds.dims),
        "n": len(ds),
        "task": ds.task,
        "n_classes": ds.n_classes,
        "label_type": label_type,
        "meta": ds.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    rec = np.zeros(len(ds), dtype=_record_dtype(ds.dims, label_type))
    rec["difficulty"] = ds.difficulty
    rec["label"] = ds.labels
    for m, f in enumerate(ds.features):
        rec[f"m{m}"] = f
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        fh.write(rec.tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise DatasetFormatError("file too short for the fixed prefix", len(raw))
    magic, version, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    start = _PREFIX.size
    if start + hlen > len(raw):
        raise DatasetFormatError("header runs past end of file", len(raw))
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", getattr(exc, "start", 0))
        raise DatasetFormatError(f"malformed header: {exc}", start + pos) from None
    body = start + hlen
    try:
        M, dims, n = int(header["M"]), [int(d) for d in header["dims"]], int(header["n"])
        label_type = header["label_type"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"incomplete header: {exc}", start) from None
    if M != len(dims):
        raise DatasetFormatError(f"header declares {M} modalities but lists {len(dims)} dims", start)
    if label_type not in ("u32", "f64"):
        raise DatasetFormatError(f"unknown label type {label_type!r}", start)
    dtype = _record_dtype(dims, label_type)
    expected = body + n * dtype.itemsize
    if len(raw) < expected:
        complete = (len(raw) - body) // dtype.itemsize
        raise DatasetFormatError(f"truncated: {complete} of {n} records present", body + complete * dtype.itemsize)
    if len(raw) > expected:
        raise DatasetFormatError(f"{len(raw) - expected} trailing bytes after {n} records", expected)
    rec = np.frombuffer(raw, dtype=dtype, count=n, offset=body)
    if n and rec["difficulty"].max() > HARD:
        bad = int(np.argmax(rec["difficulty"] > HARD))
        raise DatasetFormatError("difficulty byte must be 0 or 1", body + bad * dtype.itemsize)
    labels = rec["label"].astype(np.int64 if label_type == "u32" else np.float64)
    features = [np.array(rec[f"m{m}"], dtype=np.float64) for m in range(M)]
    return Dataset(features, labels, rec["difficulty"].astype(np.uint8), header.get("task", "binary_class"),
                   int(header.get("n_classes", 2)), header.get("meta", {}))


def export_csv(ds: Dataset, path) -> None:
    """One row per sample: ``difficulty,label,m1_0,...,m2_0,...``."""
    cols = ["difficulty", "label"]
    for m, d in enumerate(ds.dims, start=1):
        cols += [f"m{m}_{k}" for k in range(d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i in range(len(ds)):
            row = [int(ds.difficulty[i]), ds.labels[i].item()]
            for f in ds.features:
                row.extend(repr(float(v)) for v in f[i])
            w.writerow(row)
