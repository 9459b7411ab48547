"""Synthetic NPLL datasets: Gaussian class blobs, candidate-set noise, text I/O.

Candidate sets are stored as an ``(n, C)`` boolean mask, one row per sample.

Randomness comes from numpy's PCG64 seeded through ``SeedSequence``.  Class
means, train samples, test samples and candidate noise each draw from their
own child stream (spawn keys 0, 1, 2 and 3 + split), and every stream is
consumed in sample-major order, so outputs depend only on ``(spec, seed)``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

HEADER_TAG = "pals-dataset v1"
SPLITS = ("train", "test")
_SPLIT_KEY = {"train": 1, "test": 2}


class ConfigError(ValueError):
    """Invalid generation or run parameters."""


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed."""

    def __init__(self, message: str, line: int | None = None, fld: str | None = None):
        where = ""
        if line is not None:
            where = f"line {line}"
            if fld is not None:
                where += f", field '{fld}'"
            where += ": "
        super().__init__(where + message)
        self.line = line
        self.field = fld


class SchemaError(DatasetFormatError):
    """File parsed but violates the dataset invariants."""


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    true_labels: np.ndarray
    candidates: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        validate_dataset(self)
        for arr in (self.features, self.true_labels, self.candidates):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def with_candidates(self, candidates: np.ndarray) -> "Dataset":
        return Dataset(self.features, self.true_labels, np.array(candidates, dtype=bool),
                       self.num_classes, self.split)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.n},{self.dim},{self.num_classes},{self.split}".encode())
        for arr in (self.features.astype("<f8"), self.true_labels.astype("<i8"),
                    self.candidates.astype(np.uint8)):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def equals(self, other: "Dataset") -> bool:
        return (self.num_classes == other.num_classes and self.split == other.split
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.true_labels, other.true_labels)
                and np.array_equal(self.candidates, other.candidates))


def validate_dataset(ds: Dataset) -> None:
    x, y, cand, C = ds.features, ds.true_labels, ds.candidates, ds.num_classes
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
        raise SchemaError(f"features must be a non-empty 2-D matrix, got shape {x.shape}")
    if C < 2:
        raise SchemaError(f"need at least 2 classes, got {C}")
    n = x.shape[0]
    if y.shape != (n,):
        raise SchemaError(f"expected {n} labels, got shape {y.shape}")
    if cand.shape != (n, C) or cand.dtype != bool:
        raise SchemaError(f"candidates must be a bool ({n}, {C}) mask, got {cand.dtype} {cand.shape}")
    if y.min() < 0 or y.max() >= C:
        raise SchemaError("true labels out of range")
    empty = np.flatnonzero(~cand.any(axis=1))
    if empty.size:
        raise SchemaError(f"empty candidate set at row {int(empty[0])}")
    if ds.split not in SPLITS:
        raise SchemaError(f"unknown split tag {ds.split!r}")


def singleton_candidates(labels: np.ndarray, num_classes: int) -> np.ndarray:
    cand = np.zeros((labels.shape[0], num_classes), dtype=bool)
    cand[np.arange(labels.shape[0]), labels] = True
    return cand


def candidate_lists(candidates: np.ndarray) -> list[list[int]]:
    return [np.flatnonzero(row).tolist() for row in candidates]


@dataclass(frozen=True)
class GenSpec:
    num_classes: int = 10
    samples_per_class: int = 500
    feature_dim: int = 32
    class_mean_scale: float = 3.0
    partial_rate: float = 0.0
    noise_rate: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if not np.isfinite(self.class_mean_scale) or self.class_mean_scale < 0:
            raise ConfigError("class_mean_scale must be a finite non-negative number")
        check_rate("partial_rate", self.partial_rate)
        check_rate("noise_rate", self.noise_rate)
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 unsigned bits")


def check_rate(name: str, value: float) -> None:
    if not 0.0 <= value < 1.0:
        raise ConfigError(f"{name} must lie in [0, 1), got {value}")


def _stream(seed: int, key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(key,))))


def class_means(spec: GenSpec) -> np.ndarray:
    rng = _stream(spec.seed, 0)
    g = rng.standard_normal((spec.num_classes, spec.feature_dim))
    return spec.class_mean_scale * g / np.linalg.norm(g, axis=1, keepdims=True)


def synth_gaussian_dataset(spec: GenSpec, split: str = "train") -> Dataset:
    """Draw ``samples_per_class`` points around each class mean.

    Means are shared by both splits; the sample noise is split-specific.
    Labels are ordered class-major (all of class 0 first) and candidate sets
    start as singletons of the true label.
    """
    spec.validate()
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    means = class_means(spec)
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    rng = _stream(spec.seed, _SPLIT_KEY[split])
    x = means[labels] + rng.standard_normal((labels.size, spec.feature_dim))
    return Dataset(x, labels, singleton_candidates(labels, spec.num_classes),
                   spec.num_classes, split)


def apply_partial_noise(ds: Dataset, q: float, eta: float, seed: int) -> Dataset:
    """Corrupt singleton candidate sets with partial rate ``q`` and noise rate ``eta``.

    Each incorrect label enters with probability ``q`` and the true label is
    dropped with probability ``eta``, independently per sample.  A set left
    empty gets one uniformly chosen incorrect label.
    """
    check_rate("partial_rate", q)
    check_rate("noise_rate", eta)
    n, C = ds.n, ds.num_classes
    y = ds.true_labels
    rows = np.arange(n)
    rng = _stream(seed, 3 + _SPLIT_KEY[ds.split])
    u = rng.random((n, C))
    cand = u < q
    cand[rows, y] = u[rows, y] >= eta
    empty = np.flatnonzero(~cand.any(axis=1))
    if empty.size:
        # index into the C-1 incorrect labels, then skip over the true one
        pick = rng.integers(0, C - 1, size=empty.size)
        pick += pick >= y[empty]
        cand[empty, pick] = True
    return ds.with_candidates(cand)


def make_benchmark(spec: GenSpec, test_per_class: int | None = None) -> tuple[Dataset, Dataset]:
    """Noisy-candidate train split plus a clean test split sharing class means."""
    train = synth_gaussian_dataset(spec, "train")
    train = apply_partial_noise(train, spec.partial_rate, spec.noise_rate, spec.seed)
    test_spec = spec if test_per_class is None else replace(spec, samples_per_class=test_per_class)
    test = synth_gaussian_dataset(test_spec, "test")
    return train, test


# --- text format -----------------------------------------------------------

def save_dataset(ds: Dataset, path) -> None:
    lines = [f"{HEADER_TAG} n={ds.n} d={ds.dim} C={ds.num_classes} split={ds.split}"]
    for xi, yi, ci in zip(ds.features.tolist(), ds.true_labels.tolist(), ds.candidates):
        cand = ",".join(str(c) for c in np.flatnonzero(ci))
        feat = " ".join(repr(v) for v in xi)
        lines.append(f"label={yi} cand={cand} feat={feat}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str) -> tuple[int, int, int, str]:
    if not line.startswith(HEADER_TAG + " "):
        raise DatasetFormatError(f"expected header starting with '{HEADER_TAG}'", 1)
    fields = {}
    for tok in line[len(HEADER_TAG):].split():
        key, sep, val = tok.partition("=")
        if not sep:
            raise DatasetFormatError(f"malformed header token {tok!r}", 1)
        fields[key] = val
    out = []
    for key in ("n", "d", "C"):
        if key not in fields:
            raise DatasetFormatError("missing header field", 1, key)
        try:
            out.append(int(fields[key]))
        except ValueError:
            raise DatasetFormatError(f"not an integer: {fields[key]!r}", 1, key) from None
    if "split" not in fields:
        raise DatasetFormatError("missing header field", 1, "split")
    n, d, C = out
    if n <= 0 or d <= 0 or C < 2:
        raise SchemaError(f"invalid dimensions n={n} d={d} C={C}", 1)
    if fields["split"] not in SPLITS:
        raise SchemaError(f"unknown split tag {fields['split']!r}", 1, "split")
    return n, d, C, fields["split"]


def load_dataset(path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError("empty file", 1)
    n, d, C, split = _parse_header(lines[0])
    if len(lines) - 1 != n:
        raise DatasetFormatError(f"header declares {n} samples but file has {len(lines) - 1}",
                                 len(lines))
    x = np.empty((n, d))
    y = np.empty(n, dtype=np.int64)
    cand = np.zeros((n, C), dtype=bool)
    for i, line in enumerate(lines[1:]):
        lineno = i + 2
        parts = line.split(" ", 2)
        if len(parts) != 3:
            raise DatasetFormatError("expected 'label=... cand=... feat=...'", lineno)
        label, cands, feat = parts
        for name, tok in (("label", label), ("cand", cands), ("feat", feat)):
            if not tok.startswith(name + "="):
                raise DatasetFormatError(f"expected '{name}='", lineno, name)
        try:
            y[i] = int(label[6:])
        except ValueError:
            raise DatasetFormatError("not an integer", lineno, "label") from None
        if not 0 <= y[i] < C:
            raise SchemaError(f"label {y[i]} outside [0, {C})", lineno, "label")
        body = cands[5:]
        if not body:
            raise SchemaError(f"empty candidate set in row {i}", lineno, "cand")
        try:
            members = [int(c) for c in body.split(",")]
        except ValueError:
            raise DatasetFormatError("malformed candidate list", lineno, "cand") from None
        if min(members) < 0 or max(members) >= C:
            raise SchemaError(f"candidate outside [0, {C})", lineno, "cand")
        cand[i, members] = True
        vals = feat[5:].split(" ")
        if len(vals) != d:
            raise SchemaError(f"expected {d} features, got {len(vals)}", lineno, "feat")
        try:
            x[i] = [float(v) for v in vals]
        except ValueError:
            raise DatasetFormatError("malformed float", lineno, "feat") from None
    return Dataset(x, y, cand, C, split)


def one_nn_accuracy(train: Dataset, test: Dataset) -> float:
    """Euclidean 1-NN on true labels; the separability oracle for benchmarks."""
    a = test.features
    b = train.features
    d2 = (a * a).sum(1)[:, None] - 2 * a @ b.T + (b * b).sum(1)[None, :]
    pred = train.true_labels[np.argmin(d2, axis=1)]
    return float(np.mean(pred == test.true_labels))
