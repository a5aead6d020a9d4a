"""Sparse multilabel dataset I/O and synthetic data generation.

File format (the common extreme-classification text convention):

    N D L
    l1,l2,...  f1:v1 f2:v2 ...

First line is the header; each following line lists a sample's label
indices (comma separated, possibly empty) and its sparse feature:value
pairs.  Gzip-compressed files are accepted by ``.gz`` extension.
"""

from __future__ import annotations

from dataclasses import dataclass
import gzip
import io

import numpy as np

__all__ = ["SparseDataset", "SyntheticSpec", "parse_dataset", "write_dataset",
           "load_dataset", "save_dataset", "generate_synthetic"]


@dataclass
class SparseDataset:
    num_samples: int
    num_features: int
    num_labels: int
    labels: list[np.ndarray]          # per sample, sorted label indices
    features: list[np.ndarray]        # per sample, sorted feature indices
    values: list[np.ndarray]          # per sample, feature values

    def label_counts(self) -> np.ndarray:
        counts = np.zeros(self.num_labels, dtype=np.int64)
        for ls in self.labels:
            counts[ls] += 1
        return counts

    def dense_features(self, idx: np.ndarray) -> np.ndarray:
        """Dense (len(idx), D) matrix for the given sample indices."""
        out = np.zeros((len(idx), self.num_features), dtype=np.float32)
        for row, i in enumerate(idx):
            out[row, self.features[i]] = self.values[i]
        return out

    def __eq__(self, other):
        if not isinstance(other, SparseDataset):
            return NotImplemented
        return (
            (self.num_samples, self.num_features, self.num_labels)
            == (other.num_samples, other.num_features, other.num_labels)
            and all(np.array_equal(a, b) for a, b in zip(self.labels, other.labels))
            and all(np.array_equal(a, b) for a, b in zip(self.features, other.features))
            and all(np.array_equal(a, b) for a, b in zip(self.values, other.values))
        )


class DatasetFormatError(ValueError):
    pass


def parse_dataset(stream) -> SparseDataset:
    """Single-pass parse with line numbers in every error message."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    header = stream.readline()
    parts = header.split()
    if len(parts) != 3:
        raise DatasetFormatError(f"line 1: malformed header {header.strip()!r}")
    try:
        n, d, l = (int(p) for p in parts)
    except ValueError:
        raise DatasetFormatError(f"line 1: malformed header {header.strip()!r}")
    labels, features, values = [], [], []
    for lineno in range(2, n + 2):
        line = stream.readline()
        if line == "":
            raise DatasetFormatError(f"line {lineno}: unexpected end of file")
        line = line.rstrip("\n")
        if line.startswith(" ") or line.startswith("\t"):
            label_part, feat_part = "", line.lstrip(" \t")
        else:
            chunks = line.split(None, 1)
            label_part = chunks[0] if chunks else ""
            feat_part = chunks[1] if len(chunks) > 1 else ""
        try:
            ls = sorted(int(t) for t in label_part.split(",") if t != "")
        except ValueError:
            raise DatasetFormatError(f"line {lineno}: bad label list {label_part!r}")
        if ls and (ls[0] < 0 or ls[-1] >= l):
            bad = ls[0] if ls[0] < 0 else ls[-1]
            raise DatasetFormatError(f"line {lineno}: label {bad} out of range [0, {l})")
        if len(set(ls)) != len(ls):
            raise DatasetFormatError(f"line {lineno}: duplicate label index")
        fi, fv = [], []
        for tok in feat_part.split():
            if ":" not in tok:
                raise DatasetFormatError(f"line {lineno}: bad feature token {tok!r}")
            k, v = tok.split(":", 1)
            try:
                k, v = int(k), float(v)
            except ValueError:
                raise DatasetFormatError(f"line {lineno}: bad feature token {tok!r}")
            if not (0 <= k < d):
                raise DatasetFormatError(f"line {lineno}: feature {k} out of range [0, {d})")
            if not np.isfinite(v):
                raise DatasetFormatError(f"line {lineno}: non-finite value at feature {k}")
            fi.append(k)
            fv.append(v)
        if len(set(fi)) != len(fi):
            raise DatasetFormatError(f"line {lineno}: duplicate feature index")
        order = np.argsort(fi, kind="stable") if fi else []
        labels.append(np.asarray(ls, dtype=np.int64))
        features.append(np.asarray(fi, dtype=np.int64)[order] if fi
                        else np.empty(0, dtype=np.int64))
        values.append(np.asarray(fv, dtype=np.float32)[order] if fi
                      else np.empty(0, dtype=np.float32))
    return SparseDataset(n, d, l, labels, features, values)


def write_dataset(ds: SparseDataset, stream) -> None:
    stream.write(f"{ds.num_samples} {ds.num_features} {ds.num_labels}\n")
    for ls, fi, fv in zip(ds.labels, ds.features, ds.values):
        label_part = ",".join(str(int(x)) for x in ls)
        # shortest repr that parses back to the identical float32
        feat_part = " ".join(f"{int(k)}:{np.float32(v)}" for k, v in zip(fi, fv))
        stream.write(f"{label_part} {feat_part}".rstrip() + "\n")


def load_dataset(path: str) -> SparseDataset:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rt") as f:
        return parse_dataset(f)


def save_dataset(ds: SparseDataset, path: str) -> None:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wt") as f:
        write_dataset(ds, f)


@dataclass
class SyntheticSpec:
    """Recipe for a long-tailed, linearly learnable synthetic dataset."""

    num_samples: int
    num_features: int
    num_labels: int
    mean_labels: float = 2.0
    zipf_exponent: float = 1.0
    noise: float = 0.1
    min_labels: int = 0
    seed: int = 0

    def __post_init__(self):
        if min(self.num_samples, self.num_features, self.num_labels) < 1:
            raise ValueError("sizes must be positive")
        if self.mean_labels <= 0:
            raise ValueError("mean_labels must be positive")
        if self.zipf_exponent < 0:
            raise ValueError("zipf_exponent must be non-negative")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.min_labels < 0:
            raise ValueError("min_labels must be non-negative")


def generate_synthetic(spec: SyntheticSpec) -> SparseDataset:
    """Sample a dataset whose features are noisy label-prototype sums.

    Label frequencies follow a Zipf law with the given exponent; per-sample
    label counts are Poisson around the mean (floored at min_labels).  Each label
    has a random unit prototype in feature space and a sample's features are
    the mean of its labels' prototypes plus Gaussian noise, so a linear
    model over the features can separate the labels.
    """
    rng = np.random.default_rng(spec.seed)
    freqs = np.arange(1, spec.num_labels + 1, dtype=np.float64) ** -spec.zipf_exponent
    freqs /= freqs.sum()
    protos = rng.normal(size=(spec.num_labels, spec.num_features)).astype(np.float32)
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    labels, features, values = [], [], []
    for _ in range(spec.num_samples):
        count = min(max(spec.min_labels, rng.poisson(spec.mean_labels)),
                    spec.num_labels)
        ls = rng.choice(spec.num_labels, size=count, replace=False, p=freqs)
        ls = np.sort(ls.astype(np.int64))
        if count:
            x = protos[ls].mean(axis=0) + rng.normal(
                scale=spec.noise, size=spec.num_features).astype(np.float32)
        else:
            x = rng.normal(scale=spec.noise,
                           size=spec.num_features).astype(np.float32)
        labels.append(ls)
        features.append(np.arange(spec.num_features, dtype=np.int64))
        values.append(x.astype(np.float32))
    return SparseDataset(spec.num_samples, spec.num_features, spec.num_labels,
                         labels, features, values)
