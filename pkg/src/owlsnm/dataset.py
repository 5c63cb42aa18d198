"""Extreme-classification datasets: the XC text format, positive sampling, synthetic data.

File grammar::

    N D K
    l1,l2,...,lm f1:v1 f2:v2 ...

with 0-based label and feature ids.  Ids stay 0-based in memory.  Examples
are held in CSR form so a dataset with millions of rows stays compact.
"""

from __future__ import annotations

import array
import math
import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np
import scipy.sparse as sp


class ParseError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class RangeError(ParseError):
    pass


@dataclass(frozen=True)
class SparseExample:
    indices: np.ndarray
    values: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.indices) != len(self.values):
            raise ValueError("feature indices and values differ in length")
        if np.any(np.diff(self.indices) <= 0):
            raise ValueError("feature indices must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature values must be finite")
        if len(self.labels) == 0:
            raise ValueError("an example needs at least one label")

    @property
    def features(self) -> list[tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.values.tolist()))


class Dataset:
    """Immutable collection of sparse multilabel examples."""

    def __init__(self, X: sp.csr_matrix, label_indptr, label_ids, n_labels: int):
        self.X = sp.csr_matrix(X)
        self.label_indptr = np.asarray(label_indptr, dtype=np.int64)
        self.label_ids = np.asarray(label_ids, dtype=np.int64)
        self.n_labels = int(n_labels)
        if len(self.label_indptr) != self.X.shape[0] + 1:
            raise ValueError("label index pointer does not match the number of rows")
        if np.any(np.diff(self.label_indptr) <= 0):
            raise ValueError("every example needs at least one label")
        if len(self.label_ids) and (self.label_ids.min() < 0 or self.label_ids.max() >= self.n_labels):
            raise ValueError("label id out of range")

    @classmethod
    def from_examples(cls, examples, n_features: int, n_labels: int) -> "Dataset":
        examples = list(examples)
        indptr = np.cumsum([0] + [len(e.indices) for e in examples])
        idx = np.concatenate([e.indices for e in examples]) if examples else np.empty(0, np.int64)
        val = np.concatenate([e.values for e in examples]) if examples else np.empty(0)
        lptr = np.cumsum([0] + [len(e.labels) for e in examples])
        lab = np.concatenate([e.labels for e in examples]) if examples else np.empty(0, np.int64)
        X = sp.csr_matrix((val, idx, indptr), shape=(len(examples), n_features))
        return cls(X, lptr, lab, n_labels)

    @property
    def n_examples(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.n_examples

    def labels_of(self, i: int) -> np.ndarray:
        return self.label_ids[self.label_indptr[i] : self.label_indptr[i + 1]]

    def __getitem__(self, i: int) -> SparseExample:
        a, b = self.X.indptr[i], self.X.indptr[i + 1]
        return SparseExample(self.X.indices[a:b].astype(np.int64), self.X.data[a:b], self.labels_of(i))

    def __iter__(self) -> Iterator[SparseExample]:
        return (self[i] for i in range(self.n_examples))

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        counts = np.diff(self.label_indptr)[rows]
        lptr = np.concatenate([[0], np.cumsum(counts)])
        lab = np.concatenate([self.labels_of(i) for i in rows]) if len(rows) else np.empty(0, np.int64)
        return Dataset(self.X[rows], lptr, lab, self.n_labels)

    def sample_positives(self, rng: np.random.Generator) -> np.ndarray:
        """One uniformly drawn relevant label per example."""
        counts = np.diff(self.label_indptr)
        offs = np.floor(rng.random(self.n_examples) * counts).astype(np.int64)
        return self.label_ids[self.label_indptr[:-1] + np.minimum(offs, counts - 1)]


def sample_positive(example: SparseExample, rng: np.random.Generator) -> int:
    return int(example.labels[rng.integers(len(example.labels))])


def _parse_header(line: str) -> tuple[int, int, int]:
    parts = line.split()
    if len(parts) != 3:
        raise ParseError("header must be 'N D K'", 1)
    try:
        n, d, k = (int(p) for p in parts)
    except ValueError:
        raise ParseError("header fields must be integers", 1) from None
    if n < 0 or d < 0 or k < 1:
        raise ParseError("header counts out of range", 1)
    return n, d, k


def iter_xc_lines(path) -> Iterator[tuple[int, str]]:
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            yield lineno, line.rstrip("\r\n")


def _is_num(text: str, kind) -> bool:
    try:
        kind(text)
        return True
    except ValueError:
        return False


def parse_xc(path: str | os.PathLike) -> Dataset:
    """Stream-parse an XC-format file; memory is one line plus the output arrays."""
    lines = iter_xc_lines(path)
    try:
        _, header = next(lines)
    except StopIteration:
        raise ParseError("empty file", 1) from None
    n, d, K = _parse_header(header)

    # int32 ids when they fit, so scipy keeps the buffers without a copy
    id_code = "i" if max(d, K) < 2**31 else "q"
    f_idx = array.array(id_code)
    f_val = array.array("d")
    f_ptr = array.array("q", [0])
    l_ids = array.array(id_code)
    l_ptr = array.array("q", [0])
    rows = 0
    for lineno, line in lines:
        if not line.strip():
            continue
        rows += 1
        if rows > n:
            raise ParseError(f"more rows than the {n} declared in the header", lineno)
        head, _, rest = line.partition(" ")
        if not head or ":" in head:
            raise ParseError("missing label field", lineno)
        try:
            labels = sorted({int(t) for t in head.split(",")})
        except ValueError:
            raise ParseError(f"bad label field {head!r}", lineno) from None
        if labels[0] < 0 or labels[-1] >= K:
            raise RangeError(f"label id out of range [0, {K})", lineno)
        l_ids.extend(labels)
        l_ptr.append(len(l_ids))
        toks = rest.split()
        if toks:
            pairs = [t.partition(":") for t in toks]
            try:
                idx = [int(a) for a, sep, _ in pairs if sep]
                vals = [float(b) for _, _, b in pairs]
            except ValueError:
                idx = []
            if len(idx) != len(toks):
                bad = next(t for t, (a, sep, b) in zip(toks, pairs) if not (sep and _is_num(a, int) and _is_num(b, float)))
                raise ParseError(f"bad feature token {bad!r}", lineno)
            if idx[0] < 0 or max(idx) >= d:
                raise RangeError(f"feature id out of range [0, {d})", lineno)
            if any(a >= b for a, b in zip(idx, idx[1:])):
                raise ParseError("feature ids must be strictly increasing", lineno)
            if not all(map(math.isfinite, vals)):
                raise ParseError("non-finite feature value", lineno)
            f_idx.extend(idx)
            f_val.extend(vals)
        f_ptr.append(len(f_idx))
    if rows != n:
        raise ParseError(f"header declares {n} rows but the file has {rows}")

    X = sp.csr_matrix(
        (np.frombuffer(f_val, dtype=np.float64), np.frombuffer(f_idx, dtype=f_idx.typecode), np.frombuffer(f_ptr, dtype=np.int64)),
        shape=(n, d),
        copy=False,
    )
    return Dataset(X, np.frombuffer(l_ptr, dtype=np.int64), np.frombuffer(l_ids, dtype=l_ids.typecode), K)


def write_xc(ds: Dataset, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{ds.n_examples} {ds.n_features} {ds.n_labels}\n")
        X = ds.X
        for i in range(ds.n_examples):
            a, b = X.indptr[i], X.indptr[i + 1]
            feats = " ".join(f"{j}:{v!r}" for j, v in zip(X.indices[a:b].tolist(), X.data[a:b].tolist()))
            labels = ",".join(str(t) for t in ds.labels_of(i).tolist())
            fh.write(f"{labels} {feats}\n" if feats else f"{labels}\n")


def _sparsify_rows(M: np.ndarray, s: int) -> np.ndarray:
    """Keep the ``s`` largest-magnitude entries per row, then renormalise rows."""
    keep = np.argpartition(-np.abs(M), s - 1, axis=1)[:, :s]
    out = np.zeros_like(M)
    rows = np.arange(M.shape[0])[:, None]
    out[rows, keep] = M[rows, keep]
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.where(norms > 0, norms, 1.0)


def synthetic_prototypes(K: int, d: int, seed: int) -> np.ndarray:
    """The class prototypes :func:`make_synthetic` uses for the same ``seed``."""
    rng = np.random.default_rng(seed)
    return _sparsify_rows(rng.standard_normal((K, d)), max(1, d // 10))


def make_synthetic(K: int, d: int, n: int, noise: float, seed: int) -> tuple[Dataset, Dataset]:
    """Prototype-cluster data split into ``(train, test)``.

    Prototypes are unit vectors supported on ``max(1, d // 10)`` coordinates.
    An example of class ``c`` is ``prototype_c + noise * g`` with
    ``g ~ N(0, I/d)`` (so ``noise`` is a noise-to-signal norm ratio), cut to
    its top coordinates by magnitude and renormalised.  Every fifth example
    (index ``i % 5 == 4``) goes to the test split.
    """
    if K < 1 or d < 1 or n < 1:
        raise ValueError("K, d and n must be positive")
    s = max(1, d // 10)
    rng = np.random.default_rng(seed)
    protos = _sparsify_rows(rng.standard_normal((K, d)), s)
    classes = rng.integers(K, size=n)
    x = protos[classes] + noise * rng.standard_normal((n, d)) / np.sqrt(d)
    x = _sparsify_rows(x, s)
    X = sp.csr_matrix(x)
    X.sort_indices()
    lptr = np.arange(n + 1)
    full = Dataset(X, lptr, classes, K)
    idx = np.arange(n)
    return full.subset(idx[idx % 5 != 4]), full.subset(idx[idx % 5 == 4])
