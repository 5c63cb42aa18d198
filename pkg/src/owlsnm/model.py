"""Two-tower scoring model: sparse input -> ReLU layer -> linear layer -> unit vector,
scored by inner product against l2-normalised class embeddings.

Class embeddings are stored unnormalised and normalised on read, with the
gradient taken through the normalisation.  A vector whose norm is below
``EPS_NORM`` maps to the first basis vector and passes no gradient.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

EPS_NORM = 1e-12
MAGIC = b"OWLSNM1\0"


class CheckpointError(ValueError):
    pass


class EmbeddingModel:
    def __init__(self, W1: np.ndarray, W2: np.ndarray, C: np.ndarray):
        d, e = W1.shape
        if W2.shape != (e, e) or C.ndim != 2 or C.shape[1] != e:
            raise ValueError(f"inconsistent shapes W1 {W1.shape}, W2 {W2.shape}, C {C.shape}")
        self.W1 = W1
        self.W2 = W2
        self.C = C
        # number of class-embedding rows read since the last reset
        self.class_rows_read = 0

    @property
    def d(self) -> int:
        return self.W1.shape[0]

    @property
    def e(self) -> int:
        return self.W1.shape[1]

    @property
    def K(self) -> int:
        return self.C.shape[0]

    @property
    def dtype(self):
        return self.W1.dtype

    def class_rows(self, ids: np.ndarray) -> np.ndarray:
        self.class_rows_read += int(np.size(ids))
        return self.C[ids]

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.W1.copy(), self.W2.copy(), self.C.copy())

    def equals(self, other: "EmbeddingModel") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.params(), other.params()))

    def params(self):
        return self.W1, self.W2, self.C


def init_model(d: int, e: int, K: int, seed: int, dtype=np.float64) -> EmbeddingModel:
    """Entries i.i.d. uniform on ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``."""
    if min(d, e, K) < 1:
        raise ValueError("d, e and K must be positive")
    rng = np.random.default_rng(seed)

    def draw(shape, fan_in):
        a = 1.0 / np.sqrt(fan_in)
        u = rng.random(shape, dtype=np.float32 if dtype == np.float32 else np.float64)
        u *= 2 * a
        u -= a
        return u.astype(dtype, copy=False)

    return EmbeddingModel(draw((d, e), d), draw((e, e), e), draw((K, e), e))


def _normalize_rows(M: np.ndarray):
    norms = np.linalg.norm(M, axis=-1, keepdims=True)
    ok = norms >= EPS_NORM
    out = np.where(ok, M / np.where(ok, norms, 1.0), 0.0)
    if not ok.all():
        # degenerate rows fall back to the first basis vector
        out[..., 0] = np.where(ok[..., 0], out[..., 0], 1.0)
    return out, norms, ok


def _normalize_backward(unit: np.ndarray, norms: np.ndarray, ok: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient through ``x -> x / |x|`` given the output gradient ``g``."""
    proj = g - unit * np.sum(unit * g, axis=-1, keepdims=True)
    return np.where(ok, proj / np.where(ok, norms, 1.0), 0.0)


def as_csr(x, d: int) -> sp.csr_matrix:
    """Accept a CSR block, a :class:`SparseExample`, an ``(indices, values)`` pair or a dense vector."""
    if sp.issparse(x):
        return sp.csr_matrix(x)
    if hasattr(x, "indices") and hasattr(x, "values"):
        idx, val = np.asarray(x.indices), np.asarray(x.values, dtype=float)
    elif isinstance(x, tuple) and len(x) == 2:
        idx, val = np.asarray(x[0]), np.asarray(x[1], dtype=float)
    else:
        dense = np.atleast_2d(np.asarray(x, dtype=float))
        return sp.csr_matrix(dense)
    if len(idx) and (idx.min() < 0 or idx.max() >= d):
        raise ValueError(f"feature index out of range [0, {d})")
    return sp.csr_matrix((val, idx, [0, len(idx)]), shape=(1, d))


@dataclass
class InputCache:
    X: sp.csr_matrix
    H: np.ndarray  # pre-activation
    R: np.ndarray  # relu(H)
    Z: np.ndarray  # W2 relu(H)
    U: np.ndarray  # unit embedding
    znorm: np.ndarray
    zok: np.ndarray


def forward_inputs(model: EmbeddingModel, X) -> InputCache:
    X = as_csr(X, model.d)
    H = np.asarray(X @ model.W1, dtype=model.dtype)
    R = np.maximum(H, 0)
    Z = R @ model.W2.T
    U, znorm, zok = _normalize_rows(Z)
    return InputCache(X, H, R, Z, U, znorm, zok)


def embed_input(model: EmbeddingModel, x) -> np.ndarray:
    """``normalize(W2 relu(W1^T x))`` for one example."""
    return forward_inputs(model, x).U[0]


def normalized_classes(model: EmbeddingModel, ids=None) -> np.ndarray:
    if ids is None:
        return _normalize_rows(model.C)[0]
    return _normalize_rows(model.class_rows(np.asarray(ids)))[0]


def score_classes(model: EmbeddingModel, x, candidates) -> np.ndarray:
    """Scores of ``candidates`` (aligned with the given order); touches only those rows."""
    u = embed_input(model, x)
    return normalized_classes(model, np.asarray(candidates, dtype=np.int64)) @ u


def score_all(model: EmbeddingModel, x) -> np.ndarray:
    return score_matrix(model, x)[0]


def score_matrix(model: EmbeddingModel, X, Chat: np.ndarray | None = None) -> np.ndarray:
    """Dense ``(rows, K)`` scores; pass a precomputed ``Chat`` to reuse normalised classes."""
    U = forward_inputs(model, X).U
    if Chat is None:
        Chat = normalized_classes(model)
    return U @ Chat.T


@dataclass
class ModelGrad:
    """Sparse parameter gradient: rows of W1 and C are listed by id."""

    w1_rows: np.ndarray
    dW1: np.ndarray
    dW2: np.ndarray
    c_rows: np.ndarray
    dC: np.ndarray

    def dense(self, model: EmbeddingModel):
        g1 = np.zeros_like(model.W1)
        g1[self.w1_rows] = self.dW1
        gc = np.zeros_like(model.C)
        gc[self.c_rows] = self.dC
        return g1, self.dW2, gc


def candidate_forward(model: EmbeddingModel, cache: InputCache, ids: np.ndarray):
    """Scores for per-row candidate ids of shape ``(rows, n)``."""
    Cg = model.class_rows(ids)
    Chat, cnorm, cok = _normalize_rows(Cg)
    S = np.einsum("bne,be->bn", Chat, cache.U)
    return S, (Chat, cnorm, cok)


def candidate_backward(model: EmbeddingModel, cache: InputCache, ids: np.ndarray, ccache, dS: np.ndarray) -> ModelGrad:
    """Backpropagate score gradients ``dS`` (same shape as ``ids``) to the parameters.

    Only the W1 rows of features present in the batch and the C rows in
    ``ids`` receive entries.  ReLU passes no gradient at exactly zero.
    """
    Chat, cnorm, cok = ccache
    dS = np.asarray(dS, dtype=model.dtype)
    dU = np.einsum("bn,bne->be", dS, Chat)
    dChat = dS[..., None] * cache.U[:, None, :]
    dCg = _normalize_backward(Chat, cnorm, cok, dChat)

    flat_ids = ids.reshape(-1)
    c_rows, inv = np.unique(flat_ids, return_inverse=True)
    dC = np.zeros((len(c_rows), model.e), dtype=model.dtype)
    np.add.at(dC, inv, dCg.reshape(-1, model.e))

    dZ = _normalize_backward(cache.U, cache.znorm, cache.zok, dU)
    dW2 = dZ.T @ cache.R
    dH = (dZ @ model.W2) * (cache.H > 0)
    X = cache.X
    w1_rows = np.unique(X.indices)
    Xsub = X[:, w1_rows]
    dW1 = np.asarray(Xsub.T @ dH, dtype=model.dtype)
    return ModelGrad(w1_rows.astype(np.int64), dW1, dW2, c_rows, dC)


def backward(model: EmbeddingModel, x, class_ids, dscores) -> ModelGrad:
    """Parameter gradient for one example given ``d loss / d score`` per class id."""
    ids = np.asarray(class_ids, dtype=np.int64)[None, :]
    cache = forward_inputs(model, x)
    _, cc = candidate_forward(model, cache, ids)
    return candidate_backward(model, cache, ids, cc, np.asarray(dscores, dtype=float)[None, :])


def save_checkpoint(model: EmbeddingModel, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QQQ", model.d, model.e, model.K))
        for M in model.params():
            fh.write(np.ascontiguousarray(M, dtype="<f4").tobytes())


def load_checkpoint(path: str | os.PathLike, dtype=np.float64) -> EmbeddingModel:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes")
        raw = fh.read(24)
        if len(raw) != 24:
            raise CheckpointError(f"{path}: truncated header")
        d, e, K = struct.unpack("<QQQ", raw)
        if min(d, e, K) < 1:
            raise CheckpointError(f"{path}: invalid dimensions {d}x{e}x{K}")
        mats = []
        for shape in ((d, e), (e, e), (K, e)):
            n = shape[0] * shape[1]
            buf = fh.read(4 * n)
            if len(buf) != 4 * n:
                raise CheckpointError(f"{path}: truncated parameter block")
            mats.append(np.frombuffer(buf, dtype="<f4").reshape(shape).astype(dtype))
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after parameters")
    return EmbeddingModel(*mats)
