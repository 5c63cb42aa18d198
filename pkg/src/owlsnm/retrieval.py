"""Top-k prediction, the 0/1 retrieval loss, margins, and Recall@k / Precision@k."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class StreamingTopK:
    """Bounded min-heap holding the ``k`` best ``(score, id)`` pairs seen so far.

    Higher score wins; equal scores prefer the smaller id.  The heap root is
    the current worst member, so an item that cannot beat it is rejected
    with one comparison.  Until more than ``k`` items have arrived they are
    kept as numpy blocks and the heap is only built once it has to
    arbitrate.
    """

    def __init__(self, k: int):
        if k < 0:
            raise ValueError("k must be non-negative")
        self.k = k
        self._heap: list[tuple[float, int]] = []  # (score, -id): root is the worst
        self._blocks: list[tuple[np.ndarray, np.ndarray]] = []  # (ids, scores) before the heap exists
        self._buffered = 0

    def push(self, cid: int, score: float) -> None:
        self.push_chunk(np.array([cid]), np.array([score]))

    def _build_heap(self) -> None:
        for ids, scores in self._blocks:
            self._heap.extend(zip(scores.tolist(), (-ids).tolist()))
        heapq.heapify(self._heap)
        self._blocks, self._buffered = [], 0

    def push_chunk(self, ids: np.ndarray, scores: np.ndarray) -> None:
        """Offer many items; survivors of a vectorised test against the root enter best first."""
        ids = np.asarray(ids, dtype=np.int64)
        scores = np.asarray(scores, dtype=float)
        if not self.k or not len(ids):
            return
        room = self.k - self._buffered - len(self._heap)
        if room > 0:
            self._blocks.append((ids[:room], scores[:room]))
            self._buffered += len(self._blocks[-1][0])
            ids, scores = ids[room:], scores[room:]
            if not len(ids):
                return
        if self._blocks:
            self._build_heap()
        heap = self._heap
        s0, negid = heap[0]
        keep = (scores > s0) | ((scores == s0) & (ids < -negid))
        ids, scores = ids[keep], scores[keep]
        if len(ids) > self.k:
            # at most k survivors can stay; ties at the cut are kept for the id order
            cut = np.partition(scores, len(scores) - self.k)[len(scores) - self.k]
            keep = scores >= cut
            ids, scores = ids[keep], scores[keep]
        order = np.lexsort((ids, -scores))
        for s, c in zip(scores[order].tolist(), ids[order].tolist()):
            item = (s, -c)
            if not item > heap[0]:
                break
            heapq.heapreplace(heap, item)

    def result(self) -> np.ndarray:
        """Member ids, best first."""
        if self._blocks:
            ids = np.concatenate([b[0] for b in self._blocks])
            scores = np.concatenate([b[1] for b in self._blocks])
        elif self._heap:
            s, n = zip(*self._heap)
            scores, ids = np.array(s), -np.array(n, dtype=np.int64)
        else:
            return np.empty(0, dtype=np.int64)
        return ids[np.lexsort((ids, -scores))]


def top_k(v, k: int, chunk: int = 65536) -> np.ndarray:
    """Ids of the ``k`` largest scores, best first; ties go to the smaller id.

    Runs in ``O(K log k)`` through :class:`StreamingTopK`.
    """
    v = np.asarray(v, dtype=float)
    K = len(v)
    if not 0 <= k <= K:
        raise ValueError(f"k = {k} must lie in [0, {K}]")
    heap = StreamingTopK(k)
    for a in range(0, K, chunk):
        heap.push_chunk(np.arange(a, min(a + chunk, K)), v[a : a + chunk])
    return heap.result()


def top_k_rows(S: np.ndarray, k: int) -> np.ndarray:
    """Row-wise :func:`top_k` for a dense score matrix."""
    S = np.asarray(S, dtype=float)
    K = S.shape[1]
    if k > K:
        raise ValueError(f"k = {k} exceeds K = {K}")
    if k < K // 8:
        # candidates: everything at least as large as the k-th value of its row
        kth = -np.partition(-S, k - 1, axis=1)[:, k - 1 : k]
        out = np.empty((S.shape[0], k), dtype=np.int64)
        for r in range(S.shape[0]):
            cand = np.flatnonzero(S[r] >= kth[r])
            out[r] = cand[np.argsort(-S[r, cand], kind="stable")[:k]]
        return out
    return np.argsort(-S, axis=1, kind="stable")[:, :k]


def retrieval_loss(S, y: int) -> int:
    """1 when ``y`` is missing from the predicted set."""
    return int(int(y) not in set(np.asarray(S).tolist()))


def margin(v, y: int, k: int) -> float:
    """``v_y`` minus the k-th largest score among the other classes."""
    v = np.asarray(v, dtype=float)
    K = len(v)
    if not 1 <= k <= K - 1:
        raise ValueError(f"k = {k} must lie in [1, {K - 1}]")
    rest = np.delete(v, y)
    return float(v[y] - np.partition(rest, K - 1 - k)[K - 1 - k])


def margin_risk(scores: Sequence, labels: Sequence[int], k: int, rho: float) -> float:
    """Fraction of examples whose margin is at most ``rho``.

    A tie at rank ``k`` gives margin 0, so it counts as an error at ``rho = 0``.
    """
    if rho < 0:
        raise ValueError("rho must be non-negative")
    hits = [margin(v, y, k) <= rho for v, y in zip(scores, labels)]
    return float(np.mean(hits)) if hits else 0.0


@dataclass
class MetricsReport:
    """Averages over ``n_examples``; ``retrieval_error[k]`` is the 0/1 loss at size k."""

    recall_at: dict[int, float] = field(default_factory=dict)
    precision_at: dict[int, float] = field(default_factory=dict)
    retrieval_error: dict[int, float] = field(default_factory=dict)
    n_examples: int = 0

    @property
    def ks(self) -> list[int]:
        return sorted(self.recall_at)

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        n = self.n_examples + other.n_examples
        if n == 0:
            return MetricsReport()
        if self.n_examples and other.n_examples and self.ks != other.ks:
            raise ValueError("cannot merge reports over different k values")

        def avg(a, b):
            keys = a.keys() | b.keys()
            return {k: (a.get(k, 0.0) * self.n_examples + b.get(k, 0.0) * other.n_examples) / n for k in sorted(keys)}

        return MetricsReport(
            avg(self.recall_at, other.recall_at),
            avg(self.precision_at, other.precision_at),
            avg(self.retrieval_error, other.retrieval_error),
            n,
        )

    def rows(self, **extra) -> list[dict]:
        return [
            {
                **extra,
                "k": k,
                "recall": self.recall_at[k],
                "precision": self.precision_at[k],
                "retrieval_error": self.retrieval_error[k],
                "n": self.n_examples,
            }
            for k in self.ks
        ]

    def to_json_lines(self, **extra) -> str:
        return "\n".join(json.dumps(r) for r in self.rows(**extra))


def evaluate_metrics(
    scorer: Callable[[object], np.ndarray],
    dataset,
    ks: Sequence[int],
    seed: int = 0,
    batch_size: int = 1024,
) -> MetricsReport:
    """Recall@k and Precision@k against each example's full label set.

    ``scorer`` maps a CSR block of feature rows to a dense ``(rows, K)``
    score matrix.  ``retrieval_error`` uses one positive per example drawn
    with ``seed``.
    """
    n = dataset.n_examples
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    ks = sorted(set(int(k) for k in ks))
    kmax = ks[-1]
    positives = dataset.sample_positives(np.random.default_rng(seed))
    rec = dict.fromkeys(ks, 0.0)
    prec = dict.fromkeys(ks, 0.0)
    err = dict.fromkeys(ks, 0.0)
    for a in range(0, n, batch_size):
        b = min(a + batch_size, n)
        top = top_k_rows(scorer(dataset.X[a:b]), kmax)
        for r in range(b - a):
            labels = dataset.labels_of(a + r)
            hit = np.isin(top[r], labels)
            where_pos = np.flatnonzero(top[r] == positives[a + r])
            pos_rank = where_pos[0] if len(where_pos) else kmax
            csum = np.cumsum(hit)
            for k in ks:
                c = csum[k - 1]
                rec[k] += c / len(labels)
                prec[k] += c / k
                err[k] += pos_rank >= k
    return MetricsReport(
        {k: rec[k] / n for k in ks},
        {k: prec[k] / n for k in ks},
        {k: err[k] / n for k in ks},
        n,
    )
