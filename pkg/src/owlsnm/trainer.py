"""SGD training of :class:`EmbeddingModel` with stochastic negative mining.

Each step samples one positive label per example, draws ``B`` negatives,
scores only those ``B + 1`` classes, and backpropagates the estimator's
gradient.  W1 and C take plain SGD steps at ``lr_embed``; W2 uses SGD with
momentum at ``lr_linear``.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from owlsnm.dataset import Dataset
from owlsnm.model import (
    EmbeddingModel,
    candidate_backward,
    candidate_forward,
    forward_inputs,
    init_model,
    normalized_classes,
    score_matrix,
)
from owlsnm.owl import LossKind
from owlsnm.phi import PhiSpec
from owlsnm.retrieval import MetricsReport, evaluate_metrics
from owlsnm.snm import SnmConfig, batch_loss_grad, sample_batch, vartheta_from_strategy

log = logging.getLogger(__name__)

# purposes for derived RNG streams
_ORDER, _POSITIVES, _CANDIDATES = 0, 1, 2


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr_embed: float = 1.0
    lr_linear: float = 0.05
    momentum: float = 0.9
    B: int = 50
    strategy: str = "topk:1"
    kind: LossKind = LossKind.BOWL
    phi: PhiSpec = field(default_factory=lambda: PhiSpec("hinge"))
    k: int = 1
    e: int = 64
    eval_every: int = 0
    eval_ks: tuple = (1, 3, 5)
    seed: int = 0
    resample_positives: str = "per_epoch"
    # multiplier on every strategy's vartheta; "mean" means B/(K-1)
    vartheta_scale: object = "mean"

    def __post_init__(self):
        self.kind = LossKind.coerce(self.kind)
        if isinstance(self.phi, str):
            self.phi = PhiSpec.parse(self.phi)
        if isinstance(self.eval_ks, str):
            self.eval_ks = tuple(int(t) for t in self.eval_ks.split(",") if t)
        self.eval_ks = tuple(self.eval_ks)
        if self.epochs < 0 or self.batch_size < 1 or self.B < 1 or self.e < 1:
            raise ValueError("epochs, batch_size, B and e must be positive")
        if not (self.lr_embed > 0 and self.lr_linear > 0):
            raise ValueError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.vartheta_scale != "mean" and not float(self.vartheta_scale) > 0:
            raise ValueError("vartheta_scale must be 'mean' or a positive number")
        if self.resample_positives not in ("once", "per_epoch"):
            raise ValueError("resample_positives must be 'once' or 'per_epoch'")

    def snm_config(self, K: int) -> SnmConfig:
        if self.B > K - 1:
            raise ValueError(f"B = {self.B} exceeds K - 1 = {K - 1}")
        w = vartheta_from_strategy(self.strategy, K, self.B, self.k)
        return SnmConfig(self.B, w * self.scale_for(K), self.kind, self.k)

    def scale_for(self, K: int) -> float:
        """Common factor applied to vartheta.

        The default ``B/(K-1)`` turns top-k SNM into the plain average of the
        k mined negatives' losses.  Every strategy gets the same factor, so
        their relative weights are unchanged.
        """
        if self.vartheta_scale == "mean":
            return self.B / (K - 1)
        return float(self.vartheta_scale)

    @classmethod
    def from_mapping(cls, items: dict) -> "TrainConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        rho = items.get("rho")
        for key, raw in items.items():
            if key == "rho":
                continue
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            if key == "phi":
                kw[key] = PhiSpec.parse(f"{raw} rho={rho}" if rho is not None else str(raw))
            elif key in ("epochs", "batch_size", "B", "k", "e", "eval_every", "seed"):
                kw[key] = int(raw)
            elif key in ("lr_embed", "lr_linear", "momentum"):
                kw[key] = float(raw)
            else:
                kw[key] = raw
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_mapping(read_config_items(path))


def read_config_items(path) -> dict[str, str]:
    """Read flat ``key=value`` lines; ``#`` starts a comment."""
    items = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{n}: expected key=value")
            items[key.strip()] = val.strip()
    return items


def stream(seed: int, epoch: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(epoch, purpose)))


class Optimizer:
    """Plain SGD on W1 and C rows, momentum SGD on W2."""

    def __init__(self, model: EmbeddingModel, cfg: TrainConfig):
        self.cfg = cfg
        self.velocity = np.zeros_like(model.W2)

    def apply(self, model: EmbeddingModel, grad, scale: float) -> None:
        lr = self.cfg.lr_embed * scale
        model.W1[grad.w1_rows] -= (lr * grad.dW1).astype(model.dtype, copy=False)
        model.C[grad.c_rows] -= (lr * grad.dC).astype(model.dtype, copy=False)
        self.velocity *= self.cfg.momentum
        self.velocity += scale * grad.dW2
        model.W2 -= self.cfg.lr_linear * self.velocity


def train_step(model: EmbeddingModel, opt: Optimizer, snm: SnmConfig, phi: PhiSpec, X, ys, rng) -> float:
    """One SGD step on a batch; returns the mean estimator loss."""
    ys = np.asarray(ys, dtype=np.int64)
    negs = sample_batch(snm, model.K, ys, rng)
    ids = np.concatenate([ys[:, None], negs], axis=1)
    cache = forward_inputs(model, X)
    S, cc = candidate_forward(model, cache, ids)
    loss, d_pos, d_neg = batch_loss_grad(snm, phi, S[:, 0].astype(float), negs, S[:, 1:].astype(float))
    if not np.all(np.isfinite(loss)):
        raise TrainingError(f"non-finite loss; scores range [{S.min()}, {S.max()}]")
    dS = np.concatenate([d_pos[:, None], d_neg], axis=1)
    grad = candidate_backward(model, cache, ids, cc, dS)
    opt.apply(model, grad, 1.0 / len(ys))
    return float(loss.mean())


@dataclass
class Snapshot:
    step: int
    epoch: int
    train_loss: float
    report: MetricsReport


def evaluate(model: EmbeddingModel, dataset: Dataset, ks: Sequence[int], seed: int = 0) -> MetricsReport:
    """Full-score evaluation of every example."""
    if dataset.n_labels > model.K:
        raise ValueError(f"dataset has {dataset.n_labels} labels but the model only {model.K}")
    Chat = normalized_classes(model)
    return evaluate_metrics(lambda Xb: score_matrix(model, Xb, Chat), dataset, ks, seed=seed)


def train(
    dataset: Dataset,
    model: EmbeddingModel,
    cfg: TrainConfig,
    eval_data: Dataset | None = None,
) -> tuple[EmbeddingModel, list[Snapshot]]:
    """Train ``model`` in place; deterministic given ``cfg.seed``.

    Snapshots are evaluated on ``eval_data`` (training data when omitted)
    every ``cfg.eval_every`` steps and once at the end.
    """
    if dataset.n_labels > model.K or dataset.n_features != model.d:
        raise ValueError(
            f"dataset is {dataset.n_features} features x {dataset.n_labels} labels, "
            f"model is {model.d} x {model.K}"
        )
    history: list[Snapshot] = []
    if cfg.epochs == 0 or dataset.n_examples == 0:
        return model, history
    snm = cfg.snm_config(model.K)
    opt = Optimizer(model, cfg)
    eval_data = eval_data if eval_data is not None else dataset
    n = dataset.n_examples
    step = 0
    running = []
    positives = None
    for epoch in range(cfg.epochs):
        if positives is None or cfg.resample_positives == "per_epoch":
            positives = dataset.sample_positives(stream(cfg.seed, epoch, _POSITIVES))
        order = stream(cfg.seed, epoch, _ORDER).permutation(n)
        cand_rng = stream(cfg.seed, epoch, _CANDIDATES)
        for a in range(0, n, cfg.batch_size):
            rows = np.sort(order[a : a + cfg.batch_size])
            running.append(train_step(model, opt, snm, cfg.phi, dataset.X[rows], positives[rows], cand_rng))
            step += 1
            if cfg.eval_every and step % cfg.eval_every == 0:
                history.append(Snapshot(step, epoch, float(np.mean(running)), evaluate(model, eval_data, cfg.eval_ks)))
                running = []
        log.info("epoch %d done, mean loss %.4f", epoch, float(np.mean(running)) if running else math.nan)
    if not history or history[-1].step != step:
        history.append(Snapshot(step, cfg.epochs - 1, float(np.mean(running)) if running else math.nan,
                                evaluate(model, eval_data, cfg.eval_ks)))
    return model, history


@dataclass
class Comparison:
    """Per-(strategy, seed) reports plus rows normalised by the baseline strategy."""

    strategies: list[str]
    seeds: list[int]
    ks: list[int]
    baseline: str
    reports: dict  # (strategy, seed) -> MetricsReport

    def ratio(self, strategy: str, seed: int, k: int, metric: str = "recall") -> float:
        attr = "recall_at" if metric == "recall" else "precision_at"
        num = getattr(self.reports[(strategy, seed)], attr)[k]
        den = getattr(self.reports[(self.baseline, seed)], attr)[k]
        if den == 0:
            return 1.0 if num == 0 else math.inf
        return num / den

    def rows(self) -> list[dict]:
        out = []
        for s in self.strategies:
            for k in self.ks:
                rec = [self.reports[(s, sd)].recall_at[k] for sd in self.seeds]
                pre = [self.reports[(s, sd)].precision_at[k] for sd in self.seeds]
                out.append(
                    {
                        "strategy": s,
                        "k": k,
                        "recall": float(np.mean(rec)),
                        "precision": float(np.mean(pre)),
                        "recall_ratio": float(np.mean([self.ratio(s, sd, k, "recall") for sd in self.seeds])),
                        "precision_ratio": float(np.mean([self.ratio(s, sd, k, "precision") for sd in self.seeds])),
                        "seeds": len(self.seeds),
                    }
                )
        return out


def compare_strategies(
    train_data: Dataset,
    test_data: Dataset,
    base_cfg: TrainConfig,
    strategies: Sequence[str],
    seeds: Sequence[int],
    ks: Sequence[int] = (1, 3, 5),
    baseline: str | None = None,
) -> Comparison:
    """Train one model per (strategy, seed); every strategy starts from the same init per seed.

    The baseline defaults to ``negsample`` when present, else the first strategy.
    """
    strategies = list(strategies)
    if not strategies:
        raise ValueError("no strategies to compare")
    baseline = baseline or ("negsample" if "negsample" in strategies else strategies[0])
    if baseline not in strategies:
        raise ValueError(f"baseline {baseline!r} is not among the strategies")
    ks = sorted(set(ks))
    reports = {}
    for sd in seeds:
        init = init_model(train_data.n_features, base_cfg.e, train_data.n_labels, seed=sd)
        for s in strategies:
            cfg = dataclasses.replace(base_cfg, strategy=s, seed=sd, eval_every=0, eval_ks=tuple(ks))
            _, history = train(train_data, init.copy(), cfg, eval_data=test_data)
            reports[(s, sd)] = history[-1].report
            log.info("seed %d %s R@%d=%.4f", sd, s, ks[0], reports[(s, sd)].recall_at[ks[0]])
    return Comparison(strategies, list(seeds), ks, baseline, reports)
