import math

import numpy as np
import pytest

from owlsnm.dataset import make_synthetic, synthetic_prototypes
from owlsnm.model import init_model, save_checkpoint
from owlsnm.phi import PhiSpec
from owlsnm.retrieval import evaluate_metrics
from owlsnm.snm import make_topk_vartheta
from owlsnm.trainer import (
    Optimizer,
    TrainConfig,
    compare_strategies,
    evaluate,
    train,
    train_step,
)


@pytest.fixture(scope="module")
def small():
    return make_synthetic(K=30, d=40, n=1500, noise=0.2, seed=0)


def test_zero_epochs_returns_model_untouched(small):
    tr, _ = small
    m = init_model(tr.n_features, 8, tr.n_labels, seed=0)
    before = m.copy()
    out, hist = train(tr, m, TrainConfig(epochs=0, e=8, B=5))
    assert out.equals(before) and hist == []


def test_same_seed_gives_identical_checkpoints(small, tmp_path):
    tr, te = small
    cfg = TrainConfig(epochs=2, e=8, B=5, seed=3)
    paths = []
    for i in range(2):
        m, _ = train(tr, init_model(tr.n_features, 8, tr.n_labels, seed=3), cfg, eval_data=te)
        paths.append(tmp_path / f"{i}.bin")
        save_checkpoint(m, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_learning_progress():
    tr, te = make_synthetic(K=100, d=50, n=5000, noise=0.1, seed=1)
    m = init_model(50, 32, 100, seed=1)
    before = evaluate(m, te, [1]).recall_at[1]
    cfg = TrainConfig(epochs=10, B=20, strategy="topk:1", e=32, seed=1)
    _, hist = train(tr, m, cfg, eval_data=te)
    after = hist[-1].report.recall_at[1]
    assert after > before
    assert after > 0.5


def test_random_model_is_at_chance():
    # class rows are exchangeable at init, so averaged over seeds P(top-1 == y) = 1/K exactly
    K = 50
    _, te = make_synthetic(K=K, d=60, n=2000, noise=0.3, seed=2)
    recs = np.array([evaluate(init_model(60, 16, K, seed=s), te, [1]).recall_at[1] for s in range(300)])
    se = recs.std(ddof=1) / math.sqrt(len(recs))
    assert abs(recs.mean() - 1 / K) < 4 * se


def test_perfect_scorer_on_noise_free_data():
    K, d = 25, 40
    _, te = make_synthetic(K, d, 800, 0.0, seed=4)
    P = synthetic_prototypes(K, d, seed=4)
    rep = evaluate_metrics(lambda Xb: Xb @ P.T, te, [1, 3])
    assert rep.recall_at[1] == 1.0
    assert evaluate_metrics(lambda Xb: Xb @ P.T, te, [1, 3]) == rep


def test_step_touches_only_sampled_classes(small):
    tr, _ = small
    m = init_model(tr.n_features, 8, tr.n_labels, seed=0)
    cfg = TrainConfig(B=6, e=8)
    snm = cfg.snm_config(m.K)
    opt = Optimizer(m, cfg)
    before = m.C.copy()
    rows = np.arange(4)
    ys = tr.sample_positives(np.random.default_rng(0))[rows]
    m.class_rows_read = 0
    train_step(m, opt, snm, cfg.phi, tr.X[rows], ys, np.random.default_rng(1))
    assert m.class_rows_read == 4 * (6 + 1)
    changed = np.flatnonzero(np.any(m.C != before, axis=1))
    assert len(changed) <= 4 * (6 + 1)


def test_vartheta_scaling():
    cfg = TrainConfig(B=10, strategy="topk:2")
    np.testing.assert_allclose(cfg.snm_config(101).vartheta, make_topk_vartheta(101, 10, 2) * 10 / 100)
    raw = TrainConfig(B=10, strategy="topk:2", vartheta_scale=1.0)
    np.testing.assert_allclose(raw.snm_config(101).vartheta, make_topk_vartheta(101, 10, 2))
    with pytest.raises(ValueError):
        TrainConfig(B=200).snm_config(101)


def test_config_file(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text("# comment\nepochs = 3\nphi=ramp\nrho=0.25\nkind=powl\neval_ks=1,10\nstrategy=negsample\n")
    cfg = TrainConfig.from_file(p)
    assert cfg.epochs == 3 and cfg.phi == PhiSpec("ramp", 0.25) and cfg.kind.value == "powl"
    assert cfg.eval_ks == (1, 10) and cfg.strategy == "negsample"
    p.write_text("bogus=1\n")
    with pytest.raises(ValueError):
        TrainConfig.from_file(p)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)


def test_eval_every_snapshots(small):
    tr, te = small
    cfg = TrainConfig(epochs=2, e=8, B=5, batch_size=100, eval_every=5, eval_ks=(1, 2))
    _, hist = train(tr, init_model(tr.n_features, 8, tr.n_labels, seed=0), cfg, eval_data=te)
    steps = [h.step for h in hist]
    assert steps == [5, 10, 15, 20, 24]
    assert hist[-1].report.ks == [1, 2]


def test_comparison_self_normalises(small):
    tr, te = small
    base = TrainConfig(epochs=1, e=8, B=5)
    comp = compare_strategies(tr, te, base, ["negsample"], seeds=[0, 1], ks=[1, 3])
    rows = comp.rows()
    assert len(rows) == 2
    assert all(r["recall_ratio"] == 1.0 and r["precision_ratio"] == 1.0 for r in rows)
    comp2 = compare_strategies(tr, te, base, ["topk:1", "negsample"], seeds=[0], ks=[1, 3, 5])
    assert len(comp2.rows()) == 2 * 3
