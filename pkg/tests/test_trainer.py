import numpy as np
import pytest

from bixse_lab import losses as L
from bixse_lab.data import make_batches
from bixse_lab.encoder import init_params
from bixse_lab.errors import ConfigInvalid, EmptyDataset, NeedsHardNegatives, NonFiniteGrad, ShapeMismatch
from bixse_lab.losses import LossKind
from bixse_lab.trainer import (ADAM_EPS, AdamState, TrainConfig, adam_step, batch_loss_and_grads,
                               batch_tensors, checkpoint_json, grad_check, load_checkpoint,
                               lr_at_step, save_checkpoint, scale_lr, train, warmup_steps)


def test_scale_lr_examples():
    assert scale_lr(0.1, 16) == 0.1
    assert scale_lr(0.1, 256) == pytest.approx(0.4, abs=1e-15)
    assert scale_lr(0.1, 64) == pytest.approx(0.2, abs=1e-15)


def test_schedule_shape():
    total, peak = 200, 0.5
    w = warmup_steps(total, 0.05)
    assert w == 10
    assert lr_at_step(0, total, peak) == 0.0
    assert lr_at_step(w, total, peak) == peak
    assert lr_at_step(total, total, peak) == 0.0
    lrs = np.array([lr_at_step(s, total, peak) for s in range(total + 1)])
    assert lrs.max() == peak
    assert np.all(np.abs(np.diff(lrs)) <= peak / w + 1e-15)


def test_adam_zero_grad_fixed_point():
    p = {"w": np.array([1.0, -2.0])}
    st = AdamState()
    adam_step(p, {"w": np.zeros(2)}, st, lr=0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    assert st.step == 1


@pytest.mark.parametrize("g", [0.3, -2.0, 1e-3])
def test_adam_first_step_closed_form(g):
    # after bias correction m/(1-b1) = g and sqrt(v/(1-b2)) = |g|
    lr = 0.01
    p = {"x": np.array(0.5)}
    adam_step(p, {"x": np.array(g)}, AdamState(), lr)
    assert float(p["x"]) == pytest.approx(0.5 - lr * g / (abs(g) + ADAM_EPS), abs=1e-15)


def test_adam_group_multiplier():
    p = {"table": np.array([0.0]), "beta": np.array(0.0)}
    adam_step(p, {"table": np.array([0.2]), "beta": np.array(0.2)}, AdamState(), 1e-4, {"beta": 100.0})
    assert float(p["beta"]) / p["table"][0] == pytest.approx(100.0, rel=1e-12)


def test_adam_errors():
    p = {"x": np.zeros(2)}
    with pytest.raises(ShapeMismatch):
        adam_step(p, {"x": np.zeros(3)}, AdamState(), 0.1)
    with pytest.raises(NonFiniteGrad):
        adam_step(p, {"x": np.array([np.nan, 0.0])}, AdamState(), 0.1)


def test_config_validation():
    with pytest.raises(ConfigInvalid):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigInvalid):
        TrainConfig(base_lr=-1.0)
    with pytest.raises(ConfigInvalid):
        TrainConfig(warmup_fraction=1.0)
    assert TrainConfig().lr > 0 and TrainConfig().beta_lr_multiplier == 100.0


def test_train_errors(reference):
    with pytest.raises(EmptyDataset):
        train([], TrainConfig())
    with pytest.raises(NeedsHardNegatives):
        train(reference.records[:64], TrainConfig(loss=LossKind.MARGIN_MSE, hard_negatives=0))


def test_first_batch_loss_matches_loss_module(reference):
    cfg = TrainConfig(loss=LossKind.BIXSE, epochs=1, batch_size=8, hard_negatives=1)
    recs = reference.records[:64]
    _, hist = train(recs, cfg)
    batch = make_batches(recs, 8, 1, seed=0)[0]
    bt = batch_tensors(batch)
    params = init_params(cfg.n_buckets, cfg.dim, seed=cfg.seed, alpha=cfg.alpha)
    from bixse_lab.encoder import encode_batch, score_matrix
    S = score_matrix(encode_batch(bt.queries, params), encode_batch(bt.docs, params), params)
    assert hist[0]["first_batch_loss"] == L.bixse(S, bt.Z).value


@pytest.mark.parametrize("kind", list(LossKind))
def test_training_reduces_loss(reference, kind):
    cfg = TrainConfig(loss=kind, hard_negatives=1, epochs=4)
    _, hist = train(reference.records, cfg)
    assert hist[-1]["loss"] < hist[0]["first_batch_loss"]


def test_bias_goes_negative_after_first_epoch(reference):
    _, hist = train(reference.records, TrainConfig(loss=LossKind.BIXSE, epochs=1))
    assert hist[0]["beta"] < 0


def test_bias_frozen_for_other_losses(reference):
    params, _ = train(reference.records[:256], TrainConfig(loss=LossKind.INFONCE, epochs=1))
    assert params.beta == 0.0 and params.alpha == 20.0


def test_training_is_deterministic(reference):
    cfg = TrainConfig(loss=LossKind.LAMBDA_NDCG2, epochs=1, hard_negatives=1)
    a, ha = train(reference.records[:512], cfg)
    b, hb = train(reference.records[:512], cfg)
    assert checkpoint_json(a) == checkpoint_json(b) and ha == hb


def test_validation_keeps_best(reference, reference_eval):
    cfg = TrainConfig(epochs=3)
    params, hist = train(reference.records[:512], cfg, validation=reference_eval)
    scores = [h["ndcg@10"] for h in hist]
    from bixse_lab.evaluation import evaluate_run
    got = evaluate_run(params, reference_eval.queries, reference_eval.corpus, reference_eval.qrels)["ndcg@10"]
    assert got == max(scores)


def test_grad_check_all_losses():
    rep = grad_check(K=2, B=3)
    assert set(rep) == {k.value for k in LossKind}
    for kind, r in rep.items():
        assert max(r["table"], r["alpha"], r["beta"]) < 1e-4, kind
        if kind != "bixse":
            assert r["dbeta"] == 0.0
    assert grad_check([LossKind.BIXSE], seed=3) == grad_check([LossKind.BIXSE], seed=3)


def test_checkpoint_round_trip(tmp_path):
    p = init_params(64, 8, seed=9, alpha=17.3, beta=-0.123456789123, hash_seed=2**63 + 5)
    p.table[0, 0] = np.nextafter(1.0, 2.0)
    save_checkpoint(p, tmp_path / "c.json")
    q = load_checkpoint(tmp_path / "c.json")
    np.testing.assert_array_equal(q.table, p.table)
    assert (q.alpha, q.beta, q.hash_seed) == (p.alpha, p.beta, p.hash_seed)
    assert checkpoint_json(q) == checkpoint_json(p)


def test_batch_grads_shapes(reference):
    cfg = TrainConfig(loss=LossKind.SOFT_INFONCE, hard_negatives=1)
    bt = batch_tensors(make_batches(reference.records[:16], 4, 1, 0)[0])
    res, g = batch_loss_and_grads(init_params(cfg.n_buckets, cfg.dim), bt, cfg)
    assert res.dS.shape == (4, 8) and g.table.shape == (cfg.n_buckets, cfg.dim)
