"""End-to-end network: forwards, losses, predictions, checkpoints."""

import math

import numpy as np
import pytest
from scipy import stats

from conftest import random_batch, tiny_config
from tokenflow import tensor as T
from tokenflow.config import desk_config
from tokenflow.model import (BeamPrediction, encode_infer, encode_train, forward_infer,
                             forward_train, init_model, load_checkpoint, named_parameters,
                             parameter_count, predict, save_checkpoint, task_loss,
                             total_loss)
from tokenflow.routing import block_delta, select_topk, score_tokens
from tokenflow.tensor import Tensor, grad_check
from tokenflow.tokenizers import assemble_batch, count_tokens


def _setup(seed=0, b=2, **overrides):
    cfg = tiny_config(**overrides)
    rng = np.random.default_rng(seed)
    params = init_model(cfg, rng)
    batch = random_batch(rng, cfg, b)
    return cfg, params, batch


def test_forward_train_shapes_and_diagnostics():
    cfg, params, batch = _setup(b=3)
    logits, r_avg, diags = forward_train(batch, params, cfg)
    assert logits.shape == (3, cfg.num_classes)
    assert r_avg == 1.0
    assert len(diags) == cfg.blocks
    n = count_tokens(cfg)
    for d in diags:
        assert 1 <= d.k_down <= d.k_up <= n


def test_desk_config_forward():
    cfg = desk_config("beam")
    rng = np.random.default_rng(1)
    params = init_model(cfg, rng)
    batch = random_batch(rng, cfg, 2)
    logits, _, _ = forward_train(batch, params, cfg)
    assert logits.shape == (2, 16)
    assert np.isfinite(logits.data).all()


def test_full_width_equals_ungated_reference():
    cfg, params, batch = _setup(seed=2)
    seq = assemble_batch(batch, params.tokenizer, cfg)
    logits, _, _ = forward_train(batch, params, cfg)

    # same network written out longhand: every token gated and processed
    x = seq.tokens
    b, n, _ = x.shape
    for block in params.blocks:
        scores = score_tokens(x, block.router)
        gates = T.reshape(scores, (b, n, 1))
        x = T.add(x, T.mul(gates, block_delta(x, block, cfg.heads)))
    cls = T.layernorm(T.gather_rows(x, np.zeros((b, 1), dtype=np.int64)),
                      params.ln_f_g, params.ln_f_b)
    ref = T.linear(T.reshape(cls, (b, cfg.d)), params.head_w, params.head_b)
    np.testing.assert_allclose(logits.data, ref.data, rtol=1e-10, atol=1e-12)


def test_infer_matches_train_on_lattice_ratios():
    cfg, params, batch = _setup(seed=3)
    n = count_tokens(cfg)  # 25 for the tiny config
    assert n == 25
    params.keep.ratios[0].data = np.array([0.4])   # 10 tokens exactly
    params.keep.ratios[1].data = np.array([0.8])   # 20 tokens exactly
    train_logits, _, diags = forward_train(batch, params, cfg)
    assert all(d.k_down == d.k_up or d.w_up == 0.0 for d in diags)
    infer_logits = forward_infer(batch, params, cfg)
    assert np.max(np.abs(train_logits.data - infer_logits.data)) <= 1e-6


def test_infer_rejects_wrong_ratio_count():
    cfg, params, batch = _setup(seed=4)
    with pytest.raises(ValueError, match="ratios for"):
        forward_infer(batch, params, cfg, ratios=[0.5])


def test_end_to_end_gradients_tiny():
    # 10 tokens, d=8, two blocks, one ratio mid-bracket
    cfg = tiny_config()
    rng = np.random.default_rng(5)
    params = init_model(cfg, rng)
    params.keep.ratios[0].data = np.array([0.55])
    tokens = Tensor(rng.normal(size=(2, 10, cfg.d)), requires_grad=True)
    targets = np.array([1, 3])

    def f(*_):
        logits, _ = encode_train(tokens, params, cfg)
        return task_loss(logits, targets, cfg)

    picked = [tokens, params.keep.ratios[0], params.head_w, params.ln_f_g,
              params.blocks[0].router.w1, params.blocks[0].wq, params.blocks[1].w_out]
    # far-upstream coordinates carry ~1e-9 gradients; a wider step keeps the
    # difference quotient above float roundoff there
    err = grad_check(f, picked, step=1e-3, max_coords=25, rng=np.random.default_rng(0))
    assert err < 1e-4


def test_loss_closed_forms():
    cfg = tiny_config(num_classes=8)
    logits = Tensor(np.zeros((4, 8)))
    targets = np.array([0, 3, 5, 7])
    assert float(task_loss(logits, targets, cfg).data) == pytest.approx(math.log(8))

    hcfg = tiny_config(task="handover", modalities=("image", "rssi"))
    bce = task_loss(Tensor(np.zeros((2, 1))), np.ones((2, 1)), hcfg)
    assert float(bce.data) == pytest.approx(math.log(2))


def test_total_loss_is_task_plus_penalty():
    cfg, params, _ = _setup(seed=6)
    params.keep.gamma_prime = 0.3
    params.keep.ratios[0].data = np.array([0.7])
    params.keep.ratios[1].data = np.array([0.9])
    # a huge margin drives the task term to zero, leaving only the penalty
    logits = Tensor(np.full((2, cfg.num_classes), -50.0))
    logits.data[np.arange(2), [1, 2]] = 50.0
    total = total_loss(logits, np.array([1, 2]), params.keep, cfg)
    assert float(total.data) == pytest.approx(10.0 * (0.8 - 0.3) ** 2, abs=1e-12)


def test_predict_beam_examples():
    pred = predict(np.array([[0.1, 2.0, -1.0]]), "beam")
    assert isinstance(pred, BeamPrediction)
    assert pred.top1.tolist() == [1]
    assert pred.top3.tolist() == [[1, 0, 2]]
    assert pred.top5.shape == (1, 3)  # clamped to the class count

    four = predict(np.array([[0.4, 0.1, 0.2, 0.3]]), "beam")
    assert sorted(four.top5[0].tolist()) == [0, 1, 2, 3]


def test_predict_rankings_nest():
    rng = np.random.default_rng(7)
    pred = predict(rng.normal(size=(50, 9)), "beam")
    for i in range(50):
        assert pred.top1[i] == pred.top3[i][0]
        assert set(pred.top3[i]) <= set(pred.top5[i])


def test_predict_handover_boundary():
    out = predict(np.array([[0.0, 1e-9, -1e-9, 3.0]]), "handover")
    assert out.tolist() == [[0, 1, 0, 1]]


def test_predict_validation():
    with pytest.raises(ValueError, match="non-finite"):
        predict(np.array([[np.nan, 1.0]]), "beam")
    with pytest.raises(ValueError, match="unknown task"):
        predict(np.array([[1.0]]), "segmentation")


def test_named_parameters_cover_all_pieces():
    cfg, params, _ = _setup(seed=8)
    names = [n for n, _ in named_parameters(params)]
    assert len(names) == len(set(names))
    assert "head_w" in names and "ln_f_g" in names
    assert "keep.ratios.0" in names and "keep.ratios.1" in names
    assert "blocks.0.router.w1" in names and "blocks.1.wq" in names
    assert any(n.startswith("tokenizer.") for n in names)
    assert parameter_count(params) == sum(t.data.size for _, t in named_parameters(params))

    again = init_model(cfg, np.random.default_rng(8))
    assert [n for n, _ in named_parameters(again)] == names
    for (_, a), (_, b) in zip(named_parameters(params), named_parameters(again)):
        assert np.array_equal(a.data, b.data)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cfg, params, batch = _setup(seed=9)
    params.keep.ratios[0].data = np.array([0.37])
    before = forward_infer(batch, params, cfg).data.copy()
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, params, cfg)
    loaded, cfg2 = load_checkpoint(path)
    assert cfg2 == cfg
    for (na, a), (nb, b) in zip(named_parameters(params), named_parameters(loaded)):
        assert na == nb
        assert np.array_equal(a.data, b.data)
    after = forward_infer(batch, loaded, cfg2).data
    assert np.array_equal(before, after)


def test_checkpoint_error_cases(tmp_path):
    cfg, params, _ = _setup(seed=10)
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, params, cfg)
    blob = open(path, "rb").read()

    bad = tmp_path / "bad_magic.ckpt"
    bad.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError, match="bad checkpoint magic"):
        load_checkpoint(str(bad))

    short = tmp_path / "short.ckpt"
    short.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(str(short))

    trailing = tmp_path / "trailing.ckpt"
    trailing.write_bytes(blob + b"\x00")
    with pytest.raises(ValueError, match="trailing bytes"):
        load_checkpoint(str(trailing))


def test_random_routing_selects_uniformly():
    # router-frozen ablation: fresh uniform scores each call, CLS pinned
    from tokenflow.model import _block_scores

    cfg, params, _ = _setup(seed=11)
    rng = np.random.default_rng(123)
    x = Tensor(np.random.default_rng(0).normal(size=(1, 25, cfg.d)))
    k, draws = 5, 1000
    counts = np.zeros(25)
    for _ in range(draws):
        scores = _block_scores(x, params.blocks[0], rng)
        sel = select_topk(scores, k).selected(k)[0]
        assert sel[0] == 0
        counts[sel] += 1
    assert counts[0] == draws
    body = counts[1:]
    expected = draws * (k - 1) / 24.0
    chi2 = float(np.sum((body - expected) ** 2 / expected))
    assert chi2 < stats.chi2.ppf(0.999, df=23)


def test_random_routing_changes_between_forwards():
    cfg, params, batch = _setup(seed=12)
    rng = np.random.default_rng(7)
    a = forward_infer(batch, params, cfg, random_rng=rng, ratios=[0.3, 0.3]).data
    b = forward_infer(batch, params, cfg, random_rng=rng, ratios=[0.3, 0.3]).data
    assert not np.array_equal(a, b)
