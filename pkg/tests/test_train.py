import numpy as np
import pytest

import tokenflow.model
from tokenflow.config import ModelConfig
from tokenflow.data import build_dataset, load_dataset
from tokenflow.model import forward_infer, init_model, named_parameters
from tokenflow.scenegen import ScenarioConfig, splitmix64
from tokenflow.tokenizers import count_tokens
from tokenflow.train import (Batcher, TrainSettings, benchmark, evaluate,
                             parameter_groups, resolve_gamma_prime, train_model)


def train_config(task="beam", **overrides):
    kwargs = dict(task=task, d=16, blocks=2, heads=2, d_ff=32, d_router=8, tau=5,
                  modalities=("image", "pointcloud", "radar", "gps"), img_hw=64,
                  bev_hw=32, n_rad=4, conv_width=2, scalar_hidden=8, num_classes=16)
    if task == "handover":
        kwargs["modalities"] = ("image", "pointcloud", "radar", "rssi")
        kwargs["num_classes"] = 16
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


@pytest.fixture(scope="module")
def beam_data(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("train") / "beam")
    build_dataset(ScenarioConfig(task="beam", frames=40, tau=5), out, 3, seed=11)
    return load_dataset(out)


@pytest.fixture(scope="module")
def handover_data(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("train") / "ho")
    build_dataset(ScenarioConfig(task="handover", frames=40, tau=5,
                                 blocker_prob=1.0), out, 3, seed=13)
    return load_dataset(out)


def spaced_indices(dataset, stride=7, count=16):
    per = dataset.manifest["scenario_config"]["frames"] - \
        dataset.manifest["scenario_config"]["tau"]
    return [i for i in range(len(dataset)) if (i % per) % stride == 0][:count]


def test_overfits_spaced_windows(beam_data):
    config = train_config()
    idx = spaced_indices(beam_data)
    settings = TrainSettings(epochs=60, batch_size=8, lr=2e-3, gamma_prime=1.0,
                             seed=1)
    params, history = train_model(beam_data, config, settings, train_indices=idx)
    metrics = evaluate(beam_data, params, config, indices=idx)
    assert history[-1]["loss"] < history[0]["loss"]
    assert metrics["top1"] >= 0.9
    assert metrics["top1"] <= metrics["top3"] <= metrics["top5"]


def test_untrained_model_scores_near_chance(beam_data):
    config = train_config()
    settings = TrainSettings(epochs=0, seed=3)
    params, history = train_model(beam_data, config, settings)
    assert history == []
    metrics = evaluate(beam_data, params, config, split="train")
    assert metrics["top1"] <= 0.4
    assert metrics["top1"] <= metrics["top3"] <= metrics["top5"] <= 1.0


def test_handover_training_reports_accuracy(handover_data):
    config = train_config("handover")
    settings = TrainSettings(epochs=2, batch_size=8, gamma_prime=1.0, seed=5)
    params, _ = train_model(handover_data, config, settings)
    metrics = evaluate(handover_data, params, config, split="train")
    assert metrics["task"] == "handover"
    assert 0.0 <= metrics["accuracy"] <= 1.0
    assert set(np.unique(handover_data.labels)) == {0, 1}


def test_uniform_ratio_pins_ratios_and_drops_penalty(beam_data):
    config = train_config()
    settings = TrainSettings(epochs=2, batch_size=8, ablation="uniform_ratio",
                             uniform_p=0.37, seed=2)
    params, history = train_model(beam_data, config, settings,
                                  train_indices=spaced_indices(beam_data))
    assert params.keep.values() == [0.37] * config.blocks
    assert all(h["penalty"] == 0.0 for h in history)
    assert all(h["ratios"] == [0.37] * config.blocks for h in history)


def test_random_routing_freezes_router_only(beam_data):
    config = train_config()
    settings = TrainSettings(epochs=2, batch_size=8, ablation="random_routing",
                             gamma_prime=0.6, seed=4)
    params, _ = train_model(beam_data, config, settings,
                            train_indices=spaced_indices(beam_data))
    fresh = init_model(config, np.random.default_rng(splitmix64(4, 0)))
    trained = dict(named_parameters(params))
    for name, tensor in named_parameters(fresh):
        if ".router." in name:
            np.testing.assert_array_equal(trained[name].data, tensor.data)
    assert not np.array_equal(trained["head_w"].data, dict(named_parameters(fresh))["head_w"].data)
    a = evaluate(beam_data, params, config, split="train", random_routing_seed=9)
    b = evaluate(beam_data, params, config, split="train", random_routing_seed=9)
    assert a == b


def test_freeze_tokenizers_keeps_tokenizer_at_init(beam_data):
    config = train_config()
    settings = TrainSettings(epochs=2, batch_size=8, ablation="freeze_tokenizers",
                             gamma_prime=1.0, seed=6)
    params, _ = train_model(beam_data, config, settings,
                            train_indices=spaced_indices(beam_data))
    fresh = init_model(config, np.random.default_rng(splitmix64(6, 0)))
    trained = dict(named_parameters(params))
    moved = 0
    for name, tensor in named_parameters(fresh):
        if name.startswith("tokenizer."):
            np.testing.assert_array_equal(trained[name].data, tensor.data)
        else:
            moved += not np.array_equal(trained[name].data, tensor.data)
    assert moved > 0


def test_ablated_model_checkpoint_roundtrips(beam_data, tmp_path):
    # frozen tensors still belong in the checkpoint parameter list
    from tokenflow.model import load_checkpoint, save_checkpoint
    config = train_config()
    settings = TrainSettings(epochs=1, batch_size=8, ablation="freeze_tokenizers",
                             gamma_prime=1.0, seed=7)
    params, _ = train_model(beam_data, config, settings,
                            train_indices=spaced_indices(beam_data, count=8))
    path = str(tmp_path / "frozen.ckpt")
    save_checkpoint(path, params, config)
    loaded, loaded_config = load_checkpoint(path)
    assert loaded_config == config
    for (name, a), (_, b) in zip(named_parameters(params),
                                 named_parameters(loaded)):
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)


def test_unknown_ablation_rejected():
    with pytest.raises(ValueError, match="unknown ablation"):
        TrainSettings(ablation="dropout")


def test_parameter_groups_split_ratio_params(beam_data):
    config = train_config()
    params = init_model(config, np.random.default_rng(0))
    settings = TrainSettings(lr=1e-4)
    groups = parameter_groups(params, settings)
    assert len(groups) == 2
    regular, ratio = groups
    assert ratio["lr"] == pytest.approx(25e-4)
    assert ratio["weight_decay"] == 0.0
    assert ratio["clamp"] == (params.keep.r_min, 1.0)
    assert set(map(id, ratio["params"])) == set(map(id, params.keep.ratios))
    ratio_ids = set(map(id, params.keep.ratios))
    assert not any(id(p) in ratio_ids for p in regular["params"])


def test_frozen_params_left_out_of_groups():
    config = train_config()
    params = init_model(config, np.random.default_rng(0))
    for name, tensor in named_parameters(params):
        if name.startswith("tokenizer."):
            tensor.requires_grad = False
    groups = parameter_groups(params, TrainSettings())
    names = {id(t): n for n, t in named_parameters(params)}
    for group in groups:
        assert not any(names[id(p)].startswith("tokenizer.") for p in group["params"])


def test_resolve_gamma_prime_paths():
    config = train_config(gamma_prime=0.8)
    n = count_tokens(config)
    from tokenflow.flops import count_flops
    full = count_flops(config, n).total_flops
    assert resolve_gamma_prime(TrainSettings(), config) == 0.8
    assert resolve_gamma_prime(TrainSettings(gamma_prime=0.55), config) == 0.55
    got = resolve_gamma_prime(TrainSettings(budget_flops=full / 4), config)
    assert got == pytest.approx(0.5, abs=1e-12)
    tiny = resolve_gamma_prime(TrainSettings(budget_flops=1.0), config)
    assert tiny == pytest.approx(1.0 / n)


def test_nan_loss_aborts_with_diagnostic(beam_data, monkeypatch):
    real = tokenflow.model.init_model

    def poisoned(config, rng):
        params = real(config, rng)
        params.head_w.data[:] = np.nan
        return params

    monkeypatch.setattr(tokenflow.model, "init_model", poisoned)
    config = train_config()
    with pytest.raises(RuntimeError, match="non-finite.*epoch 0 step 0"):
        train_model(beam_data, config, TrainSettings(epochs=1, seed=0),
                    train_indices=spaced_indices(beam_data))


def test_training_is_deterministic(beam_data):
    config = train_config()
    settings = TrainSettings(epochs=2, batch_size=8, gamma_prime=0.7, seed=8)
    idx = spaced_indices(beam_data)
    params_a, hist_a = train_model(beam_data, config, settings, train_indices=idx)
    params_b, hist_b = train_model(beam_data, config, settings, train_indices=idx)
    assert hist_a == hist_b
    for (name_a, ta), (_, tb) in zip(named_parameters(params_a),
                                     named_parameters(params_b)):
        np.testing.assert_array_equal(ta.data, tb.data, err_msg=name_a)


def test_ratios_move_toward_budget(beam_data):
    config = train_config()
    settings = TrainSettings(epochs=6, batch_size=8, gamma_prime=0.5, seed=9)
    params, history = train_model(beam_data, config, settings,
                                  train_indices=spaced_indices(beam_data))
    assert np.mean(params.keep.values()) < 0.99
    assert history[-1]["penalty"] < history[0]["penalty"]


def test_batcher_shapes_and_targets(beam_data, handover_data):
    config = train_config()
    batcher = Batcher(beam_data, config)
    batch = batcher.batch([0, 1, 2])
    assert set(batch) == set(config.modalities)
    assert batch["image"].shape == (3, 5, 64, 64)
    assert batch["pointcloud"].shape == (3, 5, 32, 32)
    assert batch["radar"].shape == (3, 5, 4, 4)
    assert batch["gps"].shape == (3, 5, 2)
    targets = batcher.targets([0, 1, 2])
    assert targets.dtype == np.int64 and targets.shape == (3,)
    ho = Batcher(handover_data, train_config("handover"))
    ho_targets = ho.targets([0, 1])
    assert ho_targets.dtype == np.float64 and ho_targets.shape == (2, 1)
    assert set(ho.batch([0])) == {"image", "pointcloud", "radar", "rssi"}


def test_evaluate_rejects_empty_split(beam_data):
    config = train_config()
    params = init_model(config, np.random.default_rng(0))
    with pytest.raises(ValueError, match="no samples"):
        evaluate(beam_data, params, config, indices=[])


def test_benchmark_rows_and_flops_ordering(beam_data):
    config = train_config()
    params = init_model(config, np.random.default_rng(0))
    batch = Batcher(beam_data, config).batch([0])
    rows = benchmark(params, config, batch, repeats=3)
    assert [r["ratio"] for r in rows] == ["trained", "0.3", "0.5", "0.7", "1"]
    flops = {r["ratio"]: r["flops"] for r in rows}
    assert flops["0.3"] < flops["0.5"] < flops["0.7"] < flops["1"]
    assert all(r["wall_clock_ms"] > 0 for r in rows)
    n = count_tokens(config)
    from tokenflow.flops import count_flops
    from tokenflow.keepratio import inference_k
    assert flops["0.5"] == count_flops(config, [inference_k(0.5, n)] * config.blocks
                                       ).total_flops
