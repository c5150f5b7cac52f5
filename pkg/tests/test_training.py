import json
import math

import numpy as np
import pytest
import torch

from conftest import rand_backbone
from miae.errors import ConfigError, DomainError, LabelError, StepError
from miae.model import FoldClassifier, MiAE, ModelConfig
from miae.synthetic import make_dataset
from miae.training import (TrainConfig, augment_noise, batch_indices, classification_step,
                           classifier_from_pretrained, cosine_lr, layerwise_scale,
                           make_train_state, param_groups, pretrain_step, reconstruct,
                           run_pretraining)

SMALL = dict(encoder_depth=1, geometric_blocks=2, hidden_dim=16, attention_heads=2,
             decoder_depth=1, decoder_dim=16, decoder_heads=2, pair_dim=8, max_length=64)


def cfg(mode="pretrain", **kw):
    base = dict(batch_size=4, micro_batch_size=4, warmup_steps=2, total_steps=50)
    return TrainConfig.for_mode(mode, **{**base, **kw})


def mae(seed=0, **kw):
    torch.manual_seed(seed)
    return MiAE(ModelConfig(**{**SMALL, **kw}))


# --------------------------------------------------------------------- config


def test_mode_defaults():
    p = TrainConfig.for_mode("pretrain")
    assert (p.base_lr, p.weight_decay, p.batch_size, p.warmup_steps, p.total_steps) == \
        (0.0024, 0.05, 4096, 5000, 100000)
    assert p.betas == (0.9, 0.95) and p.mask_ratio == 0.9 and p.noise_std == 0.2
    s = TrainConfig.for_mode("scratch")
    assert (s.base_lr, s.weight_decay) == (0.0016, 0.1)
    f = TrainConfig.for_mode("finetune")
    assert (f.base_lr, f.layer_decay) == (0.0016, 0.8)


def test_config_errors():
    with pytest.raises(ConfigError):
        TrainConfig.for_mode("pretrain", warmup_steps=10, total_steps=5)
    with pytest.raises(ConfigError):
        TrainConfig.for_mode("distill")
    with pytest.raises(ConfigError):
        TrainConfig.for_mode("pretrain", colour="red")


# ------------------------------------------------------------------- schedule


def test_cosine_lr_examples():
    c = TrainConfig.for_mode("pretrain", base_lr=1.0, warmup_steps=100, total_steps=300)
    assert cosine_lr(0, c) == 0.0
    assert cosine_lr(100, c) == pytest.approx(1.0)
    assert cosine_lr(300, c) == pytest.approx(0.0, abs=1e-15)
    assert cosine_lr(200, c) == pytest.approx(0.5)
    assert cosine_lr(50, c) == pytest.approx(0.5)
    with pytest.raises(DomainError):
        cosine_lr(301, c)
    with pytest.raises(DomainError):
        cosine_lr(-1, c)


def test_cosine_lr_continuous_at_junction():
    c = TrainConfig.for_mode("pretrain", base_lr=2.0, warmup_steps=1000, total_steps=100000)
    lrs = [cosine_lr(s, c) for s in range(990, 1010)]
    assert max(abs(a - b) for a, b in zip(lrs, lrs[1:])) < 2.0 / 1000 + 1e-12


def test_layerwise_scale():
    assert layerwise_scale(15, 15, 0.8) == 1.0
    assert layerwise_scale(14, 15, 0.8) == pytest.approx(0.8)
    assert layerwise_scale(13, 15, 0.8) == pytest.approx(0.64)


def test_finetune_param_groups_carry_layer_scales():
    clf = classifier_from_pretrained(mae(), 3)
    groups = param_groups(clf, cfg("finetune"))
    n = clf.encoder.num_layers
    by_name = {name: g for g in groups for name in g["names"]}
    assert by_name["head.weight"]["lr_scale"] == 1.0
    assert by_name["encoder.blocks.0.attn.to_qkv.weight"]["lr_scale"] == pytest.approx(0.8)
    assert by_name["encoder.cls_token"]["lr_scale"] == pytest.approx(0.8 ** n)
    assert by_name["encoder.cls_token"]["weight_decay"] == 0.0
    assert by_name["head.weight"]["weight_decay"] == 0.1
    assert all(g["lr_scale"] == 1.0 for g in param_groups(clf, cfg("scratch")))


# ---------------------------------------------------------------- augmentation


def test_augment_noise():
    b = rand_backbone(5)
    np.testing.assert_array_equal(augment_noise(b, 0.0, 1).coords, b.coords)
    a1, a2 = augment_noise(b, 0.2, 7), augment_noise(b, 0.2, 7)
    np.testing.assert_array_equal(a1.coords, a2.coords)
    assert a1.sequence == b.sequence
    with pytest.raises(DomainError):
        augment_noise(b, -1.0, 0)


def test_augment_noise_moments():
    b = rand_backbone(11112)  # 11112 * 9 > 10^5 draws
    d = (augment_noise(b, 0.2, 3).coords - b.coords).ravel()
    assert d.size >= 100_000
    assert abs(d.mean()) < 0.01
    assert abs(d.std() - 0.2) < 0.01


# ----------------------------------------------------------------------- steps


def test_pretrain_overfits_single_sample():
    b = rand_backbone(10, seed=1)
    state = make_train_state(mae(), cfg(base_lr=3e-3, noise_std=0.0, mask_ratio=0.5))
    losses = []
    for _ in range(50):
        _, rep = pretrain_step([b], state)
        losses.append(rep.total.item())
    assert min(losses[-5:]) < 0.8 * losses[0]


def test_zero_lr_leaves_parameters_unchanged():
    state = make_train_state(mae(), cfg(base_lr=0.0))
    before = {k: v.clone() for k, v in state.model.state_dict().items()}
    for _ in range(3):
        pretrain_step([rand_backbone(8, seed=2), rand_backbone(6, seed=3)], state)
    for k, v in state.model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_weight_decay_applies_without_gradient():
    model = mae(use_sequence=True)
    c = cfg(base_lr=0.01, warmup_steps=0, weight_decay=0.1)
    state = make_train_state(model, c)
    w = state.model.encoder.aa_embedding.weight
    before = w.detach().clone()
    b = rand_backbone(6, seed=4).replace(sequence=["A"] * 6)
    pretrain_step([b], state)
    trp = 18  # 'W' never occurs in the batch, so its row gets no gradient
    np.testing.assert_allclose(w[trp].detach().numpy(),
                               (before[trp] * (1 - 0.01 * 0.1)).numpy(), rtol=1e-6)


def test_step_error_names_sample():
    model = mae()
    with torch.no_grad():
        model.decoder.coord_head.bias[0] = float("nan")
    state = make_train_state(model, cfg())
    b = rand_backbone(5).replace(id="bad_one")
    with pytest.raises(StepError) as e:
        pretrain_step([b], state)
    assert e.value.sample_id == "bad_one"


def test_determinism(tmp_path):
    data, _ = make_dataset(8, seed=1, min_length=8, max_length=14)
    runs = []
    for k in range(2):
        state = run_pretraining(data, mae(), cfg(total_steps=4, warmup_steps=1),
                                out_dir=tmp_path / str(k))
        runs.append(state.model.state_dict())
    for key in runs[0]:
        assert torch.equal(runs[0][key], runs[1][key]), key
    assert (tmp_path / "0" / "metrics.jsonl").read_bytes() == \
        (tmp_path / "1" / "metrics.jsonl").read_bytes()


def test_metrics_stream_and_checkpoints(tmp_path):
    data, _ = make_dataset(6, seed=2, min_length=8, max_length=10)
    run_pretraining(data, mae(), cfg(total_steps=4, warmup_steps=1, checkpoint_every=2),
                    out_dir=tmp_path)
    recs = [json.loads(ln) for ln in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [1, 2, 3, 4]
    assert {"lr", "dist", "dir", "binned_dist", "binned_dir", "inverse_folding", "total"} <= set(recs[0])
    assert all(math.isfinite(r["total"]) for r in recs)
    assert (tmp_path / "step_0000002.pt").exists() and (tmp_path / "final.pt").exists()


def test_classification_overfits_toy_set():
    data, fams = make_dataset(12, seed=3, min_length=10, max_length=16)
    labels = np.array([["helix", "beta_hairpin", "helix_loop_helix"].index(f) for f in fams])
    torch.manual_seed(0)
    clf = FoldClassifier(ModelConfig(**SMALL), 3, "mean")
    state = make_train_state(clf, cfg("scratch", batch_size=12, micro_batch_size=12,
                                      base_lr=3e-3, total_steps=200, warmup_steps=10,
                                      noise_std=0.0))
    acc = 0.0
    for _ in range(200):
        _, rec = classification_step(data, labels, state)
        acc = rec["accuracy"]
        if acc == 1.0:
            break
    assert acc == 1.0


def test_classification_rejects_unknown_label():
    clf = FoldClassifier(ModelConfig(**SMALL), 3)
    state = make_train_state(clf, cfg("scratch"))
    with pytest.raises(LabelError) as e:
        classification_step([rand_backbone(5), rand_backbone(6)], [0, 3], state)
    assert e.value.index == 1


def test_classifier_from_pretrained_copies_encoder():
    m = mae()
    clf = classifier_from_pretrained(m, 4, pooling="mean")
    for k, v in m.encoder.state_dict().items():
        assert torch.equal(clf.encoder.state_dict()[k], v)
    assert clf.head.out_features == 4 and clf.pooling == "mean"


def test_batch_indices_cover_epoch_and_bucket():
    lengths = np.random.default_rng(0).integers(10, 200, size=64)
    it = batch_indices(lengths, 8, seed=0)
    batches = [next(it) for _ in range(8)]
    assert sorted(i for b in batches for i in b) == list(range(64))
    # within a batch lengths come from one sorted window
    spread = np.mean([np.ptp(lengths[b]) for b in batches])
    assert spread < np.ptp(lengths)


def test_reconstruct_returns_plan():
    coords, plan = reconstruct(mae().double(), rand_backbone(10), 0.5, seed=3)
    assert coords.shape == (10, 3, 3)
    assert len(plan.masked) == 5
