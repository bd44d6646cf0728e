import dataclasses
import itertools

import numpy as np
import pytest
import torch

from highratemos.errors import CheckpointError, ConfigError, ValidationError
from highratemos.features import FeatureBundle
from highratemos.model import (COMPONENTS, Checkpoint, CrossAttention, ModelConfig, MultiScaleCNN, ScoreModel,
                               parameter_count)


def inputs(cfg, b=2, t=7, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    enc = torch.randn(b, t, cfg.d_enc, generator=g, dtype=dtype)
    mel = torch.randn(b, t, cfg.n_mels, generator=g, dtype=dtype)
    mfcc = torch.randn(b, t, cfg.n_mfcc, generator=g, dtype=dtype)
    return enc, mel, mfcc, torch.arange(b) % 3


def valid_configs():
    toggles = [c for c in COMPONENTS]
    for variant in ("M1", "M2", "M3"):
        base = ModelConfig.for_variant(variant)
        for mask in itertools.product((True, False), repeat=len(toggles)):
            values = dict(zip(toggles, mask))
            if any(v and not getattr(base, k) for k, v in values.items()):
                continue
            try:
                yield dataclasses.replace(base, **values)
            except ConfigError:
                continue


def test_fused_width():
    assert ModelConfig.for_variant("M1").d_fused == 64 + 16 + 96
    assert ModelConfig.for_variant("M1", sr_emb=False).d_fused == 64 + 96
    assert ModelConfig.for_variant("M3").d_fused == 64 + 16 + 96 + 64 + 20


def test_variant_restrictions():
    with pytest.raises(ConfigError):
        ModelConfig.for_variant("M1", cross_attn=True)
    with pytest.raises(ConfigError):
        ModelConfig.for_variant("M2", mfcc=True)
    with pytest.raises(ConfigError):
        ModelConfig.for_variant("M1", ssl=False, mel=False, multi_cnn=False)
    assert ModelConfig.for_variant("M3").without("mel").multi_cnn is False


def test_cnn_shape_and_zero_input():
    cnn = MultiScaleCNN(32)
    out = cnn(torch.randn(2, 11, 80))
    assert out.shape == (2, 11, 96)
    assert not torch.any(cnn(torch.zeros(1, 5, 80)))


def test_cnn_matches_hand_convolution():
    cnn = MultiScaleCNN(channels=1, kernels=(3,)).double()
    w = torch.arange(9, dtype=torch.float64).reshape(1, 1, 3, 3) / 10 - 0.3
    with torch.no_grad():
        cnn.branches[0].weight.copy_(w)
    x = torch.arange(16, dtype=torch.float64).reshape(1, 4, 4) / 7 - 1
    xp = np.pad(x[0].numpy(), 1)
    k = w[0, 0].numpy()
    expected = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            expected[i, j] = max(0.0, sum(k[a, b] * xp[i + a, j + b] for a in range(3) for b in range(3)))
    np.testing.assert_allclose(cnn(x)[0, :, 0].detach().numpy(), expected.mean(axis=1), atol=1e-12)


def test_uniform_attention_for_constant_keys():
    torch.manual_seed(0)
    attn = CrossAttention(8, 6, dim=16, heads=4)
    keys = torch.ones(1, 9, 6)
    attn(torch.randn(1, 5, 8), keys)
    np.testing.assert_allclose(attn.last_weights.numpy(), 1 / 9, atol=1e-6)


def test_no_blstm_closed_form():
    cfg = ModelConfig.for_variant("M1", blstm=False)
    model = ScoreModel(cfg, seed=2, dtype=torch.float64)
    enc, mel, mfcc, rates = inputs(cfg, dtype=torch.float64)
    fused = model.fuse(enc, mel, mfcc, rates)
    expected = fused.mean(dim=1) @ model.head.weight[0] + model.head.bias[0]
    torch.testing.assert_close(model(enc, mel, mfcc, rates), expected, rtol=0, atol=1e-12)


def test_sr_emb_toggle():
    on = ScoreModel(ModelConfig.for_variant("M1"), seed=0)
    off = ScoreModel(ModelConfig.for_variant("M1", sr_emb=False), seed=0)
    enc, mel, mfcc, _ = inputs(on.cfg, b=1)
    with torch.no_grad():
        s_off = [off(enc, mel, mfcc, torch.tensor([r])).item() for r in range(3)]
        s_on = [on(enc, mel, mfcc, torch.tensor([r])).item() for r in range(3)]
    assert s_off[0] == s_off[1] == s_off[2]
    assert len(set(s_on)) == 3


def test_same_seed_same_model():
    cfg = ModelConfig.for_variant("M3")
    a, b = ScoreModel(cfg, seed=4), ScoreModel(cfg, seed=4)
    for (_, p), (_, q) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(p, q)
    x = inputs(cfg)
    with torch.no_grad():
        assert torch.equal(a(*x), b(*x))


def test_batch_permutation_equivariance():
    cfg = ModelConfig.for_variant("M2")
    model = ScoreModel(cfg, seed=1, dtype=torch.float64)
    enc, mel, mfcc, rates = inputs(cfg, b=4, dtype=torch.float64)
    perm = torch.tensor([2, 0, 3, 1])
    with torch.no_grad():
        a = model(enc, mel, mfcc, rates)
        b = model(enc[perm], mel[perm], mfcc[perm], rates[perm])
    torch.testing.assert_close(a[perm], b, rtol=0, atol=1e-12)


def test_parameter_count_matches_torch():
    for cfg in valid_configs():
        model = ScoreModel(cfg)
        assert parameter_count(cfg) == sum(p.numel() for p in model.parameters()), cfg


def test_parameter_count_component_shares():
    m3 = ModelConfig.for_variant("M3")
    # removing MFCC removes its 20 fused channels from the BLSTM input and the key falls back
    diff = parameter_count(m3) - parameter_count(m3.without("mfcc"))
    assert diff == 2 * 4 * 128 * 20
    m1, m2 = ModelConfig.for_variant("M1"), ModelConfig.for_variant("M2")
    attn = sum(p.numel() for p in ScoreModel(m2).cross_attn.parameters())
    assert parameter_count(m2) - parameter_count(m1) == attn + 2 * 4 * 128 * 64


def test_every_parameter_receives_gradient():
    for variant in ("M1", "M2", "M3"):
        cfg = ModelConfig.for_variant(variant)
        model = ScoreModel(cfg)
        rates = torch.tensor([0, 1, 2])
        enc, mel, mfcc, _ = inputs(cfg, b=3)
        model(enc, mel, mfcc, rates).sum().backward()
        for name, p in model.named_parameters():
            assert p.grad is not None and torch.any(p.grad != 0), name


def test_zero_frames_rejected():
    cfg = ModelConfig()
    model = ScoreModel(cfg)
    with pytest.raises(ValidationError):
        model(*inputs(cfg, t=0))


def bundle(t, rate_id, seed):
    rng = np.random.default_rng(seed)
    return FeatureBundle(rng.normal(size=(t, 64)), rng.normal(size=(t, 80)), rng.normal(size=(t, 20)), rate_id)


def test_score_bundles_mixed_lengths():
    model = ScoreModel(ModelConfig.for_variant("M3"))
    bundles = [bundle(5, 0, 0), bundle(9, 2, 1), bundle(5, 1, 2)]
    with torch.no_grad():
        together = model.score_bundles(bundles)
        alone = [model.score_bundles([b])[0] for b in bundles]
    torch.testing.assert_close(together, torch.stack(alone), rtol=0, atol=1e-6)


def test_checkpoint_round_trip(tmp_path):
    model = ScoreModel(ModelConfig.for_variant("M3"), seed=3)
    ckpt = Checkpoint.from_model(model, seed=3, step=400, feature_hash="abc", meta={"k": 1})
    ckpt.save(tmp_path / "m.ckpt")
    back = Checkpoint.load(tmp_path / "m.ckpt")
    assert (back.model_config, back.step, back.feature_hash, back.meta) == (model.cfg, 400, "abc", {"k": 1})
    b = bundle(6, 1, 0)
    assert back.build_model().score(b) == model.eval().score(b)


def test_checkpoint_config_mismatch(tmp_path):
    ckpt = Checkpoint.from_model(ScoreModel(ModelConfig.for_variant("M1")))
    bad = dataclasses.replace(ckpt, model_config=ModelConfig.for_variant("M2"))
    with pytest.raises(CheckpointError):
        bad.build_model()
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "junk.ckpt")
