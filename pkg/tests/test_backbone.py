import io

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from icre.backbone import (
    BackboneConfig,
    BNNeck,
    DualStreamBackbone,
    EmbeddingBatch,
    GeM,
    IdentityClassifier,
    gem_pool,
)

# (C, H, W) per stage, worked out by hand from the stride tables
TINY_64x32 = [(32, 32, 16), (64, 16, 8), (128, 8, 4), (256, 8, 4)]
R50_384x192 = [(256, 96, 48), (512, 48, 24), (1024, 24, 12), (2048, 24, 12)]


def test_shape_table_tiny():
    assert BackboneConfig.tiny().stage_shapes(64, 32) == TINY_64x32


def test_shape_table_resnet50():
    assert BackboneConfig.resnet50().stage_shapes(384, 192) == R50_384x192


def test_tiny_forward_shapes():
    torch.manual_seed(0)
    net = DualStreamBackbone(BackboneConfig.tiny()).eval()
    feats = net(torch.randn(4, 3, 64, 32), torch.tensor([0, 1, 0, 1]))
    assert feats.f_l.shape == (4, 64, 16, 8)
    assert feats.f_m.shape == (4, 128, 8, 4)
    assert feats.f_h.shape == (4, 256, 8, 4)
    assert feats.f_1.shape == (4, 32, 32, 16)
    assert all(torch.isfinite(t).all() for t in feats.by_stage().values())


@pytest.mark.slow
def test_resnet50_forward_shape():
    torch.manual_seed(0)
    net = DualStreamBackbone(BackboneConfig.resnet50()).eval()
    with torch.no_grad():
        f = net(torch.randn(1, 3, 384, 192), 0)
    assert f.f_h.shape == (1, 2048, 24, 12)


def test_stems_are_independent():
    torch.manual_seed(0)
    net = DualStreamBackbone().eval()
    x = torch.randn(1, 3, 64, 32)
    a, b = net.stem_vis(x), net.stem_ir(x)
    assert a.shape == b.shape and not torch.allclose(a, b)
    vis_ids = {id(p) for p in net.stem_vis.parameters()}
    ir_ids = {id(p) for p in net.stem_ir.parameters()}
    assert not vis_ids & ir_ids


def test_shared_stages_serve_both_modalities():
    torch.manual_seed(0)
    net = DualStreamBackbone().eval()
    shared = {id(p) for p in net.shared_parameters()}
    stem = {id(p) for p in net.stem_vis.parameters()} | {id(p) for p in net.stem_ir.parameters()}
    assert shared.isdisjoint(stem)
    assert shared | stem == {id(p) for p in net.parameters()}
    # a mixed batch equals the two single-modality batches run separately
    x = torch.randn(4, 3, 64, 32)
    mods = torch.tensor([1, 0, 0, 1])
    mixed = net(x, mods).f_h
    vis = net(x[mods == 0], 0).f_h
    ir = net(x[mods == 1], 1).f_h
    assert torch.allclose(mixed[mods == 0], vis, atol=1e-6)
    assert torch.allclose(mixed[mods == 1], ir, atol=1e-6)


def test_eval_forward_is_deterministic():
    torch.manual_seed(0)
    net = DualStreamBackbone().eval()
    x = torch.randn(2, 3, 64, 32)
    assert torch.equal(net(x, [0, 1]).f_h, net(x, [0, 1]).f_h)


@pytest.mark.parametrize(
    "kw",
    [dict(stage_strides=(1, 2, 2, 2)), dict(stage_channels=(32, 16, 128, 256)), dict(stage_channels=(32, 64, 128))],
)
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        BackboneConfig(**kw)


def test_bad_inputs():
    net = DualStreamBackbone()
    with pytest.raises(ValueError):
        net(torch.randn(2, 1, 64, 32), [0, 1])
    with pytest.raises(ValueError):
        net(torch.randn(2, 3, 64, 32), [0, 2])
    with pytest.raises(ValueError):
        net(torch.randn(2, 3, 64, 32), [0, 1, 1])


# GeM

def test_gem_hand_value():
    fmap = torch.tensor([[[[1.0, 3.0]]]], dtype=torch.float64)
    assert gem_pool(fmap, 3).item() == pytest.approx(2.4101422641752297, abs=1e-12)


def test_gem_p1_is_mean():
    x = torch.rand(2, 5, 3, 4) + 0.1
    assert torch.allclose(gem_pool(x, 1), x.mean((-2, -1)), atol=1e-6)


@pytest.mark.parametrize("p", [1.0, 2.0, 3.0, 7.5])
def test_gem_constant_map(p):
    assert torch.allclose(gem_pool(torch.full((1, 3, 4, 4), 0.7), p), torch.full((1, 3), 0.7), atol=1e-6)


def test_gem_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        c, h, w = rng.integers(1, 5, size=3)
        fmap = rng.normal(size=(c, h, w))
        p = float(rng.uniform(1, 6))
        got = gem_pool(torch.from_numpy(fmap)[None], p)[0].numpy()
        assert np.allclose(got, oracles.gem(fmap, p), atol=1e-6, rtol=0)


def test_gem_errors():
    with pytest.raises(ValueError):
        gem_pool(torch.tensor([[[[float("nan")]]]]))
    with pytest.raises(ValueError):
        gem_pool(torch.ones(1, 1, 2, 2), p=0.5)
    assert "p=3" in repr(GeM())


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), p=st.floats(1, 8), dp=st.floats(0, 4))
def test_gem_monotone_in_p(seed, p, dp):
    x = torch.from_numpy(np.random.default_rng(seed).uniform(0, 3, size=(1, 3, 3, 2)))
    assert torch.all(gem_pool(x, p + dp) >= gem_pool(x, p) - 1e-9)


# BNNeck and classifier

def test_bnneck_identity_in_eval():
    bn = BNNeck(6).eval()
    x = torch.randn(5, 6)
    assert torch.allclose(bn(x), x, atol=1e-5)
    assert not bn.bias.requires_grad and torch.all(bn.bias == 0)


def test_bnneck_train_zero_mean():
    bn = BNNeck(6).train()
    with torch.no_grad():
        bn.weight.uniform_(0.5, 2)
    out = bn(torch.randn(16, 6) * 3 + 2)
    assert torch.allclose(out.mean(0), torch.zeros(6), atol=1e-5)


def test_bnneck_batch_of_one_fails_in_training():
    with pytest.raises(ValueError):
        BNNeck(4).train()(torch.randn(1, 4))
    BNNeck(4).eval()(torch.randn(1, 4))


def test_bnneck_running_stats_roundtrip():
    bn = BNNeck(4).train()
    for _ in range(5):
        bn(torch.randn(8, 4) * 2 + 1)
    buf = io.BytesIO()
    torch.save(bn.state_dict(), buf)
    buf.seek(0)
    other = BNNeck(4)
    other.load_state_dict(torch.load(buf))
    x = torch.randn(3, 4)
    assert torch.equal(bn.eval()(x), other.eval()(x))


def test_classifier_zero_weights():
    clf = IdentityClassifier(4, 3)
    with torch.no_grad():
        clf.weight.zero_()
        clf.bias.zero_()
    logits = clf(torch.randn(2, 4))
    assert torch.equal(logits, torch.zeros(2, 3))
    assert torch.allclose(logits.softmax(1), torch.full((2, 3), 1 / 3))


def test_classifier_one_hot_rows():
    clf = IdentityClassifier(4, 4)
    with torch.no_grad():
        clf.weight.copy_(torch.eye(4))
        clf.bias.zero_()
    x = torch.randn(3, 4)
    assert torch.equal(clf(x), x)


def test_classifier_matches_matmul_oracle():
    rng = np.random.default_rng(1)
    clf = IdentityClassifier(5, 3).double()
    w, b = rng.normal(size=(3, 5)), rng.normal(size=3)
    with torch.no_grad():
        clf.weight.copy_(torch.from_numpy(w))
        clf.bias.copy_(torch.from_numpy(b))
    x = rng.normal(size=(3, 5))
    assert np.allclose(clf(torch.from_numpy(x)).detach().numpy(), oracles.linear(x, w, b), atol=1e-6)


def test_classifier_width_mismatch():
    with pytest.raises(ValueError):
        IdentityClassifier(4, 3)(torch.randn(2, 5))


def test_embedding_batch_validation():
    f = torch.randn(3, 4)
    EmbeddingBatch(f, f, torch.arange(3), torch.zeros(3))
    with pytest.raises(ValueError):
        EmbeddingBatch(f, f[:, :2], torch.arange(3), torch.zeros(3))
    with pytest.raises(ValueError):
        EmbeddingBatch(f, f, torch.arange(2), torch.zeros(3))
