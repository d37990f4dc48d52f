import numpy as np
import pytest
import torch

from moralkit.core import FeatureMap
from moralkit.errors import EmptyFeatures, ShapeMismatch
from moralkit.fusion import (AdaptiveFusion, ChannelAttention, GatedFusion, MotionAggregator, adaptive_fuse,
                             aggregate_motion, channel_attention, gated_fuse)
from moralkit.mre.pointnet import MotionFeatures
from moralkit.scene import named_rng

from golden_util import check_golden

C, H, W = 8, 6, 5


def fmap(rng, c=C, h=H, w=W):
    return FeatureMap(rng.normal(0, 1, (c, h, w)))


def seeded(cls, *args, seed=0):
    torch.manual_seed(seed)
    return cls(*args).double()


def test_channel_attention_zero_weights(rng):
    ca = seeded(ChannelAttention, C, 4)
    with torch.no_grad():
        for p in ca.parameters():
            p.zero_()
    f = fmap(rng)
    out, w = channel_attention(f, ca)
    assert np.all(w == 0.5) and np.array_equal(out.data, 0.5 * f.data)


def test_channel_attention_zero_input():
    ca = seeded(ChannelAttention, C, 4)
    out, _ = channel_attention(FeatureMap(np.zeros((C, H, W))), ca)
    assert not out.data.any()


def test_channel_attention_spatial_permutation(rng):
    ca = seeded(ChannelAttention, C, 4)
    f = fmap(rng)
    perm = rng.permutation(H * W)
    g = FeatureMap(f.data.reshape(C, -1)[:, perm].reshape(C, H, W))
    _, wa = channel_attention(f, ca)
    _, wb = channel_attention(g, ca)
    assert np.allclose(wa, wb, atol=1e-14)
    assert np.all((wa > 0) & (wa < 1))


def motion(rng, m=4, n=12, sa=16, fp=8):
    return MotionFeatures(rng.normal(0, 1, (m, 3)), rng.normal(0, 1, (m, sa)), rng.normal(0, 1, (n, fp)))


def test_aggregate_blend_endpoints(rng):
    agg = seeded(MotionAggregator, 16, 8, C)
    like = fmap(rng)
    a, b = motion(rng), motion(rng)
    b.f_sa = a.f_sa.copy()
    one_a = aggregate_motion(a, agg, like, lam=1.0).data
    one_b = aggregate_motion(b, agg, like, lam=1.0).data
    assert np.array_equal(one_a, one_b)           # only F_sa matters at sigma(lambda) = 1
    assert not np.array_equal(aggregate_motion(a, agg, like, lam=0.0).data,
                              aggregate_motion(b, agg, like, lam=0.0).data)
    assert one_a.shape == (C, H, W)
    assert np.all(one_a == one_a[:, :1, :1])     # broadcast over the grid


def test_aggregate_equal_projections_ignore_lambda(rng):
    agg = seeded(MotionAggregator, 8, 8, C)
    with torch.no_grad():
        agg.phi_fp.weight.copy_(agg.phi_sa.weight)
        agg.phi_fp.bias.copy_(agg.phi_sa.bias)
    feats = motion(rng, 6, 6, 8, 8)
    feats.f_fp = feats.f_sa.copy()
    like = fmap(rng)
    outs = [aggregate_motion(feats, agg, like, lam).data for lam in (0.0, 0.3, 1.0)]
    assert np.allclose(outs[0], outs[1], atol=1e-14) and np.allclose(outs[0], outs[2], atol=1e-14)


def test_aggregate_empty(rng):
    agg = seeded(MotionAggregator, 16, 8, C)
    feats = motion(rng, 0, 5)
    with pytest.raises(EmptyFeatures):
        aggregate_motion(feats, agg, fmap(rng))


def test_aggregate_golden():
    rng = named_rng(0, "golden-motion")
    torch.manual_seed(0)
    agg = MotionAggregator(16, 8, C).double()
    out = aggregate_motion(motion(rng), agg, FeatureMap(np.zeros((C, H, W))))
    check_golden("aggregate_motion_seed0", {"out": out.data})


def _gate_forced(value):
    g = seeded(GatedFusion, C, 1)
    with torch.no_grad():
        g.conv.weight.zero_()
        g.conv.bias.fill_(value)
    return g


def test_gate_identities(rng):
    f, m = fmap(rng), fmap(rng)
    assert np.array_equal(gated_fuse(f, m, _gate_forced(-1e4)).data, f.data)
    assert np.array_equal(gated_fuse(f, m, _gate_forced(1e4)).data, 2 * f.data)


def test_gate_sign_and_bound(rng):
    g = seeded(GatedFusion, C, 3)
    f = FeatureMap(rng.normal(0, 1, (C, 100, 160)))
    m = FeatureMap(rng.normal(0, 1, (C, 100, 160)))
    out = gated_fuse(f, m, g).data
    nz = f.data != 0
    assert np.array_equal(np.sign(out[nz]), np.sign(f.data[nz]))
    assert np.all(np.abs(out) <= 2 * np.abs(f.data) + 1e-15)
    gate = g.gate(torch.as_tensor(f.data), torch.as_tensor(m.data)).detach()
    assert float(gate.min()) > 0 and float(gate.max()) < 1


def test_gate_shape_mismatch(rng):
    g = seeded(GatedFusion, C, 1)
    with pytest.raises(ShapeMismatch):
        gated_fuse(fmap(rng), fmap(rng, h=H + 1), g)


def test_adaptive_fuse_endpoints(rng):
    fuse = seeded(AdaptiveFusion, C, C)
    f_l, f_r = fmap(rng), fmap(rng)
    assert np.array_equal(adaptive_fuse(f_l, f_r, fuse, beta=np.ones(C)).data, f_l.data)
    with torch.no_grad():
        fuse.proj.weight.copy_(torch.eye(C)[:, :, None, None])
        fuse.proj.bias.zero_()
    assert np.allclose(adaptive_fuse(f_l, f_l, fuse, beta=np.full(C, 0.5)).data, f_l.data, atol=1e-15)
    with pytest.raises(ShapeMismatch):
        adaptive_fuse(f_l, fmap(rng, w=W + 2), fuse)


def test_adaptive_fuse_default_beta_is_half(rng):
    fuse = seeded(AdaptiveFusion, C, 4)
    f_l, f_r = fmap(rng), fmap(rng, c=4)
    proj = fuse.project(torch.as_tensor(f_r.data)).detach().numpy()
    assert np.allclose(adaptive_fuse(f_l, f_r, fuse).data, 0.5 * f_l.data + 0.5 * proj, atol=1e-14)


def test_adaptive_fuse_golden():
    rng = named_rng(0, "golden-fuse")
    torch.manual_seed(0)
    fuse = AdaptiveFusion(C, C).double()
    with torch.no_grad():
        fuse.beta_logit.normal_()
    out = adaptive_fuse(fmap(rng), fmap(rng), fuse)
    check_golden("adaptive_fuse_seed0", {"out": out.data})
