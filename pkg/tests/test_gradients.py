"""Central finite differences against autograd for every trainable layer type."""
import pytest
import torch

from moralkit.detect import DetectionHead, HeadConfig
from moralkit.encoders import RADAR, GridSpec, PillarEncoder, pillarize
from moralkit.fusion import AdaptiveFusion, ChannelAttention, GatedFusion, MotionAggregator
from moralkit.mre.pointnet import FeaturePropagation, SetAbstraction, VelocityAttention, interp_weights, mlp, \
    sa_plan, velocity_encode

from conftest import random_radar

H = 1e-4
RTOL = 1e-3
ATOL = 1e-7       # floor for entries whose true gradient is (numerically) zero
N_PARAMS = 50


def _entries(module, rng, n=N_PARAMS):
    """``n`` random (param, flat index) pairs; every entry when the layer has fewer."""
    params = [p for p in module.parameters() if p.requires_grad]
    flat = [(p, i) for p in params for i in range(p.numel())]
    if len(flat) <= n:
        return flat
    return [flat[j] for j in rng.choice(len(flat), n, replace=False)]


def check(module, forward, rng):
    module = module.double()
    with torch.no_grad():
        probe = forward(module)
        weights = torch.as_tensor(rng.normal(size=probe.shape))
    loss = lambda: (forward(module) * weights).sum()
    module.zero_grad()
    loss().backward()
    entries = _entries(module, rng)
    bad = []
    for p, i in entries:
        analytic = p.grad.view(-1)[i].item()
        with torch.no_grad():
            v = p.view(-1)[i].item()
            p.view(-1)[i] = v + H
            up = loss().item()
            p.view(-1)[i] = v - H
            down = loss().item()
            p.view(-1)[i] = v
        numeric = (up - down) / (2 * H)
        if abs(numeric - analytic) > RTOL * max(abs(numeric), abs(analytic)) + ATOL:
            bad.append((i, numeric, analytic))
    assert not bad, f"{len(bad)}/{len(entries)} mismatches, e.g. {bad[:3]}"
    return len(entries)


def seeded(factory, seed=0):
    torch.manual_seed(seed)
    return factory()


def test_velocity_attention(rng):
    att = seeded(lambda: VelocityAttention(10))
    with torch.no_grad():
        att.score.weight.normal_(0, 0.3)
    x = torch.as_tensor(velocity_encode(random_radar(rng, 40)) / 10)
    n = check(att, lambda m: m(x)[0], rng)
    assert n == 11        # all of them: the layer is smaller than the sample size


def test_set_abstraction(rng):
    xyz = rng.uniform(-3, 3, (60, 3))
    feats = torch.as_tensor(rng.normal(size=(60, 6)))
    plan = sa_plan(xyz, 12, 2.0, 8)
    sa = seeded(lambda: SetAbstraction(12, 2.0, 6, (16, 16), 8))
    assert check(sa, lambda m: m(torch.as_tensor(xyz), feats, plan)[1], rng) == N_PARAMS


def test_feature_propagation(rng):
    fine, coarse = rng.uniform(-3, 3, (30, 3)), rng.uniform(-3, 3, (8, 3))
    interp = interp_weights(fine, coarse)
    cf = torch.as_tensor(rng.normal(size=(8, 12)))
    skip = torch.as_tensor(rng.normal(size=(30, 6)))
    fp = seeded(lambda: FeaturePropagation(12, 6, (16, 8)))
    n = check(fp, lambda m: m(torch.as_tensor(coarse), cf, torch.as_tensor(fine), skip, interp), rng)
    assert n == N_PARAMS


def test_classifier(rng):
    head = seeded(lambda: mlp(16, (8, 2), final_relu=False))
    x = torch.as_tensor(rng.normal(size=(25, 16)))
    assert check(head, lambda m: m(x), rng) == N_PARAMS


def test_pillar_encoder(rng):
    grid = GridSpec(x_range=(0.0, 6.4), y_range=(-3.2, 3.2), feature_width=8)
    cloud = velocity_encode(random_radar(rng, 80))
    cloud[:, 0] = rng.uniform(0, 6.4, 80)
    cloud[:, 1] = rng.uniform(-3.2, 3.2, 80)
    pillars = pillarize(cloud, grid, RADAR)
    enc = seeded(lambda: PillarEncoder(grid, RADAR))
    assert check(enc, lambda m: m(pillars), rng) == N_PARAMS


def test_channel_attention(rng):
    ca = seeded(lambda: ChannelAttention(16, 4))
    x = torch.as_tensor(rng.normal(size=(2, 16, 6, 6)))
    assert check(ca, lambda m: m(x)[0], rng) == N_PARAMS


def test_motion_aggregator(rng):
    agg = seeded(lambda: MotionAggregator(12, 10, 8))
    with torch.no_grad():
        agg.lambda_logit.fill_(0.3)
    f_sa = torch.as_tensor(rng.normal(size=(5, 12)))
    f_fp = torch.as_tensor(rng.normal(size=(20, 10)))
    check(agg, lambda m: m(f_sa, f_fp, (4, 4)), rng)
    assert agg.lambda_logit.grad is not None and agg.lambda_logit.grad.abs() > 0


@pytest.mark.parametrize("kernel", [1, 3])
def test_gated_fusion(rng, kernel):
    g = seeded(lambda: GatedFusion(8, kernel))
    f = torch.as_tensor(rng.normal(size=(8, 6, 6)))
    m = torch.as_tensor(rng.normal(size=(8, 6, 6)))
    assert check(g, lambda mod: mod(f, m)[0], rng) == N_PARAMS


def test_adaptive_fusion(rng):
    fuse = seeded(lambda: AdaptiveFusion(8, 6))
    with torch.no_grad():
        fuse.beta_logit.normal_()
    f_l = torch.as_tensor(rng.normal(size=(8, 5, 5)))
    f_r = torch.as_tensor(rng.normal(size=(6, 5, 5)))
    assert check(fuse, lambda m: m(f_l, f_r), rng) == N_PARAMS


def test_detection_head(rng):
    head = seeded(lambda: DetectionHead(8, HeadConfig()))
    x = torch.as_tensor(rng.normal(size=(1, 8, 8, 8)))
    assert check(head, lambda m: torch.cat(m(x), dim=1), rng) == N_PARAMS
