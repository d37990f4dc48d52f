import numpy as np
import pytest
import torch

from moralkit.errors import (DegenerateLabels, DegeneratePoint, EmptyCoarseSet, EmptyDataset, InvalidAlpha,
                             InvalidTau, TooFewPoints)
from moralkit.mre import (VelocityAttention, accumulate, build_mos, compensate, mos_forward,
                          predict_mask, stack_frames, velocity_encode)
from moralkit.mre.pointnet import FeaturePropagation, SetAbstraction
from moralkit.mre.training import build_samples, evaluate_mos, threshold_mask, train_mos
from moralkit.scene import SceneConfig, named_rng, random_scene_config, simulate, tail_scene_config
from moralkit.training import TrainConfig

from conftest import TINY_MOS, random_radar
from golden_util import check_golden


def test_velocity_encode_examples():
    c = np.zeros((2, 7))
    c[:, 5] = (-3, 0)
    e = velocity_encode(c)
    assert np.array_equal(e[0, 7:], (3, 9, -1)) and np.array_equal(e[1, 7:], (0, 0, 0))
    assert velocity_encode(np.zeros((0, 7))).shape == (0, 10)


def test_velocity_attention_zero_params(rng):
    att = VelocityAttention().double()
    x = torch.as_tensor(velocity_encode(random_radar(rng, 20)))
    out, a = att(x)
    assert torch.all(a == 0.5)
    assert torch.equal(out[:, 7:], x[:, 7:] * 0.5)
    assert torch.equal(out[:, :7], x[:, :7])


def test_velocity_attention_range_and_equivariance(rng):
    att = VelocityAttention().double()
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        att.score.weight.copy_(torch.randn(att.score.weight.shape, generator=gen, dtype=torch.float64) * 0.1)
        att.score.bias.fill_(0.2)
    x = torch.as_tensor(velocity_encode(random_radar(rng, 10_000)))
    with torch.no_grad():
        _, a = att(x)
        logits = att.score(x)
    # float64 sigmoid rounds to exactly 1 past ~37
    assert float(logits.abs().max()) < 30
    assert float(a.min()) > 0 and float(a.max()) < 1
    pair = torch.stack([x[0], x[0]])
    with torch.no_grad():
        _, ap = att(pair)
    assert ap[0] == ap[1]


def test_sa_layer_degenerate_group():
    torch.manual_seed(0)
    sa = SetAbstraction(1, 1.0, 2, (4, 4), 8).double()
    xyz = torch.ones(5, 3, dtype=torch.float64)
    feats = torch.full((5, 2), 0.5, dtype=torch.float64)
    new_xyz, out = sa(xyz, feats)
    assert new_xyz.shape == (1, 3) and torch.equal(new_xyz[0], xyz[0])
    expect = sa.mlp(torch.cat([torch.zeros(1, 3, dtype=torch.float64), feats[:1]], dim=1))
    assert torch.allclose(out, expect, atol=1e-15)


def test_sa_layer_too_few_points():
    sa = SetAbstraction(8, 1.0, 2, (4,))
    with pytest.raises(TooFewPoints):
        sa(torch.zeros(4, 3), torch.zeros(4, 2))


def test_sa_layer_permutation(rng):
    torch.manual_seed(1)
    sa = SetAbstraction(8, 2.0, 3, (8, 8), 16).double()
    xyz = rng.uniform(-3, 3, (40, 3))
    feats = rng.normal(0, 1, (40, 3))
    perm = rng.permutation(40)
    ca, fa = sa(torch.as_tensor(xyz), torch.as_tensor(feats))
    cb, fb = sa(torch.as_tensor(xyz[perm]), torch.as_tensor(feats[perm]))
    rows_a = sorted(map(tuple, np.round(np.hstack([ca.numpy(), fa.detach().numpy()]), 12)))
    rows_b = sorted(map(tuple, np.round(np.hstack([cb.numpy(), fb.detach().numpy()]), 12)))
    assert rows_a == rows_b


def test_fp_layer_interpolation_identities(rng):
    torch.manual_seed(2)
    fp = FeaturePropagation(4, 0, (4,)).double()
    with torch.no_grad():
        fp.mlp[0].weight.copy_(torch.eye(4))
        fp.mlp[0].bias.zero_()
    coarse = torch.as_tensor(rng.uniform(-1, 1, (5, 3)))
    cf = torch.as_tensor(np.abs(rng.normal(0, 1, (5, 4))))
    out = fp(coarse, cf, coarse.clone(), torch.zeros(5, 0, dtype=torch.float64))
    assert torch.allclose(out, cf, atol=1e-6)
    fine = torch.as_tensor(rng.uniform(-1, 1, (7, 3)))
    one = fp(coarse[:1], cf[:1], fine, torch.zeros(7, 0, dtype=torch.float64))
    assert torch.allclose(one, cf[:1].expand(7, 4), atol=1e-12)
    with pytest.raises(EmptyCoarseSet):
        fp(coarse[:0], cf[:0], fine, torch.zeros(7, 0, dtype=torch.float64))


def test_mos_forward_softmax_rows(rng):
    net = build_mos(seed=0)
    feats, probs = mos_forward(velocity_encode(random_radar(rng, 300)), net)
    assert probs.shape == (300, 2)
    assert np.max(np.abs(probs.sum(axis=1) - 1)) < 1e-6
    assert feats.f_sa.shape == (16, 256) and feats.f_fp.shape == (300, 128)
    assert len(feats.f_sa) < len(feats.f_fp)


def test_mos_forward_too_few_points(rng):
    with pytest.raises(TooFewPoints):
        mos_forward(velocity_encode(random_radar(rng, 10)), build_mos(seed=0))


def test_mos_duplicated_points(rng):
    net = build_mos(TINY_MOS, seed=3, dtype=torch.float64)
    cloud = velocity_encode(random_radar(rng, 40))
    _, p1 = mos_forward(cloud, net)
    _, p2 = mos_forward(np.vstack([cloud, cloud]), net)
    assert np.max(np.abs(p2[:40] - p1)) < 1e-5


def golden_cloud():
    rng = named_rng(0, "golden-cloud")
    return velocity_encode(random_radar(rng, 64))


def test_untrained_mos_golden():
    feats, probs = mos_forward(golden_cloud(), build_mos(seed=0))
    check_golden("mos_seed0_64pts", {"probs": probs, "f_sa": feats.f_sa, "f_fp": feats.f_fp})


def test_predict_mask_examples():
    m = predict_mask(np.array([0.4, 0.5, 0.9]), 0.5)
    assert list(m.labels) == [0, 1, 1]
    p = np.random.default_rng(0).uniform(size=1000)
    lo, hi = predict_mask(p, 0.3).labels, predict_mask(p, 0.7).labels
    assert np.all(lo >= hi)
    for bad in (0.0, 1.0, -0.2):
        with pytest.raises(InvalidAlpha):
            predict_mask(p, bad)


def _cloud(p, v_abs, t):
    c = np.zeros((1, 7))
    c[0, :3] = p
    c[0, 5] = v_abs
    c[0, 6] = t
    return c


def test_compensate_worked_example():
    out = compensate(_cloud((10, 0, 0), 5.0, -2), np.array([1]), 0.1, 0)
    assert np.max(np.abs(out[0, :3] - (11, 0, 0))) <= 1e-9
    assert out[0, 6] == -2


def test_compensate_mask_and_gap(rng):
    cloud = random_radar(rng, 200, t=-3)
    mask = rng.integers(0, 2, 200)
    out = compensate(cloud, mask, 0.1)
    assert np.array_equal(out[mask == 0], cloud[mask == 0])
    assert np.array_equal(out[:, 3:], cloud[:, 3:])
    same = random_radar(rng, 50, t=0)
    assert np.array_equal(compensate(same, np.ones(50), 0.1), same)


def test_compensate_linear_and_radial(rng):
    cloud = random_radar(rng, 300, t=-2)
    mask = np.ones(300)
    d1 = compensate(cloud, mask, 0.1)[:, :3] - cloud[:, :3]
    doubled = cloud.copy()
    doubled[:, 5] *= 2
    d2 = compensate(doubled, mask, 0.1)[:, :3] - cloud[:, :3]
    assert np.allclose(d2, 2 * d1, rtol=0, atol=1e-12)
    cross = np.linalg.norm(np.cross(cloud[:, :3], d1), axis=1)
    bound = 1e-9 * np.linalg.norm(cloud[:, :3], axis=1) * np.linalg.norm(d1, axis=1)
    assert np.all(cross <= np.maximum(bound, 1e-300))


def test_compensate_errors():
    c = _cloud((0, 0, 0), 1.0, -1)
    with pytest.raises(DegeneratePoint):
        compensate(c, np.array([1]), 0.1, strict=True)
    assert np.array_equal(compensate(c, np.array([1]), 0.1, strict=False), c)
    with pytest.raises(InvalidTau):
        compensate(c, np.array([0]), 0.0)


def test_accumulate_single_frame_identity():
    seq = simulate(random_scene_config(2, SceneConfig(n_frames=3, ego_speed=4.0)))
    acc = accumulate(seq, 1, build_mos(seed=0), 0.5)
    assert np.array_equal(acc.cloud[:, :3], seq[-1].radar[:, :3])


def test_accumulate_static_scene():
    seq = simulate(SceneConfig(n_frames=5, ego_speed=6.0, ego_yaw_rate=0.2, clutter_rate=80))
    acc = accumulate(seq, 5, mask=np.zeros(400))
    stacked, _ = stack_frames(seq, 5)
    assert np.max(np.abs(acc.cloud - stacked)) < 1e-9
    # static clutter lines up in the target frame after ego compensation
    assert np.max(np.abs(stacked[:80, :3] - seq[0].radar[:, :3])) > 1.0


def test_accumulate_oracle_removes_tail():
    from moralkit.evaluation import tail_elongation
    seq = simulate(tail_scene_config())
    stacked, labels = stack_frames(seq, 5)
    acc = accumulate(seq, 5, mask=labels)
    fr = seq[-1]
    own = labels.astype(bool)
    ref = fr.radar[fr.labels.astype(bool)]
    assert tail_elongation(acc.cloud[own], fr.boxes[0], (1, 0), ref) <= 0.3
    assert tail_elongation(stacked[own], fr.boxes[0], (1, 0), ref) == pytest.approx(4.0, abs=0.5)


def test_accumulate_frame_offsets():
    seq = simulate(SceneConfig(n_frames=4, clutter_rate=3))
    stacked, _ = stack_frames(seq, 3)
    assert sorted(set(stacked[:, 6])) == [-2, -1, 0]
    with pytest.raises(ValueError):
        stack_frames(seq, 5)


def _tiny_samples(n_seq=2, frames=4, seed=0):
    seqs = [simulate(random_scene_config(seed + i, SceneConfig(n_frames=frames, clutter_rate=40)))
            for i in range(n_seq)]
    net = build_mos(TINY_MOS, seed=0)
    return net, build_samples(seqs, net, k=3)


def test_train_mos_empty():
    with pytest.raises(EmptyDataset):
        train_mos(build_mos(TINY_MOS), [], TrainConfig(epochs=1))


def test_train_mos_single_class_collapses_to_static():
    net, samples = _tiny_samples()
    for s in samples:
        s.labels[:] = 0
    with pytest.warns(DegenerateLabels):
        train_mos(net, samples, TrainConfig(epochs=15, lr=0.01))
    m = evaluate_mos(net, samples)
    assert m["tp"] == 0 and m["fp"] == 0


def test_train_mos_deterministic():
    net_a, samples = _tiny_samples()
    net_b = build_mos(TINY_MOS, seed=0)
    cfg = TrainConfig(epochs=2, seed=4)
    _, ha = train_mos(net_a, samples, cfg)
    _, hb = train_mos(net_b, samples, cfg)
    assert ha.step_loss == hb.step_loss
    for pa, pb in zip(net_a.parameters(), net_b.parameters()):
        assert torch.equal(pa, pb)


def test_threshold_baseline():
    c = np.zeros((4, 7))
    c[:, 5] = (-2.0, 0.5, 1.0, 1.01)
    assert list(threshold_mask(c)) == [1, 0, 0, 1]
