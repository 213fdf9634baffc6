import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ffsd import losses as L
from ffsd.config import ExperimentConfig
from ffsd.exceptions import ConfigError, InvalidInputError
from ffsd.networks import (ChannelAligner, FusionModule, ResNetBackbone, SelfDistillModule, build_group,
                           sd_forward)


def small_config(n=2, widths=(8, 16, 32), image_size=16, depth=1, K=5):
    return ExperimentConfig().replace(data=dict(num_classes=K, image_size=image_size),
                                      model=dict(widths=list(widths), depth=depth), distill=dict(n=n))


@pytest.mark.parametrize("n, students", [(1, 2), (2, 3), (6, 7)])
def test_build_group_counts(n, students):
    g = build_group(small_config(n=n))
    assert g.n + 1 == students
    assert len(g.sd) == students
    assert g.fusion.n == n


def test_build_group_rejects_zero_students():
    cfg = small_config()
    cfg.distill.n = 0
    with pytest.raises(ConfigError):
        build_group(cfg)


def test_students_share_architecture_but_not_weights():
    g = build_group(small_config(n=3))
    counts = g.parameter_counts()
    assert len({counts["leader"]} | {counts[f"student_{i}"] for i in range(1, 4)}) == 1
    w = [m.stem[0].weight for m in [g.leader, *g.students]]
    assert all(not torch.equal(w[0], other) for other in w[1:])


def test_build_group_is_deterministic():
    a = build_group(small_config())
    b = build_group(small_config())
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_forward_with_taps_shapes():
    net = ResNetBackbone(10, (16, 32, 64), depth=1, image_size=32)
    logits, taps = net.forward_with_taps(torch.randn(2, 3, 32, 32))
    assert logits.shape == (2, 10)
    assert [tuple(t.shape[1:]) for t in taps] == [(16, 32, 32), (32, 16, 16), (64, 8, 8)]
    assert net.tap_shapes() == [(16, 32, 32), (32, 16, 16), (64, 8, 8)]
    assert all(torch.isfinite(t).all() for t in taps)
    with pytest.raises(InvalidInputError):
        net.forward_with_taps(torch.randn(2, 3, 16, 16))


def test_eval_mode_batch_independence_and_determinism():
    torch.manual_seed(0)
    net = ResNetBackbone(4, (4, 8), depth=1, image_size=8)
    net.train()
    for _ in range(3):  # populate running stats
        net(torch.randn(8, 3, 8, 8))
    net.eval()
    x = torch.randn(6, 3, 8, 8)
    with torch.no_grad():
        full, taps_full = net.forward_with_taps(x)
        single, taps_single = net.forward_with_taps(x[2:3])
        again, _ = net.forward_with_taps(x)
    torch.testing.assert_close(single, full[2:3], rtol=1e-5, atol=1e-6)
    torch.testing.assert_close(taps_single[-1], taps_full[-1][2:3], rtol=1e-5, atol=1e-6)
    assert torch.equal(full, again)


def test_fuse_shapes():
    fm = FusionModule(2, 64, 10)
    feats = [torch.randn(3, 64, 4, 4) for _ in range(2)]
    Ff, zf, Fe = fm.fuse(feats)
    assert Fe.shape == (3, 128, 4, 4)
    assert Ff.shape == (3, 64, 4, 4)
    assert zf.shape == (3, 10)
    assert torch.equal(Fe[:, :64], feats[0])
    _, _, Fe_swapped = fm.fuse(feats[::-1])
    assert torch.equal(Fe_swapped[:, :64], feats[1])
    fm.eval()
    Ff0, zf0, Fe0 = fm.fuse([torch.zeros(1, 64, 4, 4)] * 2)
    assert (Fe0 == 0).all() and torch.isfinite(Ff0).all() and torch.isfinite(zf0).all()
    with pytest.raises(InvalidInputError):
        fm.fuse([torch.randn(3, 64, 4, 4), torch.randn(3, 64, 2, 2)])
    with pytest.raises(InvalidInputError):
        fm.fuse(feats[:1])


def test_align_channels():
    al = ChannelAligner(64, 2)
    out = al(torch.randn(2, 64, 5, 7))
    assert out.shape == (2, 128, 5, 7)
    with pytest.raises(InvalidInputError):
        al(torch.randn(2, 32, 5, 5))


def test_aligner_receives_gradient_under_leader_feature_loss():
    al = ChannelAligner(8, 2)
    F0 = torch.randn(4, 8, 4, 4)
    Fe = torch.randn(4, 16, 4, 4).relu()
    loss = L.leader_feature_loss(F0, F0.detach().relu(), al(F0), Fe)
    loss.value.backward()
    assert all(p.grad is not None and p.grad.abs().sum() > 0 for p in al.parameters())


def test_sd_forward_shapes():
    shapes = [(16, 32, 32), (32, 16, 16), (64, 8, 8)]
    sd = SelfDistillModule(shapes)
    outs = sd_forward(sd, torch.randn(2, 64, 8, 8))
    assert [tuple(o.shape) for o in outs] == [(2, 16, 32, 32), (2, 32, 16, 16)]
    sd2 = SelfDistillModule(shapes[1:])
    assert len(sd2.blocks) == 1
    assert tuple(sd2(torch.randn(2, 64, 8, 8))[0].shape) == (2, 32, 16, 16)
    with pytest.raises(InvalidInputError):
        sd(torch.randn(2, 32, 8, 8))


def test_sd_accepts_fused_map_of_same_shape():
    g = build_group(small_config())
    x = torch.randn(2, 3, 16, 16)
    feats = [s.forward_with_taps(x)[1][-1] for s in g.students]
    Ff, _, _ = g.fusion.fuse(feats)
    outs = g.sd[0](Ff)
    assert [tuple(o.shape[1:]) for o in outs] == g.tap_shapes[:-1]


@settings(max_examples=15, deadline=None)
@given(n=st.integers(1, 4), M=st.integers(1, 4), base=st.sampled_from([4, 8]),
       size=st.sampled_from([8, 12, 16]))
def test_shape_contract_sweep(n, M, base, size):
    widths = [base * 2 ** m for m in range(M)]
    g = build_group(small_config(n=n, widths=widths, image_size=size))
    x = torch.randn(2, 3, size, size)
    outs = [s.forward_with_taps(x) for s in g.students]
    for z, taps in outs:
        assert z.shape == (2, 5)
        assert [tuple(t.shape[1:]) for t in taps] == g.tap_shapes
    Ff, zf, Fe = g.fusion.fuse([t[-1] for _, t in outs])
    assert Ff.shape == outs[0][1][-1].shape
    assert Fe.shape[1] == n * widths[-1]
    assert g.aligner(outs[0][1][-1]).shape == Fe.shape
    for sd in g.sd:
        sd_out = sd(outs[0][1][-1])
        assert [tuple(o.shape[1:]) for o in sd_out] == g.tap_shapes[:-1]
