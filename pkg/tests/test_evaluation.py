import itertools

import numpy as np
import pytest
import torch

import oracles as O
from ffsd.data import AugmentationPolicy, LabeledImageSet, synthetic_set
from ffsd.evaluation import (accuracy, ens_accuracy, evaluate_group, export_attention, mean_cosine, minmax_normalize,
                             read_attention_export, student_cosine, union_accuracy)
from ffsd.exceptions import InvalidInputError
from ffsd.networks import ResNetBackbone, build_group
from test_networks import small_config


class FixedLogits(torch.nn.Module):
    """Returns a stored logit row per sample, looked up by the sample's first pixel."""

    def __init__(self, table):
        super().__init__()
        self.table = torch.as_tensor(table, dtype=torch.float32)

    def forward(self, x):
        return self.table[x[:, 0, 0, 0].round().long()]


RAW = AugmentationPolicy(pad=0, flip_p=0.0, mean=(0, 0, 0), std=(1 / 255,) * 3, augment=False)


def tagged_set(labels, K):
    n = len(labels)
    imgs = np.zeros((n, 3, 2, 2), np.uint8)
    imgs[:, 0, 0, 0] = np.arange(n)
    return LabeledImageSet(imgs, np.asarray(labels), K)


def test_accuracy_examples():
    z = torch.tensor([[2.0, 1.0], [0.0, 3.0], [1.0, 0.0]])
    assert accuracy(z, [0, 1, 1]) == pytest.approx(200 / 3)
    with pytest.raises(InvalidInputError):
        accuracy(torch.zeros(0, 2), [])


def test_union_accuracy_examples():
    labels = [0, 1, 2, 0]
    a = torch.eye(3)[[0, 0, 0, 1]]  # right on sample 0
    b = torch.eye(3)[[1, 1, 1, 1]]  # right on sample 1
    assert union_accuracy([a], labels) == 25.0
    assert union_accuracy([a, b], labels) == 50.0
    with pytest.raises(InvalidInputError):
        union_accuracy([], labels)


@pytest.mark.parametrize("seed", range(5))
def test_ens_accuracy_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    n_models = rng.integers(1, 5)
    N, K = 40, 4
    labels = rng.integers(0, K, N)
    tables = [rng.normal(size=(N, K)) for _ in range(n_models)]
    models = [FixedLogits(t) for t in tables]
    ds = tagged_set(labels, K)
    got = ens_accuracy(models, ds, policy=RAW, batch_size=7)
    want = O.union_accuracy([t.argmax(1) for t in tables], labels)
    assert abs(got - want) <= 1e-6
    assert got >= max(O.union_accuracy([t.argmax(1)], labels) for t in tables)


@pytest.mark.parametrize("seed", range(5))
def test_student_cosine_matches_loop_oracle(seed):
    torch.manual_seed(seed)
    n = [2, 3, 4][seed % 3]
    ds = synthetic_set(3, 9, 8, seed=seed)
    models = [ResNetBackbone(3, (4, 8), depth=1, image_size=8) for _ in range(n)]
    got = student_cosine(models, ds, batch_size=4)
    from ffsd.evaluation import eval_mode
    from ffsd.data import batches
    x = next(batches(ds, 100, train=False))[0]
    with eval_mode(*models):
        feats = [m.forward_with_taps(x)[1][-1].numpy() for m in models]
    want = np.mean([O.mean_cosine(feats[i], feats[j]) for i, j in itertools.combinations(range(n), 2)])
    assert abs(got - want) <= 1e-6


def test_cosine_symmetry_and_scale_invariance():
    torch.manual_seed(0)
    a, b = torch.randn(5, 4, 3, 3), torch.randn(5, 4, 3, 3)
    assert mean_cosine(a, b) == pytest.approx(mean_cosine(b, a), abs=1e-12)
    assert mean_cosine(a, b) == pytest.approx(mean_cosine(3 * a, 0.5 * b), abs=1e-6)
    assert mean_cosine(a, a) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(InvalidInputError):
        student_cosine([FixedLogits(torch.zeros(1, 2))], tagged_set([0], 2))


def test_evaluate_group_fields():
    g = build_group(small_config(image_size=8, widths=(4, 8), K=3))
    ds = synthetic_set(3, 12, 8, seed=0)
    rep = evaluate_group(g, ds, batch_size=5)
    assert len(rep.student_acc) == 2 and rep.n_samples == 12
    assert rep.student_mean == pytest.approx(np.mean(rep.student_acc))
    assert rep.ens_acc >= max(rep.student_acc)
    assert -1 <= rep.cosine <= 1
    assert rep.leader_acc is not None and rep.fusion_acc is not None
    rep2 = evaluate_group(g, ds, batch_size=12, fusion=False, leader=False)
    assert rep2.fusion_acc is None and rep2.student_acc == rep.student_acc
    assert rep2.cosine == pytest.approx(rep.cosine, abs=1e-6)


def test_minmax_normalize():
    a = torch.tensor([[[1.0, 3.0], [2.0, 5.0]], [[2.0, 2.0], [2.0, 2.0]]])
    out = minmax_normalize(a)
    assert torch.equal(out[0], torch.tensor([[0.0, 0.5], [0.25, 1.0]]))
    assert torch.equal(out[1], torch.zeros(2, 2))


def test_attention_export_round_trip(tmp_path):
    torch.manual_seed(0)
    net = ResNetBackbone(3, (4, 8, 16), depth=1, image_size=8)
    x = torch.randn(4, 3, 8, 8)
    path = export_attention(net, x, tmp_path / "att.bin", sample_ids=[10, 11, 12, 13])
    entries = read_attention_export(path)
    assert len(entries) == 4 * 3
    assert [e[1] for e in entries[:3]] == [1, 2, 3]
    assert [tuple(e[2].shape) for e in entries[:3]] == [(8, 8), (4, 4), (2, 2)]
    assert (tmp_path / "att.bin").stat().st_size == 4 * 4 * (64 + 16 + 4)
    with torch.no_grad():
        net.eval()
        taps = net.forward_with_taps(x)[1]
    A = O.attention(taps[1][2:3].numpy())[0]
    ref = (A - A.min()) / (A.max() - A.min())
    sid, level, arr = entries[2 * 3 + 1]
    assert (sid, level) == (12, 2)
    np.testing.assert_allclose(arr, ref, atol=1e-6)
    assert all(0 <= e[2].min() and e[2].max() <= 1 for e in entries)
