import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dapmae.losses import LossConfig, contrastive_loss, recon_loss, total_loss

from oracles import chamfer_oracle, cosine


def contrastive_oracle(vecs, labels, margin=0.0):
    total = 0.0
    for i, j in itertools.permutations(range(len(vecs)), 2):
        c = cosine(vecs[i], vecs[j])
        total += (1 - c) if labels[i] == labels[j] else max(0.0, c - margin)
    return total


def test_recon_examples(rng):
    gt = torch.tensor(rng.normal(size=(2, 3, 5, 3)))
    assert recon_loss(gt, gt).item() == 0.0
    one = recon_loss(torch.zeros(1, 1, 3, dtype=torch.float64), torch.tensor([[[1.0, 0, 0]]], dtype=torch.float64))
    assert one.item() == 2.0
    with pytest.raises(ValueError):
        recon_loss(gt[:, :2], gt)


def test_recon_matches_chamfer_oracle(rng):
    pred, gt = rng.normal(size=(4, 6, 3)), rng.normal(size=(4, 6, 3))
    loss, per = recon_loss(torch.tensor(pred), torch.tensor(gt), return_per_patch=True)
    expected = [chamfer_oracle(p, g) for p, g in zip(pred, gt)]
    assert np.allclose(per.numpy(), expected, rtol=1e-12)
    assert loss.item() == pytest.approx(np.mean(expected), rel=1e-12)


def test_contrastive_unit_examples():
    v = torch.tensor([[1.0, 2.0, 3.0]] * 3, dtype=torch.float64)
    assert contrastive_loss(v, [1, 1, 1]).item() == 0.0
    ortho = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    assert contrastive_loss(ortho, [0, 2]).item() == 0.0
    same = torch.tensor([[0.6, 0.8], [0.6, 0.8]], dtype=torch.float64)
    assert contrastive_loss(same, [0, 1]).item() == 2.0


def test_contrastive_matches_oracle_and_mean_reduction(rng):
    v = rng.normal(size=(6, 5))
    lab = [0, 1, 2, 0, 1, 1]
    got = contrastive_loss(torch.tensor(v), lab, LossConfig(margin=0.2)).item()
    assert got == pytest.approx(contrastive_oracle(v.tolist(), lab, 0.2), rel=1e-12)
    mean = contrastive_loss(torch.tensor(v), lab, LossConfig(margin=0.2, pair_reduction="mean")).item()
    assert mean == pytest.approx(got / 30, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_contrastive_scale_invariance(b, seed, scale):
    r = np.random.default_rng(seed)
    v = torch.tensor(r.normal(size=(b, 4)))
    lab = r.integers(0, 3, size=b).tolist()
    scales = torch.tensor(r.uniform(0.1, 10, size=(b, 1))) * scale
    a = contrastive_loss(v, lab).item()
    c = contrastive_loss(v * scales, lab).item()
    assert abs(a - c) <= 1e-6 * max(1.0, abs(a))
    assert a >= 0


def test_contrastive_zero_vector_counts_clamp():
    v = torch.tensor([[0.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    loss, terms, clamped = contrastive_loss(v, [0, 0], return_report=True)
    assert clamped == 1
    assert loss.item() == 2.0  # cosine with a zero vector is 0


def test_contrastive_validation():
    with pytest.raises(ValueError):
        contrastive_loss(torch.ones(1, 3), [0])
    with pytest.raises(ValueError):
        contrastive_loss(torch.ones(2, 3), [0])
    with pytest.raises(ValueError):
        LossConfig(w1=-1)
    with pytest.raises(ValueError):
        LossConfig(pair_reduction="max")


def test_total_loss_examples():
    assert total_loss(0.02, 4.0) == pytest.approx(2.004)
    assert total_loss(0.3, 123.0, LossConfig(w2=0.0)) == pytest.approx(30.0)
    assert total_loss(1.0, 1.0, LossConfig(w1=1, w2=1)) == 2.0
