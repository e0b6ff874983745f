import math

import numpy as np
import pytest
import torch

from dapmae.dfg import DFG, pool_features
from dapmae.geometry import DomainId

from oracles import matvec, softmax


def _dfg(dim=4, heads=1, seed=0):
    torch.manual_seed(seed)
    m = DFG(dim, heads).double()
    with torch.no_grad():
        for p in m.parameters():
            p.copy_(torch.randn_like(p) * 0.5)
    return m


def test_single_row_gives_value_projection():
    m = _dfg(dim=6, heads=2)
    f = torch.randn(1, 1, 6, dtype=torch.float64)
    c, d = m(f, [DomainId.FACE])
    v = m.fc_v(f)[0, 0]
    assert torch.allclose(c[0], v, atol=1e-12) and torch.allclose(d[0], v, atol=1e-12)


def test_identical_rows_give_value_projection():
    m = _dfg(dim=6, heads=3)
    row = torch.randn(6, dtype=torch.float64)
    c, d = m(row.expand(1, 5, 6), [DomainId.SCENE])
    v = m.fc_v(row)
    assert torch.allclose(c[0], v, atol=1e-12) and torch.allclose(d[0], v, atol=1e-12)


def test_matches_hand_evaluation():
    m = _dfg(dim=4, heads=1, seed=2)
    f = torch.randn(1, 3, 4, dtype=torch.float64)
    c, d = m(f, [DomainId.OBJECT])
    wq, bq = m.fc_q.weight.tolist(), m.fc_q.bias.tolist()
    wk, bk = m.fc_k.weight.tolist(), m.fc_k.bias.tolist()
    wv, bv = m.fc_v.weight.tolist(), m.fc_v.bias.tolist()
    rows = f[0].tolist()
    keys = [matvec(wk, r, bk) for r in rows]
    vals = [matvec(wv, r, bv) for r in rows]
    for tok, got in ((m.class_token, c), (m.domain_tokens[0], d)):
        q = matvec(wq, tok.tolist(), bq)
        w = softmax([sum(a * b for a, b in zip(q, k)) / 2.0 for k in keys])
        expected = [sum(w[j] * vals[j][i] for j in range(3)) for i in range(4)]
        assert np.allclose(got[0].detach().numpy(), expected, rtol=1e-12, atol=1e-12)


def test_attention_rows_sum_to_one():
    m = _dfg(dim=8, heads=4)
    m(torch.randn(3, 7, 8, dtype=torch.float64), [0, 1, 2])
    s = m.last_weights.sum(-1)
    assert torch.allclose(s, torch.ones_like(s), atol=1e-6)


def test_face_token_does_not_affect_object_input():
    m = _dfg(dim=8, heads=2)
    f = torch.randn(2, 5, 8, dtype=torch.float64)
    c0, d0 = m(f, [DomainId.OBJECT, DomainId.OBJECT])
    with torch.no_grad():
        m.domain_tokens[DomainId.FACE].add_(3.0)
    c1, d1 = m(f, [DomainId.OBJECT, DomainId.OBJECT])
    assert torch.equal(c0, c1) and torch.equal(d0, d1)


def test_permutation_invariance():
    m = _dfg(dim=8, heads=2)
    f = torch.randn(2, 9, 8, dtype=torch.float64)
    c0, d0 = m(f, [0, 2])
    perm = torch.randperm(9)
    c1, d1 = m(f[:, perm], [0, 2])
    assert torch.allclose(c0, c1, atol=1e-6) and torch.allclose(d0, d1, atol=1e-6)


def test_class_token_gets_no_gradient_from_domain_feature():
    m = _dfg(dim=8, heads=2)
    _, d = m(torch.randn(3, 4, 8, dtype=torch.float64), [0, 1, 2])
    d.pow(2).sum().backward()
    assert m.class_token.grad is None or torch.count_nonzero(m.class_token.grad) == 0


def test_validation():
    with pytest.raises(ValueError):
        DFG(7, 2)
    m = DFG(4, 2)
    with pytest.raises(ValueError):
        m(torch.zeros(1, 0, 4), [0])
    with pytest.raises(ValueError):
        m(torch.zeros(2, 3, 4), [0])


def test_pool_examples(rng):
    r = torch.tensor(rng.normal(size=(1, 5)))
    assert torch.equal(pool_features(r), torch.cat([r[0], r[0]]))
    two = torch.cat([r, -r])
    out = pool_features(two)
    assert torch.equal(out[:5], torch.zeros(5, dtype=torch.float64))
    assert torch.equal(out[5:], r[0].abs())
    f = rng.normal(size=(5, 6))
    pooled = pool_features(torch.tensor(f)).numpy()
    mean = [sum(f[i][j] for i in range(5)) / 5 for j in range(6)]
    mx = [max(f[i][j] for i in range(5)) for j in range(6)]
    assert np.allclose(pooled, mean + mx, atol=1e-12)
    with pytest.raises(ValueError):
        pool_features(torch.zeros(0, 3))
