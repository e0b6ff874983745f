import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dapmae.geometry import (
    DomainId,
    MaskSpec,
    PointCloud,
    chamfer,
    fps,
    knn,
    mask_split,
    normalize_cloud,
    patchify,
)

from oracles import chamfer_oracle, fps_oracle, knn_oracle

coords = arrays(np.float64, st.tuples(st.integers(2, 40), st.just(3)),
                elements=st.floats(-10, 10, allow_nan=False, width=32))


def test_domain_codes_are_stable():
    assert [int(d) for d in DomainId] == [0, 1, 2]
    assert DomainId.parse("face") is DomainId.FACE
    assert DomainId.parse(2) is DomainId.SCENE


def test_fps_square_corners():
    sq = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)]
    assert fps(sq, 2, 0).tolist() == [0, 2] == fps_oracle(sq, 2, 0)


def test_fps_full_is_permutation(rng):
    pts = rng.normal(size=(20, 3))
    assert sorted(fps(pts, 20).tolist()) == list(range(20))


def test_fps_matches_oracle_on_uniform_cloud(rng):
    pts = rng.uniform(size=(64, 3))
    assert fps(pts, 8).tolist() == fps_oracle(pts, 8)


def test_fps_duplicates_never_reselected():
    pts = np.zeros((5, 3))
    assert fps(pts, 5).tolist() == [0, 1, 2, 3, 4]


@pytest.mark.parametrize("g,start", [(0, 0), (6, 0), (2, 5)])
def test_fps_rejects_bad_arguments(g, start):
    with pytest.raises(ValueError):
        fps(np.zeros((5, 3)), g, start)


def test_fps_rejects_empty():
    with pytest.raises(ValueError):
        fps(np.zeros((0, 3)), 1)


@settings(max_examples=60, deadline=None)
@given(coords, st.data())
def test_fps_prefix_and_uniqueness(pts, data):
    n = pts.shape[0]
    g1 = data.draw(st.integers(1, n))
    g2 = data.draw(st.integers(g1, n))
    a, b = fps(pts, g1), fps(pts, g2)
    assert len(set(b.tolist())) == g2
    assert b[:g1].tolist() == a.tolist()


def test_knn_examples():
    line = [(0, 0, 0), (1, 0, 0), (2, 0, 0), (3, 0, 0)]
    assert knn(line, (0, 0, 0), 2).tolist() == [0, 1] == knn_oracle(line, (0, 0, 0), 2)
    assert knn(line, (2, 0, 0), 1).tolist() == [2]
    tie = [(1, 0, 0), (-1, 0, 0), (5, 0, 0)]
    assert knn(tie, (0, 0, 0), 2).tolist() == [0, 1]


def test_knn_rejects_k_above_n():
    with pytest.raises(ValueError):
        knn(np.zeros((3, 3)), (0, 0, 0), 4)


@settings(max_examples=60, deadline=None)
@given(coords, st.data())
def test_knn_sorted_and_complete(pts, data):
    k = data.draw(st.integers(1, pts.shape[0]))
    c = pts[data.draw(st.integers(0, pts.shape[0] - 1))] + 0.1
    idx = knn(pts, c, k)
    d = ((pts - c) ** 2).sum(axis=1)
    kept = d[idx]
    assert np.all(np.diff(kept) >= 0)
    others = np.setdiff1d(np.arange(pts.shape[0]), idx)
    assert np.all(d[others] >= kept[-1])
    assert idx.tolist() == knn_oracle(pts, c, k)


def test_patchify_roundtrip_exact(rng):
    # float32 coordinates: center-relative offsets are exact in float64
    pts = rng.normal(size=(128, 3)).astype(np.float32)
    ps = patchify(pts, 16, 8)
    assert ps.patches.shape == (16, 8, 3)
    assert np.array_equal(ps.patches + ps.centers[:, None, :], pts[ps.source_indices])
    assert ps.vis_mask.all()
    # every center is a cloud point and sits in its own patch as the zero row
    assert np.all(np.any(np.all(ps.patches == 0.0, axis=2), axis=1))


def test_patchify_single_patch_covers_cloud(rng):
    pts = rng.normal(size=(10, 3))
    ps = patchify(PointCloud(pts, DomainId.OBJECT), 1, 10)
    assert sorted(ps.source_indices[0].tolist()) == list(range(10))


def test_mask_split_counts_and_determinism(rng):
    ps = patchify(rng.normal(size=(256, 3)), 128, 4)
    m = mask_split(ps, MaskSpec(0.6, 7))
    assert m.n_masked == 77 and m.vis_mask.sum() == 51
    assert np.array_equal(m.vis_mask, mask_split(ps, MaskSpec(0.6, 7)).vis_mask)
    assert mask_split(ps, MaskSpec(0.0, 1)).n_masked == 0


def test_mask_split_seeds_differ(rng):
    ps = patchify(rng.normal(size=(64, 3)), 32, 2)
    masks = {mask_split(ps, MaskSpec(0.5, s)).vis_mask.tobytes() for s in range(10)}
    assert len(masks) >= 2


@pytest.mark.parametrize("ratio", [1.0, -0.1, 1.5])
def test_mask_spec_rejects_bad_ratio(ratio):
    with pytest.raises(ValueError):
        MaskSpec(ratio, 0)


def test_chamfer_examples():
    assert chamfer([(0, 0, 0)], [(1, 0, 0)]) == 2.0
    a, b = [(0, 0, 0), (2, 0, 0)], [(1, 0, 0)]
    assert chamfer(a, b) == pytest.approx(chamfer_oracle(a, b)) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), [(0, 0, 0)])


@settings(max_examples=60, deadline=None)
@given(coords, coords, st.tuples(*[st.floats(-5, 5)] * 3))
def test_chamfer_properties(a, b, shift):
    assert chamfer(a, b) == chamfer(b, a)
    assert chamfer(a, a) == 0.0
    assert chamfer(a, b) >= 0.0
    moved = chamfer(a + np.array(shift), b + np.array(shift))
    base = chamfer(a, b)
    assert moved == pytest.approx(base, rel=1e-6, abs=1e-6)


def test_normalize_cloud_examples(rng):
    pts = rng.normal(size=(50, 3))
    pts -= pts.mean(axis=0)
    pts /= np.linalg.norm(pts, axis=1).max()
    out = normalize_cloud(PointCloud(pts, DomainId.FACE)).points
    assert np.allclose(out, pts, atol=1e-7)

    single = normalize_cloud(PointCloud(np.array([[5.0, 5.0, 5.0]]), DomainId.OBJECT)).points
    assert np.array_equal(single, np.zeros((1, 3)))

    cube = np.array([[x, y, z] for x in (-2, 2) for y in (-2, 2) for z in (-2, 2)], dtype=float) + 3.0
    out = normalize_cloud(PointCloud(cube, DomainId.OBJECT)).points
    expected = (cube - cube.mean(axis=0)) / math.sqrt(12.0)
    assert np.allclose(out, expected)
    assert np.allclose(np.abs(out), 1 / math.sqrt(3))


@settings(max_examples=40, deadline=None)
@given(coords)
def test_normalize_invariants(pts):
    out = normalize_cloud(PointCloud(pts, DomainId.SCENE)).points
    assert np.all(np.abs(out.mean(axis=0)) < 1e-6)
    norms = np.linalg.norm(out, axis=1)
    assert norms.max() == pytest.approx(1.0, abs=1e-6) or norms.max() == 0.0


def test_point_cloud_rejects_non_finite():
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]), DomainId.OBJECT)
