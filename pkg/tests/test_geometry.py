import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointdistill import geometry as G
from oracles import chamfer_oracle, fps_oracle, knn_oracle
from pointdistill.numerics import Tape, Tensor, finite_diff_check


def coverage_radius(pts, chosen):
    rest = [i for i in range(len(pts)) if i not in set(chosen)]
    if not rest:
        return 0.0
    d = ((pts[rest][:, None, :] - pts[chosen][None, :, :]) ** 2).sum(-1)
    return d.min(axis=1).max()


# --- fps ----------------------------------------------------------------------

def test_fps_exhaustion_and_degenerate():
    pts = np.random.default_rng(0).random((9, 3))
    assert sorted(G.fps(pts, 9).tolist()) == list(range(9))
    assert G.fps(pts, 1, 0).tolist() == [0]


def test_fps_eight_points_matches_oracle():
    pts = np.random.default_rng(1).random((8, 3))
    assert G.fps(pts, 4).tolist() == fps_oracle(pts.tolist(), 4)


def test_fps_tie_breaks_to_lowest_index():
    # unit cube corners: many equidistant candidates
    pts = np.array(list(itertools.product([0.0, 1.0], repeat=3)))
    assert G.fps(pts, 8, 0).tolist() == fps_oracle(pts.tolist(), 8, 0)
    assert G.fps(pts, 3, 0).tolist()[1] == 7


def test_fps_errors():
    pts = np.zeros((4, 3))
    with pytest.raises(ValueError):
        G.fps(pts, 5)
    with pytest.raises(ValueError):
        G.fps(pts, 2, start=4)
    with pytest.raises(ValueError):
        G.fps(np.array([[np.nan, 0, 0]]), 1)


def test_fps_deterministic_and_monotone_coverage():
    rng = np.random.default_rng(2)
    for _ in range(10):
        pts = rng.standard_normal((40, 3))
        assert np.array_equal(G.fps(pts, 12, 3), G.fps(pts.copy(), 12, 3))
        radii = [coverage_radius(pts, G.fps(pts, g).tolist()) for g in range(1, 41)]
        assert all(b <= a for a, b in zip(radii, radii[1:]))


# --- knn ----------------------------------------------------------------------

def test_knn_k1_is_center():
    pts = np.random.default_rng(3).random((20, 3))
    ps = G.knn_group(pts, G.fps(pts, 5), 1)
    np.testing.assert_array_equal(ps.patches, 0.0)


def test_knn_ten_points_matches_full_sort():
    pts = np.random.default_rng(4).random((10, 3))
    centers = [0, 5, 7]
    ps = G.knn_group(pts, centers, 4)
    assert ps.neighbors.tolist() == knn_oracle(pts.tolist(), centers, 4)


def test_knn_full_scale_shapes():
    pts = np.random.default_rng(5).random((4096, 3))
    ps = G.group_cloud(pts, 64, 32)
    assert ps.patches.shape == (64, 32, 3) and ps.centers.shape == (64, 3)


def test_knn_errors():
    with pytest.raises(ValueError):
        G.knn_group(np.zeros((3, 3)), [0], 4)


def test_knn_ties_lowest_index():
    pts = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, 0, 5.0]])
    assert G.knn_group(pts, [0], 3).neighbors.tolist() == [[0, 1, 2]]


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 48), st.integers(0, 2**31 - 1))
def test_patch_normalisation_reconstructs_exactly(n, seed):
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((n, 3)).astype(np.float32)
    g = max(1, n // 4)
    ps = G.group_cloud(pts, g, min(4, n))
    for i in range(g):
        np.testing.assert_array_equal(ps.patches[i] + ps.centers[i], pts[ps.neighbors[i]])


# --- chamfer ------------------------------------------------------------------

def test_chamfer_trivial_cases():
    pts = np.random.default_rng(6).random((12, 3))
    assert G.chamfer_l2(pts, pts) == 0.0
    assert G.chamfer_l2([[0.0, 0, 0]], [[1.0, 0, 0]]) == 2.0
    with pytest.raises(ValueError):
        G.chamfer_l2(np.zeros((0, 3)), pts)


def test_chamfer_matches_double_loop():
    rng = np.random.default_rng(7)
    a, b = rng.random((16, 3)), rng.random((16, 3))
    assert abs(G.chamfer_l2(a, b) - chamfer_oracle(a.tolist(), b.tolist())) < 1e-6


def test_chamfer_symmetric_and_permutation_invariant():
    rng = np.random.default_rng(8)
    for _ in range(20):
        a, b = rng.random((11, 3)), rng.random((7, 3))
        assert G.chamfer_l2(a, b) == G.chamfer_l2(b, a)
        pa, pb = a[rng.permutation(11)], b[rng.permutation(7)]
        assert abs(G.chamfer_l2(pa, pb) - G.chamfer_l2(a, b)) < 1e-9


def test_chamfer_batched_and_gradient():
    rng = np.random.default_rng(9)
    a = Tensor(rng.random((3, 6, 3)), requires_grad=True)
    b = Tensor(rng.random((3, 5, 3)), requires_grad=True)
    vals = G.chamfer_l2(a, b).data
    for i in range(3):
        assert abs(vals[i] - chamfer_oracle(a.data[i].tolist(), b.data[i].tolist())) < 1e-12
    w = rng.random(3)
    from pointdistill import numerics as nx
    res = finite_diff_check(lambda: nx.sum(nx.mul(G.chamfer_l2(a, b), w)), [a, b], step=1e-6)
    assert res.max_rel_error < 1e-4


# --- interpolation ---------------------------------------------------------------

def test_interpolate_coincident_query_returns_source_feature():
    rng = np.random.default_rng(10)
    src = rng.random((6, 3))
    feats = rng.standard_normal((6, 4))
    out = G.interpolate_3nn(src[2:3], src, feats)
    np.testing.assert_allclose(out[0], feats[2], rtol=1e-6, atol=1e-7)


def test_interpolate_equidistant_average():
    src = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0], [5.0, 5, 5]])
    feats = np.array([[1.0, 0], [0, 3.0], [2.0, 2.0], [100.0, 100.0]])
    out = G.interpolate_3nn(np.zeros((1, 3)), src, feats)
    np.testing.assert_allclose(out[0], feats[:3].mean(axis=0), rtol=1e-12)


def test_interpolate_matches_direct_formula():
    rng = np.random.default_rng(11)
    q, s = rng.random((5, 3)), rng.random((9, 3))
    f = rng.standard_normal((9, 2))
    out = G.interpolate_3nn(q, s, f)
    for i in range(5):
        d = [(float(np.sqrt(((q[i] - s[j]) ** 2).sum())), j) for j in range(9)]
        d.sort()
        w = [1.0 / max(dd, 1e-8) for dd, _ in d[:3]]
        expect = sum(wi * f[j] for wi, (_, j) in zip(w, d[:3])) / sum(w)
        np.testing.assert_allclose(out[i], expect, atol=1e-6)
    np.testing.assert_allclose(G.interpolation_matrix(q, s) @ f, out, atol=1e-12)


def test_interpolate_needs_three_sources():
    with pytest.raises(ValueError):
        G.interpolate_3nn(np.zeros((1, 3)), np.zeros((2, 3)), np.zeros((2, 1)))


def test_oracle_sweep_200_clouds():
    rng = np.random.default_rng(12)
    for _ in range(200):
        n = int(rng.integers(8, 129))
        pts = rng.standard_normal((n, 3))
        g = int(rng.integers(1, min(n, 16) + 1))
        k = int(rng.integers(1, min(n, 16) + 1))
        centers = G.fps(pts, g)
        assert centers.tolist() == fps_oracle(pts.tolist(), g)
        assert G.knn_group(pts, centers, k).neighbors.tolist() == knn_oracle(pts.tolist(), centers.tolist(), k)
