"""Geometric primitives on point clouds.

All functions are pure; ties in distance comparisons are broken by the
lowest point index so results are identical on every platform.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, make_result


@dataclass(frozen=True)
class PatchSet:
    """Center coordinates plus center-normalised local neighbourhoods.

    ``centers`` is (g, 3), ``patches`` is (g, k, 3) and ``neighbors`` holds
    the (g, k) indices into the source cloud.
    """
    centers: np.ndarray
    patches: np.ndarray
    neighbors: np.ndarray

    @property
    def k(self) -> int:
        return self.patches.shape[1]

    def __len__(self) -> int:
        return self.centers.shape[0]


def _check_cloud(cloud) -> np.ndarray:
    pts = np.asarray(cloud)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ValueError(f"expected an (n, 3) point cloud with n >= 1, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


def fps(cloud, g: int, start: int = 0) -> np.ndarray:
    """Farthest point sampling: indices of ``g`` well-spread points.

    The first index is ``start``; each next one maximises the minimum squared
    distance to those already chosen (``np.argmax`` returns the first, i.e.
    lowest, index among ties).
    """
    pts = _check_cloud(cloud)
    n = pts.shape[0]
    if not 1 <= g <= n:
        raise ValueError(f"fps needs 1 <= g <= n, got g={g}, n={n}")
    if not 0 <= start < n:
        raise ValueError(f"fps start index {start} outside [0, {n})")
    chosen = np.empty(g, dtype=np.int64)
    chosen[0] = start
    mind = ((pts - pts[start]) ** 2).sum(axis=1)
    for i in range(1, g):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        mind = np.minimum(mind, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return chosen


def knn_group(cloud, centers: np.ndarray, k: int) -> PatchSet:
    """Group the ``k`` nearest cloud points around each center index.

    The center itself is a candidate. Patches are returned translated so the
    center sits at the origin. Offsets are formed in float64, so for float32
    clouds (the stored dataset precision) ``patch + center`` restores the
    original coordinates exactly.
    """
    pts = _check_cloud(cloud)
    n = pts.shape[0]
    centers = np.asarray(centers, dtype=np.int64)
    if not 1 <= k <= n:
        raise ValueError(f"knn_group needs 1 <= k <= n, got k={k}, n={n}")
    if centers.size and (centers.min() < 0 or centers.max() >= n):
        raise ValueError("center index out of range")
    c = pts[centers]
    d2 = ((c[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
    nbr = np.argsort(d2, axis=1, kind="stable")[:, :k]
    wide = pts.astype(np.float64)
    patches = wide[nbr] - wide[centers][:, None, :]
    return PatchSet(centers=wide[centers], patches=patches, neighbors=nbr)


def group_cloud(cloud, g: int, k: int, start: int = 0) -> PatchSet:
    return knn_group(cloud, fps(cloud, g, start), k)


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return ((a[..., :, None, :] - b[..., None, :, :]) ** 2).sum(axis=-1)


def chamfer_l2(a, b):
    """Symmetric l2 Chamfer distance with per-direction mean aggregation.

    ``a`` (..., p, 3) and ``b`` (..., q, 3) may carry matching leading batch
    axes; the result has those leading axes. Tensors yield a differentiable
    Tensor; plain arrays give a numpy value.
    """
    ad = a.data if isinstance(a, Tensor) else np.asarray(a)
    bd = b.data if isinstance(b, Tensor) else np.asarray(b)
    if ad.shape[-2] == 0 or bd.shape[-2] == 0:
        raise ValueError("chamfer_l2 needs non-empty point sets")
    d2 = _sqdist(ad, bd)
    ia = d2.argmin(axis=-1)  # nearest b for each a, lowest index on ties
    ib = d2.argmin(axis=-2)  # nearest a for each b
    da = np.take_along_axis(d2, ia[..., None], axis=-1)[..., 0]
    db = np.take_along_axis(d2, ib[..., None, :], axis=-2)[..., 0, :]
    value = da.mean(axis=-1) + db.mean(axis=-1)
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return value

    p, q = ad.shape[-2], bd.shape[-2]

    def back(g):
        g = np.asarray(g)[..., None, None]
        nb = np.take_along_axis(bd, ia[..., None], axis=-2)   # (..., p, 3)
        na = np.take_along_axis(ad, ib[..., None], axis=-2)   # (..., q, 3)
        ra = g * 2.0 * (ad - nb) / p
        rb = g * 2.0 * (bd - na) / q
        ga = ra.copy()
        gb = rb.copy()
        _scatter_rows(gb, ia, -ra)
        _scatter_rows(ga, ib, -rb)
        return ga, gb
    return make_result("chamfer_l2", np.asarray(value), (a, b), back)


def _scatter_rows(target: np.ndarray, index: np.ndarray, values: np.ndarray) -> None:
    lead = index.shape[:-1]
    grid = np.meshgrid(*[np.arange(n) for n in lead], indexing="ij") if lead else []
    keys = tuple(gr[..., None] for gr in grid) + (index,)
    np.add.at(target, keys, values)


def interpolation_weights(query_points, source_points, eps: float = 1e-8):
    """Indices and inverse-distance weights of the 3 nearest sources per query.

    Works on (q, 3)/(s, 3) or batched (..., q, 3)/(..., s, 3) inputs.
    """
    qd = np.asarray(query_points)
    sd = np.asarray(source_points)
    if sd.shape[-2] < 3:
        raise ValueError(f"interpolate_3nn needs at least 3 source points, got {sd.shape[-2]}")
    d2 = _sqdist(qd, sd)
    idx = np.argsort(d2, axis=-1, kind="stable")[..., :3]
    dist = np.sqrt(np.take_along_axis(d2, idx, axis=-1))
    inv = 1.0 / np.maximum(dist, eps)
    return idx, inv / inv.sum(axis=-1, keepdims=True)


def interpolation_matrix(query_points, source_points, eps: float = 1e-8) -> np.ndarray:
    """Dense (..., q, s) matrix whose product with source features interpolates them."""
    idx, w = interpolation_weights(query_points, source_points, eps)
    s = np.asarray(source_points).shape[-2]
    mat = np.zeros(idx.shape[:-1] + (s,), dtype=w.dtype)
    np.put_along_axis(mat, idx, w, axis=-1)
    return mat


def interpolate_3nn(query_points, source_points, source_features, eps: float = 1e-8) -> np.ndarray:
    """Propagate per-source features to query points by 3-NN inverse-distance weighting."""
    idx, w = interpolation_weights(query_points, source_points, eps)
    feats = np.asarray(source_features)
    gathered = np.take_along_axis(feats[..., None, :, :], idx[..., None], axis=-2) if feats.ndim > 2 else feats[idx]
    return (gathered * w[..., None]).sum(axis=-2)
