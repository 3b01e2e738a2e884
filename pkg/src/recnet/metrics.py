"""Structural similarity between an original cloud and its reconstruction.

Local features come from the ``k`` nearest neighbours of every point (the
point itself excluded):

* geometry: mean distance to the neighbours,
* normal: eigenvector of the smallest eigenvalue of the neighbourhood
  covariance, flipped to face the sensor origin,
* curvature: smallest eigenvalue over the eigenvalue sum.

Each point of one cloud is paired with its nearest point in the other; the
per-point similarities are averaged in both directions and the two
directions averaged again, giving a score in percent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from recnet.errors import ConfigError
from recnet.pointcloud_io import PointCloud

DEFAULT_K = 10
SIM_EPS = 1e-9
_DEGENERATE_TRACE = 1e-12


def _as_points(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    return np.asarray(pts, dtype=np.float64).reshape(-1, 3)


class SpatialIndex:
    """Exact k-nearest-neighbour queries over a fixed point set.

    Backed by a k-d tree. Results are ordered by distance, ties broken by the
    lower point index.
    """

    def __init__(self, cloud):
        self.points = _as_points(cloud)
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, q, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Distances and indices of the ``k`` nearest points to each row of ``q``."""
        n = len(self.points)
        if k < 1 or k > n:
            raise ConfigError(f"k={k} must be between 1 and the index size {n}")
        q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
        kk = min(k + 1, n)
        d, idx = self._tree.query(q, k=kk)
        d = d.reshape(len(q), kk)
        idx = idx.reshape(len(q), kk)
        out_d = np.empty((len(q), k))
        out_i = np.empty((len(q), k), dtype=np.int64)
        for row in range(len(q)):
            dr, ir = d[row], idx[row]
            if kk > k and dr[k] == dr[k - 1]:
                # the k-th distance is tied with points beyond it: gather all ties
                cand = np.array(self._tree.query_ball_point(q[row], dr[k - 1] * (1 + 1e-12) + 1e-300), dtype=np.int64)
                cd = np.linalg.norm(self.points[cand] - q[row], axis=1)
                dr = np.concatenate([cd, dr])
                ir = np.concatenate([cand, ir])
                ir, first = np.unique(ir, return_index=True)
                dr = dr[first]
            order = np.lexsort((ir, dr))[:k]
            out_d[row], out_i[row] = dr[order], ir[order]
        return out_d, out_i


def knn(index: SpatialIndex, q, k: int) -> np.ndarray:
    """The ``k`` nearest points to a single query point, nearest first."""
    _, idx = index.query(np.asarray(q, dtype=np.float64).reshape(1, 3), k)
    return index.points[idx[0]]


@dataclass
class LocalFeatures:
    normals: np.ndarray
    curvature: np.ndarray
    mean_distance: np.ndarray
    degenerate: np.ndarray


def _neighbours(points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k neighbours of every point excluding the point itself."""
    tree = cKDTree(points)
    d, idx = tree.query(points, k=k + 1)
    own = idx == np.arange(len(points))[:, None]
    # drop the point itself, or the farthest candidate if a duplicate displaced it
    drop = np.where(own.any(axis=1), own.argmax(axis=1), k)
    keep = np.ones_like(idx, dtype=bool)
    keep[np.arange(len(points)), drop] = False
    return d[keep].reshape(-1, k), idx[keep].reshape(-1, k)


def local_features(cloud, k: int = DEFAULT_K) -> LocalFeatures:
    pts = _as_points(cloud)
    if len(pts) <= k:
        raise ConfigError(f"local features need more than k={k} points, got {len(pts)}")
    d, idx = _neighbours(pts, k)
    hood = np.concatenate([pts[:, None, :], pts[idx]], axis=1)
    centered = hood - hood.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / hood.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None)
    normals = evecs[:, :, 0].copy()
    flip = np.einsum("ni,ni->n", normals, pts) > 0
    normals[flip] *= -1.0
    total = evals.sum(axis=1)
    degenerate = total <= _DEGENERATE_TRACE
    curvature = np.where(degenerate, 0.0, evals[:, 0] / np.where(degenerate, 1.0, total))
    normals[degenerate] = (0.0, 0.0, 1.0)
    return LocalFeatures(normals, curvature, d.mean(axis=1), degenerate)


def corr_at(a, b, radius: float = 0.5) -> float:
    """Percent of points with a counterpart within ``radius``, averaged both ways."""
    pa, pb = _as_points(a), _as_points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise ConfigError("corr_at needs two non-empty clouds")
    da, _ = cKDTree(pb).query(pa, k=1)
    db, _ = cKDTree(pa).query(pb, k=1)
    return 100.0 * 0.5 * (float(np.mean(da <= radius)) + float(np.mean(db <= radius)))


@dataclass
class SimilarityReport:
    corr_at: float
    geom_sim: float
    norm_sim: float
    curv_sim: float
    k: int
    radius: float
    directions: dict = field(default_factory=dict)

    def row(self) -> tuple[float, float, float, float]:
        return self.corr_at, self.geom_sim, self.norm_sim, self.curv_sim


def _relative_similarity(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    return 1.0 - np.abs(fa - fb) / np.maximum(np.maximum(fa, fb), SIM_EPS)


def _one_way(fa: LocalFeatures, fb: LocalFeatures, match: np.ndarray) -> tuple[float, float, float]:
    geom = _relative_similarity(fa.mean_distance, fb.mean_distance[match])
    norm = np.abs(np.einsum("ni,ni->n", fa.normals, fb.normals[match]))
    curv = _relative_similarity(fa.curvature, fb.curvature[match])
    return float(np.mean(geom)), float(np.clip(np.mean(norm), 0.0, 1.0)), float(np.mean(curv))


def pointssim(a, b, k: int = DEFAULT_K, radius: float = 0.5) -> SimilarityReport:
    """Geometry, normal and curvature similarity plus Corr@``radius``, all in percent."""
    pa, pb = _as_points(a), _as_points(b)
    if len(pa) <= k or len(pb) <= k:
        raise ConfigError(f"pointssim needs more than k={k} points in both clouds")
    fa, fb = local_features(pa, k), local_features(pb, k)
    _, ab = cKDTree(pb).query(pa, k=1)
    _, ba = cKDTree(pa).query(pb, k=1)
    fwd = _one_way(fa, fb, ab)
    bwd = _one_way(fb, fa, ba)
    geom, norm, curv = (100.0 * 0.5 * (x + y) for x, y in zip(fwd, bwd))
    return SimilarityReport(
        corr_at=corr_at(pa, pb, radius),
        geom_sim=geom,
        norm_sim=norm,
        curv_sim=curv,
        k=k,
        radius=radius,
        directions={"a_to_b": fwd, "b_to_a": bwd},
    )


TABLE_COLUMNS = ("Corr@{r:g}m", "GeomSim", "NormSim", "CurvSim")


@dataclass
class ReconstructionRow:
    method: str
    mean: np.ndarray
    std: np.ndarray
    n_scans: int


def aggregate(method: str, reports: Sequence[SimilarityReport]) -> ReconstructionRow:
    """Mean and population standard deviation of per-scan scores."""
    if not reports:
        raise ConfigError(f"{method}: no scans to aggregate")
    values = np.array([r.row() for r in reports], dtype=np.float64)
    return ReconstructionRow(method, values.mean(axis=0), values.std(axis=0), len(reports))


def evaluate_reconstruction(
    originals: Sequence,
    variants: dict[str, Sequence],
    k: int = DEFAULT_K,
    radius: float = 0.5,
) -> list[ReconstructionRow]:
    """Score each variant's clouds against the originals, one row per variant.

    ``variants`` maps a method name (e.g. ``"Downsampled"``) to clouds in the
    same order as ``originals``.
    """
    rows = []
    for method, clouds in variants.items():
        if len(clouds) != len(originals):
            raise ConfigError(f"{method}: {len(clouds)} clouds for {len(originals)} originals")
        reports = [pointssim(o, c, k, radius) for o, c in zip(originals, clouds)]
        rows.append(aggregate(method, reports))
    return rows


def write_similarity_csv(rows: Sequence[ReconstructionRow], path, radius: float = 0.5) -> None:
    names = [c.format(r=radius) for c in TABLE_COLUMNS]
    header = ["method"] + [f"{n} {stat} [%]" for n in names for stat in ("mean", "std")] + ["scans"]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = [row.method]
            for m, s in zip(row.mean, row.std):
                cells += [f"{m:.4f}", f"{s:.4f}"]
            cells.append(str(row.n_scans))
            fh.write(",".join(cells) + "\n")
