"""Two-stage RANSAC ground removal for single-frame LiDAR."""
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, NoGroundFound
from .kernels import plane_inlier_counts
from .scene import named_rng


@dataclass(frozen=True)
class PlaneModel:
    normal: tuple
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if abs(norm - 1.0) > 1e-9:
            n = n / norm
        object.__setattr__(self, "normal", tuple(float(v) for v in n))
        object.__setattr__(self, "offset", float(self.offset))

    def signed_distance(self, points):
        return np.asarray(points)[:, :3] @ np.asarray(self.normal) + self.offset


@dataclass(frozen=True)
class GroundParams:
    coarse_tol: float = 0.20
    fine_tol: float = 0.08
    n_iters: int = 200
    height_margin: float = 0.15
    keep_above: float = 0.5
    min_inlier_frac: float = 0.10
    max_tilt_deg: float = 15.0
    max_ground_height: float = 1.0
    min_coverage: float = 0.15
    coverage_cell: float = 2.0
    seed: int = 0


def _check_points(points):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) < 3:
        raise DegenerateInput(f"need at least 3 points, got {len(pts)}")
    centered = pts[:, :3] - pts[:, :3].mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateInput("points are collinear")
    return pts


def _hypotheses(pts, n_iters, rng):
    n = len(pts)
    tri = np.stack([rng.choice(n, size=3, replace=False) for _ in range(n_iters)])
    a, b, c = pts[tri[:, 0], :3], pts[tri[:, 1], :3], pts[tri[:, 2], :3]
    normal = np.cross(b - a, c - a)
    norm = np.linalg.norm(normal, axis=1)
    ok = norm > 1e-12
    normal = normal[ok] / norm[ok, None]
    # canonical orientation: z up, then x, then y
    flip = (normal[:, 2] < 0) | ((normal[:, 2] == 0) & ((normal[:, 0] < 0) | ((normal[:, 0] == 0) & (normal[:, 1] < 0))))
    normal[flip] *= -1
    d = -np.einsum("ij,ij->i", normal, a[ok])
    return np.column_stack([normal, d])


def bev_coverage(points, subset, cell):
    """Share of the cloud's BEV bounding-box cells occupied by ``subset``."""
    lo = points[:, :2].min(axis=0)
    extent = points[:, :2].max(axis=0) - lo
    dims = np.maximum(np.ceil(extent / cell), 1).astype(np.int64)
    ij = np.minimum(((subset[:, :2] - lo) / cell).astype(np.int64), dims - 1)
    occupied = len(np.unique(ij[:, 0] * dims[1] + ij[:, 1]))
    return occupied / float(dims[0] * dims[1])


def ransac_plane(points, n_iters=200, inlier_tol=0.1, seed=0, accept=None, stream="ransac"):
    """Plane with the most inliers among ``n_iters`` random 3-point hypotheses.

    ``accept`` optionally filters hypotheses (array ``(H, 4)`` -> bool mask).
    Returns ``(PlaneModel, inlier_mask)``, or ``(None, all-False)`` when no
    hypothesis survives the filter.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    if not inlier_tol > 0:
        raise ValueError("inlier_tol must be > 0")
    pts = _check_points(points)
    planes = _hypotheses(pts, int(n_iters), named_rng(seed, stream))
    if accept is not None and len(planes):
        planes = planes[accept(planes)]
    if len(planes) == 0:
        return None, np.zeros(len(pts), dtype=bool)
    counts = plane_inlier_counts(pts, planes, inlier_tol)
    best = planes[int(np.argmax(counts))]
    plane = PlaneModel(tuple(best[:3]), best[3])
    return plane, np.abs(plane.signed_distance(pts)) <= inlier_tol


def ground_mask(cloud, params=GroundParams()):
    """Boolean mask of ground points; all-False (with a warning) when no ground is found."""
    pts = np.asarray(cloud, dtype=np.float64)
    if len(pts) == 0:
        raise DegenerateInput("empty cloud")
    cos_tilt = np.cos(np.deg2rad(params.max_tilt_deg))

    def plausible(planes):
        return (planes[:, 2] >= cos_tilt) & (np.abs(planes[:, 3]) <= params.max_ground_height)

    none = np.zeros(len(pts), dtype=bool)
    plane1, in1 = ransac_plane(pts, params.n_iters, params.coarse_tol, params.seed, plausible, "ground-coarse")
    if (plane1 is None or in1.sum() < params.min_inlier_frac * len(pts)
            or bev_coverage(pts, pts[in1], params.coverage_cell) < params.min_coverage):
        warnings.warn("no ground plane found; cloud returned unchanged", NoGroundFound, stacklevel=2)
        return none
    idx1 = np.flatnonzero(in1)
    if len(idx1) < 3:
        return none
    try:
        plane2, in2 = ransac_plane(pts[idx1], params.n_iters, params.fine_tol, params.seed, plausible,
                                   "ground-fine")
    except DegenerateInput:
        plane2, in2 = plane1, np.abs(plane1.signed_distance(pts[idx1])) <= params.fine_tol
    if plane2 is None:
        plane2, in2 = plane1, np.abs(plane1.signed_distance(pts[idx1])) <= params.fine_tol
    height = plane2.signed_distance(pts[idx1])
    low = (height < params.height_margin) & (height <= params.keep_above)
    mask = none.copy()
    mask[idx1[in2 & low]] = True
    return mask


def remove_ground(cloud, params=GroundParams()):
    """Drop ground returns: coarse RANSAC, fine refit on its inliers, then a height check."""
    pts = np.asarray(cloud, dtype=np.float64)
    return pts[~ground_mask(pts, params)]
