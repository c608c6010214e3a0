"""Point-cloud container, spatial index, normals, subsampling and file I/O."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

DEGENERATE_RATIO = 0.9
# middle/largest scatter eigenvalue below this counts as rank < 2 (collinear ring arcs)
RANK_TOL = 3e-2


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    source_id: str = ""
    # normals flagged by estimate_normals as coming from a degenerate neighbourhood
    unreliable: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=float).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise ValueError("normals and points differ in length")
            if np.abs(np.linalg.norm(self.normals, axis=1) - 1.0).max(initial=0.0) > 1e-6:
                raise ValueError("normals must be unit length")
        if self.unreliable is not None:
            self.unreliable = np.asarray(self.unreliable, dtype=bool).reshape(-1)

    def __len__(self):
        return len(self.points)

    def select(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            self.source_id,
            None if self.unreliable is None else self.unreliable[idx],
        )

    def transformed(self, pose) -> "PointCloud":
        normals = None if self.normals is None else self.normals @ pose.rotation.T
        return replace(self, points=pose.apply(self.points), normals=normals)


@dataclass(eq=False)
class FilteredPair:
    """Decimated reading/reference clouds exactly as fed to the optimiser."""

    reading: PointCloud
    reference: PointCloud


class SpatialIndex:
    """Exact k-nearest-neighbour and radius queries over a fixed point set."""

    def __init__(self, points):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(points) == 0:
            raise ValueError("cannot index an empty cloud")
        self.points = points
        self._tree = cKDTree(points)

    def __len__(self):
        return len(self.points)

    def knn(self, queries, k: int, max_distance: float = np.inf):
        """Return ``(distances, indices)`` of shape ``(M, k)``.

        Missing neighbours (beyond ``max_distance`` or past the cloud size)
        carry distance ``inf`` and index ``len(self)``.
        """
        queries = np.asarray(queries, dtype=float).reshape(-1, 3)
        d, i = self._tree.query(queries, k=k, distance_upper_bound=max_distance)
        if k == 1:
            d, i = d[:, None], i[:, None]
        return d, i

    def radius(self, query, r: float) -> np.ndarray:
        idx = self._tree.query_ball_point(np.asarray(query, dtype=float), r)
        return np.sort(np.asarray(idx, dtype=int))


def build_index(cloud: PointCloud | np.ndarray) -> SpatialIndex:
    points = cloud.points if isinstance(cloud, PointCloud) else cloud
    return SpatialIndex(points)


def _normals_from_neighbourhoods(nbrs: np.ndarray):
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    scatter = np.einsum("nki,nkj->nij", centered, centered)
    w, v = np.linalg.eigh(scatter)
    normals = v[:, :, 0]
    scale = np.maximum(w[:, 2], 1e-300)
    rank_deficient = w[:, 1] <= RANK_TOL * scale
    ratio = w[:, 0] / np.where(rank_deficient, 1.0, w[:, 1])
    unreliable = rank_deficient | (ratio > DEGENERATE_RATIO)
    return normals, unreliable


def estimate_normals(
    cloud: PointCloud,
    k: int = 10,
    sensor_origin=(0.0, 0.0, 0.0),
    at=None,
    index: SpatialIndex | None = None,
) -> PointCloud:
    """Per-point normals from the ``k`` nearest neighbours plus the point itself.

    Normals are oriented towards ``sensor_origin``. Neighbourhoods whose scatter
    has rank < 2, or whose two smallest eigenvalues are within a ratio of 0.9,
    are flagged in ``unreliable``. With ``at`` (an index array) normals are only
    computed for those points, still using the full cloud as neighbourhood, and
    the returned cloud holds just that selection.
    """
    n = len(cloud)
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} points to estimate normals, got {n}")
    index = index or build_index(cloud)
    sel = np.arange(n) if at is None else np.asarray(at)
    query = cloud.points[sel]
    _, nn = index.knn(query, k + 1)
    normals, unreliable = _normals_from_neighbourhoods(cloud.points[nn])
    to_sensor = np.asarray(sensor_origin, dtype=float) - query
    flip = np.einsum("ij,ij->i", normals, to_sensor) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(query, normals, cloud.source_id, unreliable)


def subsample_indices(n: int, size: int, rng_seed) -> np.ndarray:
    if size > n:
        raise ValueError(f"cannot subsample {size} points from a cloud of {n}")
    return np.random.default_rng(rng_seed).choice(n, size=size, replace=False)


def random_subsample(cloud: PointCloud, size: int, rng_seed) -> PointCloud:
    """Uniform sample without replacement; normals travel with their points."""
    return cloud.select(subsample_indices(len(cloud), size, rng_seed))


def farthest_point_sample(points, size: int, rng_seed=None) -> np.ndarray:
    """Greedy farthest-point selection.

    The start point is drawn from ``rng_seed``; with ``rng_seed=None`` it is
    the lexicographically smallest point, which makes the selection depend on
    coordinates only and not on input order. Ties go to the lowest index.
    """
    points = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=float)
    n = len(points)
    if size > n:
        raise ValueError(f"cannot sample {size} points from {n}")
    if size <= 0:
        return np.zeros(0, dtype=int)
    if rng_seed is None:
        start = int(np.lexsort(points.T[::-1])[0])
    else:
        start = int(np.random.default_rng(rng_seed).integers(n))
    chosen = np.empty(size, dtype=int)
    chosen[0] = start
    dist = np.sum((points - points[start]) ** 2, axis=1)
    for j in range(1, size):
        nxt = int(np.argmax(dist))
        chosen[j] = nxt
        np.minimum(dist, np.sum((points - points[nxt]) ** 2, axis=1), out=dist)
    return chosen


# -- file formats ------------------------------------------------------------


def read_kitti_bin(path) -> PointCloud:
    """Velodyne scan: little-endian float32 ``(x, y, z, reflectance)`` records."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise ValueError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return PointCloud(data[:, :3].astype(float), source_id=str(path))


def write_kitti_bin(path, cloud: PointCloud, reflectance=None) -> None:
    data = np.zeros((len(cloud), 4), dtype="<f4")
    data[:, :3] = cloud.points
    if reflectance is not None:
        data[:, 3] = reflectance
    Path(path).write_bytes(data.tobytes())


def write_ply(path, cloud: PointCloud) -> None:
    has_n = cloud.normals is not None
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if has_n:
        lines += ["property double nx", "property double ny", "property double nz"]
    lines.append("end_header")
    data = np.hstack([cloud.points, cloud.normals]) if has_n else cloud.points
    body = "\n".join(" ".join(f"{v:.17g}" for v in row) for row in data)
    Path(path).write_text("\n".join(lines) + "\n" + body + ("\n" if len(data) else ""))


def read_ply(path) -> PointCloud:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    props, count, i = [], None, 1
    while i < len(text):
        tok = text[i].split()
        i += 1
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise ValueError(f"{path}: only ascii PLY is supported")
        if tok[0] == "element" and tok[1] == "vertex":
            count = int(tok[2])
        elif tok[0] == "property" and count is not None:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            break
    if count is None or any(p not in props for p in "xyz"):
        raise ValueError(f"{path}: missing vertex element or xyz properties")
    rows = [line.split() for line in text[i : i + count]]
    if len(rows) != count or any(len(r) != len(props) for r in rows):
        raise ValueError(f"{path}: truncated vertex data")
    data = np.array(rows, dtype=float).reshape(count, len(props))
    col = {p: j for j, p in enumerate(props)}
    points = data[:, [col["x"], col["y"], col["z"]]]
    normals = None
    if all(p in col for p in ("nx", "ny", "nz")):
        normals = data[:, [col["nx"], col["ny"], col["nz"]]]
    return PointCloud(points, normals, source_id=str(path))
