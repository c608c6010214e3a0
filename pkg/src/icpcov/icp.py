"""Point-to-plane ICP with trimmed outlier rejection."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .pointcloud import FilteredPair, PointCloud, build_index, estimate_normals, subsample_indices
from .se3 import Pose, exp_map
from .seeding import derive_seed

RANK_TOL = 1e-10


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 40
    rotation_epsilon: float = 1e-4
    translation_epsilon: float = 1e-4
    trim_ratio: float = 0.15
    # None disables subsampling
    subsample_size: int | None = 2048
    normal_k: int = 10

    def __post_init__(self):
        if not 0.0 <= self.trim_ratio < 1.0:
            raise ValueError("trim_ratio must lie in [0, 1)")
        if self.rotation_epsilon <= 0 or self.translation_epsilon <= 0:
            raise ValueError("convergence thresholds must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "IcpConfig":
        return cls(**d)

    def save(self, path) -> None:
        """Plain ``key = value`` lines; ``none`` disables subsampling."""
        lines = [f"{k} = {'none' if v is None else v}" for k, v in self.to_dict().items()]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "IcpConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = (part.strip() for part in line.partition("="))
            if not sep or key not in types:
                raise ValueError(f"{path}:{lineno}: expected one of {sorted(types)} as 'key = value'")
            if raw.lower() == "none":
                values[key] = None
            elif "int" in str(types[key]):
                values[key] = int(raw)
            else:
                values[key] = float(raw)
        return cls(**values)


@dataclass
class IcpResult:
    estimate: Pose
    iterations: int
    converged: bool
    final_residual: float
    initial_residual: float = math.nan
    degenerate: bool = False
    null_space: np.ndarray | None = field(default=None, repr=False)


@dataclass
class Matches:
    """Matched pairs: ``source`` already expressed in the reference frame."""

    source: np.ndarray
    target: np.ndarray
    normals: np.ndarray

    def residuals(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.normals, self.source - self.target)


class DegenerateSystemError(np.linalg.LinAlgError):
    """The point-to-plane normal equations are rank deficient.

    ``increment`` holds the minimum-norm solution restricted to the observable
    subspace and ``null_space`` a ``(6, k)`` basis of the unobservable twist
    directions.
    """

    def __init__(self, increment, null_space, eigenvalues):
        super().__init__(f"point-to-plane system has {null_space.shape[1]} unconstrained direction(s)")
        self.increment = increment
        self.null_space = null_space
        self.eigenvalues = eigenvalues


def _trim(r: np.ndarray, trim_ratio: float) -> np.ndarray:
    n = len(r)
    keep = n - int(math.floor(trim_ratio * n))
    # stable sort: equal residuals keep their input order
    return np.sort(np.argsort(np.abs(r), kind="stable")[:keep])


def point_to_plane_step(matches: Matches, trim_ratio: float = 0.0) -> np.ndarray:
    """Gauss-Newton increment ``(rho, phi)`` for ``T <- exp(delta) T``."""
    r = matches.residuals()
    keep = _trim(r, trim_ratio)
    if len(keep) < 6:
        raise ValueError(f"need at least 6 matches after trimming, got {len(keep)}")
    p, n, r = matches.source[keep], matches.normals[keep], r[keep]
    J = np.hstack([n, np.cross(p, n)])
    H = J.T @ J
    g = J.T @ r
    w, U = np.linalg.eigh(H)
    tol = RANK_TOL * max(w[-1], 1e-300)
    weak = w <= tol
    if np.any(weak):
        strong = ~weak
        inc = -(U[:, strong] @ ((U[:, strong].T @ g) / w[strong]))
        raise DegenerateSystemError(inc, U[:, weak], w)
    return -np.linalg.solve(H, g)


def _match(source_pts, index, ref: PointCloud):
    _, nn = index.knn(source_pts, 1)
    nn = nn[:, 0]
    m = Matches(source_pts, ref.points[nn], ref.normals[nn])
    if ref.unreliable is not None:
        good = ~ref.unreliable[nn]
        m = Matches(m.source[good], m.target[good], m.normals[good])
    return m


def _trimmed_rms(m: Matches, trim_ratio: float) -> float:
    r = m.residuals()
    if len(r) == 0:
        return math.inf
    keep = _trim(r, trim_ratio)
    return float(np.sqrt(np.mean(r[keep] ** 2)))


def filter_pair(
    reading: PointCloud, reference: PointCloud, cfg: IcpConfig, rng_seed
) -> FilteredPair:
    """Normals from full clouds, then seeded random subsampling of both clouds."""

    def prepare(cloud: PointCloud, tag: str) -> PointCloud:
        n = len(cloud)
        size = n if cfg.subsample_size is None else cfg.subsample_size
        if n < size:
            raise ValueError(f"{tag} cloud has {n} points, fewer than subsample size {size}")
        idx = np.arange(n) if cfg.subsample_size is None else subsample_indices(n, size, derive_seed(rng_seed, tag))
        if cloud.normals is not None:
            return cloud.select(idx)
        # equivalent to estimating on every point and then subsampling
        return estimate_normals(cloud, cfg.normal_k, at=idx)

    return FilteredPair(prepare(reading, "reading"), prepare(reference, "reference"))


def register(
    reading: PointCloud,
    reference: PointCloud,
    initial_guess: Pose,
    cfg: IcpConfig = IcpConfig(),
    rng_seed=0,
) -> tuple[IcpResult, FilteredPair]:
    """Align ``reading`` onto ``reference``; returns the estimate and the decimated pair.

    The estimate maps reading-frame points into the reference frame. The
    returned pose is the accepted iterate with the lowest trimmed residual, so
    the final residual never exceeds the residual at the initial guess.
    """
    pair = filter_pair(reading, reference, cfg, rng_seed)
    src, ref = pair.reading.points, pair.reference
    index = build_index(ref)

    T = initial_guess
    m = _match(T.apply(src), index, ref)
    initial = _trimmed_rms(m, cfg.trim_ratio)
    best, best_res = T, initial
    converged = degenerate = False
    null_space = None
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        try:
            delta = point_to_plane_step(m, cfg.trim_ratio)
        except DegenerateSystemError as exc:
            degenerate, null_space = True, exc.null_space
            break
        except ValueError:
            degenerate = True
            break
        T = exp_map(delta) @ T
        m = _match(T.apply(src), index, ref)
        res = _trimmed_rms(m, cfg.trim_ratio)
        if res <= best_res:
            best, best_res = T, res
        if np.linalg.norm(delta[:3]) < cfg.translation_epsilon and np.linalg.norm(delta[3:]) < cfg.rotation_epsilon:
            converged = True
            break
    result = IcpResult(best, it, converged, best_res, initial, degenerate, null_space)
    return result, pair
