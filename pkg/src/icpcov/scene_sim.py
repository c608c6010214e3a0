"""Synthetic scenes, LiDAR ray casting and a Monte-Carlo ICP error oracle.

Three archetypes cover the typical observability regimes of registration:
``corridor`` (two walls and a floor, motion along the corridor axis is
unobservable), ``plain`` (a nearly flat ground, in-plane motion is weakly
observable) and ``structured`` (floor plus boxes, well constrained).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .icp import IcpConfig, register
from .pointcloud import PointCloud, write_kitti_bin, write_ply
from .se3 import Pose, exp_map, icp_error, save_poses, so3_exp
from .seeding import derive_seed

ARCHETYPES = ("corridor", "plain", "structured")
PARALLELOGRAM, TRIANGLE = 0, 1

DEFAULT_PARAMS = {
    "corridor": {"width": 4.0, "length": 100.0, "wall_height": 3.0},
    "plain": {"size": 40.0, "roughness": 0.05, "cell": 4.0, "height": 5.0},
    "structured": {
        "size": 40.0,
        "min_boxes": 5,
        "max_boxes": 20,
        "box_min": 0.5,
        "box_max": 4.0,
        "clear_halfwidth": 2.5,
        "height": 6.0,
    },
}


@dataclass(eq=False)
class Scene:
    """Planar patches ``(origin, u, v)``; parallelograms or triangles."""

    patches: np.ndarray
    kinds: np.ndarray
    archetype: str
    extent: np.ndarray

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=float).reshape(-1, 3, 3)
        self.kinds = np.asarray(self.kinds, dtype=int).reshape(-1)
        self.extent = np.asarray(self.extent, dtype=float).reshape(2, 3)
        if len(self.patches) == 0:
            raise ValueError("scene needs at least one surface")
        if len(self.kinds) != len(self.patches):
            raise ValueError("one kind per patch required")
        lo, hi = self.extent
        corners = self.corners()
        if np.any(corners < lo - 1e-9) or np.any(corners > hi + 1e-9):
            raise ValueError("surfaces exceed scene extent")

    def corners(self) -> np.ndarray:
        o, u, v = self.patches[:, 0], self.patches[:, 1], self.patches[:, 2]
        quad = self.kinds == PARALLELOGRAM
        return np.concatenate([o, o + u, o + v, (o + u + v)[quad]])

    def contains(self, point) -> bool:
        lo, hi = self.extent
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= lo) and np.all(p <= hi))


@dataclass(frozen=True)
class SensorModel:
    """Rotating LiDAR: ``num_rings`` elevation rings times ``num_azimuth`` columns."""

    num_rings: int = 32
    num_azimuth: int = 720
    vertical_fov: tuple[float, float] = (np.deg2rad(-30.67), np.deg2rad(10.67))
    range_max: float = 50.0
    noise_sigma: float = 0.02

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.range_max <= 0:
            raise ValueError("range_max must be positive")

    @property
    def num_rays(self) -> int:
        return self.num_rings * self.num_azimuth

    def directions(self) -> np.ndarray:
        el = np.linspace(self.vertical_fov[0], self.vertical_fov[1], self.num_rings)
        az = 2.0 * np.pi * np.arange(self.num_azimuth) / self.num_azimuth
        el, az = np.meshgrid(el, az, indexing="ij")
        d = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)
        return d.reshape(-1, 3)


def _rect(origin, u, v):
    return np.array([origin, u, v], dtype=float)


def _corridor(p, rng):
    w, L, h = p["width"], p["length"], p["wall_height"]
    x0, y0 = -L / 2, -w / 2
    patches = [
        _rect((x0, y0, 0), (L, 0, 0), (0, w, 0)),
        _rect((x0, y0, 0), (L, 0, 0), (0, 0, h)),
        _rect((x0, -y0, 0), (L, 0, 0), (0, 0, h)),
    ]
    extent = [(x0, y0, 0.0), (-x0, -y0, h)]
    return patches, [PARALLELOGRAM] * 3, extent


def _plain(p, rng):
    s, rough, cell = p["size"], p["roughness"], p["cell"]
    half = s / 2
    if rough == 0:
        return [_rect((-half, -half, 0), (s, 0, 0), (0, s, 0))], [PARALLELOGRAM], [(-half, -half, 0.0), (half, half, p["height"])]
    n = max(1, int(round(s / cell)))
    g = np.linspace(-half, half, n + 1)
    z = rough * rng.standard_normal((n + 1, n + 1))
    patches, kinds = [], []
    for i in range(n):
        for j in range(n):
            a = np.array([g[i], g[j], z[i, j]])
            b = np.array([g[i + 1], g[j], z[i + 1, j]])
            c = np.array([g[i], g[j + 1], z[i, j + 1]])
            d = np.array([g[i + 1], g[j + 1], z[i + 1, j + 1]])
            patches.append(np.array([a, b - a, c - a]))
            patches.append(np.array([d, c - d, b - d]))
            kinds += [TRIANGLE, TRIANGLE]
    zmin = min(z.min(), 0.0)
    return patches, kinds, [(-half, -half, zmin), (half, half, max(p["height"], z.max()))]


def _box_patches(center, size, yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    ex = np.array([c, s, 0.0]) * size[0]
    ey = np.array([-s, c, 0.0]) * size[1]
    ez = np.array([0.0, 0.0, size[2]])
    o = np.array([center[0], center[1], 0.0]) - 0.5 * ex - 0.5 * ey
    return [
        _rect(o, ex, ez),
        _rect(o + ey, ex, ez),
        _rect(o, ey, ez),
        _rect(o + ex, ey, ez),
        _rect(o + ez, ex, ey),
    ]


def _structured(p, rng):
    s = p["size"]
    half = s / 2
    patches = [_rect((-half, -half, 0), (s, 0, 0), (0, s, 0))]
    n_boxes = int(rng.integers(p["min_boxes"], p["max_boxes"] + 1))
    placed = 0
    while placed < n_boxes:
        size = rng.uniform(p["box_min"], p["box_max"], 3)
        yaw = rng.uniform(0, np.pi / 2)
        r = 0.5 * np.hypot(size[0], size[1])
        cx = rng.uniform(-half + r, half - r)
        cy = rng.uniform(-half + r, half - r)
        if abs(cy) - r < p["clear_halfwidth"]:
            continue
        patches += _box_patches((cx, cy), size, yaw)
        placed += 1
    return patches, [PARALLELOGRAM] * len(patches), [(-half, -half, 0.0), (half, half, p["height"])]


_BUILDERS = {"corridor": _corridor, "plain": _plain, "structured": _structured}


def make_scene(archetype: str, params: dict | None = None, rng_seed=0) -> Scene:
    if archetype not in _BUILDERS:
        raise ValueError(f"unknown archetype {archetype!r}; expected one of {ARCHETYPES}")
    p = dict(DEFAULT_PARAMS[archetype])
    p.update(params or {})
    rng = np.random.default_rng(derive_seed(rng_seed, "scene", archetype))
    patches, kinds, extent = _BUILDERS[archetype](p, rng)
    return Scene(np.array(patches), np.array(kinds), archetype, np.array(extent))


# -- ray casting -------------------------------------------------------------


def intersect(scene: Scene, origin, directions, chunk: int = 4096) -> np.ndarray:
    """Distance along each unit ray to the nearest surface (``inf`` on a miss)."""
    origin = np.asarray(origin, dtype=float)
    D = np.asarray(directions, dtype=float).reshape(-1, 3)
    O, U, V = scene.patches[:, 0], scene.patches[:, 1], scene.patches[:, 2]
    tvec = origin - O
    n_det = np.cross(V, U)
    n_a = np.cross(V, tvec)
    q = np.cross(tvec, U)
    s_num = np.einsum("ij,ij->i", V, q)
    tri = scene.kinds == TRIANGLE
    out = np.full(len(D), np.inf)
    for start in range(0, len(D), chunk):
        d = D[start : start + chunk]
        det = d @ n_det.T
        ok = np.abs(det) > 1e-12
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        a = (d @ n_a.T) * inv
        b = (d @ q.T) * inv
        s = s_num * inv
        inside = np.where(tri, a + b <= 1.0, (a <= 1.0) & (b <= 1.0))
        hit = ok & (a >= 0.0) & (b >= 0.0) & inside & (s > 1e-9)
        s = np.where(hit, s, np.inf)
        out[start : start + chunk] = s.min(axis=1)
    return out


def cast_rays(scene: Scene, sensor_pose: Pose, sensor: SensorModel):
    """Noise-free ranges and sensor-frame ray directions for every ray."""
    if not scene.contains(sensor_pose.translation):
        raise ValueError("sensor lies outside the scene extent")
    d_sensor = sensor.directions()
    ranges = intersect(scene, sensor_pose.translation, d_sensor @ sensor_pose.rotation.T)
    ranges[ranges > sensor.range_max] = np.inf
    return ranges, d_sensor


def _truncated_noise(rng, n, sigma):
    """Gaussian noise re-drawn until every sample lies within 3 sigma."""
    e = rng.standard_normal(n)
    bad = np.abs(e) > 3.0
    while np.any(bad):
        e[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(e) > 3.0
    return sigma * e


def scan_from_ranges(ranges, d_sensor, sensor: SensorModel, rng_seed, source_id="") -> PointCloud:
    hit = np.isfinite(ranges)
    if not np.any(hit):
        raise ValueError("no ray hit the scene")
    r = ranges[hit]
    if sensor.noise_sigma > 0:
        r = r + _truncated_noise(np.random.default_rng(rng_seed), len(r), sensor.noise_sigma)
    return PointCloud(d_sensor[hit] * r[:, None], source_id=source_id)


def render_scan(scene: Scene, sensor_pose: Pose, sensor: SensorModel = SensorModel(), rng_seed=0) -> PointCloud:
    """Ray-cast a scan; points are expressed in the sensor frame."""
    ranges, d = cast_rays(scene, sensor_pose, sensor)
    return scan_from_ranges(ranges, d, sensor, rng_seed, source_id=f"{scene.archetype}")


# -- trajectories and sequences ----------------------------------------------


def make_trajectory(scene: Scene, n_poses: int, rng_seed=0, step=(0.4, 1.0), height: float = 1.5) -> list[Pose]:
    """Mostly forward motion along +x with small heading, roll and pitch wobble."""
    rng = np.random.default_rng(derive_seed(rng_seed, "trajectory"))
    lo, hi = scene.extent
    lateral = 0.5 if scene.archetype == "corridor" else 1.0
    x = max(lo[0] + 5.0, -10.0)
    y = rng.uniform(-lateral, lateral) * 0.5
    yaw = rng.normal(0.0, np.deg2rad(3.0))
    poses = []
    for _ in range(n_poses):
        tilt = rng.normal(0.0, np.deg2rad(0.5), 2)
        R = so3_exp(np.array([0.0, 0.0, yaw])) @ so3_exp(np.array([tilt[0], tilt[1], 0.0]))
        poses.append(Pose(R, (x, y, height)))
        d = rng.uniform(*step)
        x += d * np.cos(yaw)
        y = float(np.clip(y + d * np.sin(yaw), -lateral, lateral))
        yaw = 0.7 * yaw + rng.normal(0.0, np.deg2rad(2.0)) - 0.3 * y / lateral * np.deg2rad(5.0)
    return poses


def simulate_sequence(scene: Scene, poses, sensor: SensorModel = SensorModel(), rng_seed=0):
    """Render one scan per pose: list of ``(PointCloud, Pose)``."""
    return [
        (render_scan(scene, T, sensor, derive_seed(rng_seed, "scan", i)), T)
        for i, T in enumerate(poses)
    ]


def synthetic_sequence(archetype: str, n_poses: int, rng_seed=0, sensor: SensorModel = SensorModel(), params=None):
    """Scene, trajectory and scans from one seed: ``(scene, [(cloud, pose), ...])``."""
    # each stage derives its own stream from the seed with a distinct purpose
    scene = make_scene(archetype, params, rng_seed)
    poses = make_trajectory(scene, n_poses, rng_seed)
    return scene, simulate_sequence(scene, poses, sensor, rng_seed)


# -- serialisation ------------------------------------------------------------


def save_scene(path, scene: Scene) -> None:
    lines = [
        "# icpcov scene v1",
        f"archetype {scene.archetype}",
        "extent " + " ".join(f"{v:.17g}" for v in scene.extent.reshape(-1)),
    ]
    for kind, p in zip(scene.kinds, scene.patches):
        lines.append(f"{'tri' if kind == TRIANGLE else 'quad'} " + " ".join(f"{v:.17g}" for v in p.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_scene(path) -> Scene:
    archetype, extent, patches, kinds = None, None, [], []
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        if tok[0] == "archetype":
            archetype = tok[1]
        elif tok[0] == "extent":
            extent = np.array(tok[1:], dtype=float)
        elif tok[0] in ("quad", "tri"):
            patches.append(np.array(tok[1:], dtype=float).reshape(3, 3))
            kinds.append(TRIANGLE if tok[0] == "tri" else PARALLELOGRAM)
        else:
            raise ValueError(f"{path}: unexpected line {line!r}")
    if archetype is None or extent is None:
        raise ValueError(f"{path}: missing archetype or extent")
    return Scene(np.array(patches), np.array(kinds), archetype, extent)


def export_kitti_sequence(out_dir, sequence) -> None:
    """Write ``velodyne/NNNNNN.bin`` scans and a ``poses.txt`` file."""
    out = Path(out_dir)
    (out / "velodyne").mkdir(parents=True, exist_ok=True)
    for i, (cloud, _) in enumerate(sequence):
        write_kitti_bin(out / "velodyne" / f"{i:06d}.bin", cloud)
    save_poses(out / "poses.txt", [T for _, T in sequence])


def export_ply_sequence(out_dir, sequence) -> None:
    """Write ``scans/NNNNNN.ply`` scans and a ``poses.txt`` file."""
    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    for i, (cloud, _) in enumerate(sequence):
        write_ply(out / "scans" / f"{i:06d}.ply", cloud)
    save_poses(out / "poses.txt", [T for _, T in sequence])


# -- Monte-Carlo error oracle -------------------------------------------------


@dataclass
class ErrorSamples:
    """Label twists of repeated registrations; failed trials hold NaN rows."""

    twists: np.ndarray
    converged: np.ndarray
    failed: int

    @property
    def valid(self) -> np.ndarray:
        return self.twists[np.isfinite(self.twists).all(axis=1)]

    def covariance(self) -> np.ndarray:
        return np.cov(self.valid, rowvar=False, bias=True)


def empirical_icp_error_distribution(
    scene: Scene,
    pose_a: Pose,
    pose_b: Pose,
    sensor: SensorModel = SensorModel(),
    trials: int = 100,
    icp_cfg: IcpConfig = IcpConfig(),
    guess_sigma: tuple[float, float] | None = (0.05, np.deg2rad(1.0)),
    rng_seed=0,
    workers: int = 1,
) -> ErrorSamples:
    """Repeat scan-and-register ``trials`` times with fresh noise and seeds.

    The reading scan is taken at ``pose_b`` and registered against the
    reference scan taken at ``pose_a``; each label is the error twist against
    the true relative pose. ``guess_sigma`` (metres, radians) perturbs the
    initial guess isotropically; ``None`` starts from the exact relative pose.
    """
    ranges_a, d = cast_rays(scene, pose_a, sensor)
    ranges_b, _ = cast_rays(scene, pose_b, sensor)
    T_ab = pose_a.inverse() @ pose_b

    def trial(i):
        ref = scan_from_ranges(ranges_a, d, sensor, derive_seed(rng_seed, "trial", i, "a"))
        rea = scan_from_ranges(ranges_b, d, sensor, derive_seed(rng_seed, "trial", i, "b"))
        guess = T_ab
        if guess_sigma is not None:
            g = np.random.default_rng(derive_seed(rng_seed, "trial", i, "guess")).standard_normal(6)
            g[:3] *= guess_sigma[0]
            g[3:] *= guess_sigma[1]
            guess = T_ab @ exp_map(g)
        try:
            res, _ = register(rea, ref, guess, icp_cfg, derive_seed(rng_seed, "trial", i, "icp"))
        except (ValueError, np.linalg.LinAlgError):
            return np.full(6, np.nan), False
        if res.degenerate:
            return np.full(6, np.nan), False
        return icp_error(res.estimate, T_ab), res.converged

    if trials < 1:
        raise ValueError("trials must be positive")
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            out = list(ex.map(trial, range(trials)))
    else:
        out = [trial(i) for i in range(trials)]
    twists = np.array([o[0] for o in out])
    converged = np.array([o[1] for o in out], dtype=bool)
    failed = int((~np.isfinite(twists).all(axis=1)).sum())
    return ErrorSamples(twists, converged, failed)
