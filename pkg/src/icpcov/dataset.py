"""Labelled registration datasets: guess sampling, ICP runs, error labels, I/O."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .icp import IcpConfig, filter_pair, register
from .pointcloud import FilteredPair, PointCloud, read_kitti_bin, read_ply, write_ply
from .se3 import Pose, exp_map, icp_error, load_poses, log_map, pose_from_row, pose_to_row
from .seeding import derive_seed

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class InitialGuessConfig:
    """Hierarchical tangent-space perturbation of the true relative pose.

    With ``s = |log(T)|`` per component (floored), a bias is drawn from
    ``N(0, (a s)^2)`` and the perturbation from ``N(bias, (b s)^2)``.
    """

    a: float = 0.25
    b: float = 0.2
    mode: str = "tangent_scaled"
    floor_translation: float = 0.0
    floor_rotation: float = 0.0

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise ValueError("a and b must be non-negative")
        if self.mode != "tangent_scaled":
            raise ValueError(f"unsupported guess mode {self.mode!r}")


# floors keep zero-motion pairs from getting an exact initial guess
DATASET_GUESS = InitialGuessConfig(floor_translation=0.01, floor_rotation=0.005)


def sample_initial_guess(T_true: Pose, cfg: InitialGuessConfig = InitialGuessConfig(), rng_seed=0) -> Pose:
    s = np.abs(log_map(T_true))
    s[:3] = np.maximum(s[:3], cfg.floor_translation)
    s[3:] = np.maximum(s[3:], cfg.floor_rotation)
    rng = np.random.default_rng(rng_seed)
    bias = cfg.a * s * rng.standard_normal(6)
    delta = bias + cfg.b * s * rng.standard_normal(6)
    if not np.any(delta):
        return T_true
    return T_true @ exp_map(delta)


@dataclass(eq=False)
class RegistrationSample:
    pair: FilteredPair
    estimate: Pose
    ground_truth: Pose
    label: np.ndarray
    guess: Pose
    converged: bool
    sequence: str = ""
    index: int = 0
    guess_index: int = 0
    seed: int = 0
    iterations: int = 0
    degenerate: bool = False
    # strict flag: the last increment fell below the ICP epsilons
    icp_converged: bool = True

    def recompute_label(self) -> np.ndarray:
        return icp_error(self.estimate, self.ground_truth)


@dataclass(eq=False)
class DatasetManifest:
    samples: list[RegistrationSample]
    sequences: list[str]
    split: dict[str, str] = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    configs: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def sequence_samples(self, name: str) -> list[RegistrationSample]:
        return [s for s in self.samples if s.sequence == name]

    def split_samples(self, split: str) -> list[RegistrationSample]:
        return [s for s in self.samples if self.split.get(s.sequence, "train") == split]

    def subset(self, sequences) -> "DatasetManifest":
        keep = [q for q in self.sequences if q in set(sequences)]
        return DatasetManifest(
            [s for s in self.samples if s.sequence in set(keep)],
            keep,
            {q: self.split[q] for q in keep if q in self.split},
            {q: self.seeds[q] for q in keep if q in self.seeds},
            dict(self.configs),
        )


def build_dataset(
    sequence,
    icp_cfg: IcpConfig = IcpConfig(),
    guess_cfg: InitialGuessConfig = DATASET_GUESS,
    rng_seed=0,
    name: str = "seq00",
    guesses_per_pair: int = 1,
    workers: int = 1,
) -> DatasetManifest:
    """Register every consecutive scan pair of ``sequence`` (list of ``(cloud, pose)``).

    Scan ``i + 1`` is the reading and scan ``i`` the reference, so estimates
    and labels refer to the relative pose ``T_i^-1 T_{i+1}``.

    A sample counts as failed (``converged=False``) when the linear system
    became degenerate or registration raised. Stopping at the iteration cap
    is a normal exit, as in common ICP toolkits; ``icp_converged`` keeps the
    strict epsilon-based flag.
    """
    sequence = list(sequence)
    if len(sequence) < 2:
        raise ValueError("a sequence needs at least two scans")
    jobs = [(i, g) for i in range(len(sequence) - 1) for g in range(guesses_per_pair)]

    def run(job):
        i, g = job
        (ref, T_i), (rea, T_j) = sequence[i], sequence[i + 1]
        T_rel = T_i.inverse() @ T_j
        seed = derive_seed(rng_seed, name, i, g)
        guess = sample_initial_guess(T_rel, guess_cfg, derive_seed(seed, "guess"))
        try:
            res, pair = register(rea, ref, guess, icp_cfg, derive_seed(seed, "icp"))
        except (ValueError, np.linalg.LinAlgError):
            pair = filter_pair(rea, ref, icp_cfg, derive_seed(seed, "icp"))
            return RegistrationSample(
                pair, guess, T_rel, icp_error(guess, T_rel), guess, False, name, i, g, seed, 0, True, False
            )
        return RegistrationSample(
            pair=pair,
            estimate=res.estimate,
            ground_truth=T_rel,
            label=icp_error(res.estimate, T_rel),
            guess=guess,
            converged=not res.degenerate,
            sequence=name,
            index=i,
            guess_index=g,
            seed=seed,
            iterations=res.iterations,
            degenerate=res.degenerate,
            icp_converged=bool(res.converged),
        )

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            samples = list(ex.map(run, jobs))
    else:
        samples = [run(j) for j in jobs]
    return DatasetManifest(
        samples,
        [name],
        {name: "train"},
        {name: int(rng_seed)},
        {"icp": icp_cfg.to_dict(), "guess": asdict(guess_cfg), "guesses_per_pair": guesses_per_pair},
    )


def merge_manifests(manifests) -> DatasetManifest:
    out = DatasetManifest([], [])
    for m in manifests:
        dup = set(out.sequences) & set(m.sequences)
        if dup:
            raise ValueError(f"duplicate sequence names: {sorted(dup)}")
        out.samples += m.samples
        out.sequences += m.sequences
        out.split.update(m.split)
        out.seeds.update(m.seeds)
        out.configs = out.configs or dict(m.configs)
    return out


def assign_split(manifest: DatasetManifest, assignment: dict[str, str]) -> DatasetManifest:
    """Set the split of whole sequences; samples are never split individually."""
    for name, split in assignment.items():
        if name not in manifest.sequences:
            raise KeyError(name)
        manifest.split[name] = split
    return manifest


def convergence_stats(manifest: DatasetManifest) -> dict:
    n = len(manifest)
    conv = sum(s.converged for s in manifest.samples)
    strict = sum(s.icp_converged for s in manifest.samples)
    return {"samples": n, "converged": conv, "failed": n - conv, "hit_iteration_cap": conv - strict}


# -- persistence --------------------------------------------------------------


def _row(T: Pose) -> list[float]:
    return [float(v) for v in pose_to_row(T)]


def save_manifest(manifest: DatasetManifest, out_dir) -> Path:
    """Write ``manifest.json`` plus one PLY file per decimated cloud."""
    out = Path(out_dir)
    (out / "pairs").mkdir(parents=True, exist_ok=True)
    records = []
    for s in manifest.samples:
        stem = f"{s.sequence}_{s.index:06d}_{s.guess_index:02d}"
        write_ply(out / "pairs" / f"{stem}_reading.ply", s.pair.reading)
        write_ply(out / "pairs" / f"{stem}_reference.ply", s.pair.reference)
        records.append(
            {
                "sequence": s.sequence,
                "index": s.index,
                "guess_index": s.guess_index,
                "seed": s.seed,
                "reading": f"pairs/{stem}_reading.ply",
                "reference": f"pairs/{stem}_reference.ply",
                "estimate": _row(s.estimate),
                "ground_truth": _row(s.ground_truth),
                "guess": _row(s.guess),
                "label": [float(v) for v in s.label],
                "converged": bool(s.converged),
                "degenerate": bool(s.degenerate),
                "icp_converged": bool(s.icp_converged),
                "iterations": int(s.iterations),
            }
        )
    doc = {
        "schema_version": SCHEMA_VERSION,
        "sequences": manifest.sequences,
        "split": manifest.split,
        "seeds": manifest.seeds,
        "configs": manifest.configs,
        "samples": records,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = json.loads(path.read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema version {doc.get('schema_version')!r}")
    root = path.parent
    samples = []
    for r in doc["samples"]:
        samples.append(
            RegistrationSample(
                pair=FilteredPair(read_ply(root / r["reading"]), read_ply(root / r["reference"])),
                estimate=pose_from_row(r["estimate"], reproject=False),
                ground_truth=pose_from_row(r["ground_truth"], reproject=False),
                label=np.array(r["label"], dtype=float),
                guess=pose_from_row(r["guess"], reproject=False),
                converged=bool(r["converged"]),
                sequence=r["sequence"],
                index=int(r["index"]),
                guess_index=int(r.get("guess_index", 0)),
                seed=int(r["seed"]),
                iterations=int(r.get("iterations", 0)),
                degenerate=bool(r.get("degenerate", False)),
                icp_converged=bool(r.get("icp_converged", r["converged"])),
            )
        )
    return DatasetManifest(samples, list(doc["sequences"]), dict(doc["split"]), dict(doc["seeds"]), dict(doc["configs"]))


# -- sequence readers ---------------------------------------------------------


def _pair_scans_with_poses(scans, pose_file):
    poses = load_poses(pose_file, reproject=True)
    if len(poses) != len(scans):
        raise ValueError(f"{pose_file}: {len(poses)} poses for {len(scans)} scans")
    return list(zip(scans, poses))


def load_kitti_sequence(scan_dir, pose_file) -> list[tuple[PointCloud, Pose]]:
    """Velodyne ``.bin`` scans (sorted by name) paired with KITTI pose lines."""
    files = sorted(Path(scan_dir).glob("*.bin"))
    if not files:
        raise ValueError(f"{scan_dir}: no .bin scans found")
    return _pair_scans_with_poses([read_kitti_bin(f) for f in files], pose_file)


def load_ply_sequence(scan_dir, pose_file) -> list[tuple[PointCloud, Pose]]:
    files = sorted(Path(scan_dir).glob("*.ply"))
    if not files:
        raise ValueError(f"{scan_dir}: no .ply scans found")
    return _pair_scans_with_poses([read_ply(f) for f in files], pose_file)
