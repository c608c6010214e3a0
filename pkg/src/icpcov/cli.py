"""Command-line workflow: scenes, datasets, training, inference, evaluation, plots.

Configuration comes from a JSON file (``--config`` or the ``ICPCOV_CONFIG``
environment variable) with command-line flags taking precedence. The fully
resolved configuration is written as ``run_config.json`` into every output
directory. Exit codes: 0 success, 1 numerical failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

ENV_CONFIG = "ICPCOV_CONFIG"
EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a run, resolved before the subcommand starts."""

    seed: int = 0
    threads: int = 1
    scene: dict = field(default_factory=lambda: {"archetype": "structured", "count": 1, "poses": 12, "format": "ply", "params": None})
    sensor: dict = field(default_factory=dict)
    icp: dict = field(default_factory=lambda: {"subsample_size": 256})
    guess: dict = field(default_factory=lambda: {"floor_translation": 0.01, "floor_rotation": 0.005})
    dataset: dict = field(default_factory=lambda: {"guesses_per_pair": 1, "split": {}})
    network: dict = field(default_factory=lambda: {"scale_factor": 0.25, "auto_output_scale": True})
    train: dict = field(default_factory=dict)
    mc: dict = field(default_factory=lambda: {"num_samples": 32})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        merged = {}
        for k in known:
            default = getattr(base, k)
            if k in d and isinstance(default, dict):
                merged[k] = {**default, **d[k]}
            else:
                merged[k] = d.get(k, default)
        return cls(**merged)

    def with_section(self, section: str, **values) -> "RunConfig":
        values = {k: v for k, v in values.items() if v is not None}
        return replace(self, **{section: {**getattr(self, section), **values}})

    # -- typed views -----------------------------------------------------------

    def sensor_model(self):
        from .scene_sim import SensorModel

        d = dict(self.sensor)
        if "vertical_fov_deg" in d:
            d["vertical_fov"] = tuple(np.deg2rad(d.pop("vertical_fov_deg")))
        return SensorModel(**d)

    def icp_config(self):
        from .icp import IcpConfig

        return IcpConfig.from_dict({**IcpConfig().to_dict(), **self.icp})

    def guess_config(self):
        from .dataset import InitialGuessConfig

        return InitialGuessConfig(**self.guess)

    def train_config(self):
        from .training import TrainConfig

        return TrainConfig.from_dict({**TrainConfig().to_dict(), "seed": self.seed, "workers": self.threads, **self.train})

    def mc_config(self):
        from .bayes import McConfig

        return McConfig(**{"base_seed": self.seed, "workers": self.threads, **self.mc})

    def network_config(self, num_points: int, output_scale=None):
        from .network import NetworkConfig

        d = {k: v for k, v in self.network.items() if k != "auto_output_scale"}
        cfg = NetworkConfig(num_points=num_points, **{k: v for k, v in d.items() if k in ("scale_factor", "dropout_rate", "flow_k", "max_group", "in_features")})
        if output_scale is not None:
            cfg = replace(cfg, output_scale=tuple(output_scale))
        elif "output_scale" in d:
            cfg = replace(cfg, output_scale=tuple(d["output_scale"]))
        return cfg


def load_run_config(path) -> RunConfig:
    if path is None:
        path = os.environ.get(ENV_CONFIG)
    if not path:
        return RunConfig()
    try:
        return RunConfig.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: Path, cfg: RunConfig, command: str) -> None:
    doc = {"command": command, **cfg.to_dict()}
    (out / "run_config.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# -- subcommands -----------------------------------------------------------------


def cmd_gen_scenes(args, cfg: RunConfig) -> int:
    from .scene_sim import ARCHETYPES, export_kitti_sequence, export_ply_sequence, save_scene, synthetic_sequence
    from .seeding import derive_seed

    cfg = cfg.with_section("scene", archetype=args.archetype, count=args.count, poses=args.poses, format=args.format)
    sc = cfg.scene
    if sc["archetype"] not in ARCHETYPES:
        raise UsageError(f"unknown archetype {sc['archetype']!r}")
    out = _prepare_out(args.out, args.force)
    _echo_config(out, cfg, "gen-scenes")
    sensor = cfg.sensor_model()
    for i in range(int(sc["count"])):
        name = f"{sc['archetype']}_{i:03d}"
        scene, seq = synthetic_sequence(sc["archetype"], int(sc["poses"]), derive_seed(cfg.seed, "scene", sc["archetype"], i), sensor, sc.get("params"))
        d = out / name
        d.mkdir()
        save_scene(d / "scene.txt", scene)
        (export_kitti_sequence if sc["format"] == "kitti" else export_ply_sequence)(d, seq)
        print(f"{name}: {len(seq)} scans")
    return EXIT_OK


def _sequence_dirs(root: Path) -> list[Path]:
    if (root / "poses.txt").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "poses.txt").exists())
    if not dirs:
        raise UsageError(f"{root}: no sequence directories with poses.txt")
    return dirs


def _load_sequence(d: Path):
    from .dataset import load_kitti_sequence, load_ply_sequence

    if (d / "velodyne").is_dir():
        return load_kitti_sequence(d / "velodyne", d / "poses.txt")
    if (d / "scans").is_dir():
        return load_ply_sequence(d / "scans", d / "poses.txt")
    raise UsageError(f"{d}: expected a velodyne/ or scans/ directory")


def cmd_make_dataset(args, cfg: RunConfig) -> int:
    from .dataset import assign_split, build_dataset, convergence_stats, merge_manifests, save_manifest
    from .seeding import derive_seed

    if args.icp_config:
        from .icp import IcpConfig

        cfg = replace(cfg, icp=IcpConfig.load(args.icp_config).to_dict())
    cfg = cfg.with_section("icp", subsample_size=args.subsample, max_iterations=args.max_iterations)
    cfg = cfg.with_section("dataset", guesses_per_pair=args.guesses)
    split = dict(cfg.dataset.get("split", {}))
    for item in args.split or []:
        name, _, which = item.partition("=")
        if which not in ("train", "val", "test"):
            raise UsageError(f"bad --split {item!r}; expected NAME=train|val|test")
        split[name] = which
    cfg = cfg.with_section("dataset", split=split)
    root = Path(args.scans)
    if not root.is_dir():
        raise UsageError(f"{root} is not a directory")
    seq_dirs = _sequence_dirs(root)
    out = _prepare_out(args.out, args.force)
    _echo_config(out, cfg, "make-dataset")
    icp, guess = cfg.icp_config(), cfg.guess_config()
    manifests = []
    for d in seq_dirs:
        seq = _load_sequence(d)
        manifests.append(
            build_dataset(seq, icp, guess, derive_seed(cfg.seed, "dataset", d.name), d.name, int(cfg.dataset["guesses_per_pair"]), cfg.threads)
        )
    manifest = merge_manifests(manifests)
    unknown = set(split) - set(manifest.sequences)
    if unknown:
        raise UsageError(f"--split names unknown sequences: {sorted(unknown)}")
    assign_split(manifest, split)
    save_manifest(manifest, out)
    stats = convergence_stats(manifest)
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def _load_manifest(path):
    from .dataset import load_manifest

    p = Path(path)
    if not (p / "manifest.json").exists() and not p.is_file():
        raise UsageError(f"{p}: no manifest.json")
    return load_manifest(p)


def _load_checkpoint(path, expected=None):
    from .training import load_checkpoint

    if not Path(path).is_file():
        raise UsageError(f"{path}: checkpoint not found")
    try:
        return load_checkpoint(path, expected)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _train_overrides(args, cfg: RunConfig) -> RunConfig:
    return cfg.with_section(
        "train",
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        frozen_segments=args.freeze,
    )


def cmd_train(args, cfg: RunConfig) -> int:
    from .training import label_scale, save_checkpoint, train

    cfg = _train_overrides(args, cfg)
    cfg = cfg.with_section("network", scale_factor=args.scale_factor, dropout_rate=args.dropout)
    manifest = _load_manifest(args.dataset)
    train_samples = manifest.split_samples("train")
    if not train_samples:
        raise UsageError("dataset has no training samples")
    n = len(train_samples[0].pair.reading)
    scale = label_scale(train_samples) if cfg.network.get("auto_output_scale", True) and "output_scale" not in cfg.network else None
    net_cfg = cfg.network_config(n, scale)
    out = _prepare_out(args.out, args.force)
    _echo_config(out, cfg, "train")
    ckpt = train(manifest, net_cfg, cfg.train_config(), out / "train_log.csv")
    save_checkpoint(out / "checkpoint.bin", ckpt)
    print(json.dumps({"config_hash": net_cfg.hash(), "best_epoch": ckpt.epoch, "best_nll": ckpt.best_val_nll}))
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig) -> int:
    from .training import finetune, save_checkpoint

    cfg = _train_overrides(args, cfg)
    ckpt = _load_checkpoint(args.checkpoint)
    manifest = _load_manifest(args.dataset)
    out = _prepare_out(args.out, args.force)
    _echo_config(out, cfg, "finetune")
    tuned = finetune(ckpt, manifest, cfg.train_config(), ckpt.net_cfg, out / "train_log.csv")
    save_checkpoint(out / "checkpoint.bin", tuned)
    print(json.dumps({"config_hash": tuned.net_cfg.hash(), "best_epoch": tuned.epoch, "best_nll": tuned.best_val_nll}))
    return EXIT_OK


def _mc(args, cfg: RunConfig):
    return cfg.with_section("mc", num_samples=args.mc_samples).mc_config()


def cmd_infer(args, cfg: RunConfig) -> int:
    from .bayes import mc_predict

    ckpt = _load_checkpoint(args.checkpoint)
    manifest = _load_manifest(args.dataset)
    matches = [s for s in manifest.samples if (args.sequence is None or s.sequence == args.sequence) and s.index == args.index]
    if not matches:
        raise UsageError(f"no sample with sequence={args.sequence!r} index={args.index}")
    s = matches[0]
    if len(s.pair.reading) != ckpt.net_cfg.num_points:
        raise UsageError(f"pair has {len(s.pair.reading)} points, checkpoint expects {ckpt.net_cfg.num_points}")
    report = mc_predict(s.pair, ckpt.params, ckpt.net_cfg, _mc(args, cfg))
    doc = {"sequence": s.sequence, "index": s.index, **report.to_dict()}
    print(json.dumps(doc, indent=1))
    return EXIT_OK


def _evaluate(args, cfg: RunConfig):
    from .evaluation import evaluate_samples

    ckpt = _load_checkpoint(args.checkpoint)
    manifest = _load_manifest(args.dataset)
    if args.sequences:
        samples = [s for s in manifest.samples if s.sequence in set(args.sequences)]
    elif args.split:
        samples = manifest.split_samples(args.split)
    else:
        samples = manifest.samples
    if not samples:
        raise UsageError("no samples selected for evaluation")
    return evaluate_samples(samples, ckpt.params, ckpt.net_cfg, _mc(args, cfg))


def cmd_eval_single(args, cfg: RunConfig) -> int:
    from .evaluation import calibration_footer, single_pair_table, write_csv

    records = _evaluate(args, cfg)
    out = _prepare_out(args.out, args.force)
    _echo_config(out, cfg, "eval-single")
    write_csv(out / "single_pair.csv", single_pair_table(records), calibration_footer())
    print((out / "single_pair.csv").read_text(), end="")
    return EXIT_OK


def cmd_eval_traj(args, cfg: RunConfig) -> int:
    from .evaluation import calibration_footer, trajectory_table, write_csv

    records = _evaluate(args, cfg)
    out = _prepare_out(args.out, args.force)
    _echo_config(out, cfg, "eval-traj")
    rows, _ = trajectory_table(records)
    write_csv(out / "trajectory.csv", rows, calibration_footer())
    print((out / "trajectory.csv").read_text(), end="")
    return EXIT_OK


def cmd_plot(args, cfg: RunConfig) -> int:
    from .evaluation import write_report

    records = _evaluate(args, cfg)
    out = _prepare_out(args.out, args.force)
    _echo_config(out, cfg, "plot")
    for name, path in sorted(write_report(records, out, plots=True).items()):
        print(f"{name}: {path}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .scene_sim import ARCHETYPES

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"JSON run configuration (default: ${ENV_CONFIG})")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--threads", type=int, help="worker threads; outputs do not depend on it")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = argparse.ArgumentParser(prog="icpcov", description="Learned ICP covariance estimation workflow.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenes", parents=[common], help="generate synthetic scenes and scan sequences")
    g.add_argument("--archetype", choices=ARCHETYPES, required=True)
    g.add_argument("--count", type=int)
    g.add_argument("--poses", type=int, help="scans per sequence")
    g.add_argument("--format", choices=("ply", "kitti"))
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_scenes)

    m = sub.add_parser("make-dataset", parents=[common], help="register scan pairs and store labelled samples")
    m.add_argument("--scans", required=True, help="sequence directory or a directory of sequences")
    m.add_argument("--out", required=True)
    m.add_argument("--icp-config", help="ICP settings file of 'key = value' lines")
    m.add_argument("--subsample", type=int, help="points kept per cloud")
    m.add_argument("--max-iterations", type=int)
    m.add_argument("--guesses", type=int, help="initial guesses per pair")
    m.add_argument("--split", action="append", metavar="NAME=SPLIT", help="assign a sequence to train/val/test")
    m.set_defaults(func=cmd_make_dataset)

    for name, func, help_ in (("train", cmd_train, "train a model from scratch"), ("finetune", cmd_finetune, "fine-tune a checkpoint on new data")):
        t = sub.add_parser(name, parents=[common], help=help_)
        t.add_argument("--dataset", required=True)
        t.add_argument("--out", required=True)
        if name == "finetune":
            t.add_argument("--checkpoint", required=True)
        else:
            t.add_argument("--scale-factor", type=float)
            t.add_argument("--dropout", type=float)
        t.add_argument("--epochs", type=int)
        t.add_argument("--lr", type=float)
        t.add_argument("--batch-size", type=int)
        t.add_argument("--freeze", nargs="*", help="layer name prefixes kept fixed (or 'all')")
        t.set_defaults(func=func)

    i = sub.add_parser("infer", parents=[common], help="print the uncertainty report for one pair")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--dataset", required=True)
    i.add_argument("--sequence")
    i.add_argument("--index", type=int, default=0)
    i.add_argument("--mc-samples", type=int)
    i.set_defaults(func=cmd_infer)

    for name, func, help_ in (
        ("eval-single", cmd_eval_single, "single-pair calibration table"),
        ("eval-traj", cmd_eval_traj, "trajectory consistency table"),
        ("plot", cmd_plot, "tables plus SVG figures"),
    ):
        e = sub.add_parser(name, parents=[common], help=help_)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--dataset", required=True)
        e.add_argument("--out", required=True)
        e.add_argument("--sequences", nargs="*")
        e.add_argument("--split", choices=("train", "val", "test"))
        e.add_argument("--mc-samples", type=int)
        e.set_defaults(func=func)
    return p


def _limit_threads():
    from threadpoolctl import threadpool_limits

    # BLAS reductions depend on its thread count; --threads only sets our own workers
    return threadpool_limits(limits=1)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    from .training import TrainingDiverged
    from .evaluation import PropagationError

    try:
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be at least 1")
            cfg = replace(cfg, threads=args.threads)
        with _limit_threads():
            return args.func(args, cfg)
    except UsageError as exc:
        print(f"icpcov {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, PropagationError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"icpcov {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, TypeError, OSError) as exc:
        print(f"icpcov {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
