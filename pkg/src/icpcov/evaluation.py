"""Calibration metrics, trajectory consistency and report tables/plots.

Both metrics have optimum 1 in the sense that a perfectly calibrated Gaussian
predictor scores close to it. For the Mahalanobis metric the exact expectation
is ``E[chi_k] / sqrt(k)`` (0.9594 for the full 6-dimensional twist, 0.9213 per
3-dimensional block), see :func:`calibrated_mahalanobis`.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gammaln

from .bayes import McConfig, mc_predict
from .se3 import Pose, compose_with_covariance, icp_error

BLOCKS = {"translation": slice(0, 3), "rotation": slice(3, 6), "full": slice(0, 6)}


@dataclass(eq=False)
class EvaluationRecord:
    label: np.ndarray
    total: np.ndarray
    aleatoric: np.ndarray
    converged: bool = True
    sequence: str = ""
    index: int = 0
    estimate: Pose | None = None
    ground_truth: Pose | None = None
    mean_twist: np.ndarray | None = None
    guess_index: int = 0

    def __post_init__(self):
        self.label = np.asarray(self.label, dtype=float).reshape(6)
        self.total = np.asarray(self.total, dtype=float).reshape(6, 6)
        self.aleatoric = np.asarray(self.aleatoric, dtype=float).reshape(6, 6)

    @property
    def epistemic(self) -> np.ndarray:
        return self.total - self.aleatoric

    def covariance(self, which: str = "total") -> np.ndarray:
        if which not in ("total", "aleatoric"):
            raise ValueError(f"unknown covariance kind {which!r}")
        return self.total if which == "total" else self.aleatoric


def _block(name: str) -> slice:
    try:
        return BLOCKS[name]
    except KeyError:
        raise ValueError(f"unknown block {name!r}; choose from {sorted(BLOCKS)}") from None


def _scored(records):
    records = list(records)
    if not records:
        raise ValueError("no records")
    kept = [r for r in records if r.converged]
    if not kept:
        raise ValueError("no converged records")
    return kept


def nne_terms(records, block: str = "full", which: str = "total") -> np.ndarray:
    b = _block(block)
    out = []
    for r in _scored(records):
        tr = float(np.trace(r.covariance(which)[b, b]))
        if tr <= 0:
            raise ValueError("covariance block has non-positive trace")
        out.append(np.sqrt(float(r.label[b] @ r.label[b]) / tr))
    return np.array(out)


def nne(records, block: str = "full", which: str = "total") -> float:
    """Mean of ``sqrt(|xi|^2 / tr(Sigma))`` over converged records."""
    return float(np.mean(nne_terms(records, block, which)))


def mahalanobis_terms(records, block: str = "full", which: str = "total") -> np.ndarray:
    b = _block(block)
    out = []
    for r in _scored(records):
        xi = r.label[b]
        q = float(xi @ cho_solve(cho_factor(r.covariance(which)[b, b]), xi))
        out.append(np.sqrt(q / len(xi)))
    return np.array(out)


def mahalanobis(records, block: str = "full", which: str = "total") -> float:
    """Mean of ``sqrt(xi^T Sigma^-1 xi / dim)`` over converged records."""
    return float(np.mean(mahalanobis_terms(records, block, which)))


def calibrated_mahalanobis(dim: int) -> float:
    """Expected metric value for ``xi ~ N(0, Sigma)`` scored against ``Sigma``."""
    return float(np.sqrt(2.0 / dim) * np.exp(gammaln((dim + 1) / 2) - gammaln(dim / 2)))


# -- trajectories ---------------------------------------------------------------


class PropagationError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"covariance propagation failed at step {step}: {cause}")
        self.step = step


@dataclass(eq=False)
class TrajectoryResult:
    final_error: np.ndarray
    final_covariance: np.ndarray
    mahalanobis: dict[str, float]
    poses: list[Pose]
    covariances: list[np.ndarray] = field(default_factory=list)
    truth: list[Pose] = field(default_factory=list)


def trajectory_eval(records, which: str = "total", order: int = 4) -> TrajectoryResult:
    """Compose consecutive relative estimates and propagate their covariances.

    ``records`` must be in sequence order and carry ``estimate`` and
    ``ground_truth``. Returns the final-pose metric per block plus the
    per-step compound covariances and poses.
    """
    records = list(records)
    if not records:
        raise ValueError("empty trajectory")
    if any(r.estimate is None or r.ground_truth is None for r in records):
        raise ValueError("trajectory records need estimates and ground truth")
    chain = [(r.estimate, r.covariance(which)) for r in records]
    try:
        _, _, steps = compose_with_covariance(chain, order=order, return_steps=True)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise PropagationError(0, exc) from exc
    for k, (_, S) in enumerate(steps):
        if not np.all(np.isfinite(S)):
            raise PropagationError(k, ValueError("non-finite compound covariance"))
    poses = [T for T, _ in steps]
    covs = [S for _, S in steps]
    truth = [records[0].ground_truth]
    for r in records[1:]:
        truth.append(truth[-1] @ r.ground_truth)
    err = icp_error(poses[-1], truth[-1])
    S = covs[-1]
    dm = {}
    for name, b in BLOCKS.items():
        xi = err[b]
        dm[name] = float(np.sqrt(xi @ cho_solve(cho_factor(S[b, b]), xi) / len(xi)))
    return TrajectoryResult(err, S, dm, poses, covs, truth)


def ellipse_points(cov2, center=(0.0, 0.0), n_sigma: float = 3.0, num: int = 64) -> np.ndarray:
    """``num`` points on the ``n_sigma`` contour of a 2-D Gaussian."""
    w, v = np.linalg.eigh(np.asarray(cov2, dtype=float))
    t = np.linspace(0.0, 2 * np.pi, num)
    circle = np.stack([np.cos(t), np.sin(t)])
    return (v @ (n_sigma * np.sqrt(np.maximum(w, 0.0))[:, None] * circle)).T + np.asarray(center)


def trajectory_ellipses(result: TrajectoryResult, n_sigma: float = 3.0) -> list[np.ndarray]:
    """Per-step ``(x, y)`` ellipses in the frame of the first scan.

    The compound covariance lives in the local frame of each pose, so its
    translation block is rotated by the pose's rotation before projecting.
    """
    out = []
    for T, S in zip(result.poses, result.covariances):
        R = T.rotation
        St = R @ S[:3, :3] @ R.T
        out.append(ellipse_points(St[:2, :2], T.translation[:2], n_sigma))
    return out


# -- evaluating a model on a manifest ---------------------------------------------


def evaluate_samples(samples, params, net_cfg, mc: McConfig = McConfig()) -> list[EvaluationRecord]:
    records = []
    for s in samples:
        rep = mc_predict(s.pair, params, net_cfg, mc)
        records.append(
            EvaluationRecord(
                s.label,
                rep.total,
                rep.aleatoric,
                s.converged,
                s.sequence,
                s.index,
                s.estimate,
                s.ground_truth,
                rep.mean_twist,
                s.guess_index,
            )
        )
    return records


def _group(records):
    out = {}
    for r in records:
        out.setdefault(r.sequence, []).append(r)
    for v in out.values():
        v.sort(key=lambda r: r.index)
    return out


def single_pair_table(records) -> list[dict]:
    rows = []
    groups = _group(records)
    for seq in sorted(groups) + (["ALL"] if len(groups) > 1 else []):
        recs = records if seq == "ALL" else groups[seq]
        n_conv = sum(r.converged for r in recs)
        for block in ("translation", "rotation", "full"):
            row = {"sequence": seq, "block": block, "samples": len(recs), "converged": n_conv}
            for which, tag in (("aleatoric", "A"), ("total", "EA")):
                row[f"nne_{tag}"] = nne(recs, block, which) if n_conv else float("nan")
                row[f"dm_{tag}"] = mahalanobis(recs, block, which) if n_conv else float("nan")
            rows.append(row)
    return rows


def trajectory_table(records) -> tuple[list[dict], dict]:
    rows, results = [], {}
    # one chain per sequence: the first initial guess of every pair
    for seq, recs in sorted(_group([r for r in records if r.guess_index == 0]).items()):
        per = {which: trajectory_eval(recs, which) for which in ("aleatoric", "total")}
        results[seq] = per["total"]
        for block in ("translation", "rotation", "full"):
            rows.append(
                {
                    "sequence": seq,
                    "block": block,
                    "steps": len(recs),
                    "dm_A": per["aleatoric"].mahalanobis[block],
                    "dm_EA": per["total"].mahalanobis[block],
                }
            )
    return rows, results


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_csv(path, rows, footer: str | None = None) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(rows[0].keys())
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in cols])
    if footer:
        buf.write(f"# {footer}\n")
    Path(path).write_text(buf.getvalue())


def calibration_footer() -> str:
    return (
        f"calibrated Gaussian expectation of dm: full {calibrated_mahalanobis(6):.4f}, "
        f"per block {calibrated_mahalanobis(3):.4f}; target 1"
    )


def write_report(records, out_dir, plots: bool = True) -> dict[str, Path]:
    """CSV tables and optional SVG plots for evaluated records."""
    records = list(records)
    if not records:
        raise ValueError("no records to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"single_pair": out / "single_pair.csv", "trajectory": out / "trajectory.csv"}
    write_csv(paths["single_pair"], single_pair_table(records), calibration_footer())
    traj_rows, traj = trajectory_table(records)
    write_csv(paths["trajectory"], traj_rows, calibration_footer())
    if plots:
        from . import plots as P

        paths["errors"] = out / "errors_3sigma.svg"
        P.plot_error_bands(records, paths["errors"])
        paths["ellipses"] = out / "trajectory_ellipses.svg"
        P.plot_trajectories(traj, paths["ellipses"])
        paths["epistemic"] = out / "epistemic.svg"
        P.plot_epistemic({"model": epistemic_traces(records)}, paths["epistemic"])
    return paths


def epistemic_traces(records) -> np.ndarray:
    return np.array([float(np.trace(r.epistemic)) for r in records])


def calibration_report(manifest, checkpoint, mc: McConfig, out_dir, sequences=None, plots: bool = True):
    """Evaluate ``checkpoint`` on ``manifest`` (optionally a subset of sequences) and write the report."""
    samples = manifest.samples if sequences is None else [s for s in manifest.samples if s.sequence in set(sequences)]
    if not samples:
        raise ValueError("manifest has no samples to evaluate")
    records = evaluate_samples(samples, checkpoint.params, checkpoint.net_cfg, mc)
    return records, write_report(records, out_dir, plots)
