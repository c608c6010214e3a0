"""Gaussian negative log-likelihood training and fine-tuning of the uncertainty network."""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .network import (
    TRIL,
    ForwardTape,
    GaussianPrediction,
    NetworkConfig,
    forward,
    init_params,
    ldl_factors,
    load_arrays,
    save_arrays,
    segment_slices,
)
from .seeding import derive_seed

FINETUNE_EPOCH_CAP = 30


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    finetune_from: str | None = None
    frozen_segments: tuple[str, ...] = ()
    gradient_clip_norm: float = 10.0
    # optional step decay: multiply the rate by ``lr_decay`` every ``lr_decay_every`` epochs
    lr_decay: float | None = None
    lr_decay_every: int = 10
    workers: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning rate and batch size must be positive, epochs non-negative")
        if self.gradient_clip_norm <= 0:
            raise ValueError("gradient_clip_norm must be positive")
        if self.lr_decay is not None and not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        object.__setattr__(self, "frozen_segments", tuple(self.frozen_segments))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frozen_segments"] = list(self.frozen_segments)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["frozen_segments"] = tuple(d.get("frozen_segments", ()))
        return cls(**d)


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_nll: float
    val_nll: float
    wallclock: float


@dataclass(eq=False)
class Checkpoint:
    params: np.ndarray
    net_cfg: NetworkConfig
    adam_m: np.ndarray
    adam_v: np.ndarray
    step: int = 0
    epoch: int = 0
    best_val_nll: float = float("inf")
    history: list[EpochLog] = field(default_factory=list)

    @classmethod
    def initial(cls, net_cfg: NetworkConfig, seed=0) -> "Checkpoint":
        p = init_params(net_cfg, derive_seed(seed, "init"))
        return cls(p, net_cfg, np.zeros_like(p), np.zeros_like(p))


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; ``checkpoint`` holds the last good state."""

    def __init__(self, message, checkpoint: Checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


# -- loss -----------------------------------------------------------------------


def nll_loss(pred: GaussianPrediction, label) -> tuple[float, np.ndarray]:
    """``0.5 r^T Sigma^-1 r + 0.5 sum(d_raw)`` with ``r = label - mu``.

    Returns the loss and its gradient w.r.t. the 27 outputs
    ``(mu, 15 lower entries of L, d_raw)``.
    """
    r = np.asarray(label, dtype=float) - pred.mu
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(pred.ldl_params))):
        # surfaced by the training loop as divergence
        return float("inf"), np.full(27, np.nan)
    L, dvals = ldl_factors(pred.ldl_params)
    z = solve_triangular(L, r, lower=True, unit_diagonal=True)
    zd = z / dvals
    loss = 0.5 * float(z @ zd) + 0.5 * float(np.sum(pred.ldl_params[15:]))
    w = solve_triangular(L, zd, lower=True, unit_diagonal=True, trans="T")
    grad = np.empty(27)
    grad[:6] = -w
    grad[6:21] = -w[TRIL[0]] * z[TRIL[1]]
    grad[21:] = 0.5 - 0.5 * z * zd
    return loss, grad


# -- optimiser --------------------------------------------------------------------


class Adam:
    """Bias-corrected adaptive moments; ``mask`` marks parameters that may move."""

    def __init__(self, cfg: TrainConfig, m, v, step=0):
        self.cfg = cfg
        self.m, self.v, self.t = m.copy(), v.copy(), int(step)

    def update(self, params, grad, lr, mask=None):
        c = self.cfg
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad * grad
        mhat = self.m / (1 - c.beta1**self.t)
        vhat = self.v / (1 - c.beta2**self.t)
        delta = lr * mhat / (np.sqrt(vhat) + c.adam_eps)
        if mask is not None:
            delta = np.where(mask, delta, 0.0)
        return params - delta


def clip_gradient(grad, max_norm: float):
    n = float(np.linalg.norm(grad))
    return (grad * (max_norm / n), n) if n > max_norm else (grad, n)


# -- loops ----------------------------------------------------------------------


def usable_samples(samples):
    """Non-converged registrations carry meaningless labels and are left out."""
    return [s for s in samples if s.converged]


def sample_gradient(sample, params, cfg: NetworkConfig, dropout_seed, frozen=()):
    tape = ForwardTape(sample.pair, params, cfg, dropout_seed)
    loss, g_out = nll_loss(tape.prediction, sample.label)
    return loss, tape.backward(g_out, frozen)


def mean_nll(samples, params, cfg: NetworkConfig, workers: int = 1) -> float:
    """Dropout-free mean NLL; ``nan`` for an empty list."""
    if not samples:
        return float("nan")

    def one(s):
        return nll_loss(forward(s.pair, params, cfg), s.label)[0]

    return float(np.mean(_map(one, samples, workers)))


def _map(fn, items, workers):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def _batch_gradient(batch, params, cfg, seeds, frozen, workers):
    results = _map(lambda a: sample_gradient(a[0], params, cfg, a[1], frozen), list(zip(batch, seeds)), workers)
    # fixed-order reduction keeps the sum independent of worker count
    grad = np.zeros_like(params)
    losses = []
    for loss, g in results:
        grad += g
        losses.append(loss)
    return float(np.mean(losses)), grad / len(batch)


def _learning_rate(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_decay is None:
        return cfg.learning_rate
    return cfg.learning_rate * cfg.lr_decay ** ((epoch - 1) // cfg.lr_decay_every)


def run_epochs(ckpt: Checkpoint, train_samples, val_samples, cfg: TrainConfig, epochs: int, log_path=None) -> Checkpoint:
    """Shared loop of :func:`train` and :func:`finetune` starting from ``ckpt``."""
    net_cfg = ckpt.net_cfg
    train_samples = usable_samples(train_samples)
    val_samples = usable_samples(val_samples)
    if not train_samples:
        raise ValueError("training split has no converged samples")
    mask = ~segment_slices(net_cfg, cfg.frozen_segments) if cfg.frozen_segments else None
    params = ckpt.params.copy()
    opt = Adam(cfg, ckpt.adam_m, ckpt.adam_v, ckpt.step)
    history = list(ckpt.history)
    t0 = time.perf_counter()

    def select_metric(train_nll, val_nll):
        return val_nll if val_samples else train_nll

    if not history:
        tr = mean_nll(train_samples, params, net_cfg, cfg.workers)
        va = mean_nll(val_samples, params, net_cfg, cfg.workers)
        history.append(EpochLog(ckpt.epoch, tr, va, 0.0))
    best = Checkpoint(params.copy(), net_cfg, opt.m.copy(), opt.v.copy(), opt.t, ckpt.epoch, ckpt.best_val_nll, list(history))
    if not np.isfinite(best.best_val_nll):
        best.best_val_nll = select_metric(history[-1].train_nll, history[-1].val_nll)
    _write_log(log_path, history)

    n = len(train_samples)
    for e in range(ckpt.epoch + 1, ckpt.epoch + epochs + 1):
        order = np.random.default_rng(derive_seed(cfg.seed, "shuffle", e)).permutation(n)
        lr = _learning_rate(cfg, e)
        losses = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            batch = [train_samples[i] for i in order[start : start + cfg.batch_size]]
            seeds = [derive_seed(cfg.seed, "dropout", e, b, j) for j in range(len(batch))]
            loss, grad = _batch_gradient(batch, params, net_cfg, seeds, cfg.frozen_segments, cfg.workers)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingDiverged(f"non-finite loss at epoch {e}, batch {b}", best)
            grad, _ = clip_gradient(grad, cfg.gradient_clip_norm)
            params = opt.update(params, grad, lr, mask)
            losses.append(loss * len(batch))
        tr = float(np.sum(losses) / n)
        va = mean_nll(val_samples, params, net_cfg, cfg.workers)
        history.append(EpochLog(e, tr, va, time.perf_counter() - t0))
        _write_log(log_path, history)
        metric = select_metric(tr, va)
        if not np.isfinite(metric):
            raise TrainingDiverged(f"non-finite validation loss at epoch {e}", best)
        if metric < best.best_val_nll:
            best = Checkpoint(params.copy(), net_cfg, opt.m.copy(), opt.v.copy(), opt.t, e, metric, [])
    best.history = history
    return best


def train(manifest, net_cfg: NetworkConfig, cfg: TrainConfig = TrainConfig(), log_path=None) -> Checkpoint:
    """Fit from a fresh initialisation; returns the best-validation checkpoint."""
    ckpt = Checkpoint.initial(net_cfg, cfg.seed)
    return run_epochs(ckpt, manifest.split_samples("train"), manifest.split_samples("val"), cfg, cfg.epochs, log_path)


def finetune(
    checkpoint: Checkpoint,
    manifest,
    cfg: TrainConfig = TrainConfig(),
    net_cfg: NetworkConfig | None = None,
    log_path=None,
    epoch_cap: int = FINETUNE_EPOCH_CAP,
) -> Checkpoint:
    """Continue training on new data with fresh optimiser moments.

    Epoch numbering and the best-so-far metric restart, so the returned
    checkpoint is chosen on the new validation split.
    """
    if net_cfg is not None and net_cfg.hash() != checkpoint.net_cfg.hash():
        raise ValueError(f"config hash mismatch: checkpoint {checkpoint.net_cfg.hash()} vs requested {net_cfg.hash()}")
    epochs = min(cfg.epochs, epoch_cap)
    if epochs == 0:
        return checkpoint
    start = Checkpoint(
        checkpoint.params.copy(),
        checkpoint.net_cfg,
        np.zeros_like(checkpoint.params),
        np.zeros_like(checkpoint.params),
    )
    return run_epochs(start, manifest.split_samples("train"), manifest.split_samples("val"), cfg, epochs, log_path)


# -- persistence ------------------------------------------------------------------


def _write_log(path, history) -> None:
    if path is None:
        return
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "train_nll", "val_nll", "wallclock"])
        for h in history:
            w.writerow([h.epoch, f"{h.train_nll:.10g}", f"{h.val_nll:.10g}", f"{h.wallclock:.3f}"])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    extra = {
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "best_val_nll": ckpt.best_val_nll if np.isfinite(ckpt.best_val_nll) else None,
        "history": [[h.epoch, h.train_nll, h.val_nll] for h in ckpt.history],
    }
    save_arrays(path, ckpt.net_cfg, {"params": ckpt.params, "adam_m": ckpt.adam_m, "adam_v": ckpt.adam_v}, extra)


def load_checkpoint(path, expected: NetworkConfig | None = None) -> Checkpoint:
    cfg, arrays, extra = load_arrays(path, expected)
    p = arrays["params"]
    best = extra.get("best_val_nll")
    return Checkpoint(
        p,
        cfg,
        arrays.get("adam_m", np.zeros_like(p)),
        arrays.get("adam_v", np.zeros_like(p)),
        int(extra.get("step", 0)),
        int(extra.get("epoch", 0)),
        float("inf") if best is None else float(best),
        [EpochLog(int(e), float(t), float(v), 0.0) for e, t, v in extra.get("history", [])],
    )


def label_scale(samples, floor=(1e-3,) * 3 + (1e-4,) * 3) -> tuple[float, ...]:
    """Per-component RMS of converged labels, a natural ``output_scale``."""
    labels = np.array([s.label for s in usable_samples(samples)])
    if labels.size == 0:
        raise ValueError("no converged samples")
    rms = np.sqrt(np.mean(labels**2, axis=0))
    return tuple(float(v) for v in np.maximum(rms, floor))
