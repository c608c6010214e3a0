"""Monte-Carlo dropout: fuse per-sample predictions into mean, aleatoric and epistemic parts."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .network import GaussianPrediction, NetworkConfig, forward


@dataclass(frozen=True)
class McConfig:
    num_samples: int = 32
    base_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be at least 1")

    def seeds(self) -> list[int]:
        return [self.base_seed + n for n in range(self.num_samples)]


@dataclass(eq=False)
class UncertaintyReport:
    mean_twist: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray
    total: np.ndarray
    seeds: list[int]

    @property
    def num_samples(self) -> int:
        return len(self.seeds)

    def to_dict(self) -> dict:
        def mat(a):
            return [float(v) for v in np.asarray(a).reshape(-1)]

        return {
            "mean_twist": mat(self.mean_twist),
            "aleatoric": mat(self.aleatoric),
            "epistemic": mat(self.epistemic),
            "total": mat(self.total),
            "seeds": [int(s) for s in self.seeds],
            "num_samples": self.num_samples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "UncertaintyReport":
        def mat(v):
            return np.array(v, dtype=float).reshape(6, 6)

        if d.get("num_samples", len(d["seeds"])) != len(d["seeds"]):
            raise ValueError("num_samples disagrees with the seed list")
        return cls(np.array(d["mean_twist"], dtype=float), mat(d["aleatoric"]), mat(d["epistemic"]), mat(d["total"]), list(d["seeds"]))


def fuse(predictions: list[GaussianPrediction], seeds) -> UncertaintyReport:
    """Mean of the covariances plus the population scatter (divide by N) of the means."""
    mus = np.array([p.mu for p in predictions])
    mean = mus.mean(axis=0)
    dev = mus - mean
    epistemic = dev.T @ dev / len(mus)
    aleatoric = np.zeros((6, 6))
    for p in predictions:
        aleatoric += p.covariance
    aleatoric /= len(predictions)
    return UncertaintyReport(mean, aleatoric, epistemic, aleatoric + epistemic, list(seeds))


def mc_predict(
    pair,
    params,
    net_cfg: NetworkConfig,
    mc: McConfig = McConfig(),
    forward_fn: Callable | None = None,
) -> UncertaintyReport:
    """Run ``N`` dropout-active forward passes with seeds ``base_seed .. base_seed + N - 1``.

    ``forward_fn(pair, params, cfg, seed)`` replaces the network, e.g. with a stub.
    """
    fn = forward_fn or forward
    seeds = mc.seeds()
    if mc.workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(mc.workers) as ex:
            preds = list(ex.map(lambda s: fn(pair, params, net_cfg, s), seeds))
    else:
        preds = [fn(pair, params, net_cfg, s) for s in seeds]
    return fuse(preds, seeds)


def predict_deterministic(pair, params, net_cfg: NetworkConfig) -> GaussianPrediction:
    return forward(pair, params, net_cfg, None)
