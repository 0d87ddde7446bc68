"""Training loop over labeled volumes."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyTensor
from .network import Checkpoint, OptimState, UNetConfig, init_network, train_step
from .objective import LossConfig
from .pipeline import (DatasetStats, FusionConfig, SamplingConfig, compute_dataset_stats,
                       extent_of, hu_threshold_to_sparse, sample_training_window, zscore)

log = logging.getLogger(__name__)

MAX_REDRAWS = 100


@dataclass
class TrainConfig:
    network: UNetConfig = field(default_factory=UNetConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    smoothing: float = 0.05
    dice_eps: float = 1e-5
    lr: float = 1e-3

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.network.num_classes, self.smoothing, self.dice_eps)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = d.pop("loss", {})
        optim = d.pop("optim", {})
        return cls(network=UNetConfig(**d.pop("network", {})),
                   sampling=SamplingConfig(**d.pop("sampling", {})),
                   fusion=FusionConfig(**d.pop("fusion", {})),
                   smoothing=loss.get("smoothing", 0.05),
                   dice_eps=loss.get("dice_eps", 1e-5),
                   lr=optim.get("lr", 1e-3), **d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return {"network": self.network.to_dict(), "sampling": asdict(self.sampling),
                "fusion": asdict(self.fusion),
                "loss": {"smoothing": self.smoothing, "dice_eps": self.dice_eps},
                "optim": {"lr": self.lr}}


def prepare_cases(cases: Sequence[Tuple[np.ndarray, np.ndarray]], stats: DatasetStats,
                  fusion: FusionConfig):
    out = []
    for hu, labels in cases:
        st = zscore(hu_threshold_to_sparse(hu, fusion, labels), stats)
        out.append((st, extent_of(hu)))
    return out


def run_training(cases: Sequence[Tuple[np.ndarray, np.ndarray]], cfg: TrainConfig, steps: int,
                 seed: int, on_step: Optional[Callable[[int, float], None]] = None):
    """Train from scratch; returns ``(checkpoint, per-step losses)``.

    Each step draws a case, then a window from it, redrawing empty windows.
    """
    stats = compute_dataset_stats([hu for hu, _ in cases], cfg.fusion)
    prepared = prepare_cases(cases, stats, cfg.fusion)
    params = init_network(cfg.network, seed)
    opt = OptimState.for_params(params, lr=cfg.lr)
    rng = np.random.default_rng([seed, 1])
    loss_cfg = cfg.loss
    losses: List[float] = []
    for step in range(steps):
        for _ in range(MAX_REDRAWS):
            st, extent = prepared[int(rng.integers(len(prepared)))]
            window, _ = sample_training_window(st, extent, cfg.sampling, rng)
            if len(window):
                break
        else:
            raise EmptyTensor("could not draw a nonempty training window")
        loss = train_step(params, opt, window, cfg.network, loss_cfg)
        losses.append(loss)
        if on_step is not None:
            on_step(step, loss)
    ckpt = Checkpoint(cfg.network, params, mu=stats.mu, sigma=stats.sigma, seed=seed,
                      extra={"sampling": asdict(cfg.sampling), "fusion": asdict(cfg.fusion),
                             "steps": steps})
    return ckpt, losses
