"""Smooth-L1 objective, Adam, and the three training stages.

Stage order: full-image backbone, then an instance backbone initialized from
it and trained on instance crops, then the fusion heads with both backbones
frozen (``unfreeze_backbones`` trains everything in the last stage).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .backbone import INSTANCE, ColorizationNetwork, transfer_weights
from .checkpoint import save_archive
from .data import Sample, instance_pairs, selected_boxes
from .detection import BoundingBox, DetectionSet, select_boxes
from .fusion import FusionModule, fused_forward

log = logging.getLogger(__name__)

STAGES = ("full", "instance", "fusion")
# epochs and learning rates of the original three-step schedule
ORIGINAL_STAGE_DEFAULTS = {
    "full": {"epochs": 2, "learning_rate": 1e-5},
    "instance": {"epochs": 5, "learning_rate": 5e-5},
    "fusion": {"epochs": 2, "learning_rate": 2e-5},
}


def smooth_l1(pred, target, delta: float = 1.0, reduction: str = "mean"):
    """Elementwise 0.5 d^2 for |d| < delta, delta (|d| - delta / 2) otherwise; d = pred - target."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = pred - target
    adiff = diff.abs()
    loss = torch.where(adiff < delta, 0.5 * diff * diff, delta * (adiff - 0.5 * delta))
    if reduction == "none":
        return loss
    if reduction == "sum":
        return loss.sum()
    return loss.mean()


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None],
              state: dict, lr: float, beta1: float = 0.99, beta2: float = 0.999,
              eps: float = 1e-8):
    """One bias-corrected Adam update, applied in place.

    ``state`` starts as ``{}``; a ``None`` gradient leaves that parameter
    and its moments untouched.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state:
        state.update(step=0, m=[torch.zeros_like(p) for p in params],
                     v=[torch.zeros_like(p) for p in params])
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state["m"], state["v"]):
            if g is None:
                continue
            if g.shape != p.shape:
                raise ValueError(f"grad shape {tuple(g.shape)} vs param {tuple(p.shape)}")
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + eps))
    return params, state


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.99, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = [p for p in params]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr, self.beta1, self.beta2, self.eps)


@dataclass
class StageConfig:
    stage: str
    epochs: int
    learning_rate: float
    beta1: float = 0.99
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    seed: int = 0
    unfreeze_backbones: bool = False

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @classmethod
    def original(cls, stage: str, **kw) -> "StageConfig":
        return cls(stage=stage, **{**ORIGINAL_STAGE_DEFAULTS[stage], **kw})


@dataclass
class TrainRecord:
    stage: str
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoints: list[str] = field(default_factory=list)

    def log_lines(self) -> list[str]:
        lines = [json.dumps({"stage": self.stage, "step": i, "loss": loss})
                 for i, loss in enumerate(self.step_losses)]
        lines += [json.dumps({"stage": self.stage, "epoch": e, "mean_loss": loss})
                  for e, loss in enumerate(self.epoch_losses)]
        lines.append(json.dumps({"stage": self.stage, "wall_clock": self.wall_clock,
                                 "checkpoints": self.checkpoints}))
        return lines

    def write(self, path):
        with open(path, "a") as fh:
            fh.write("\n".join(self.log_lines()) + "\n")

    def to_dict(self) -> dict:
        return asdict(self)


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _run_epochs(cfg: StageConfig, n_items: int, params: list[torch.Tensor],
                batch_loss: Callable[[np.ndarray], torch.Tensor],
                on_epoch: Callable[[int], str | None] | None = None) -> TrainRecord:
    if n_items == 0:
        raise ValueError(f"stage {cfg.stage}: empty dataset")
    record = TrainRecord(cfg.stage)
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _batches(n_items, cfg.batch_size, cfg.seed, epoch):
            opt.zero_grad()
            loss = batch_loss(idx)
            if loss.requires_grad:
                loss.backward()
            opt.step()
            value = float(loss.detach())
            if not math.isfinite(value):
                raise FloatingPointError(f"stage {cfg.stage}: non-finite loss at epoch {epoch}")
            losses.append(value)
        record.step_losses.extend(losses)
        record.epoch_losses.append(float(np.mean(losses)))
        log.info("stage %s epoch %d mean loss %.6f", cfg.stage, epoch, record.epoch_losses[-1])
        if on_epoch is not None:
            ref = on_epoch(epoch)
            if ref:
                record.checkpoints.append(ref)
    record.wall_clock = time.perf_counter() - start
    return record


def _epoch_saver(nets: dict, checkpoint_dir, config_hashes: dict):
    if checkpoint_dir is None:
        return None

    def save(epoch):
        target = Path(checkpoint_dir) / f"epoch_{epoch + 1:03d}"
        for name, net in nets.items():
            save_archive(net, target / name, config_hashes[name])
        return str(target)

    return save


def train_stage_full(cfg: StageConfig, data: Sequence[Sample], net: ColorizationNetwork,
                     checkpoint_dir=None) -> tuple[ColorizationNetwork, TrainRecord]:
    if cfg.stage != "full":
        raise ValueError("train_stage_full needs a 'full' stage config")
    L = torch.stack([s.L for s in data]) if data else None
    ab = torch.stack([s.ab for s in data]) if data else None

    def batch_loss(idx):
        pred, _ = net(L[idx])
        return smooth_l1(pred, ab[idx])

    saver = _epoch_saver({"full": net}, checkpoint_dir, {"full": net.config.config_hash()})
    record = _run_epochs(cfg, len(data), list(net.parameters()), batch_loss, saver)
    return net, record


def build_instance_dataset(samples: Sequence[Sample], resolution: int,
                           strategy: str = "top_k", k: int = 8, threshold: float = 0.5,
                           seed: int = 0) -> list[tuple[torch.Tensor, torch.Tensor]]:
    pairs = []
    for n, s in enumerate(samples):
        pairs.extend(instance_pairs(s, selected_boxes(s, strategy, k, threshold, seed + n),
                                    resolution))
    return pairs


def train_stage_instance(cfg: StageConfig, data: Sequence[tuple[torch.Tensor, torch.Tensor]],
                         full_net: ColorizationNetwork, checkpoint_dir=None
                         ) -> tuple[ColorizationNetwork, TrainRecord]:
    """Initialize the instance network from ``full_net`` and train it on (L, ab) crops."""
    if cfg.stage != "instance":
        raise ValueError("train_stage_instance needs an 'instance' stage config")
    inst_net = transfer_weights(full_net, INSTANCE)
    L = torch.stack([c for c, _ in data]) if data else None
    ab = torch.stack([t for _, t in data]) if data else None

    def batch_loss(idx):
        pred, _ = inst_net(L[idx])
        return smooth_l1(pred, ab[idx])

    saver = _epoch_saver({"instance": inst_net}, checkpoint_dir,
                         {"instance": inst_net.config.config_hash()})
    record = _run_epochs(cfg, len(data), list(inst_net.parameters()), batch_loss, saver)
    return inst_net, record


@dataclass
class BoxSelection:
    strategy: str = "top_k"
    k: int = 8
    threshold: float = 0.5
    seed: int = 0

    def __call__(self, sample: Sample, index: int = 0) -> list[BoundingBox]:
        return self.select(sample.detections, index)

    def select(self, dets: DetectionSet, index: int = 0) -> list[BoundingBox]:
        """Apply the strategy; ``index`` offsets the seed so images draw independently."""
        return select_boxes(dets, self.strategy, self.k, self.threshold, self.seed + index)


def sample_instances(sample: Sample, boxes: Sequence[BoundingBox], resolution: int):
    return [(c, b) for (c, _), b in zip(instance_pairs(sample, list(boxes), resolution), boxes)]


def fusion_loss(full_net, inst_net, fusion, sample: Sample, boxes, resolution: int,
                **fwd) -> torch.Tensor:
    pred = fused_forward(full_net, inst_net, fusion, sample.L,
                         sample_instances(sample, boxes, resolution), **fwd)
    return smooth_l1(pred[0], sample.ab)


def train_stage_fusion(cfg: StageConfig, data: Sequence[Sample], full_net: ColorizationNetwork,
                       inst_net: ColorizationNetwork, fusion: FusionModule,
                       boxes: BoxSelection | None = None, instance_resolution: int | None = None,
                       checkpoint_dir=None) -> tuple[FusionModule, TrainRecord]:
    """Train the weight heads on full images with instances.

    Backbones are frozen unless ``cfg.unfreeze_backbones`` is set.
    """
    if cfg.stage != "fusion":
        raise ValueError("train_stage_fusion needs a 'fusion' stage config")
    boxes = boxes or BoxSelection(k=fusion.max_instances)
    res = instance_resolution or full_net.config.base_resolution
    selected = [boxes(s, n) for n, s in enumerate(data)]
    params = list(fusion.parameters())
    if cfg.unfreeze_backbones:
        params += list(full_net.parameters()) + list(inst_net.parameters())
    frozen = [] if cfg.unfreeze_backbones else \
        [p for p in list(full_net.parameters()) + list(inst_net.parameters()) if p.requires_grad]
    for p in frozen:
        p.requires_grad_(False)

    def batch_loss(idx):
        total = sum(fusion_loss(full_net, inst_net, fusion, data[i], selected[i], res)
                    for i in idx)
        return total / len(idx)

    nets = {"full": full_net, "instance": inst_net, "heads": fusion}
    hashes = {"full": full_net.config.config_hash(),
              "instance": inst_net.config.config_hash(),
              "heads": fusion_config_hash(fusion)}
    try:
        record = _run_epochs(cfg, len(data), params, batch_loss,
                             _epoch_saver(nets, checkpoint_dir, hashes))
    finally:
        for p in frozen:
            p.requires_grad_(True)
    return fusion, record


def fusion_config_hash(fusion: FusionModule) -> str:
    blob = json.dumps(fusion.architecture(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@torch.no_grad()
def validation_loss(predict: Callable[[Sample, int], torch.Tensor],
                    samples: Sequence[Sample]) -> float:
    """Mean smooth-L1 of ``predict(sample, index)`` (normalized ab) over ``samples``."""
    losses = [float(smooth_l1(predict(s, n).reshape(s.ab.shape), s.ab))
              for n, s in enumerate(samples)]
    return float(np.mean(losses))
