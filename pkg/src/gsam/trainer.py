"""Adam + cosine schedule training loop with frozen-parameter guards and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import AugmentConfig, ConfusionMatrix, Sample, augment, sample_rng
from .model import GSAM, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class FrozenParameterModified(RuntimeError):
    pass


# Reference full-scale setting: 200 epochs, batch 8, Adam from lr 0.005. The
# toy model trains from random init and collapses to a constant prediction at that rate, hence 3e-4.
FULL_SCALE_EPOCHS = 200
FULL_SCALE_LR0 = 0.005


def cosine_lr(epoch: int, total: int, lr0: float) -> float:
    if total <= 0:
        raise ValueError("total epochs must be positive")
    if not 0 <= epoch <= total:
        raise ValueError(f"epoch {epoch} outside [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total))


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr0: float = 3e-4
    seed: int = 0
    loss: str = "cross_entropy"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.loss != "cross_entropy":
            raise ValueError(f"unsupported loss {self.loss!r}")
        self.betas = tuple(self.betas)


@dataclass
class TrainLog:
    loss: List[float] = field(default_factory=list)
    val_miou: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)

    def write(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "train_log.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "lr", "loss", "val_miou"])
            for e, row in enumerate(zip(self.lr, self.loss, self.val_miou)):
                w.writerow([e, *(repr(v) for v in row)])
        summary = {
            "epochs": len(self.loss),
            "final_loss": self.loss[-1] if self.loss else None,
            "final_val_miou": self.val_miou[-1] if self.val_miou else None,
            "best_val_miou": max(self.val_miou) if self.val_miou else None,
            **asdict(self),
        }
        (out_dir / "train_summary.json").write_text(json.dumps(summary, indent=2) + "\n")


def _batch(samples: Sequence[Sample], dtype=torch.float32):
    x = torch.from_numpy(np.concatenate([s.image for s in samples])).to(dtype)
    y = torch.from_numpy(np.stack([s.label for s in samples]))
    return x, y


def frozen_snapshot(model: torch.nn.Module) -> Dict[str, torch.Tensor]:
    return {n: p.detach().clone() for n, p in model.named_parameters() if not p.requires_grad}


def verify_frozen(model: torch.nn.Module, snapshot: Dict[str, torch.Tensor]) -> None:
    params = dict(model.named_parameters())
    for name, ref in snapshot.items():
        if not torch.equal(params[name].detach(), ref):
            raise FrozenParameterModified(f"frozen parameter {name} changed")


@torch.no_grad()
def evaluate(model: GSAM, samples: Sequence[Sample], num_classes: int,
             batch_size: int = 8) -> ConfusionMatrix:
    """Full-size inference; samples of differing sizes are run one size group at a time."""
    model.eval()
    cm = ConfusionMatrix(num_classes)
    groups: Dict[tuple, List[Sample]] = {}
    for s in samples:
        groups.setdefault(s.label.shape, []).append(s)
    dtype = next(model.parameters()).dtype
    for group in groups.values():
        for i in range(0, len(group), batch_size):
            x, y = _batch(group[i: i + batch_size], dtype)
            pred = model(x).argmax(1)
            cm.update(pred.numpy(), y.numpy())
    return cm


def train_epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 2**31 - 1]).permutation(n)


def train(model: GSAM, dataset: Sequence[Sample], cfg: TrainConfig, aug: AugmentConfig,
          val: Optional[Sequence[Sample]] = None, out_dir: Optional[Path] = None,
          resume: Optional[dict] = None, stop_after: Optional[int] = None) -> TrainLog:
    """Train learnable parameters; frozen ones are verified bit-identical every epoch.

    ``resume`` is the ``extra`` dict from a checkpoint written by this
    function; ``stop_after`` ends the run early after that many epochs (used
    for checkpoint/resume tests). Randomness comes only from ``cfg.seed`` and
    the augmentation seed, so reruns are identical in single-threaded mode.
    """
    torch.manual_seed(cfg.seed)
    dtype = next(model.parameters()).dtype
    num_classes = model.cfg.num_classes
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr0, betas=cfg.betas, eps=cfg.eps) if params else None
    snapshot = frozen_snapshot(model)
    history = TrainLog()
    start = 0
    if resume:
        start = resume["epoch"]
        history = TrainLog(**resume["log"])
        snapshot = resume.get("frozen_snapshot", snapshot)
        if opt is not None and resume.get("optimizer"):
            opt.load_state_dict(resume["optimizer"])

    end = cfg.epochs if stop_after is None else min(cfg.epochs, start + stop_after)
    for epoch in range(start, end):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)
        if opt is not None:
            for g in opt.param_groups:
                g["lr"] = lr
        model.train()
        order = train_epoch_order(cfg.seed, epoch, len(dataset))
        total, count = 0.0, 0
        for b, start_i in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start_i: start_i + cfg.batch_size]
            batch = [augment(dataset[i], aug, sample_rng(aug.seed, int(i), epoch)) for i in idx]
            x, y = _batch(batch, dtype)
            loss = F.cross_entropy(model(x), y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}, lr {lr:.6g}")
            if opt is not None:
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        verify_frozen(model, snapshot)
        history.lr.append(lr)
        history.loss.append(total / count)
        if val:
            history.val_miou.append(evaluate(model, val, num_classes).iou()[1])
        else:
            history.val_miou.append(float("nan"))
        log.info("epoch %d lr %.5g loss %.4f val_mIoU %.4f", epoch, lr, history.loss[-1],
                 history.val_miou[-1])
        if out_dir is not None:
            extra = {
                "epoch": epoch + 1,
                "log": asdict(history),
                "optimizer": opt.state_dict() if opt is not None else None,
                "frozen_snapshot": snapshot,
                "train_config": asdict(cfg),
            }
            save_checkpoint(model, Path(out_dir) / "checkpoint.pt", extra)
    if out_dir is not None:
        history.write(Path(out_dir))
    return history
