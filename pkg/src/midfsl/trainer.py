"""Base-class training: per batch, classify every sample, reconstruct it
from the other classes' prototypes, derive the residual target, and train
the mid-layer heads to predict that residual alongside the main objective.

The baseline variant optimizes the classification term alone but still logs
the reconstruction and residual losses, so ablation runs produce directly
comparable epoch records.
"""

from __future__ import annotations

import copy
import json
import pickle
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import ArrayDataset, augment_batch, channel_stats
from .exceptions import (
    CorruptArchive,
    EmptyClass,
    EmptyDataset,
    NonFiniteLoss,
    VersionMismatch,
)
from .network import BackboneConfig, MidLevelNet
from .objectives import LossConfig, loss_cls, loss_mid, loss_recon, residual_target

FORMAT_VERSION = 1

_CHECKPOINT_KEYS = (
    "format_version", "backbone", "num_classes", "temperature", "loss",
    "class_names", "norm_mean", "norm_std", "epoch", "model_state",
)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings for one base-training run.

    The learning rate decays by `decay` at each epoch in `milestones` and
    never increases. `mid_grad_into_backbone` controls whether the residual
    branch backpropagates into the shared backbone (the joint objective) or
    trains the heads on detached mid-features.
    """

    loss: LossConfig = field(default_factory=LossConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 0.05
    milestones: tuple = ()
    decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    mid_grad_into_backbone: bool = True
    augment: bool = True
    checkpoint_dir: object = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must be in (0, 1]")
        if any(m < 1 for m in self.milestones):
            raise ValueError("milestones are 1-based epoch indices")
        object.__setattr__(self, "milestones", tuple(sorted(self.milestones)))


@dataclass
class TrainState:
    """A trained model plus everything needed to use it on new images."""

    model: MidLevelNet
    loss: LossConfig
    class_names: tuple
    norm_mean: np.ndarray
    norm_std: np.ndarray
    epoch: int
    history: list
    checkpoint_path: object = None


def to_inputs(images: np.ndarray, mean, std) -> torch.Tensor:
    """(B, H, W, C) arrays in [0, 1] to normalized (B, C, H, W) tensors."""
    x = (images - np.asarray(mean)) / np.asarray(std)
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2))).float()


def head_accuracy(state: TrainState, dataset: ArrayDataset) -> float:
    """Fraction of samples the cosine head labels correctly (eval mode)."""
    state.model.eval()
    with torch.no_grad():
        x = to_inputs(dataset.images, state.norm_mean, state.norm_std)
        logits = state.model(x)
        pred = logits.argmax(dim=1).numpy()
    return float((pred == dataset.labels).mean())


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    passed = sum(1 for m in cfg.milestones if epoch >= m)
    return cfg.learning_rate * cfg.decay ** passed


def _check_finite(value: torch.Tensor, name: str, epoch: int):
    if not bool(torch.isfinite(value)):
        raise NonFiniteLoss(f"{name} became non-finite at epoch {epoch}")


def _run(cfg: TrainConfig, dataset: ArrayDataset, classifier_only: bool,
         log_path, val_fn, val_every) -> TrainState:
    if len(dataset) == 0:
        raise EmptyDataset("training set is empty")
    present = np.unique(dataset.labels)
    if dataset.num_classes < 2 or len(present) < 2:
        raise EmptyDataset("need at least 2 base classes")
    if len(present) != dataset.num_classes:
        missing = sorted(set(range(dataset.num_classes)) - set(present.tolist()))
        raise EmptyClass(f"classes without samples: {missing}")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    mean, std = channel_stats(dataset.images)
    model = MidLevelNet(cfg.backbone, dataset.num_classes,
                        cfg.loss.temperature)
    optimizer = torch.optim.SGD(
        model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    labels_all = torch.from_numpy(dataset.labels)

    log_fh = open(log_path, "w") if log_path is not None else None
    history = []
    best_score, best_params = None, None
    try:
        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            lr = _lr_at(cfg, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            model.train()
            order = rng.permutation(len(dataset))
            sums = {"loss_cls": 0.0, "loss_recon": 0.0, "loss_mid": 0.0}
            for start in range(0, len(order), cfg.batch_size):
                pick = order[start:start + cfg.batch_size]
                images = dataset.images[pick]
                if cfg.augment:
                    images = augment_batch(images, rng)
                x = to_inputs(images, mean, std)
                labels = labels_all[pick]

                feat, mids = model.forward_with_taps(x)
                weight = model.classifier.weight
                l_cls = loss_cls(feat, labels, weight, cfg.loss)
                if not cfg.mid_grad_into_backbone:
                    mids = [m.detach() for m in mids]
                if classifier_only:
                    with torch.no_grad():
                        l_rec, recon, _ = loss_recon(
                            feat, labels, weight, cfg.loss
                        )
                        target = residual_target(feat, recon)
                        l_mid = loss_mid(*target[:3], mids, model.heads,
                                         cfg.loss)
                else:
                    l_rec, recon, _ = loss_recon(feat, labels, weight,
                                                 cfg.loss)
                    target = residual_target(feat, recon)
                    l_mid = loss_mid(*target[:3], mids, model.heads, cfg.loss)
                _check_finite(l_cls, "L_cls", epoch)
                _check_finite(l_rec, "L_recon", epoch)
                _check_finite(l_mid, "L_mid", epoch)

                total = l_cls
                if not classifier_only:
                    if cfg.loss.lambda1 != 0.0:
                        total = total + cfg.loss.lambda1 * l_rec
                    if cfg.loss.lambda2 != 0.0:
                        total = total + cfg.loss.lambda2 * l_mid
                optimizer.zero_grad()
                total.backward()
                optimizer.step()

                n = len(pick)
                sums["loss_cls"] += l_cls.item() * n
                sums["loss_recon"] += l_rec.item() * n
                sums["loss_mid"] += l_mid.item() * n

            record = {
                "epoch": epoch,
                "lr": lr,
                "loss_cls": sums["loss_cls"] / len(order),
                "loss_recon": sums["loss_recon"] / len(order),
                "loss_mid": sums["loss_mid"] / len(order),
                "wall_time": time.perf_counter() - started,
            }
            if val_fn is not None and val_every > 0 and epoch % val_every == 0:
                score = float(val_fn(model))
                record["val_score"] = score
                if best_score is None or score > best_score:
                    best_score = score
                    best_params = copy.deepcopy(model.state_dict())
            history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
    finally:
        if log_fh is not None:
            log_fh.close()

    if best_params is not None:
        model.load_state_dict(best_params)
    model.eval()
    state = TrainState(
        model=model, loss=cfg.loss, class_names=dataset.class_names,
        norm_mean=mean, norm_std=std, epoch=cfg.epochs, history=history,
    )
    if cfg.checkpoint_dir is not None:
        ckpt_dir = Path(cfg.checkpoint_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        state.checkpoint_path = save_checkpoint(
            state, ckpt_dir / "checkpoint.pt"
        )
    return state


def train_base(cfg: TrainConfig, dataset: ArrayDataset, log_path=None,
               val_fn=None, val_every: int = 0) -> TrainState:
    """Train with the full objective L_cls + lambda1 L_recon + lambda2 L_mid.

    `val_fn`, if given, scores a model snapshot every `val_every` epochs and
    the best-scoring parameters are the ones kept.
    """
    return _run(cfg, dataset, False, log_path, val_fn, val_every)


def train_baseline(cfg: TrainConfig, dataset: ArrayDataset, log_path=None,
                   val_fn=None, val_every: int = 0) -> TrainState:
    """Train the cosine classifier alone; other losses are logged, not used."""
    return _run(cfg, dataset, True, log_path, val_fn, val_every)


def save_checkpoint(state: TrainState, path) -> Path:
    """Serialize a TrainState; `load_checkpoint` restores it exactly."""
    path = Path(path)
    backbone = state.model.config
    payload = {
        "format_version": FORMAT_VERSION,
        "backbone": {
            "block_widths": list(backbone.block_widths),
            "input_shape": list(backbone.input_shape),
            "tap_layers": list(backbone.tap_layers),
        },
        "num_classes": state.model.classifier.num_classes,
        "temperature": float(state.model.classifier.temperature),
        "loss": {
            "temperature": state.loss.temperature,
            "alpha": state.loss.alpha,
            "lambda1": state.loss.lambda1,
            "lambda2": state.loss.lambda2,
            "splits": state.loss.splits,
            "neighbors": state.loss.neighbors,
        },
        "class_names": list(state.class_names),
        "norm_mean": torch.from_numpy(np.asarray(state.norm_mean)),
        "norm_std": torch.from_numpy(np.asarray(state.norm_std)),
        "epoch": state.epoch,
        "model_state": state.model.state_dict(),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> TrainState:
    """Rebuild a TrainState from disk; the model comes back in eval mode."""
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, ValueError,
            zipfile.BadZipFile, pickle.UnpicklingError) as exc:
        raise CorruptArchive(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CorruptArchive(f"{path} is not a checkpoint")
    if payload["format_version"] != FORMAT_VERSION:
        raise VersionMismatch(
            f"checkpoint format {payload['format_version']} != "
            f"{FORMAT_VERSION}"
        )
    missing = [k for k in _CHECKPOINT_KEYS if k not in payload]
    if missing:
        raise CorruptArchive(f"checkpoint missing fields: {missing}")
    try:
        backbone = BackboneConfig(
            block_widths=tuple(payload["backbone"]["block_widths"]),
            input_shape=tuple(payload["backbone"]["input_shape"]),
            tap_layers=tuple(payload["backbone"]["tap_layers"]),
        )
        loss = LossConfig(**payload["loss"])
        model = MidLevelNet(backbone, int(payload["num_classes"]),
                            float(payload["temperature"]))
        model.load_state_dict(payload["model_state"])
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise CorruptArchive(f"checkpoint {path} is inconsistent: {exc}") from exc
    model.eval()
    return TrainState(
        model=model, loss=loss, class_names=tuple(payload["class_names"]),
        norm_mean=payload["norm_mean"].numpy(),
        norm_std=payload["norm_std"].numpy(),
        epoch=int(payload["epoch"]), history=[], checkpoint_path=path,
    )
