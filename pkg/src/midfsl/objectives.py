"""The three training losses and their weighted total, over autodiff tensors.

The split reconstruction here mirrors ``geometry.split_reconstruct`` exactly
at the index level (same cosine ranking, same lower-index tie-break); the
top-m selection is treated as a constant of the current step, so gradients
flow into the feature and into the selected prototype entries but not through
the ranking itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .exceptions import (
    IndivisibleSplit,
    InsufficientPrototypes,
    UnknownLabel,
)
from .geometry import EPS_COS, EPS_NORM
from .network import ResidualHeads, abs_prototypes, cosine_logits, safe_normalize


@dataclass(frozen=True)
class LossConfig:
    """Hyperparameters of the training objective."""

    temperature: float = 10.0
    alpha: float = 0.1
    lambda1: float = 0.5
    lambda2: float = 0.5
    splits: int = 4
    neighbors: int = 4

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.alpha < 0 or self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.splits < 1 or self.neighbors < 1:
            raise ValueError("splits and neighbors must be positive")


def _as_batch(x: torch.Tensor):
    if x.dim() == 1:
        return x.unsqueeze(0), True
    return x, False


def reconstruct(
    feat: torch.Tensor,
    weight: torch.Tensor,
    labels,
    splits: int,
    neighbors: int,
):
    """Split-wise top-m prototype reconstruction of a feature batch.

    feat: (B, d); weight: raw classifier weight (N, d), taken in absolute
    value here; labels: (B,) row indices to exclude per sample, or None to
    use all prototypes.

    Returns (reconstructed (B, d), selected indices (B, S, m)). The index
    selection runs under no_grad; the averaged prototype splits keep their
    autograd path.
    """
    feat, squeeze = _as_batch(feat)
    batch, d = feat.shape
    n = weight.shape[0]
    if splits < 1 or d % splits != 0:
        raise IndivisibleSplit(f"dim {d} not divisible into {splits} splits")
    candidates = n if labels is None else n - 1
    if neighbors > candidates:
        raise InsufficientPrototypes(
            f"requested {neighbors} neighbors from {candidates} candidates"
        )
    width = d // splits
    w_abs = abs_prototypes(weight)
    f_parts = feat.view(batch, splits, width)
    w_parts = w_abs.view(n, splits, width)

    with torch.no_grad():
        f_n = safe_normalize(f_parts)  # zero split -> zero row -> cosine 0
        w_n = safe_normalize(w_parts)
        sims = torch.einsum("bsw,nsw->bsn", f_n, w_n).clamp(-1.0, 1.0)
        if labels is not None:
            labels = torch.as_tensor(labels, dtype=torch.long, device=feat.device)
            if bool((labels < 0).any()) or bool((labels >= n).any()):
                raise UnknownLabel("label outside prototype bank")
            mask = F.one_hot(labels, n).bool().unsqueeze(1)  # (B, 1, N)
            sims = sims.masked_fill(mask, float("-inf"))
        # stable sort: ties keep the lower prototype index
        order = torch.argsort(-sims, dim=-1, stable=True)
        idx = order[..., :neighbors]  # (B, S, m)

    # gather the selected splits with autograd intact
    w_by_split = w_parts.transpose(0, 1)  # (S, N, width)
    split_ids = torch.arange(splits, device=feat.device).view(1, splits, 1)
    selected = w_by_split[split_ids, idx]  # (B, S, m, width)
    recon = selected.mean(dim=2).reshape(batch, d)
    if squeeze:
        return recon.squeeze(0), idx.squeeze(0)
    return recon, idx


def loss_cls(feat: torch.Tensor, labels, weight: torch.Tensor, cfg: LossConfig):
    """Cross-entropy over the temperature-scaled cosine logits."""
    feat, _ = _as_batch(feat)
    labels = torch.as_tensor(labels, dtype=torch.long, device=feat.device)
    if labels.dim() == 0:
        labels = labels.unsqueeze(0)
    n = weight.shape[0]
    if bool((labels < 0).any()) or bool((labels >= n).any()):
        raise UnknownLabel("label outside prototype bank")
    logits = cosine_logits(feat, weight, cfg.temperature)
    return F.cross_entropy(logits, labels)


def loss_recon(feat: torch.Tensor, labels, weight: torch.Tensor, cfg: LossConfig):
    """Squared distance between the normalized feature and its normalized
    split reconstruction (each sample reconstructed from the other classes).

    Returns (mean loss, reconstructed (B, d), selected indices (B, S, m)).
    """
    feat, squeeze = _as_batch(feat)
    recon, idx = reconstruct(feat, weight, labels, cfg.splits, cfg.neighbors)
    f_c = safe_normalize(feat)
    r_c = safe_normalize(recon)
    loss = ((f_c - r_c) ** 2).sum(dim=-1).mean()
    if squeeze:
        return loss, recon.squeeze(0), idx.squeeze(0)
    return loss, recon, idx


def residual_target(feat: torch.Tensor, recon: torch.Tensor):
    """Detached direction/length target of the prolonged-feature residual.

    The cosine is clamped to [EPS_COS, 1] instead of erroring so one
    pathological sample cannot abort an epoch. Returns (direction (B, d),
    length (B,), degenerate mask (B,), cosine (B,)), all constants.
    """
    with torch.no_grad():
        feat, _ = _as_batch(feat)
        recon, _ = _as_batch(recon)
        f_c = safe_normalize(feat)
        r_c = safe_normalize(recon)
        cos = (f_c * r_c).sum(dim=-1).clamp(EPS_COS, 1.0)
        raw = f_c / cos.unsqueeze(-1) - r_c
        length = raw.norm(dim=-1)
        degenerate = length <= EPS_NORM
        direction = raw / length.clamp_min(EPS_NORM).unsqueeze(-1)
        direction = torch.where(
            degenerate.unsqueeze(-1), torch.zeros_like(direction), direction
        )
    return direction, length, degenerate, cos


def loss_mid(
    target_direction: torch.Tensor,
    target_length: torch.Tensor,
    degenerate,
    mids,
    heads: ResidualHeads,
    cfg: LossConfig,
):
    """Residual-prediction loss: squared direction error plus alpha-weighted
    squared length error, averaged over the batch.

    The targets are constants (see ``residual_target``); the direction term
    is skipped for samples whose target residual vanished.
    """
    pred_dir, _ = heads.predict_direction(mids)
    pred_len, _ = heads.predict_length(mids)
    target_direction, _ = _as_batch(target_direction)
    target_length = torch.atleast_1d(target_length)
    degenerate = torch.atleast_1d(torch.as_tensor(degenerate))
    dir_term = ((pred_dir - target_direction) ** 2).sum(dim=-1)
    dir_term = torch.where(degenerate, torch.zeros_like(dir_term), dir_term)
    len_term = (pred_len - target_length) ** 2
    return (dir_term + cfg.alpha * len_term).mean()


def loss_total(l_cls, l_recon, l_mid, cfg: LossConfig):
    """L = L_cls + lambda1 * L_recon + lambda2 * L_mid."""
    return l_cls + cfg.lambda1 * l_recon + cfg.lambda2 * l_mid
