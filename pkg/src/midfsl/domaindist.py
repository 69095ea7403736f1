"""Proxy-A-Distance between two feature corpora.

PAD = 2(1 - 2 * eps), where eps is the cross-validated balanced error of a
linear logistic discriminator trained to tell corpus A from corpus B. Small
values mean the domains are statistically indistinguishable on the given
features; 2 means perfectly separable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold

from .exceptions import InsufficientData


@dataclass(frozen=True)
class PadResult:
    """PAD value plus, for diagnostics, the per-fold balanced errors."""

    pad: float
    balanced_error: float
    fold_errors: tuple

    def __post_init__(self):
        if not 0.0 <= self.pad <= 2.0:
            raise ValueError("PAD must lie in [0, 2]")


def _balanced_error(labels: np.ndarray, preds: np.ndarray) -> float:
    errors = []
    for cls in (0, 1):
        mask = labels == cls
        errors.append(float((preds[mask] != cls).mean()))
    return 0.5 * (errors[0] + errors[1])


def compute_pad(features_a: np.ndarray, features_b: np.ndarray,
                folds: int = 5, seed: int = 0) -> PadResult:
    """Cross-validated PAD of two feature matrices (rows are samples)."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise InsufficientData("feature matrices must be 2-d with equal width")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise InsufficientData("features must be finite")
    if folds < 2:
        raise InsufficientData("need at least 2 folds")
    if len(a) < 2 * folds or len(b) < 2 * folds:
        raise InsufficientData(
            f"each corpus needs at least {2 * folds} samples for "
            f"{folds}-fold cross-validation"
        )
    x = np.concatenate([a, b], axis=0)
    y = np.concatenate([np.zeros(len(a), dtype=np.int64),
                        np.ones(len(b), dtype=np.int64)])
    splitter = StratifiedKFold(n_splits=folds, shuffle=True,
                               random_state=seed)
    fold_errors = []
    for train_idx, test_idx in splitter.split(x, y):
        clf = LogisticRegression(max_iter=2000)
        clf.fit(x[train_idx], y[train_idx])
        preds = clf.predict(x[test_idx])
        fold_errors.append(_balanced_error(y[test_idx], preds))
    eps = float(np.mean(fold_errors))
    pad = float(np.clip(2.0 * (1.0 - 2.0 * eps), 0.0, 2.0))
    return PadResult(pad=pad, balanced_error=eps,
                     fold_errors=tuple(fold_errors))
