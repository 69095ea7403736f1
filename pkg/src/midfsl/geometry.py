"""Pure feature-space math: normalization, split-wise prototype reconstruction,
prolonging, and residual extraction.

Everything here is deterministic float64 numpy on immutable inputs, with no
learnable state. The differentiable training path re-expresses these formulas
over autodiff tensors (see ``objectives``); this module is the numeric
reference the tests check that path against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import (
    DegenerateAngle,
    IndivisibleSplit,
    InsufficientPrototypes,
    ZeroVector,
)

# Norms at or below this are treated as zero.
EPS_NORM = 1e-12
# Cosine floor for prolonging; below this the 1/cos rescale blows up.
EPS_COS = 0.1


@dataclass(frozen=True)
class PrototypeBank:
    """N x d matrix of class prototypes with their class ids.

    Rows are expected to be elementwise nonnegative already (the absolute
    value is applied where the bank is built, not here).
    """

    rows: np.ndarray
    class_ids: tuple

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 2:
            raise ValueError("prototype bank needs an N x d matrix with N >= 2")
        if len(self.class_ids) != rows.shape[0]:
            raise ValueError("class_ids length must match the number of rows")
        if not np.all(np.isfinite(rows)):
            raise ValueError("prototype bank contains non-finite entries")
        if np.any(np.linalg.norm(rows, axis=1) <= EPS_NORM):
            raise ZeroVector("prototype bank contains a zero row")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "class_ids", tuple(self.class_ids))

    @property
    def num_classes(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def index_of(self, class_id) -> int:
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise KeyError(f"class id {class_id!r} not in bank") from None


@dataclass(frozen=True)
class SplitReconstruction:
    """Result of split-wise prototype reconstruction.

    reconstructed: the d-vector concatenated from the S per-split means.
    selected_indices: S x m bank-row indices, per split sorted by descending
        cosine similarity (ties broken toward the lower index).
    per_split_sims: S x m similarities in the same order.
    """

    reconstructed: np.ndarray
    selected_indices: np.ndarray
    per_split_sims: np.ndarray


@dataclass(frozen=True)
class Residual:
    """Orthogonal remainder of a prolonged feature after reconstruction.

    direction: unit vector, or the zero vector when degenerate.
    length: L2 norm of the raw residual.
    cosine: cos angle between the normalized feature and reconstruction.
    degenerate: True when the residual vanished (feature == reconstruction).
    """

    direction: np.ndarray
    length: float
    cosine: float
    degenerate: bool


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Return v scaled to unit L2 norm; raises ZeroVector on a null input."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= EPS_NORM:
        raise ZeroVector(f"cannot normalize vector with norm {norm:.3e}")
    return v / norm


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity of two nonzero vectors, clamped to [-1, 1]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu <= EPS_NORM or nv <= EPS_NORM:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def _split_cosines(f_split: np.ndarray, proto_splits: np.ndarray) -> np.ndarray:
    """Cosines between one feature split and each candidate's matching split.

    A zero vector on either side contributes cosine 0 (sparse rectified
    features can zero out a whole split; selection then falls back to the
    index tie-break).
    """
    f_norm = np.linalg.norm(f_split)
    p_norms = np.linalg.norm(proto_splits, axis=1)
    sims = np.zeros(proto_splits.shape[0], dtype=np.float64)
    if f_norm <= EPS_NORM:
        return sims
    ok = p_norms > EPS_NORM
    sims[ok] = proto_splits[ok] @ f_split / (p_norms[ok] * f_norm)
    return np.clip(sims, -1.0, 1.0)


def split_reconstruct(
    f: np.ndarray,
    bank: PrototypeBank,
    exclude,
    splits: int,
    neighbors: int,
) -> SplitReconstruction:
    """Reconstruct f from its top-m most-similar prototype splits.

    The feature and every prototype row are cut into `splits` equal channel
    segments; per segment, the `neighbors` candidates whose matching segment
    has the highest cosine similarity (excluding class `exclude`, if given)
    are averaged. The output concatenates the per-segment means; no per-split
    renormalization is applied before averaging.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 1:
        raise ValueError("feature must be a 1-D vector")
    d = f.shape[0]
    if d != bank.dim:
        raise ValueError(f"feature dim {d} != bank dim {bank.dim}")
    if splits < 1 or d % splits != 0:
        raise IndivisibleSplit(f"dim {d} not divisible into {splits} splits")
    if float(np.linalg.norm(f)) <= EPS_NORM:
        raise ZeroVector("cannot reconstruct an all-zero feature")

    if exclude is None:
        candidates = np.arange(bank.num_classes)
    else:
        excl_row = bank.index_of(exclude)
        candidates = np.array(
            [i for i in range(bank.num_classes) if i != excl_row], dtype=int
        )
    if neighbors < 1 or neighbors > candidates.size:
        raise InsufficientPrototypes(
            f"requested {neighbors} neighbors from {candidates.size} candidates"
        )

    width = d // splits
    f_parts = f.reshape(splits, width)
    cand_parts = bank.rows[candidates].reshape(candidates.size, splits, width)

    recon = np.empty_like(f_parts)
    sel_idx = np.empty((splits, neighbors), dtype=int)
    sel_sims = np.empty((splits, neighbors), dtype=np.float64)
    for k in range(splits):
        sims = _split_cosines(f_parts[k], cand_parts[:, k, :])
        # stable argsort on -sims: equal similarities keep candidate order,
        # i.e. ties go to the lower bank index
        order = np.argsort(-sims, kind="stable")[:neighbors]
        sel_idx[k] = candidates[order]
        sel_sims[k] = sims[order]
        recon[k] = cand_parts[order, k, :].mean(axis=0)

    return SplitReconstruction(
        reconstructed=recon.reshape(d),
        selected_indices=sel_idx,
        per_split_sims=sel_sims,
    )


def prolong(f_c: np.ndarray, r_c: np.ndarray) -> np.ndarray:
    """Rescale the unit feature by 1/cos so its residual against the unit
    reconstruction is orthogonal to it."""
    f_c = np.asarray(f_c, dtype=np.float64)
    r_c = np.asarray(r_c, dtype=np.float64)
    cos = cosine_sim(f_c, r_c)
    if cos < EPS_COS:
        raise DegenerateAngle(
            f"cosine {cos:.4f} below prolonging floor {EPS_COS}"
        )
    return f_c / cos


def residual(f_c: np.ndarray, r_c: np.ndarray) -> Residual:
    """Direction/length decomposition of the unreconstructable component.

    Returns the unit direction of prolong(f_c, r_c) - r_c, its length, and
    the feature/reconstruction cosine. A vanishing residual comes back with
    the zero direction and the degenerate flag set.
    """
    f_c = np.asarray(f_c, dtype=np.float64)
    r_c = np.asarray(r_c, dtype=np.float64)
    cos = cosine_sim(f_c, r_c)
    prolonged = prolong(f_c, r_c)
    raw = prolonged - r_c
    length = float(np.linalg.norm(raw))
    if length <= EPS_NORM:
        return Residual(
            direction=np.zeros_like(raw), length=0.0, cosine=cos, degenerate=True
        )
    return Residual(
        direction=raw / length, length=length, cosine=cos, degenerate=False
    )
