"""Novel-class evaluation: episode sampling, the two feature constructors
for distant and near domains, prototype nearest-neighbor classification,
and accuracy statistics with 95% confidence intervals.

Feature modes:

* ``distant``: weighted concatenation of unit-normalized mid-features,
  block l scaled by the direction gate weight a_l(x).
* ``near``: split reconstruction from all base prototypes plus the
  predicted residual, R^c(x, W) + r_len * r_dir.
* ``final``: the unit-normalized backbone output (ablation baseline).
* ``mid_concat``: unweighted concatenation of unit-normalized mid-features
  (ablation baseline).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import ArrayDataset
from .exceptions import ConfigError, EmptyClass, InsufficientData, ZeroVector
from .network import EPS_NORM, MidLevelNet, safe_normalize
from .objectives import LossConfig, reconstruct
from .trainer import TrainState, to_inputs

FEATURE_MODES = ("distant", "near", "final", "mid_concat")

# PAD threshold above which the distant-domain feature is recommended
DISTANT_PAD_THRESHOLD = 1.2


@dataclass(frozen=True)
class Episode:
    """One K-way n-shot task: disjoint support and query index sets."""

    way: int
    shot: int
    queries_per_class: int
    class_ids: tuple          # dataset class index per episode label
    support_indices: np.ndarray  # (K, n) indices into the dataset
    query_indices: np.ndarray    # (K, q)

    def __post_init__(self):
        if self.support_indices.shape != (self.way, self.shot):
            raise ValueError("support block has the wrong shape")
        if self.query_indices.shape != (self.way, self.queries_per_class):
            raise ValueError("query block has the wrong shape")
        used = np.concatenate(
            [self.support_indices.ravel(), self.query_indices.ravel()]
        )
        if len(np.unique(used)) != used.size:
            raise ValueError("support and query sets overlap")

    @property
    def support_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.way), self.shot)

    @property
    def query_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.way), self.queries_per_class)


@dataclass(frozen=True)
class EvalSummary:
    """Per-episode accuracies with their mean and 95% interval half-width."""

    episode_accuracies: tuple
    mean: float
    ci95: float

    def __post_init__(self):
        if not 0.0 <= self.mean <= 1.0 or self.ci95 < 0.0:
            raise ValueError("summary statistics out of range")

    @classmethod
    def from_accuracies(cls, accuracies) -> "EvalSummary":
        acc = np.asarray(accuracies, dtype=np.float64)
        if acc.size == 0:
            raise ValueError("no episode accuracies")
        mean = float(acc.mean())
        ci95 = 0.0
        if acc.size > 1:
            ci95 = float(1.96 * acc.std(ddof=1) / math.sqrt(acc.size))
        return cls(episode_accuracies=tuple(acc.tolist()), mean=mean,
                   ci95=ci95)


def sample_episode(dataset: ArrayDataset, way: int, shot: int,
                   queries: int, rng: np.random.Generator) -> Episode:
    """Draw classes then per-class samples, both uniformly without
    replacement."""
    if dataset.num_classes < way:
        raise InsufficientData(
            f"need {way} classes, dataset has {dataset.num_classes}"
        )
    class_ids = rng.choice(dataset.num_classes, size=way, replace=False)
    support = np.empty((way, shot), dtype=np.int64)
    query = np.empty((way, queries), dtype=np.int64)
    for slot, cls in enumerate(class_ids):
        pool = np.flatnonzero(dataset.labels == cls)
        if len(pool) < shot + queries:
            raise InsufficientData(
                f"class {dataset.class_names[cls]!r} has {len(pool)} "
                f"samples, episode needs {shot + queries}"
            )
        picked = rng.choice(pool, size=shot + queries, replace=False)
        support[slot] = picked[:shot]
        query[slot] = picked[shot:]
    return Episode(way=way, shot=shot, queries_per_class=queries,
                   class_ids=tuple(int(c) for c in class_ids),
                   support_indices=support, query_indices=query)


# ---------------------------------------------------------------------------
# feature constructors
# ---------------------------------------------------------------------------

def _require_nonzero(t: torch.Tensor, what: str):
    if bool((t.norm(dim=-1) <= EPS_NORM).any()):
        raise ZeroVector(f"{what} is a zero vector")


def feature_distant(x: torch.Tensor, model: MidLevelNet) -> torch.Tensor:
    """Concatenate a_l(x) * normalized mid-feature over layers; block l of
    the result has L2 norm a_l(x) and the weights sum to one."""
    if x.dim() == 3:
        x = x.unsqueeze(0)
    _, mids = model.forward_with_taps(x)
    for m in mids:
        _require_nonzero(m, "mid-level feature")
    weights = model.heads.direction_weights(mids)
    blocks = [
        weights[:, l:l + 1] * safe_normalize(mids[l])
        for l in range(len(mids))
    ]
    return torch.cat(blocks, dim=-1)


def feature_near(x: torch.Tensor, model: MidLevelNet,
                 cfg: LossConfig) -> torch.Tensor:
    """Reconstruction from all base prototypes plus the predicted residual."""
    if x.dim() == 3:
        x = x.unsqueeze(0)
    feat, mids = model.forward_with_taps(x)
    _require_nonzero(feat, "backbone feature")
    recon, _ = reconstruct(feat, model.classifier.weight, None,
                           cfg.splits, cfg.neighbors)
    direction, _ = model.heads.predict_direction(mids)
    length, _ = model.heads.predict_length(mids)
    return safe_normalize(recon) + length.unsqueeze(-1) * direction


def extract_features(state: TrainState, images: np.ndarray, mode: str,
                     batch_size: int = 512) -> np.ndarray:
    """Run the chosen feature constructor over a whole image array."""
    if mode not in FEATURE_MODES:
        raise ConfigError(f"feature mode must be one of {FEATURE_MODES}")
    model = state.model
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = to_inputs(images[start:start + batch_size],
                          state.norm_mean, state.norm_std)
            if mode == "distant":
                out = feature_distant(x, model)
            elif mode == "near":
                out = feature_near(x, model, state.loss)
            elif mode == "final":
                feat, _ = model.forward_with_taps(x)
                _require_nonzero(feat, "backbone feature")
                out = safe_normalize(feat)
            else:
                _, mids = model.forward_with_taps(x)
                for m in mids:
                    _require_nonzero(m, "mid-level feature")
                out = torch.cat([safe_normalize(m) for m in mids], dim=-1)
            chunks.append(out.numpy())
    return np.concatenate(chunks, axis=0)


# ---------------------------------------------------------------------------
# prototype classification
# ---------------------------------------------------------------------------

def class_prototypes(features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-class arithmetic mean of the support features."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    way = int(labels.max()) + 1 if labels.size else 0
    if way == 0:
        raise EmptyClass("no support features")
    protos = np.empty((way, features.shape[1]), dtype=np.float64)
    for cls in range(way):
        rows = features[labels == cls]
        if len(rows) == 0:
            raise EmptyClass(f"episode class {cls} has no support samples")
        protos[cls] = rows.mean(axis=0)
    return protos


def classify_nn(queries: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Cosine nearest prototype; ties resolve to the lower class index."""
    queries = np.asarray(queries, dtype=np.float64)
    prototypes = np.asarray(prototypes, dtype=np.float64)
    qn = np.linalg.norm(queries, axis=1)
    pn = np.linalg.norm(prototypes, axis=1)
    if (qn <= EPS_NORM).any():
        raise ZeroVector("zero query feature")
    if (pn <= EPS_NORM).any():
        raise ZeroVector("zero prototype")
    sims = (queries / qn[:, None]) @ (prototypes / pn[:, None]).T
    return np.argmax(sims, axis=1)


# ---------------------------------------------------------------------------
# evaluation loop
# ---------------------------------------------------------------------------

def evaluate(state, dataset: ArrayDataset, way: int = 5, shot: int = 5,
             queries: int = 15, episodes: int = 600,
             feature_mode: str = "near", seed: int = 0,
             extractor=None) -> EvalSummary:
    """Run independent episodes on precomputed features.

    Episode i draws its sampling rng from (seed, i), so any subset of
    episodes reproduces exactly regardless of evaluation order.
    `extractor`, if given, maps the image array to a feature matrix and
    replaces the model pathway (used for statistical self-checks).
    """
    if episodes < 1:
        raise ConfigError("episodes must be positive")
    if extractor is not None:
        features = np.asarray(extractor(dataset.images))
    else:
        features = extract_features(state, dataset.images, feature_mode)
    accuracies = np.empty(episodes, dtype=np.float64)
    for i in range(episodes):
        rng = np.random.default_rng([seed, i])
        ep = sample_episode(dataset, way, shot, queries, rng)
        protos = class_prototypes(
            features[ep.support_indices.ravel()], ep.support_labels
        )
        preds = classify_nn(features[ep.query_indices.ravel()], protos)
        accuracies[i] = float((preds == ep.query_labels).mean())
    return EvalSummary.from_accuracies(accuracies)


def recommend_feature_mode(pad: float) -> str:
    """Tooling heuristic: large proxy distance favors the distant feature."""
    return "distant" if pad >= DISTANT_PAD_THRESHOLD else "near"


def write_results(summary: EvalSummary, path, fingerprint: dict) -> Path:
    """One record per episode plus a trailing summary record."""
    path = Path(path)
    with open(path, "w") as fh:
        for i, acc in enumerate(summary.episode_accuracies):
            fh.write(json.dumps({"episode": i, "accuracy": acc}) + "\n")
        fh.write(json.dumps({
            "mean": summary.mean, "ci95": summary.ci95,
            "episodes": len(summary.episode_accuracies),
            "fingerprint": fingerprint,
        }) + "\n")
    return path


def read_results(path) -> dict:
    """Parse a results file back into episode accuracies and the summary."""
    lines = [json.loads(s) for s in Path(path).read_text().splitlines() if s]
    if not lines or "mean" not in lines[-1]:
        raise ConfigError(f"{path} has no summary record")
    return {
        "accuracies": [r["accuracy"] for r in lines[:-1]],
        "summary": lines[-1],
    }
