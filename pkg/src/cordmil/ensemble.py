"""Top-k model selection and AUROC-weighted probability averaging.

Candidates are ranked by validation balanced accuracy; for each k up to
k_max the weighted k-ensemble is scored on the validation split and the
smallest k attaining the maximum wins. Member weights are proportional to
validation AUROC and the combination averages softmax probabilities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_checkpoint
from .metrics import balanced_accuracy, confusion
from .milnet import predict

__all__ = [
    "TrainedModel",
    "Ensemble",
    "select_topk",
    "ensemble_predict",
    "save_ensemble",
    "load_ensemble",
]


@dataclass
class TrainedModel:
    """A checkpoint plus the validation metrics it was selected on."""

    checkpoint: str
    bal_acc: float
    auroc: float
    rank: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.bal_acc <= 1.0:
            raise ValueError(f"balanced accuracy {self.bal_acc} outside [0, 1]")
        if not 0.0 <= self.auroc <= 1.0:
            raise ValueError(f"AUROC {self.auroc} outside [0, 1]")


@dataclass
class Ensemble:
    members: list
    weights: np.ndarray = None

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("ensemble has no members")
        if self.weights is None:
            self.weights = auroc_weights(self.members)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.weights) != len(self.members):
            raise ValueError(
                f"{len(self.members)} members but {len(self.weights)} weights"
            )
        if (self.weights <= 0).any():
            raise ValueError("ensemble weights must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("ensemble weights must sum to 1")


def auroc_weights(members) -> np.ndarray:
    aurocs = np.array([m.auroc for m in members], dtype=np.float64)
    if (aurocs <= 0).any():
        raise ValueError("every member needs a positive validation AUROC")
    return aurocs / aurocs.sum()


def _load_member_params(member: TrainedModel):
    try:
        params, arch, _, _, _ = load_checkpoint(member.checkpoint)
    except Exception as exc:
        raise ValueError(f"failed to load ensemble member {member.checkpoint}: {exc}") from exc
    return params, arch


def sort_candidates(models) -> list:
    """Balanced accuracy descending; ties by higher AUROC, then lower rank."""
    return sorted(models, key=lambda m: (-m.bal_acc, -m.auroc, m.rank))


def select_topk(models, k_max: int, val_bags, val_labels):
    """Returns (k, Ensemble) with the smallest k maximizing validation
    balanced accuracy of the AUROC-weighted k-ensemble."""
    if not models:
        raise ValueError("no candidate models")
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if len(val_bags) != len(val_labels):
        raise ValueError("validation bags and labels differ in length")
    ordered = sort_candidates(models)
    k_max = min(k_max, len(ordered))
    labels = np.asarray(val_labels)
    n_classes = None
    probs = []
    for m in ordered[:k_max]:
        params, arch = _load_member_params(m)
        if n_classes is None:
            n_classes = arch.n_classes
        probs.append(np.stack([predict(params, x).probabilities for x in val_bags]))
    best_k, best_score = 1, -1.0
    for k in range(1, k_max + 1):
        w = auroc_weights(ordered[:k])
        combined = np.tensordot(w, np.stack(probs[:k]), axes=1)
        preds = np.argmax(combined, axis=1)
        score = balanced_accuracy(confusion(labels, preds, n_classes))
        if score > best_score:
            best_k, best_score = k, score
    return best_k, Ensemble(members=list(ordered[:best_k]))


def ensemble_predict(ensemble: Ensemble, x, _param_cache: dict = None):
    """AUROC-weighted average of member probabilities for one bag.

    Returns (probabilities, predicted class); argmax ties go to the lowest
    class index. Pass a dict as _param_cache to reuse loaded checkpoints
    across calls.
    """
    cache = _param_cache if _param_cache is not None else {}
    combined = None
    input_dim = None
    for weight, member in zip(ensemble.weights, ensemble.members):
        if member.checkpoint not in cache:
            cache[member.checkpoint] = _load_member_params(member)
        params, arch = cache[member.checkpoint]
        if input_dim is None:
            input_dim = arch.input_dim
        elif arch.input_dim != input_dim:
            raise ValueError(
                f"ensemble member {member.checkpoint} expects input_dim "
                f"{arch.input_dim}, others expect {input_dim}"
            )
        p = predict(params, x).probabilities
        combined = weight * p if combined is None else combined + weight * p
    return combined, int(np.argmax(combined))


def save_ensemble(path, ensemble: Ensemble) -> None:
    payload = {
        "members": [
            {"checkpoint": m.checkpoint, "auroc": m.auroc, "bal_acc": m.bal_acc}
            for m in ensemble.members
        ],
        "weights": [float(w) for w in ensemble.weights],
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def load_ensemble(path) -> Ensemble:
    with open(path) as f:
        payload = json.load(f)
    for key in ("members", "weights"):
        if key not in payload:
            raise ValueError(f"{path}: ensemble manifest missing key {key!r}")
    members = [
        TrainedModel(checkpoint=m["checkpoint"], bal_acc=m["bal_acc"], auroc=m["auroc"], rank=i)
        for i, m in enumerate(payload["members"])
    ]
    return Ensemble(members=members, weights=np.asarray(payload["weights"], dtype=np.float64))
