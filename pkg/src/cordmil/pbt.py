"""Population-based training of the MIL network.

A population of models trains concurrently; every few epochs the weakest
members copy the weights, optimizer state, and hyperparameters of a random
top member (exploit) and perturb the copied hyperparameters (explore). The
target metric is balanced accuracy on the validation split.

Every random decision draws from a stream keyed by (seed, member_id, role),
so a member's training trajectory does not depend on what the rest of the
population does. With truncation_fraction 0 the loop reproduces independent
random search bit for bit; run_random_search is the plain harness used to
verify that.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import optim
from .bags import DatasetManifest, read_bag, resolve_bag_path
from .checkpoint import save_checkpoint
from .metrics import balanced_accuracy, confusion, macro_auroc
from .milnet import ArchConfig, MilParams, inverse_frequency_weights, predict, train_epoch
from .optim import Hyperparams, SearchSpace
from .validation import check_seed

__all__ = [
    "PbtConfig",
    "PopulationMember",
    "PbtReport",
    "init_population",
    "exploit",
    "explore",
    "run_pbt",
    "run_random_search",
]

# Stream roles under (seed, member_id, role): hyperparameter sampling,
# weight init, explore perturbations, per-epoch shuffles. Donor selection
# uses (seed, population_size, DONOR_STREAM) and cannot collide with a
# member id.
HP_STREAM = 0
INIT_STREAM = 1
EXPLORE_STREAM = 2
SHUFFLE_STREAM = 3
DONOR_STREAM = 4

REPORT_COLUMNS = ("member_id", "epoch", "lr", "algorithm", "val_balanced_accuracy", "exploited_from")


@dataclass
class PbtConfig:
    population_size: int = 8
    total_epochs: int = 30
    min_epochs_before_exploit: int = 15
    exploit_interval_epochs: int = 5
    truncation_fraction: float = 0.25
    perturb_factors: tuple = (0.8, 1.2)
    resample_probability: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if self.min_epochs_before_exploit < 0:
            raise ValueError("min_epochs_before_exploit must be >= 0")
        if self.exploit_interval_epochs < 1:
            raise ValueError("exploit_interval_epochs must be >= 1")
        # 0 disables exploitation entirely (degenerates to random search).
        if not 0.0 <= self.truncation_fraction <= 0.5:
            raise ValueError("truncation_fraction must lie in [0, 0.5]")
        if not self.perturb_factors or any(f <= 0 for f in self.perturb_factors):
            raise ValueError("perturb_factors must be positive")
        if not 0.0 <= self.resample_probability <= 1.0:
            raise ValueError("resample_probability must lie in [0, 1]")
        self.seed = check_seed(self.seed)

    def exploit_epochs(self) -> list:
        """Epochs after which exploit/explore runs. The final epoch is
        skipped: no training would follow the copy."""
        return [
            e
            for e in range(1, self.total_epochs + 1)
            if e >= self.min_epochs_before_exploit
            and (e - self.min_epochs_before_exploit) % self.exploit_interval_epochs == 0
            and e < self.total_epochs
        ]


@dataclass
class PopulationMember:
    member_id: int
    params: MilParams
    state: optim.OptState
    hyperparams: Hyperparams
    epoch: int = 0
    metric: float = 0.0
    best_metric: float = -math.inf
    best_checkpoint: str = ""
    lineage: list = field(default_factory=list)
    explore_rng: np.random.Generator = None


@dataclass
class PbtReport:
    """Per-epoch log rows plus the final ranking by best metric."""

    rows: list
    ranking: list
    config: PbtConfig

    def best_member(self) -> dict:
        return self.ranking[0]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in self.rows:
            writer.writerow([
                row["member_id"],
                row["epoch"],
                repr(row["lr"]),
                row["algorithm"],
                repr(row["val_balanced_accuracy"]),
                "" if row["exploited_from"] is None else row["exploited_from"],
            ])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as f:
                f.write(text)
        return text

    def to_json(self, path=None) -> str:
        # Checkpoints live beside the summary; basenames keep the JSON
        # byte-identical across output directories.
        ranking = [
            {**entry, "checkpoint": os.path.basename(entry["checkpoint"])}
            for entry in self.ranking
        ]
        payload = {
            "population_size": self.config.population_size,
            "total_epochs": self.config.total_epochs,
            "seed": self.config.seed,
            "ranking": ranking,
        }
        text = json.dumps(payload, sort_keys=True, indent=2)
        if path is not None:
            with open(path, "w") as f:
                f.write(text + "\n")
        return text


def init_population(config: PbtConfig, arch: ArchConfig, search_space: SearchSpace, seed) -> list:
    """Independently sampled hyperparameters and weights per member."""
    if search_space is None:
        raise ValueError("search space is required")
    seed = check_seed(seed)
    members = []
    for m in range(config.population_size):
        hp = search_space.sample(np.random.default_rng([seed, m, HP_STREAM]))
        params = MilParams.init(arch, np.random.default_rng([seed, m, INIT_STREAM]))
        state = optim.init_opt_state(params.tensors(), hp)
        members.append(
            PopulationMember(
                member_id=m,
                params=params,
                state=state,
                hyperparams=hp,
                explore_rng=np.random.default_rng([seed, m, EXPLORE_STREAM]),
            )
        )
    return members


def exploit(population, config: PbtConfig, rng) -> list:
    """Truncation selection: returns (receiver_id, donor_id) pairs.

    Members sort by current metric descending, ties broken by member_id.
    Each of the bottom ceil(truncation*P) receives from a uniformly chosen
    member of the top ceil(truncation*P); the two groups never overlap.
    """
    P = len(population)
    if P < 2:
        raise ValueError("population must have at least 2 members")
    for m in population:
        if m.epoch < config.min_epochs_before_exploit:
            raise ValueError(
                f"member {m.member_id} has only {m.epoch} epochs; "
                f"exploit requires {config.min_epochs_before_exploit}"
            )
    n_cut = math.ceil(config.truncation_fraction * P)
    n_cut = min(n_cut, P // 2)
    if n_cut == 0:
        return []
    order = sorted(population, key=lambda m: (-m.metric, m.member_id))
    top = order[:n_cut]
    bottom = order[P - n_cut:]
    plan = []
    for receiver in bottom:
        donor = top[int(rng.integers(n_cut))]
        plan.append((receiver.member_id, donor.member_id))
    return plan


def explore(hyperparams: Hyperparams, search_space: SearchSpace, rng,
            perturb_factors=(0.8, 1.2), resample_probability=0.25) -> Hyperparams:
    """Perturb a copied configuration.

    Continuous fields are multiplied by a uniformly chosen factor and
    clamped to the search bounds; the algorithm is resampled and the EMA
    switch flipped each with the given probability. Draw order is fixed:
    continuous fields in SearchSpace.CONTINUOUS order, then algorithm,
    then EMA.
    """
    values = hyperparams.to_dict()
    for name, _ in SearchSpace.CONTINUOUS:
        factor = perturb_factors[int(rng.integers(len(perturb_factors)))]
        values[name] = search_space.clamp(name, values[name] * factor)
    if rng.random() < resample_probability:
        values["algorithm"] = search_space.algorithms[int(rng.integers(len(search_space.algorithms)))]
    if rng.random() < resample_probability:
        values["ema_enabled"] = not values["ema_enabled"]
    return Hyperparams(**values)


def load_split_bags(manifest_path, split: str) -> list:
    """(embeddings, label) pairs for one split of a manifest on disk."""
    manifest = DatasetManifest.load(manifest_path)
    entries = manifest.split_entries(split)
    out = []
    for entry in entries:
        bag = read_bag(resolve_bag_path(manifest_path, entry.bag))
        if bag.dim != manifest.dim:
            raise ValueError(
                f"{entry.bag}: dimension mismatch, bag dim {bag.dim} vs manifest dim {manifest.dim}"
            )
        out.append((bag.embeddings.astype(np.float64), entry.label))
    return out


def _evaluate(params: MilParams, bags, n_classes: int):
    """Balanced accuracy (and macro AUROC when defined) on labeled bags."""
    labels = np.array([lab for _, lab in bags])
    probs = np.stack([predict(params, x).probabilities for x, _ in bags])
    preds = np.argmax(probs, axis=1)
    bal = balanced_accuracy(confusion(labels, preds, n_classes))
    metrics = {"val_balanced_accuracy": bal}
    try:
        metrics["val_macro_auroc"] = macro_auroc(probs, labels)
    except ValueError:
        pass  # a class can be absent from tiny validation splits
    return bal, metrics


def _eval_params(member: PopulationMember) -> MilParams:
    tensors = optim.evaluation_tensors(member.state, member.params.tensors(), member.hyperparams)
    return MilParams(**{k: v.copy() for k, v in tensors.items()})


def _train_and_eval(member, train, val, weights, seed, epoch, n_classes, out_dir):
    """One member-epoch: train, decay, EMA, evaluate, checkpoint best."""
    train_epoch(
        member.params,
        train,
        member.state,
        member.hyperparams,
        np.random.default_rng([seed, member.member_id, SHUFFLE_STREAM, epoch]),
        class_weights=weights,
    )
    optim.decay_lr(member.state, member.hyperparams)
    if member.hyperparams.ema_enabled:
        optim.ema_update(member.state, member.params.tensors(), member.hyperparams)
    eval_params = _eval_params(member)
    bal, metric_dict = _evaluate(eval_params, val, n_classes)
    member.epoch = epoch
    member.metric = bal
    row = {
        "member_id": member.member_id,
        "epoch": epoch,
        "lr": member.state.lr,
        "algorithm": member.hyperparams.algorithm,
        "val_balanced_accuracy": bal,
        "exploited_from": None,
    }
    if bal > member.best_metric:
        member.best_metric = bal
        path = os.path.join(out_dir, f"member_{member.member_id:03d}.milc")
        save_checkpoint(
            path, eval_params, eval_params.arch_of(), member.hyperparams, epoch, metric_dict
        )
        member.best_checkpoint = path
    return row


def _ranking(members) -> list:
    order = sorted(members, key=lambda m: (-m.best_metric, m.member_id))
    return [
        {
            "member_id": m.member_id,
            "best_val_balanced_accuracy": m.best_metric,
            "checkpoint": m.best_checkpoint,
            "lineage": m.lineage,
            "hyperparams": m.hyperparams.to_dict(),
        }
        for m in order
    ]


def _run_loop(config, manifest_path, arch, out_dir, search_space, threads, exploit_enabled):
    os.makedirs(out_dir, exist_ok=True)
    space = search_space if search_space is not None else SearchSpace()
    train = load_split_bags(manifest_path, "train")
    val = load_split_bags(manifest_path, "val")
    if not train:
        raise ValueError("manifest has no train entries")
    if not val:
        raise ValueError("manifest has no val entries")
    weights = inverse_frequency_weights([lab for _, lab in train], arch.n_classes)
    members = init_population(config, arch, space, config.seed)
    donor_rng = np.random.default_rng([config.seed, config.population_size, DONOR_STREAM])
    exploit_epochs = set(config.exploit_epochs()) if exploit_enabled else set()
    rows = []

    def member_epoch(member, epoch):
        try:
            return _train_and_eval(
                member, train, val, weights, config.seed, epoch, arch.n_classes, out_dir
            )
        except Exception as exc:
            raise RuntimeError(f"member {member.member_id} failed at epoch {epoch}: {exc}") from exc

    for epoch in range(1, config.total_epochs + 1):
        if threads > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=threads) as pool:
                epoch_rows = list(pool.map(lambda m: member_epoch(m, epoch), members))
        else:
            epoch_rows = [member_epoch(m, epoch) for m in members]
        if epoch in exploit_epochs:
            by_id = {m.member_id: m for m in members}
            for receiver_id, donor_id in exploit(members, config, donor_rng):
                receiver, donor = by_id[receiver_id], by_id[donor_id]
                receiver.params = donor.params.copy()
                new_hp = explore(
                    donor.hyperparams,
                    space,
                    receiver.explore_rng,
                    config.perturb_factors,
                    config.resample_probability,
                )
                if new_hp.algorithm == donor.hyperparams.algorithm:
                    receiver.state = donor.state.copy()
                else:
                    # Moment slots are not transferable across update rules.
                    receiver.state = optim.init_opt_state(receiver.params.tensors(), new_hp)
                # Apply the lr perturbation to the live (decayed) rate so the
                # explored value actually drives subsequent steps.
                receiver.state.lr = donor.state.lr * (
                    new_hp.learning_rate / donor.hyperparams.learning_rate
                )
                receiver.hyperparams = new_hp
                receiver.lineage.append({"epoch": epoch, "from": donor_id})
                epoch_rows[receiver_id]["exploited_from"] = donor_id
        rows.extend(epoch_rows)
    return PbtReport(rows=rows, ranking=_ranking(members), config=config)


def run_pbt(config: PbtConfig, manifest_path, arch: ArchConfig, out_dir,
            search_space: SearchSpace = None, threads: int = 1) -> PbtReport:
    """Full PBT run; writes best checkpoints plus CSV and JSON reports."""
    report = _run_loop(config, manifest_path, arch, out_dir, search_space, threads, True)
    report.to_csv(os.path.join(out_dir, "pbt_report.csv"))
    report.to_json(os.path.join(out_dir, "pbt_summary.json"))
    return report


def run_random_search(config: PbtConfig, manifest_path, arch: ArchConfig, out_dir,
                      search_space: SearchSpace = None, threads: int = 1) -> PbtReport:
    """Independent random search with the same per-member streams as PBT."""
    report = _run_loop(config, manifest_path, arch, out_dir, search_space, threads, False)
    report.to_csv(os.path.join(out_dir, "search_report.csv"))
    report.to_json(os.path.join(out_dir, "search_summary.json"))
    return report
