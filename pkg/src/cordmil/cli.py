"""Command-line pipeline: tile, embed, synth, split, train, pbt, ensemble,
predict, heatmap, analyze, evaluate.

Every subcommand takes --seed/--threads/--verbose/--out plus an optional
--config JSON/TOML file whose values fill in flags not given on the command
line (explicit flags win). Each successful run writes a run manifest (fully
resolved options, package version, SHA-256 of every input file) into the
output directory. Usage errors exit 2, domain errors exit 1.
"""

from __future__ import annotations

import argparse
import glob as globmod
import hashlib
import json
import os
import sys

import numpy as np

from . import pbt as pbtmod
from .bags import (
    Bag,
    DatasetManifest,
    ManifestEntry,
    SynthSpec,
    generate_synthetic,
    read_bag,
    stratified_split,
    write_bag,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .embanalysis import (
    LabeledPatchSet,
    TsneConfig,
    kmeans,
    knn_balanced_accuracy,
    pca_fit,
    pca_project,
    save_coords_csv,
    scatter_png,
    standardize,
    tsne,
)
from .ensemble import TrainedModel, ensemble_predict, load_ensemble, save_ensemble, select_topk
from .heatmap import HeatmapSpec, patch_metadata_json, render_attention, top_attention_patches
from .imaging import read_image, write_image
from .metrics import balanced_accuracy, confusion, macro_auroc, metric_report
from .milnet import ArchConfig, MilParams, inverse_frequency_weights, predict, train_epoch
from .optim import Hyperparams, decay_lr, ema_update, evaluation_tensors, init_opt_state
from .pbt import PbtConfig, load_split_bags, run_pbt
from .tiler import PatchGrid, crop_patch, extract_patches, segment_tissue, toy_embed_many
from .version import __version__

__all__ = ["dispatch", "main"]


def _log(args, message: str) -> None:
    if getattr(args, "verbose", False):
        print(message, file=sys.stderr)


def _outpath(args, name: str) -> str:
    return os.path.join(args.out, name)


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_run_manifest(args) -> None:
    skip = {"command", "func", "out"}
    resolved = {}
    inputs = {}
    for dest, value in sorted(vars(args).items()):
        if dest in skip or callable(value):
            continue
        if isinstance(value, tuple):
            value = list(value)
        resolved[dest] = value
        if isinstance(value, str) and os.path.isfile(value):
            inputs[dest] = _sha256(value)
    payload = {
        "command": args.command,
        "package_version": __version__,
        "resolved_config": resolved,
        "input_hashes": inputs,
    }
    with open(_outpath(args, "run_manifest.json"), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------- handlers


def _cmd_tile(args) -> None:
    image = read_image(args.image)
    mask = segment_tissue(image, args.downsample)
    grid = extract_patches(image, mask, args.patch, args.min_tissue)
    grid.to_json(_outpath(args, "patch_grid.json"))
    mask_img = np.repeat((mask.bits * np.uint8(255))[:, :, None], 3, axis=2)
    write_image(mask_img, _outpath(args, "tissue_mask.png"))
    print(f"kept {len(grid)} patches of {args.patch}px (mask {mask.width}x{mask.height})")


def _cmd_embed(args) -> None:
    image = read_image(args.image)
    grid = PatchGrid.from_json(args.grid)
    patches = [crop_patch(image, x, y, grid.patch_size) for x, y in grid.coords]
    emb = toy_embed_many(patches, args.dim, args.seed, threads=args.threads)
    bag = Bag(coords=np.asarray(grid.coords, dtype=np.int64), embeddings=emb.astype(np.float32))
    write_bag(_outpath(args, "bag.milb"), bag)
    print(f"embedded {bag.n_patches} patches at dim {bag.dim}")


def _cmd_synth(args) -> None:
    if args.classes != 3:
        raise ValueError("the staging task is fixed at 3 classes")
    spec = SynthSpec(
        n_bags_per_class=args.bags,
        min_patches=args.min_patches,
        max_patches=args.max_patches,
        dim=args.dim,
        separation=args.separation,
        signal_fraction=args.signal_fraction,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    manifest, _ = generate_synthetic(spec, args.out)
    counts = {s: len(manifest.split_entries(s)) for s in ("train", "val", "test")}
    print(
        f"wrote {len(manifest.entries)} bags (dim {spec.dim}): "
        f"{counts['train']} train, {counts['val']} val, {counts['test']} test"
    )


def _cmd_split(args) -> None:
    manifest = DatasetManifest.load(args.manifest)
    labels = [e.label for e in manifest.entries]
    assignment = stratified_split(labels, tuple(args.fractions), args.seed)
    src_dir = os.path.dirname(os.path.abspath(args.manifest))
    entries = []
    for entry, split in zip(manifest.entries, assignment):
        bag = entry.bag
        if not os.path.isabs(bag):
            bag = os.path.relpath(os.path.join(src_dir, bag), os.path.abspath(args.out))
        entries.append(ManifestEntry(bag=bag, label=entry.label, split=split))
    out_manifest = DatasetManifest(
        extractor_id=manifest.extractor_id, dim=manifest.dim, entries=entries
    )
    out_manifest.save(_outpath(args, "manifest.json"))
    counts = {s: assignment.count(s) for s in ("train", "val", "test")}
    print(f"{counts['train']} train, {counts['val']} val, {counts['test']} test")


def _arch_from_args(args, input_dim: int) -> ArchConfig:
    return ArchConfig(
        input_dim=input_dim,
        hidden_dim=args.hidden,
        gate_dim=args.gate,
        attn_hidden=args.attn_hidden,
    )


def _cmd_train(args) -> None:
    manifest = DatasetManifest.load(args.manifest)
    train = load_split_bags(args.manifest, "train")
    if not train:
        raise ValueError("manifest has no train entries")
    val = load_split_bags(args.manifest, "val")
    arch = _arch_from_args(args, manifest.dim)
    hp = Hyperparams(
        algorithm=args.algorithm,
        learning_rate=args.lr,
        lr_decay=args.lr_decay,
        momentum=args.momentum,
        beta1=args.beta1,
        beta2=args.beta2,
        ema_enabled=args.ema,
        ema_momentum=args.ema_momentum,
    )
    params = MilParams.init(arch, np.random.default_rng([args.seed, 0]))
    state = init_opt_state(params.tensors(), hp)
    weights = inverse_frequency_weights([lab for _, lab in train], arch.n_classes)
    ckpt_path = _outpath(args, "model.milc")
    best = -1.0
    for epoch in range(1, args.epochs + 1):
        _, loss = train_epoch(
            params, train, state, hp,
            np.random.default_rng([args.seed, 1, epoch]),
            class_weights=weights,
        )
        decay_lr(state, hp)
        if hp.ema_enabled:
            ema_update(state, params.tensors(), hp)
        eval_params = MilParams(
            **{k: v.copy() for k, v in evaluation_tensors(state, params.tensors(), hp).items()}
        )
        if val:
            bal, metric_dict = pbtmod._evaluate(eval_params, val, arch.n_classes)
            _log(args, f"epoch {epoch}: loss {loss:.4f} val_balanced_accuracy {bal:.4f}")
            if bal > best:
                best = bal
                save_checkpoint(ckpt_path, eval_params, arch, hp, epoch, metric_dict)
        else:
            _log(args, f"epoch {epoch}: loss {loss:.4f}")
            save_checkpoint(ckpt_path, eval_params, arch, hp, epoch, {})
    if val:
        print(f"best val balanced accuracy {best:.4f} -> {ckpt_path}")
    else:
        print(f"trained {args.epochs} epochs (no val split) -> {ckpt_path}")


def _cmd_pbt(args) -> None:
    manifest = DatasetManifest.load(args.manifest)
    config = PbtConfig(
        population_size=args.population,
        total_epochs=args.epochs,
        min_epochs_before_exploit=args.min_epochs,
        exploit_interval_epochs=args.interval,
        truncation_fraction=args.truncation,
        resample_probability=args.resample_prob,
        seed=args.seed,
    )
    arch = _arch_from_args(args, manifest.dim)
    report = run_pbt(config, args.manifest, arch, args.out, threads=args.threads)
    best = report.best_member()
    print(
        f"best member {best['member_id']} "
        f"val_balanced_accuracy {best['best_val_balanced_accuracy']:.4f} "
        f"-> {best['checkpoint']}"
    )


def _cmd_ensemble(args) -> None:
    val = load_split_bags(args.manifest, "val")
    if not val:
        raise ValueError("manifest has no val entries")
    labels = np.array([lab for _, lab in val])
    paths = sorted(globmod.glob(os.path.join(args.checkpoints, "*.milc")))
    if not paths:
        raise ValueError(f"no checkpoints (*.milc) under {args.checkpoints}")
    models = []
    for i, path in enumerate(paths):
        params, arch, _, _, _ = load_checkpoint(path)
        probs = np.stack([predict(params, x).probabilities for x, _ in val])
        preds = np.argmax(probs, axis=1)
        bal = balanced_accuracy(confusion(labels, preds, arch.n_classes))
        auroc = macro_auroc(probs, labels)
        models.append(TrainedModel(checkpoint=path, bal_acc=bal, auroc=auroc, rank=i))
    k, ens = select_topk(models, args.k_max, [x for x, _ in val], labels)
    save_ensemble(_outpath(args, "ensemble.json"), ens)
    weights = ", ".join(f"{w:.3f}" for w in ens.weights)
    print(f"selected k={k} of {len(models)} models, weights [{weights}]")


def _cmd_predict(args) -> None:
    bag = read_bag(args.bag)
    x = bag.embeddings.astype(np.float64)
    if args.checkpoint:
        params, arch, _, _, _ = load_checkpoint(args.checkpoint)
        if arch.input_dim != bag.dim:
            raise ValueError(
                f"dimension mismatch: bag dim {bag.dim} vs model input_dim {arch.input_dim}"
            )
        result = predict(params, x)
        payload = {
            "probabilities": [float(p) for p in result.probabilities],
            "predicted_class": result.predicted_class,
        }
        if args.attention:
            payload["attention"] = [[float(a) for a in row] for row in result.alpha]
    else:
        if args.attention:
            raise ValueError("--attention needs --checkpoint; ensembles have no single attention map")
        ens = load_ensemble(args.ensemble)
        probs, cls = ensemble_predict(ens, x)
        payload = {
            "probabilities": [float(p) for p in probs],
            "predicted_class": cls,
        }
    text = json.dumps(payload, indent=2)
    with open(_outpath(args, "prediction.json"), "w") as f:
        f.write(text + "\n")
    print(text)


def _cmd_heatmap(args) -> None:
    image = read_image(args.image)
    grid = PatchGrid.from_json(args.grid)
    bag = read_bag(args.bag)
    params, arch, _, _, _ = load_checkpoint(args.checkpoint)
    if arch.input_dim != bag.dim:
        raise ValueError(
            f"dimension mismatch: bag dim {bag.dim} vs model input_dim {arch.input_dim}"
        )
    if len(grid) != bag.n_patches:
        raise ValueError(f"grid has {len(grid)} patches but bag has {bag.n_patches}")
    if not np.array_equal(np.asarray(grid.coords, dtype=np.int64), bag.coords):
        raise ValueError("grid coordinates do not match bag coordinates")
    attn = predict(params, bag.embeddings.astype(np.float64))
    spec = HeatmapSpec(scale=args.scale, opacity=args.opacity, class_index=args.cls)
    overlay = render_attention(image, grid, attn, spec)
    write_image(overlay, _outpath(args, "heatmap.png"))
    if args.top_k > 0:
        crops, meta = top_attention_patches(image, grid, attn, args.top_k, args.cls)
        for crop, row in zip(crops, meta):
            write_image(crop, _outpath(args, f"patch_rank_{row['rank']:02d}.png"))
        patch_metadata_json(meta, _outpath(args, "top_patches.json"))
    shown = attn.predicted_class if args.cls is None else args.cls
    print(
        f"class {shown} attention over {bag.n_patches} patches -> "
        f"{_outpath(args, 'heatmap.png')}"
    )


def _parse_blob_spec(text: str) -> dict:
    fields = {"classes": 6, "per": 100, "dim": 32, "sep": 10.0}
    for item in text.split(","):
        if not item:
            continue
        key, _, value = item.partition("=")
        if key not in fields:
            raise ValueError(f"unknown blob field {key!r} (use classes, per, dim, sep)")
        fields[key] = float(value) if key == "sep" else int(value)
    if fields["classes"] < 2 or fields["per"] < 1 or fields["dim"] < fields["classes"]:
        raise ValueError(f"bad blob spec {fields}: need classes >= 2 and dim >= classes")
    return fields


def _cmd_analyze(args) -> None:
    if args.data:
        archive = np.load(args.data, allow_pickle=False)
        for key in ("embeddings", "labels"):
            if key not in archive:
                raise ValueError(f"{args.data}: missing array {key!r}")
        embeddings = np.asarray(archive["embeddings"], dtype=np.float64)
        labels = np.asarray(archive["labels"], dtype=np.int64)
    elif args.blobs:
        spec = _parse_blob_spec(args.blobs)
        rng = np.random.default_rng(args.seed)
        parts, labs = [], []
        for c in range(spec["classes"]):
            center = np.zeros(spec["dim"])
            center[c] = spec["sep"]
            parts.append(center + rng.standard_normal((spec["per"], spec["dim"])))
            labs.extend([c] * spec["per"])
        embeddings = np.concatenate(parts, axis=0)
        labels = np.asarray(labs, dtype=np.int64)
    else:
        raise ValueError("provide --data (npz with embeddings/labels) or --blobs")
    names = tuple(str(c) for c in range(int(labels.max()) + 1))
    z, _, _ = standardize(embeddings)
    summary = {"n_points": len(z), "dim": int(z.shape[1])}

    reduced = z
    if args.pca > 0:
        n_comp = min(args.pca, min(z.shape))
        model = pca_fit(z, n_comp)
        reduced = pca_project(model, z)
        summary["pca_components"] = n_comp
        summary["explained_variance"] = [float(v) for v in model.explained_variance]
    if args.kmeans > 0:
        result = kmeans(reduced, args.kmeans, args.seed)
        summary["kmeans_k"] = args.kmeans
        summary["kmeans_inertia"] = result.inertia
    if args.knn > 0:
        f = args.knn_test_fraction
        if not 0.0 < f < 1.0:
            raise ValueError("knn test fraction must lie in (0, 1)")
        assignment = np.array(stratified_split(labels, (1.0 - f, 0.0, f), args.seed))
        train_idx = assignment == "train"
        test_idx = assignment == "test"
        knn_bal = knn_balanced_accuracy(
            LabeledPatchSet(reduced[train_idx], labels[train_idx], names),
            LabeledPatchSet(reduced[test_idx], labels[test_idx], names),
            args.knn,
        )
        summary["knn_k"] = args.knn
        summary["knn_balanced_accuracy"] = knn_bal
    if args.tsne:
        result = tsne(
            reduced,
            TsneConfig(
                perplexity=args.perplexity,
                iterations=args.iterations,
                seed=args.seed,
            ),
        )
        save_coords_csv(_outpath(args, "tsne.csv"), result.coords, labels)
        scatter_png(_outpath(args, "tsne.png"), result.coords, labels)
        summary["tsne_kl"] = result.kl
    text = json.dumps(summary, indent=2, sort_keys=True)
    with open(_outpath(args, "analysis.json"), "w") as f:
        f.write(text + "\n")
    print(text)


def _cmd_evaluate(args) -> None:
    manifest = DatasetManifest.load(args.manifest)
    bags = load_split_bags(args.manifest, args.split)
    if not bags:
        raise ValueError(f"manifest has no {args.split} entries")
    labels = np.array([lab for _, lab in bags])
    if args.checkpoint:
        params, arch, _, _, _ = load_checkpoint(args.checkpoint)
        if arch.input_dim != manifest.dim:
            raise ValueError(
                f"dimension mismatch: manifest dim {manifest.dim} "
                f"vs model input_dim {arch.input_dim}"
            )
        probs = np.stack([predict(params, x).probabilities for x, _ in bags])
    else:
        ens = load_ensemble(args.ensemble)
        _, first_arch, _, _, _ = load_checkpoint(ens.members[0].checkpoint)
        if first_arch.input_dim != manifest.dim:
            raise ValueError(
                f"dimension mismatch: manifest dim {manifest.dim} "
                f"vs model input_dim {first_arch.input_dim}"
            )
        cache = {}
        probs = np.stack([ensemble_predict(ens, x, cache)[0] for x, _ in bags])
    preds = np.argmax(probs, axis=1)
    report = metric_report(labels, preds, probs)
    report.to_json(_outpath(args, "metrics.json"))
    confusion(labels, preds).to_csv(_outpath(args, "confusion.csv"))
    print(report.to_json())


# ------------------------------------------------------------------ parser


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or TOML file supplying flag defaults")
    common.add_argument("--seed", type=int, default=0, help="master random seed")
    common.add_argument("--threads", type=int, default=1, help="worker thread bound (1 = deterministic reference)")
    common.add_argument("--verbose", action="store_true", help="report progress on stderr")
    common.add_argument("--out", default="out", help="output directory")

    parser = argparse.ArgumentParser(
        prog="cordmil",
        description="Weakly supervised staging of umbilical cord inflammation from slide images.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name, func, help_text):
        p = sub.add_parser(
            name,
            parents=[common],
            help=help_text,
            formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        )
        p.set_defaults(func=func)
        return p

    p = add("tile", _cmd_tile, "segment tissue and lay a patch grid over a slide image")
    p.add_argument("--image", required=True, help="slide image (PNG or PPM)")
    p.add_argument("--patch", type=int, default=224, help="patch edge in pixels")
    p.add_argument("--downsample", type=int, default=16, help="mask downsample factor")
    p.add_argument("--min-tissue", type=float, default=0.5, help="minimum tissue fraction per patch")

    p = add("embed", _cmd_embed, "embed grid patches with the deterministic toy extractor")
    p.add_argument("--image", required=True, help="slide image (PNG or PPM)")
    p.add_argument("--grid", required=True, help="patch grid JSON from tile")
    p.add_argument("--dim", type=int, default=64, help="embedding dimension (>= 8)")

    p = add("synth", _cmd_synth, "generate a synthetic bag dataset with known signal patches")
    p.add_argument("--classes", type=int, default=3, help="number of stages (fixed at 3)")
    p.add_argument("--bags", type=int, default=20, help="bags per class")
    p.add_argument("--min-patches", type=int, default=30, help="minimum patches per bag")
    p.add_argument("--max-patches", type=int, default=80, help="maximum patches per bag")
    p.add_argument("--dim", type=int, default=32, help="embedding dimension (>= 3)")
    p.add_argument("--separation", type=float, default=4.0, help="class center norm")
    p.add_argument("--signal-fraction", type=float, default=0.2, help="fraction of signal patches per positive bag")
    p.add_argument("--noise", type=float, default=1.0, help="background noise sigma")

    p = add("split", _cmd_split, "reassign stratified train/val/test splits in a manifest")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--fractions", type=float, nargs=3, default=(0.8, 0.1, 0.1),
                   metavar=("TRAIN", "VAL", "TEST"), help="split fractions, must sum to 1")

    p = add("train", _cmd_train, "train a single MIL model")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--hidden", type=int, default=512, help="hidden layer width")
    p.add_argument("--gate", type=int, default=256, help="gated feature width")
    p.add_argument("--attn-hidden", type=int, default=64, help="attention hidden width")
    p.add_argument("--epochs", type=int, default=30, help="training epochs")
    p.add_argument("--algorithm", choices=("sgd", "adam", "rmsprop", "adagrad"),
                   default="adam", help="optimizer")
    p.add_argument("--lr", type=float, default=1e-3, help="learning rate")
    p.add_argument("--lr-decay", type=float, default=1.0, help="per-epoch learning-rate multiplier")
    p.add_argument("--momentum", type=float, default=0.9, help="SGD momentum")
    p.add_argument("--beta1", type=float, default=0.9, help="Adam beta1")
    p.add_argument("--beta2", type=float, default=0.999, help="Adam beta2")
    p.add_argument("--ema", action="store_true", help="evaluate with an exponential moving average of weights")
    p.add_argument("--ema-momentum", type=float, default=0.99, help="EMA momentum")

    p = add("pbt", _cmd_pbt, "population-based training over the hyperparameter space")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--hidden", type=int, default=512, help="hidden layer width")
    p.add_argument("--gate", type=int, default=256, help="gated feature width")
    p.add_argument("--attn-hidden", type=int, default=64, help="attention hidden width")
    p.add_argument("--population", type=int, default=8, help="population size")
    p.add_argument("--epochs", type=int, default=30, help="total training epochs")
    p.add_argument("--min-epochs", type=int, default=15, help="epochs before the first exploit")
    p.add_argument("--interval", type=int, default=5, help="epochs between exploits")
    p.add_argument("--truncation", type=float, default=0.25, help="exploit truncation fraction (0 = random search)")
    p.add_argument("--resample-prob", type=float, default=0.25, help="categorical resample / flip probability")

    p = add("ensemble", _cmd_ensemble, "select the best AUROC-weighted top-k ensemble on the val split")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--checkpoints", required=True, help="directory of candidate .milc checkpoints")
    p.add_argument("--k-max", type=int, default=6, help="largest ensemble size to try")

    p = add("predict", _cmd_predict, "classify one bag")
    p.add_argument("--bag", required=True, help="bag file (.milb)")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint", help="single model checkpoint (.milc)")
    group.add_argument("--ensemble", help="ensemble manifest JSON")
    p.add_argument("--attention", action="store_true", help="include per-class attention values")

    p = add("heatmap", _cmd_heatmap, "render the attention overlay for one slide")
    p.add_argument("--image", required=True, help="slide image (PNG or PPM)")
    p.add_argument("--grid", required=True, help="patch grid JSON from tile")
    p.add_argument("--bag", required=True, help="bag file (.milb) matching the grid")
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.milc)")
    p.add_argument("--scale", type=int, default=16, help="output downsample factor")
    p.add_argument("--opacity", type=float, default=0.5, help="overlay opacity in [0, 1]")
    p.add_argument("--class", dest="cls", type=int, default=None,
                   help="attention branch to render (default: predicted class)")
    p.add_argument("--top-k", type=int, default=0, help="also export the k highest-attention patches")

    p = add("analyze", _cmd_analyze, "embedding quality: PCA, k-means, KNN score, t-SNE")
    p.add_argument("--data", help="npz archive with 'embeddings' and integer 'labels'")
    p.add_argument("--blobs", help="synthetic input, e.g. classes=6,per=100,dim=32,sep=10")
    p.add_argument("--pca", type=int, default=50, help="PCA components (0 = skip)")
    p.add_argument("--kmeans", type=int, default=5, help="k-means cluster count (0 = skip)")
    p.add_argument("--knn", type=int, default=5, help="KNN neighbor count (0 = skip)")
    p.add_argument("--knn-test-fraction", type=float, default=0.2,
                   help="held-out fraction for the KNN score")
    p.add_argument("--tsne", action="store_true", help="run t-SNE and render a scatter")
    p.add_argument("--perplexity", type=float, default=30.0, help="t-SNE perplexity")
    p.add_argument("--iterations", type=int, default=1000, help="t-SNE iterations")

    p = add("evaluate", _cmd_evaluate, "score a model or ensemble on a manifest split")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--split", choices=("train", "val", "test"), default="test", help="split to score")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint", help="single model checkpoint (.milc)")
    group.add_argument("--ensemble", help="ensemble manifest JSON")

    return parser


def _load_config_file(path: str) -> dict:
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib

        with open(path, "rb") as f:
            return tomllib.load(f)
    with open(path) as f:
        return json.load(f)


def _explicit_dests(parser, argv) -> set:
    """Dests the user set on the command line (so config must not override)."""
    explicit = set()
    for action in parser._actions:
        for opt in action.option_strings:
            if any(tok == opt or tok.startswith(opt + "=") for tok in argv):
                explicit.add(action.dest)
    return explicit


def _apply_config(args, argv, subparser) -> None:
    payload = _load_config_file(args.config)
    values = {k: v for k, v in payload.items() if not isinstance(v, dict)}
    values.update(payload.get(args.command, {}))
    explicit = _explicit_dests(subparser, argv)
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest in ("command", "config", "func"):
            continue
        if hasattr(args, dest) and dest not in explicit:
            setattr(args, dest, value)


def dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        if args.config:
            subparser = next(
                sp for sp in parser._subparsers._group_actions[0].choices.values()
                if sp.get_default("func") is args.func
            )
            _apply_config(args, argv, subparser)
        os.makedirs(args.out, exist_ok=True)
        args.func(args)
        _write_run_manifest(args)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
