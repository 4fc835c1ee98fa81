"""Weakly supervised staging of umbilical cord inflammation from slide
images: tiling, bag storage, a gated attention MIL network with hand-written
gradients, population-based training, metrics, ensembling, embedding
analysis, and attention heatmaps.
"""

from .bags import (
    Bag,
    DatasetManifest,
    FIRLabel,
    ManifestEntry,
    SynthSpec,
    generate_synthetic,
    read_bag,
    stratified_split,
    write_bag,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .embanalysis import (
    KMeansCluster,
    LabeledPatchSet,
    PcaReducer,
    TsneConfig,
    TsneEmbedding,
    kmeans,
    knn_balanced_accuracy,
    pca_fit,
    pca_project,
    standardize,
    tsne,
)
from .ensemble import Ensemble, TrainedModel, ensemble_predict, select_topk
from .heatmap import HeatmapSpec, render_attention, top_attention_patches
from .metrics import (
    ConfusionMatrix,
    MetricReport,
    auroc_binary,
    balanced_accuracy,
    confusion,
    macro_auroc,
    metric_report,
    sensitivity_specificity,
)
from .milnet import (
    ArchConfig,
    AttentionResult,
    MilClassifier,
    MilParams,
    backward,
    forward,
    hinge_loss,
    predict,
    train_epoch,
)
from .optim import Hyperparams, OptState, SearchSpace, decay_lr, ema_update, init_opt_state, step
from .pbt import PbtConfig, PbtReport, PopulationMember, exploit, explore, init_population, run_pbt, run_random_search
from .tiler import PatchGrid, TissueMask, extract_patches, otsu_threshold, segment_tissue, toy_embed
from .version import __version__

__all__ = [
    "__version__",
    "ArchConfig",
    "AttentionResult",
    "Bag",
    "ConfusionMatrix",
    "DatasetManifest",
    "Ensemble",
    "FIRLabel",
    "HeatmapSpec",
    "Hyperparams",
    "KMeansCluster",
    "LabeledPatchSet",
    "ManifestEntry",
    "MetricReport",
    "MilClassifier",
    "MilParams",
    "OptState",
    "PatchGrid",
    "PbtConfig",
    "PbtReport",
    "PcaReducer",
    "PopulationMember",
    "SearchSpace",
    "SynthSpec",
    "TissueMask",
    "TrainedModel",
    "TsneConfig",
    "TsneEmbedding",
    "auroc_binary",
    "backward",
    "balanced_accuracy",
    "confusion",
    "decay_lr",
    "ema_update",
    "ensemble_predict",
    "exploit",
    "explore",
    "extract_patches",
    "forward",
    "generate_synthetic",
    "hinge_loss",
    "init_opt_state",
    "init_population",
    "kmeans",
    "knn_balanced_accuracy",
    "load_checkpoint",
    "macro_auroc",
    "metric_report",
    "otsu_threshold",
    "pca_fit",
    "pca_project",
    "predict",
    "read_bag",
    "render_attention",
    "run_pbt",
    "run_random_search",
    "save_checkpoint",
    "segment_tissue",
    "select_topk",
    "sensitivity_specificity",
    "standardize",
    "step",
    "stratified_split",
    "top_attention_patches",
    "toy_embed",
    "train_epoch",
    "tsne",
    "write_bag",
]
