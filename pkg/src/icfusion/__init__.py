"""Two-stream intersection classification with Bayesian late fusion.

The package splits the pipeline into small modules:

* :mod:`icfusion.core` label catalogue, PDFs, consistency matrix
* :mod:`icfusion.dataset` ingestion, folds, pairing
* :mod:`icfusion.flowfeat` optical flow, colorization, embeddings
* :mod:`icfusion.fnet` ego-motion classifier
* :mod:`icfusion.tnet` scene-topology classifier
* :mod:`icfusion.inet` mask construction and fusion
* :mod:`icfusion.evalkit` metrics and reports
* :mod:`icfusion.synthgen` synthetic dataset generator
* :mod:`icfusion.trainer` k-fold experiment driver
* :mod:`icfusion.cli` command-line entry point
"""

from .core import (
    EGOMOTION3,
    TOPOLOGY7,
    ClassPDF,
    ConsistencyMatrix,
    D2IConfig,
    LabelConfig,
    make_pdf,
    top1,
    worst1,
)
from .dataset import (
    FoldPlan,
    IngestResult,
    PairingError,
    SampleF,
    SamplePair,
    SampleT,
    ingest,
    make_folds,
    make_pairs,
)
from .evalkit import ConfusionMatrix, confusion, emit_report, top1_accuracy
from .flowfeat import (
    FlowEmbedder,
    FlowParams,
    build_sequence,
    colorize_flow,
    compute_flow,
    pad_or_subsample,
)
from .fnet import FNet, FNetConfig, build_fnet, predict_fnet, train_fnet
from .inet import FusionConfig, FusionResult, build_mask, fuse
from .synthgen import SynthSpec, generate
from .tnet import TNet, TNetConfig, build_tnet, predict_tnet, train_tnet
from .trainer import Experiment, ExperimentConfig, run_experiment
from .training import TrainConfig, derive_seed, seeded_rng

__version__ = "0.1.0"

__all__ = [
    "EGOMOTION3",
    "TOPOLOGY7",
    "ClassPDF",
    "ConfusionMatrix",
    "ConsistencyMatrix",
    "D2IConfig",
    "Experiment",
    "ExperimentConfig",
    "FNet",
    "FNetConfig",
    "FlowEmbedder",
    "FlowParams",
    "FoldPlan",
    "FusionConfig",
    "FusionResult",
    "IngestResult",
    "LabelConfig",
    "PairingError",
    "SampleF",
    "SamplePair",
    "SampleT",
    "SynthSpec",
    "TNet",
    "TNetConfig",
    "TrainConfig",
    "build_fnet",
    "build_mask",
    "build_sequence",
    "build_tnet",
    "colorize_flow",
    "compute_flow",
    "confusion",
    "derive_seed",
    "emit_report",
    "fuse",
    "generate",
    "ingest",
    "make_folds",
    "make_pairs",
    "make_pdf",
    "pad_or_subsample",
    "predict_fnet",
    "predict_tnet",
    "run_experiment",
    "seeded_rng",
    "top1",
    "top1_accuracy",
    "train_fnet",
    "train_tnet",
    "worst1",
]
