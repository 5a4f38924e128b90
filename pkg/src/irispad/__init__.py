"""Iris presentation attack detection with pixel-wise binary supervision
and multi-scale spatial attention (baseline DenseNet, PBS, A-PBS)."""

__version__ = "0.1.0"

from .backbone import Backbone, BackboneConfig, build_backbone, extract_multilevel
from .data import ImageSample, Manifest, balance, load_manifest, preprocess, synth_dataset, write_manifest
from .evaluation import (
    MetricsReport,
    ScoreSet,
    apcer_bpcer,
    ccr,
    compute_report,
    eer,
    fisher_ratio,
    hter,
    tdr_at_fdr,
)
from .explain import Heatmap, render_heatmap, score_cam
from .heads import ModelOutput, PADNet, build_model, refine, spatial_attention
from .loss import LossBreakdown, overall_loss
from .protocol import ProtocolSpec, run_protocol
from .training import Checkpoint, TrainConfig, load_checkpoint, lr_at, predict, save_checkpoint, train
