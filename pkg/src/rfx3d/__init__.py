"""Referring-expression localization on featurized point clouds.

Modules: ``geom`` (point-cloud geometry), ``masking`` (pretraining masks),
``nncore`` (differentiable primitives, optimizer, EMA, checkpoints),
``jepa`` (encoder, predictor and masked latent pretraining), ``decoder``
(mask, box and alignment heads), ``training`` (losses, matching, schedule),
``data`` (synthetic scenes and file formats) and ``evalcli`` (metrics,
baselines, run configuration) with the ``rfx3d`` command in ``cli``.
"""

from .decoder import Decoder, DecoderConfig, DecoderOutput, LocalizationModel
from .evalcli import EvalReport, RunConfig, dbscan, dbscan_box, evaluate, pca_export, select_query
from .geom import Box3, FeaturizedPointCloud, VoxelGridSpec, giou3, iou3, voxelize
from .jepa import EncoderConfig, JepaState, PointEncoder, Predictor, PredictorConfig, encode, pretrain
from .training import LossWeights, StageSchedule, composite_loss, fit, hungarian, stagewise_lr, transfer_labels_knn

__version__ = "0.1.0"

__all__ = [
    "Box3", "FeaturizedPointCloud", "VoxelGridSpec", "giou3", "iou3", "voxelize",
    "EncoderConfig", "JepaState", "PointEncoder", "Predictor", "PredictorConfig", "encode", "pretrain",
    "Decoder", "DecoderConfig", "DecoderOutput", "LocalizationModel",
    "LossWeights", "StageSchedule", "composite_loss", "fit", "hungarian", "stagewise_lr", "transfer_labels_knn",
    "EvalReport", "RunConfig", "dbscan", "dbscan_box", "evaluate", "pca_export", "select_query",
]
