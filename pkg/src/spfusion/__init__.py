"""Shared-private LiDAR-camera fusion for joint 2D/3D semantic segmentation at desk scale."""
from .datamodel import (IGNORE_INDEX, Calibration, Correspondence, FeatureMatrix, LabeledScene, LossBundle,
                        Modality, Role, SegMetrics, ValidationError, load_checkpoint, load_dataset,
                        save_checkpoint, save_dataset)
from .decomposition import decompose, decorrelation_loss, gram_loss
from .encoders import EncoderConfig, encode_image, encode_points, project_2d_head, voxelize
from .fusion import concat_fused, saf_attention, segment_head_2d, segment_head_3d
from .harness import TrainConfig, TrainReport, ablate, domain_shift_eval, evaluate, gradcheck, train
from .losses import lovasz_softmax, total_loss, weighted_cross_entropy, xm_kl_loss
from .model import FusionSegmenter, ModelConfig
from .projection import gather_pixel_features, project_points
from .synthdata import SceneConfig, generate_dataset, generate_scene

__version__ = "0.1.0"
