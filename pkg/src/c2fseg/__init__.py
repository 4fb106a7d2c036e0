"""Coarse-to-fine temporal action segmentation, self-contained on numpy."""

from .augment import (AugmentConfig, pool_features, pool_labels, sample_window,
                      stable_window, tta_predict)
from .autodiff import Tape, Tensor
from .contrastive import (ContrastConfig, build_sets, contrastive_loss, kmeans,
                          linear_eval, pretrain_unsupervised, sample_frames)
from .data import (AuditedDataset, Dataset, Manifest, SplitSpec, SyntheticConfig,
                   gen_synthetic, load_checkpoint, make_split, restore_model,
                   save_checkpoint, save_model)
from .icc import ICCConfig, run_icc
from .inference import evaluate_clips, predict_probs
from .metrics import SegReport, calibration, edit_score, f1_at_k, mof
from .model import (DecoderOutputs, Model, ModelConfig, ProjectionHeads, build_model,
                    multires_feature)
from .optim import Adam
from .supervised import (EnsembleWeights, LossConfig, TrainConfig, c2f_ensemble,
                         cross_entropy, joint_loss, train_supervised, transition_loss)

__version__ = "0.1.0"
