"""Parameter-efficient shadow detection over frozen vision/text encoders."""

from .backbone import (BackboneConfig, EncoderAdapter, TextReference,
                       TokenPyramid, ToyEncoder, build_encoder, encode_text,
                       extract_token_pyramid, register_adapter, toy_config,
                       toy_encode)
from .consistency import (ConsistencyMaps, ProjectionSet,
                          build_consistency_maps, cls_text_score,
                          patch_cls_scores, patch_text_scores, project_unit)
from .errors import (AssetMissingError, CheckpointMismatchError,
                     ConfigurationError, DegenerateProjectionError,
                     InputError, ShadowSegError)
from .fusion import (FusionHead, PredictionBundle, aggregate_layers,
                     decode_final, predict_ratio_logit, to_aux_logits)
from .hardcase import (HardCaseRanking, dark_nonshadow_ratio,
                       darkness_threshold, rank_and_select)
from .metrics import (ConfusionCounts, MetricReport, ber, confusion_counts,
                      darkest_fraction_mask, evaluate_dataset, fpr, precision)
from .model import ShadowHead
from .objectives import (LossConfig, LossReport, aux_weight,
                         class_balance_weight, ratio_loss, shadow_ratio,
                         smooth_l1, total_loss, weighted_bce)
from .trainer import (Checkpoint, TrainConfig, TrainState, build_optimizer,
                      fit, poly_lr, toy_train_config, train_step,
                      trainable_fraction)

__version__ = "0.1.0"
