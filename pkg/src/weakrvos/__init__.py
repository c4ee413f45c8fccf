"""Referring video object segmentation trained from weak annotation: one mask
at the referent's first appearance plus per-frame boxes, with cross-frame
filter supervision and bi-level pixel contrast on top of a dynamic-filter
segmentation baseline."""

from .contrast import (BlclConfig, BlclTerms, PixelPartition, blcl_loss,
                       cc_contrast, lv_contrast, pairwise_contrast,
                       partition_with_mask, partition_with_pseudo)
from .data import (CostReport, DatasetManifest, Scheme, VideoRecord, VideoSample,
                   WeakAnnotation, annotation_cost, convert_annotation,
                   generate_dataset, load_manifest, load_masks, load_sample,
                   save_manifest)
from .errors import DataError, NumericError, WeakRvosError
from .losses import (LgcfsMode, LossWeights, SupervisionTarget, TargetKind,
                     dice_loss, focal_loss, lgcfs_loss, mask_loss, mil_box_loss,
                     seg_loss)
from .metrics import EvalReport, boundary_f, evaluate, iou, mean_ap, precision_at
from .model import (ClipForward, FeatureBundle, LanguageFeatures, ModelConfig,
                    RvosNet, load_checkpoint, save_checkpoint, segment)
from .train import (Clip, LossReport, TrainConfig, build_targets, fit,
                    make_optimizer, predict, sample_clip, train_step)

__version__ = "0.1.0"
