"""Micro-expression recognition from onset/apex optical flow: a two-stream
inception backbone with per-class attention refinement, the three standard
evaluation protocols, and a synthetic verification corpus."""

from .autodiff import Tape, Tensor, backward
from .dataset import (EXCLUDED, SCHEMES, LabelScheme, Sample, SynthSpec,
                      generate_synthetic, label_samples, load_manifest,
                      regroup_label, write_manifest)
from .flow import (FlowField, TVL1Params, normalize_flow, read_flow,
                   resize_bilinear, spot_apex, tvl1_flow, write_flow)
from .model import (ForwardOutput, ModelConfig, ModelParams, build_model,
                    classification_loss, count_parameters, forward_full,
                    forward_shared, fuse, load_checkpoint, predict,
                    proposal_loss, propose, save_checkpoint, total_loss)
from .protocols import (CDMER_EXPERIMENTS, FoldPlan, MetricsReport,
                        compute_metrics, confusion_from_predictions,
                        plan_cdmer, plan_loso)
from .trainer import (FlowCache, TrainConfig, compare_variants, evaluate_fold,
                      export_features, format_comparison, run_protocol,
                      train_fold)

__version__ = "0.1.0"
