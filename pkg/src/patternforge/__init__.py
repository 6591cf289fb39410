"""Prototype-guided classification and refinement of 1-D signal patterns.

Train a classifier on clean synthetic patterns so that its embedding space
clusters around per-class prototypes, then train a refiner that rewrites
corrupted patterns so the frozen classifier recognizes them better, with or
without labels. Ships a reverse-mode autodiff core, compact 1-D networks,
a synthetic dataset generator with evaluation-only ground truth, quality
metrics and a reproducible CLI.
"""

from .data import (CorruptionSpec, DatasetFormatError, Pattern, PatternDataset,
                   class_templates, corrupt, export_csv, gen_ideal,
                   load_dataset, save_dataset, split)
from .metrics import (DiffMetrics, MetricsReport, accuracy, evaluate_refinement,
                      export_embeddings_2d, mean_prediction_entropy,
                      median_lower, nearest_prototype_predictions, pattern_diff,
                      pca_project_2d, zero_normalized_correlation)
from .nn import (CheckpointError, Classifier, LayerSpec, Refiner,
                 build_classifier, build_refiner, conv1d, init_parameters,
                 load_checkpoint, maxpool1d, save_checkpoint, upsample1d)
from .proto import (LossWeights, PrototypeSet, compute_prototypes,
                    cross_entropy_loss, init_prototypes,
                    prediction_entropy_loss, proto_entropy_loss,
                    proto_nll_loss, refiner_loss, reg_loss, sq_distances,
                    update_prototypes)
from .tensor import (Tape, Tensor, TensorError, backward, clip01, concat,
                     log_softmax, matmul, no_grad)
from .train import (AblationReport, AblationRow, Adam, RMSprop, TrainConfig,
                    balanced_batch, run_ablation, train_classifier,
                    train_classifier_epoch, train_refiner, train_refiner_epoch)

__version__ = "0.1.0"
