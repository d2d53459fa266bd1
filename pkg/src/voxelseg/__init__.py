"""Volumetric segmentation with a small residual 3D U-Net family.

Everything runs on numpy: a tape-based autodiff core, the 3D operators
(convolution, pooling, batch normalization), five model variants, phantom
volumes with geometric and elastic augmentation, a deterministic training
schedule with optional adversarial regularization, and overlap metrics.
"""

from .tensor import (Tensor, backward, default_dtype, no_grad, set_default_dtype,
                     using_dtype)
from .ops import (BatchNormState, activation, batchnorm3d, bce_loss, conv3d,
                  conv_transpose3d, crop3d, leaky_relu, maxpool3d, pad_reflect3d,
                  relu, sigmoid)
from .models import (Model, ModelConfig, build_model, forward, parameter_count,
                     variant_config)
from .optim import AdamState, OptimConfig, adam_step, zero_grads
from .adversarial import (Critic, CriticConfig, WganStepReport, build_critic,
                          clip_weights, critic_forward, wgan_train_step)
from .resample import MaskVolume, Volume, resample_trilinear, threshold
from .metrics import (ConfusionCounts, MetricsReport, absolute_volume_difference,
                      average_annotations, average_precision, dice, evaluate_full,
                      jaccard, precision_recall)
from .augment import (AugmentationSpec, ElasticParams, VoxelBudgetError, apply_crop,
                      apply_scale_up, apply_spec, build_augmented_dataset,
                      elastic_deform, sample_spec)
from .volume_io import (DatasetManifest, ManifestEntry, PhantomSpec, export_slice_pgm,
                        generate_phantom, read_manifest, read_volume, write_manifest,
                        write_volume)
from .training import (TrainResult, TrainRun, TrainingError, evaluate, load_model,
                       peak_jaccard, predict, save_model, smooth_curve, train)
from .gradcheck import format_results, model_gradient_check, run_gradient_suite

__version__ = "0.1.0"
