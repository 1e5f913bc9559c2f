"""Super-resolving feature-pyramid toolkit.

Learns a 2x feature upsampler with an adversarial objective, plugs it into an
FPN-style extractor, and trains/evaluates a small dense detector on top — all
at a scale that fits a single CPU core.
"""

from .checkpoint import (load_checkpoint, pack_modules, save_checkpoint,
                         unpack_into)
from .config import (TrainConfig, apply_overrides, config_hash, default_config,
                     load_config, validate_config)
from .data import (Dataset, batch_iterator, degrade_image, generate_synthetic,
                   load_dataset, save_dataset)
from .discriminator import PatchDiscriminator, discriminator_forward, init_discriminator
from .errors import CheckpointError, ConfigError, NumericalDivergence
from .evaluation import (EvalReport, compute_ap_suite, evaluate_detector,
                         extractor_feature_l1, feature_l1_eval,
                         visualize_feature, visualize_grid)
from .experiments import (ExperimentScale, run_degradation_suite,
                          run_interpolation_comparison, run_progressive_suite,
                          run_semantic_level_suite)
from .extractor import (FpnExtractor, TinyBackbone, extract_pyramid,
                        init_extractor, pad_to_multiple)
from .generator import SrfGenerator, generator_forward, init_generator
from .head import (DetectionHead, DetectionTargets, assign_targets,
                   decode_detections, detection_loss, head_forward, init_head,
                   level_for_box, scale_targets)
from .losses import (LossReport, adv_discriminator_loss, adv_generator_loss,
                     integral_loss, l1_feature_loss, srf_loss)
from .pyramid import (FeatureMap, FeaturePyramid, Image, downsample_feature,
                      downsample_tensor, upsample_naive, upsample_tensor,
                      validate_pyramid)
from .training import (train_srf_gan, train_srf_extractor,
                       train_target_detector)

__version__ = "0.1.0"
