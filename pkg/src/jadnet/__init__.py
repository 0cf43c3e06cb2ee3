"""Noise-amplification analysis for small feed-forward classifiers and a JPEG-based adversarial detector."""

from .attacks import AdaptiveConfig, AttackConfig, attack_success, bim, classical_adaptive, eot_adaptive, fgsm, pgd
from .detect import (AmplificationReport, DetectorConfig, EvalReport, auroc, calibrate_threshold, jad_score,
                     jad_scores, layer_impacts, net_amplification, prediction_change_detector, run_experiment)
from .errors import (ConfigError, DimensionError, FormatError, JadError, NumericError, ParameterError,
                     SingularWeightError, UnsupportedLossError)
from .netcore import (Activation, Layer, Network, forward_with_trace, init_mlp, input_gradient, leaky_relu,
                      load_checkpoint, param_gradients, save_checkpoint)
from .sanitize import CorruptionSpec, corrupt, jpeg_roundtrip, jpeg_ste, quality_to_tables
from .spectral import certify_beta, spectral_penalty, svd_small, verify_bound
from .training import Dataset, TrainConfig, load_idx, synth_dataset, train

__version__ = "0.1.0"
