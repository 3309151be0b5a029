"""Interval-output classification laboratory.

Train classifiers whose single real output is decoded by interval
membership, attack them with gradient-based evasion methods, and verify
minimal-perturbation bounds on linear models.
"""

from .autodiff import Tape, Tensor, backward, gradient_check
from .bounds import (LinearIntervalModel, LinearTraditionalModel, interval_bound,
                     minimal_interval_perturbation, traditional_boundary_flip)
from .data import Dataset, load_mnist_idx, normalize, synthetic_blobs, synthetic_digits
from .errors import (CheckpointError, ContractError, ParseError, ShapeError,
                     TransferAbortError, ValidationError)
from .intervals import (ANOMALY, IntervalLabel, IntervalSpec, convergence_factor,
                        decode_batch, decode_output, encode_batch, encode_label,
                        interval_loss, make_spec)
from .models import (ConvStage, EvalResult, Model, ModelConfig, TrainConfig,
                     build_model, evaluate, load_checkpoint, predict,
                     save_checkpoint, train)
from .attacks import (AttackConfig, AttackReport, Outcome, evaluate_attack, fgsm,
                      input_gradient, iterative_attack, transfer_attack)

__version__ = "0.1.0"
