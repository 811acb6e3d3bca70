"""Concept activation vectors and TCAV on a small numpy network."""
__version__ = "0.1.0"

from .autodiff import Tape, Tensor, gradient, read_tnsr, write_tnsr
from .cav import Cav, ProbeConfig, probe_layers, train_cav, train_relative_cav
from .dataset import (ConceptSet, DatasetSpec, LabeledDataset, generate_controlled, generate_texture_concepts,
                      strip_captions)
from .errors import (CavlabError, FormatError, GradientError, InseparableError, ShapeError,
                     SignificanceAbortError, TrainingDivergedError, UnsupportedVersionError)
from .extras import activation_maximize, fgsm_attack, saliency_map, sort_by_concept
from .model import LayeredModel, TrainConfig, load_model, reference_model, save_model, train
from .tcav import TcavReport, directional_derivative, significance_test, tcav_score

__all__ = [
    "Tape", "Tensor", "gradient", "read_tnsr", "write_tnsr",
    "Cav", "ProbeConfig", "probe_layers", "train_cav", "train_relative_cav",
    "ConceptSet", "DatasetSpec", "LabeledDataset", "generate_controlled", "generate_texture_concepts",
    "strip_captions",
    "CavlabError", "FormatError", "GradientError", "InseparableError", "ShapeError", "SignificanceAbortError",
    "TrainingDivergedError", "UnsupportedVersionError",
    "activation_maximize", "fgsm_attack", "saliency_map", "sort_by_concept",
    "LayeredModel", "TrainConfig", "load_model", "reference_model", "save_model", "train",
    "TcavReport", "directional_derivative", "significance_test", "tcav_score",
]
