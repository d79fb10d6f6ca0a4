"""Latent-space adversarial purification with a multi-level generative model."""
from importlib.metadata import PackageNotFoundError, version as _version

try:
    __version__ = _version("latent-purify")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .analysis import SRCurve, code_swap_study, pearson, random_combination_study, spearman_rho, success_rate_curve
from .attacks import AdversarialRecord, CWConfig, DeepFoolConfig, FGSMConfig, cw, deepfool, eot_gradient, fgsm
from .attacks import minimal_perturbation_sweep
from .classifier import Classifier, ClassifierSpec
from .dataset import Dataset, generate, generate_splits
from .hpo import BOObjective, expected_improvement, fit_gp, gp_posterior, run_bo
from .mlvgm import LatentStack, Mlvgm, MlvgmSpec
from .purifier import AlphaSchedule, PreprocessSpec, PurifierPipeline, make_schedule, purified_predict, purify

__all__ = [
    "AdversarialRecord",
    "AlphaSchedule",
    "BOObjective",
    "CWConfig",
    "Classifier",
    "ClassifierSpec",
    "Dataset",
    "DeepFoolConfig",
    "FGSMConfig",
    "LatentStack",
    "Mlvgm",
    "MlvgmSpec",
    "PreprocessSpec",
    "PurifierPipeline",
    "SRCurve",
    "code_swap_study",
    "cw",
    "deepfool",
    "eot_gradient",
    "expected_improvement",
    "fgsm",
    "fit_gp",
    "generate",
    "generate_splits",
    "gp_posterior",
    "make_schedule",
    "minimal_perturbation_sweep",
    "pearson",
    "purified_predict",
    "purify",
    "random_combination_study",
    "run_bo",
    "spearman_rho",
    "success_rate_curve",
]
