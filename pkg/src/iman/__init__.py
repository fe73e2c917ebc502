"""Multi-modal classification under missing modalities.

Core layers: cross-modal calibration (:mod:`iman.dcmc`), rotary attention
(:mod:`iman.scai`) and adaptive-kernel sampling (:mod:`iman.cafa`), built on a
small reverse-mode autodiff substrate (:mod:`iman.numerics`).
"""

from .data import MODALITIES, Cohort, PatientSample
from .estimator import ImanClassifier, MissingnessMasker
from .exceptions import (
    ConfigurationError,
    ConstraintError,
    DimensionError,
    EvaluationError,
    ImanError,
    ParameterError,
    TrainingError,
    UndefinedMetricError,
)
from .metrics import EvalReport, auc, binary_report
from .missingness import MissingnessTable, PresencePattern, build_table, missing_rate
from .model import ImanModel, ModelConfig, load_checkpoint, save_checkpoint
from .synthetic import SyntheticSpec, gen_synthetic
from .training import TrainConfig, evaluate, sweep_missing, train

__version__ = "0.1.0"
