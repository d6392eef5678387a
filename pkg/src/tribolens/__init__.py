"""Friction-coefficient prediction from proxy measurements.

Measurement reduction, dataset handling, spectral proxy selection, a small
numpy autodiff engine, attention encoders with symmetric fusion heads, and
training/evaluation pipelines.
"""

__version__ = "0.1.0"

from .errors import (DomainError, MeasurementWarning, NotConvergedError, NumericalError,
                     SchemaError, ShapeError, TriboError)
from .measurement import kinetic_mu, static_mu
from .dataset import FrictionDataset, MaterialLibrary, split, symmetrize
from .spectral import eig_sym, effective_rank, retention_size, rrqr_select
from .model import FrictionModel, ModelConfig, decode, encode, fuse, predict_pair
from .training import TrainConfig, evaluate, train
from .proxy import ProxySet, alignment_error, select_mask_opt, select_rrqr
from .synthgen import SynthSpec, gen_blocks, gen_lowrank
