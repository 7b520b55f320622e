"""Flexible-placement IMU pose estimation on a synthetic articulated body.

Submodules, bottom up: ``body`` (skeleton, mesh, kinematics), ``motion``
(synthetic sequences), ``vimu`` (virtual IMUs and targets), ``autodiff``
(tensor engine), ``network`` (joint-node pathways), ``losses`` and
``training``, ``matchmaker`` (loss table, device assignment),
``evaluation`` (metrics, inference, sweeps), ``checkpoint`` and ``cli``.
"""
from .body import BodyConfig, BodyModel, build_canonical_body, forward_kinematics, nearest_vertex
from .errors import CheckpointError, ConfigurationError, FingerprintError, ImucocoError, ParseError, ValidationError
from .motion import MotionSequence, generate_motion
from .network import Model, NetConfig, init_model
from .training import TrainConfig

__all__ = [
    "BodyConfig",
    "BodyModel",
    "CheckpointError",
    "ConfigurationError",
    "FingerprintError",
    "ImucocoError",
    "Model",
    "MotionSequence",
    "NetConfig",
    "ParseError",
    "TrainConfig",
    "ValidationError",
    "build_canonical_body",
    "forward_kinematics",
    "generate_motion",
    "init_model",
    "nearest_vertex",
]

__version__ = "0.1.0"
