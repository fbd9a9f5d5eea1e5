"""PO4/DOP biogeochemical model driven by transport matrices."""
from .forcing import F_PAR, Forcing, make_forcing, shortwave
from .grid import Grid, OutOfGrid, default_grid
from .model import (
    TRACERS,
    BiogeoModel,
    ModelConfig,
    NonFinite,
    NotPeriodic,
    OutputSelector,
    SpinUpResult,
    TracerState,
    model_outputs,
)
from .provider import BiogeoProvider
from .sms import sms_terms
from .transport import TransportSet, UnstableOperator, synth_transports

__all__ = [
    "F_PAR", "Forcing", "make_forcing", "shortwave", "Grid", "OutOfGrid", "default_grid",
    "TRACERS", "BiogeoModel", "ModelConfig", "NonFinite", "NotPeriodic", "OutputSelector",
    "SpinUpResult", "TracerState", "model_outputs", "sms_terms", "TransportSet",
    "UnstableOperator", "synth_transports", "BiogeoProvider",
]
