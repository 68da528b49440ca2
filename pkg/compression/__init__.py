"""
ADMM-based pruning and quantization: projections, level sets, the ADMM engine,
plans and the progressive two-round driver.
"""

from .admm import (
    AdmmState,
    RhoSchedule,
    admm_regularize,
    admm_update,
    init_admm_state,
    masked_map_retrain_prune,
    masked_map_retrain_quant,
)
from .plan import CompressionPlan, derive_plan
from .progressive import progressive_prune
from .projections import ConstraintSpec, ProjectionResult, project
from .quantization import LevelSet, calibrate, quantize_model
from .verify import VerificationReport, verify_model

__all__ = [
    'AdmmState', 'CompressionPlan', 'ConstraintSpec', 'LevelSet', 'ProjectionResult',
    'RhoSchedule', 'VerificationReport', 'admm_regularize', 'admm_update', 'calibrate',
    'derive_plan', 'init_admm_state', 'masked_map_retrain_prune', 'masked_map_retrain_quant',
    'progressive_prune', 'project', 'quantize_model', 'verify_model',
]
