"""Deterministic simulator for a hybrid atomic-broadcast protocol.

The protocol combines all-ack timestamp ordering over a known membership
with a synchronized-clock deadline fallback, so delivery never blocks on
a crashed member for longer than a computable bound.  The package also
models an external transaction-ordering service with history-based
dependency tracking and token-bucket admission.
"""

from .config import ScenarioConfig, config_from_dict, load_config
from .delays import DelayDistribution, DelayEstimator, compute_D
from .errors import (
    ConfigError,
    ConfigInvalidError,
    ConfigParseError,
    HybridcastError,
    SyncFailedError,
)
from .harness import RunMetrics, RunResult, run_scenario, sweep
from .insurance import MODE_GMD_ONLY, MODE_HYBRID, MODE_ON_SUSPICION
from .oracle import CASE_1, CASE_2, GMD_ORDERED, case_statistics, check_total_order
from .ordering import message_cost_model
from .trace import Trace, TraceRecord

__version__ = "0.1.0"

__all__ = [
    "CASE_1",
    "CASE_2",
    "ConfigError",
    "ConfigInvalidError",
    "ConfigParseError",
    "DelayDistribution",
    "DelayEstimator",
    "GMD_ORDERED",
    "HybridcastError",
    "MODE_GMD_ONLY",
    "MODE_HYBRID",
    "MODE_ON_SUSPICION",
    "RunMetrics",
    "RunResult",
    "ScenarioConfig",
    "SyncFailedError",
    "Trace",
    "TraceRecord",
    "case_statistics",
    "check_total_order",
    "compute_D",
    "config_from_dict",
    "load_config",
    "message_cost_model",
    "run_scenario",
    "sweep",
]
