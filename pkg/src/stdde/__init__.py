"""Continuous-time traffic forecasting on graphs with delayed spatial message
passing: per-edge propagation delays (estimated or learned), spline-driven
controlled dynamics, a continuous-horizon decoder, and a stability certifier
for the underlying delay differential equation.
"""

from .data import FlowSeries, SyntheticSpec, generate_synthetic, split_dataset, windows
from .delays import (
    DelayTable,
    delay_lookup,
    estimate_all_delays,
    estimate_delay_mcc,
    project_delays,
)
from .errors import DivergenceError, InputError, ParseError, RangeError
from .graph import TrafficGraph, build_graph, max_degree
from .model import (
    Forecast,
    ModelParams,
    decode,
    derivative,
    encode_history,
    forecast,
    huber_loss,
    init_params,
    loss_and_gradients,
    update_vector,
)
from .solver import (
    HistoryFunction,
    SolverConfig,
    Trajectory,
    backward,
    delay_partial,
    integrate,
    state_at,
)
from .spline import SplinePath, fit_natural_cubic
from .stability import (
    EnvelopeSystem,
    StabilityReport,
    build_envelope,
    characteristic_value,
    check_stability,
    log_norm,
)
from .training import (
    OptimizerState,
    StandardizeStats,
    TrainConfig,
    adam_step,
    load_checkpoint,
    metrics,
    save_checkpoint,
    standardize,
    train,
)

__version__ = "0.1.0"
