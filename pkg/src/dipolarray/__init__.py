"""Collective spontaneous emission in ordered sub-wavelength emitter arrays.

Exact Lindblad dynamics for small systems, cumulant-expansion closures for
large ones, and the decay-trace analysis used to compare them.
"""

__version__ = "0.1.0"

from .analysis import (
    CorrelationMap,
    DecayTrace,
    FitResult,
    SpinTrajectory,
    StretchedExpModel,
    analytic_independent_spin,
    connected_correlations,
    fit_stretched,
    instantaneous_rate,
    magnetization_from_counts,
    normalized_rate_from_fit,
    resonance_deviation,
    spin_trajectory,
    subradiant_tail,
)
from .couplings import (
    CouplingMatrices,
    JumpSpectrum,
    MotionSpec,
    coupling_matrices,
    green_tensor,
    jump_spectrum,
    spectrum_scan,
)
from .cumulant import (
    ClosureBlowupError,
    ClosureOrder,
    CumulantState,
    EnsembleConfig,
    ObservableTrace,
    ensemble_run,
    evolve_cumulant,
    initial_cumulant_state,
    make_time_grid,
)
from .exact import (
    ExactTrajectory,
    InitialStateSpec,
    IntegrationFailureError,
    evolve_exact,
    shot_sample,
)
from .config import ConfigError, RunConfig, SweepConfig, load_any_config
from .geometry import (
    AtomArray,
    DisorderSpec,
    DriveGeometry,
    EmptyRealizationError,
    LatticeSpec,
    build_array,
    dicke_array,
    dipole_vector,
)
from .runner import (
    OutputBundle,
    SolverFailure,
    VerificationError,
    emit_plot_data,
    run,
    sweep,
    verify,
)

__all__ = [
    "AtomArray",
    "ClosureBlowupError",
    "ClosureOrder",
    "ConfigError",
    "CorrelationMap",
    "CouplingMatrices",
    "CumulantState",
    "DecayTrace",
    "DisorderSpec",
    "DriveGeometry",
    "EmptyRealizationError",
    "EnsembleConfig",
    "ExactTrajectory",
    "FitResult",
    "InitialStateSpec",
    "IntegrationFailureError",
    "JumpSpectrum",
    "LatticeSpec",
    "MotionSpec",
    "ObservableTrace",
    "OutputBundle",
    "RunConfig",
    "SolverFailure",
    "SpinTrajectory",
    "StretchedExpModel",
    "SweepConfig",
    "VerificationError",
    "analytic_independent_spin",
    "build_array",
    "connected_correlations",
    "coupling_matrices",
    "dicke_array",
    "dipole_vector",
    "emit_plot_data",
    "ensemble_run",
    "evolve_cumulant",
    "evolve_exact",
    "fit_stretched",
    "green_tensor",
    "initial_cumulant_state",
    "instantaneous_rate",
    "jump_spectrum",
    "load_any_config",
    "magnetization_from_counts",
    "make_time_grid",
    "normalized_rate_from_fit",
    "resonance_deviation",
    "run",
    "shot_sample",
    "spectrum_scan",
    "spin_trajectory",
    "subradiant_tail",
    "sweep",
    "verify",
    "__version__",
]
