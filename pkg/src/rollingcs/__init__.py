"""Rolling-shutter compressed sensing of point-source transient events."""

from .model import (
    CIRCULAR,
    PHYSICAL,
    DiffMovie,
    MeasurementSeq,
    Movie,
    NoiseSpec,
    Psf,
    ShutterSchedule,
    StackSensing,
    apply_shutter,
    convolve,
    convolve_adjoint,
    materialize_sensing_matrix,
    measure,
    rows_at,
    shutter_adjoint,
)
from .solvers import (
    SolveReport,
    SolverConfig,
    blocked_fista_d,
    calibrate_stepsize,
    diffs_to_movie,
    fista_d,
    grad_l2_diffs,
    l1_solver,
    movie_to_diffs,
    soft_threshold,
    tv_solver,
)

__version__ = "0.1.0"
