"""Joint multi-view image reconstruction and registration."""

from .geometry import (
    BSPLINE3,
    KEYS,
    Grid,
    ParamBounds,
    TransformModel,
    TransformParams,
    WarpOperator,
    default_bounds,
    keys_kernel,
    map_point,
    warp_adjoint,
    warp_apply,
    warp_jacobian,
)
from .operators import (
    LinearOperator,
    MeasurementSet,
    StackedOperator,
    make_blur_downsample_op,
    make_identity_op,
    make_spread_spectrum_op,
    stacked_adjoint,
    stacked_apply,
)
from .priors import L1AnalysisPrior, NullPrior, TVPrior, huber_prox, huber_value, make_prior
from .solver import (
    ConvergenceAssertionError,
    IterationTrace,
    JointProblem,
    SceneEstimate,
    SolverConfig,
    auto_kappa,
    run_algorithm1,
)
from .wavelets import WaveletFrame

__version__ = "0.1.0"
