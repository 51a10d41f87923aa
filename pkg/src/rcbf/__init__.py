"""Robust control barrier function verification and synthesis.

Moment-SOS semidefinite relaxations of the boundary safety condition for
control-affine polynomial systems with convex control constraints and
bounded additive disturbance: single-parameter verification with
minimizer extraction, and parameter synthesis through polynomial lower
bounds of the value function.
"""

from .errors import (
    ConfigError,
    ExtractionFailedError,
    OrderTooLowError,
    ParseError,
    RcbfError,
    SolverFailure,
    SpaceMismatchError,
    UnsupportedKindError,
)
from .polyalg import Monomial, Polynomial, VariableSpace, parse_polynomial, poly_arith
from .model import (
    BoundSet,
    CbfCandidate,
    ControlSet,
    LieDerivatives,
    SystemModel,
    ThetaSet,
    circular_cbf,
    dual_bound,
    elliptical_cbf,
    inner_closed_form,
    lie_derivatives,
    value_grid_oracle,
    vanderpol_model,
    variable_bounds,
)
from .popbuild import KktSystem, StandardPop, build_verification_pop, fix_theta, kkt_system
from .sdpcore import (
    SdpBuilder,
    SdpProblem,
    SdpSolution,
    SolverSettings,
    export_sdpa,
    parse_sdpa,
    sdp_solve,
    solve_with_backend,
)
from .momentrelax import (
    MomentSdp,
    VerificationVerdict,
    VerifyTols,
    build_moment_sdp,
    check_flatness_extract,
    verify,
)
from .synth import (
    LowerBoundPoly,
    SynthesisLevel,
    SynthesisRecord,
    ThetaMeasure,
    best_maximizer,
    build_lower_bound_sos,
    maximize_lower_bound,
    recover_lower_bound,
    select_by_metric,
    theta_moments,
)

__version__ = "0.1.0"
