"""Pump scheduling for water distribution networks under demand
uncertainty: Laplacian-linearized hydraulics, a distributionally robust
CVaR model-predictive controller with affine disturbance feedback, and a
Monte Carlo evaluation harness."""

__version__ = "0.1.0"

from .network import (  # noqa: F401
    Diagnostic,
    Link,
    LinkKind,
    Network,
    Node,
    NodeKind,
    PipeCoeffs,
    PumpCoeffs,
    build_incidence,
    resistance_chezy_manning,
    validate,
)
from .ingest import (  # noqa: F401
    InpDocument,
    RunConfig,
    load_config,
    load_fixture,
    parse_inp,
    serialize_inp,
    to_network,
)
from .hydraulics import (  # noqa: F401
    HydraulicModel,
    LinearizedHydraulics,
    LinkModel,
    assemble_laplacian,
    link_headfun,
    linearize_link,
    solve_wfp0,
    successive_linearization,
)
from .statespace import DaeModel, LiftedSystem, build_dae, lift_horizon  # noqa: F401
from .uncertainty import (  # noqa: F401
    TrainingSet,
    cvar_discrete,
    gaussian_errors,
    persistence_errors,
    wasserstein_1d_empirical,
)
from .qp import QpProblem, QpSolution, QpTolerances, check_kkt, solve_qp, solve_qp_dense  # noqa: F401
