"""Exit measures of critically branching Brownian particles, conditioned
backbone trees with mass immigration, and a deterministic semilinear-PDE
cross-validation harness."""

__version__ = "0.1.0"

from .geometry import FULL, Disk, Rect, DomainChain, build_chain, first_exit
from .grids import PolarGrid, CartGrid, make_grid
from .pde import (
    ScalarField,
    VectorField,
    solve_dirichlet,
    solve_blowup,
    solve_linear,
    potential_operator,
    grad_log,
    markov_nesting_check,
    save_field_csv,
    load_field_csv,
)
from .subsets import (
    SubsetFamily,
    alt_subset_sum,
    c_sequence,
    covers,
    split_law,
    v_from_u,
    u_from_v,
)
from .superprocess import ExitMeasure, CloudParams, simulate_sbm, estimate_w
from .backbone import (
    BackboneTree,
    PairFields,
    grow_tree_killing,
    grow_tree_clock,
    grow_tree_tagged,
    grow_forest,
    branch_stats,
)
from .immigration import (
    ImmigrationPlan,
    laplace_semi_analytic,
    realize_Y,
    pair_laplace_pde,
    tagged_laplace_pde,
    FieldCache,
)
from .config import ExperimentConfig, load_config, default_config, build_scene
