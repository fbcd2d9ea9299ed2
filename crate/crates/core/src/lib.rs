//! Recovery of spatially (and temporally) distributed ion-channel
//! conductances in the passive cable equation from voltage data, on straight
//! cables and branched trees, via the minimal-error iterative regularization
//! method, together with the Monte-Carlo noise harness that reproduces the
//! reference experiments.

pub mod adjoint;
pub mod csv;
pub mod error;
pub mod experiments;
pub mod field;
pub mod forward;
pub mod grid;
pub mod inverse;
pub mod observation;
pub mod params;
mod solver;
pub mod tree;
mod tree_solver;

pub use adjoint::{adjoint_solve_segment, adjoint_solve_tree, gateaux_solve_segment, gateaux_solve_tree};
pub use error::{Error, Result};
pub use experiments::{
    add_noise, builtin_example, error_g, error_v, mean_std, run_experiment, ExampleId,
    ExperimentSpec, NoiseSpec, TrialRecord, TrialSummary,
};
pub use field::{AdjointField, ConductanceField, VoltageField};
pub use forward::{
    default_current, forward_solve_segment, forward_solve_tree, restrict_to_gamma,
    stimulus_neumann, BoundaryProtocol, Scheme, TreeBoundary,
};
pub use grid::{build_segment_grid, Geometry, SegmentGrid, TimeGrid};
pub use inverse::{
    apply_update, gradient_fields, minimal_error_run, step_size, update_conductance,
    DenominatorNorm, InverseProblem, InversionResult, IterationState, ProblemBoundary, StopReason,
};
pub use observation::{gamma_inner, gamma_norm, omega_inner, Observation, ObservationDomain};
pub use params::{CableParameters, Ion};
pub use tree::{build_tree, paper_y_tree, EdgeEnd, EdgeSpec, TreeGeometry, TreeNode, VertexKind};
