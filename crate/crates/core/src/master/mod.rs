//! The forward Kolmogorov (master) equation on a truncated state space.
//!
//! States are count vectors in the box `{0, …, K}^S`. Transitions that would
//! leave the box are clipped: their rate still drains the source state, and
//! the drained probability is integrated as a separate outflow scalar.

mod distribution;
mod generator;
mod gradient;

pub use distribution::{
    exp_moment_mass, first_moment_mass, poisson_pmf, poisson_reference, poisson_tail,
    product_poisson, MasterDistribution, StateSpaceIndex,
};
pub use generator::{
    build_generator, check_reversibility, integrate_fke, stationarity_residual, FkeOptions,
    FkePath, GeneratorMatrix, Move, ReversibilityReport,
};
pub use gradient::{
    dissipation_n, dual_dissipation_n, edb_residual_n, expected_tv_distance, fisher_information_n,
    jump_activity, pairing_n, poc_entropy, scaled_entropy, write_diagnostics_csv, EdbReport,
    EdbRow, FisherInfo, MasterFlux, PathPoint,
};
