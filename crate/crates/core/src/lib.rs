//! Backstepping boundary stabilization of a one-dimensional wave equation
//! with a bounded unknown boundary disturbance.
//!
//! The pipeline is: coefficient profile -> backstepping scalars -> gain
//! kernels -> transform and feedback laws -> closed-loop simulation -> energy
//! decay analysis. The [`resolvent`] module checks the maximal monotonicity of
//! the target-system operator numerically, and [`verify`] runs the acceptance
//! criteria.

// `!(x > 0.0)` style checks reject NaN as well as out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coeffs;
pub mod energy;
pub mod error;
pub mod kernel;
pub mod numerics;
pub mod resolvent;
pub mod simulate;
pub mod transform;
pub mod verify;

pub use coeffs::{eval_scalars, BacksteppingScalars, CoefficientProfile};
pub use error::{Error, Result};
pub use kernel::{solve_for_profile, solve_kernels, KernelOptions, KernelPair, KernelTraces, TriangularGrid};
pub use transform::{control_u2, default_eps, BoundaryCase, ControlValue, Frame, OperatorNorms, Transform, WaveState};
pub use simulate::{
    run_closed_loop, run_target_direct, Disturbance, DisturbanceKind, InitShape, InitSpec, SimConfig,
    TrajectoryRecord,
};
pub use resolvent::{resolvent_limit, solve_regularized, ResolventLimit, ResolventProblem, SweepRow};
pub use verify::{run_criterion, run_suite, Verdict, VerifyOptions};
