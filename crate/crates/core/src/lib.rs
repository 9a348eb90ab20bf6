//! Neural-network Monte-Carlo solvers for semilinear and fully nonlinear
//! parabolic PDEs and for discrete-time stochastic control.
//!
//! The PDE schemes learn `u(t_i, ·)` backward in time on an Euler grid, one
//! network pair per step, from freshly simulated paths of a training
//! diffusion. The control schemes learn feedback policies by backward
//! performance iteration.

pub mod control;
pub mod fully_nonlinear;
pub mod nn;
pub mod problems;
pub mod semilinear;
pub mod sim;
pub mod train;

pub use control::{Policy, PolicyValuePair};
pub use fully_nonlinear::HessianEstimate;
pub use nn::{Activation, AdamState, FeedforwardNet, LrSchedule, NnError};
pub use problems::{build_problem, ControlProblem, Driver, PdeProblem, ProblemError, ProblemInstance, ProblemParams, PROBLEM_IDS};
pub use sim::{PathBatch, SimError, TimeGrid};
pub use train::{Scheme, SchemeResult, TrainConfig, TrainError};
