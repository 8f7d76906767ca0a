//! Whole-body loco-manipulation skill transfer for mobile manipulators.
//!
//! The pipeline has two halves:
//!
//! * **Learning**: demonstrations of wrist position/velocity and pelvis pose
//!   ([`demo`]) are summarised by a Gaussian mixture over `(time, output)`
//!   and conditioned on time ([`gmm`]) to obtain a probabilistic reference
//!   trajectory. A kernelized movement primitive ([`kmp`]) reproduces that
//!   reference and adapts it to new start, via or goal points.
//! * **Execution**: a two-level strict-priority hierarchical QP
//!   ([`hqp`], built on the dense active-set solver in [`qp`]) tracks the
//!   end-effector reference first and the learned base pose second, on the
//!   mobile manipulator model in [`kinematics`]. [`sim`] closes the loop at a
//!   fixed control period with an ideal-velocity or joint-impedance plant.
//!
//! [`pipeline`] wires the stages together with JSON-configurable defaults.

pub mod demo;
pub mod gmm;
pub mod hqp;
pub mod kinematics;
pub mod kmp;
pub mod pipeline;
pub mod qp;
pub mod sim;

mod linalg;

pub use demo::{DemoSample, DemoSet, Demonstration, OUTPUT_DIM};
pub use gmm::{Gmm, ReferenceTrajectory};
pub use hqp::{ControllerGains, HqpController};
pub use kinematics::RobotModel;
pub use kmp::{KernelParams, KmpModel, ViaPoint};
pub use qp::{QpProblem, QpSolution, QpSolver, QpStatus};
pub use sim::{PlantConfig, PlantMode, SimLog};
