//! Bundle-level losses, gradient-descent training with refinement, and the
//! numerical checks of the objective's analytic properties.

pub mod curvature;
pub mod loss;
pub mod refine;
pub mod train;
pub mod verify;

pub use loss::{bundle_distribution, evaluate, loss_be, loss_rank, total_loss_and_grad, LossEval, Objective};
pub use refine::{refine, RefineEvent};
pub use train::{accuracy_of, train, EpochRecord, TrainConfig, TrainReport, TrainSummary};
pub use verify::{verify_theorem1, verify_theorem2, BoundInstance, ToleranceReport, BoundReport};
