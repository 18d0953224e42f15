//! State-conditioned flow policy: vector field, Euler flow map, sampling and
//! the conditional flow matching objective.

mod cfm;
mod euler;
mod policy;

pub use cfm::{cfm_loss, interp_batch, interp_path, matching_loss, CfmDraw};
pub use euler::StepPlan;
pub use policy::{empty_states, FlowPolicy};
