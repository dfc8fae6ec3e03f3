//! Reliability-oriented variable speed limit control on a single freeway
//! corridor: kinematic-wave simulation, analytic minimum travel times,
//! threshold optimization of the travel-time distribution, a delay-budget
//! controller, and a stochastic-capacity metering controller.

pub mod budget_mpc;
pub mod corridor_sim;
pub mod demand;
pub mod error;
pub mod experiments;
pub mod fundamental_diagram;
pub mod numerics;
pub mod ou_capacity;
pub mod reliability;
pub mod scenario;
pub mod smpc_gain;

pub use error::{Error, Result};
pub use fundamental_diagram::FundamentalDiagram;
