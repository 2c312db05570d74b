//! Fault-tolerant gradient clock synchronization on layered grids.
//!
//! Every layer-`l` node listens to the copies of its own base vertex and of its
//! base neighbors on layer `l - 1`, and pulses once per round. The crate holds
//! the node state machines ([`protocol`]), a discrete-event simulator
//! ([`engine`]), trace analysis ([`analysis`]) and experiment drivers.
//!
//! The core is generic over [`scalar::Scalar`]; the aliases below fix `f64`.

pub mod analysis;
pub mod config;
pub mod engine;
pub mod experiment;
pub mod faults;
pub mod io;
pub mod protocol;
pub mod rng;
pub mod scalar;
pub mod timing;
pub mod topology;

pub type Params = timing::Params<f64>;
pub type RunConfig = engine::RunConfig<f64>;
pub type Scenario = engine::Scenario<f64>;
pub type PulseTrace = engine::PulseTrace<f64>;
pub type NodeState = protocol::NodeState<f64>;
pub type FaultPlacement = faults::FaultPlacement<f64>;
pub type ExactParams = timing::Params<num_rational::Ratio<i128>>;
