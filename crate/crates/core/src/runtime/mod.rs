//! Everything that turns the analytics into a running system: replay
//! producers, the risk and stress jobs, the result store and the socket
//! front-end of the broker.

pub mod analysis;
pub mod job;
pub mod net;
pub mod producer;
pub mod store;

pub use job::{JobError, JobRunner, JobStats, RiskJob, StressJob, WindowJob};
pub use net::{serve, RemoteBroker, ServerHandle};
pub use producer::{run_producer, ClockMode, ProducerReport, ReplaySpec};
pub use store::ResultStore;
