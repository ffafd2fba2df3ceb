//! Operational front end for `eventcanvas`: an HTTP job service that queues
//! generation requests, and the command line that drives synthesis,
//! training, generation and evaluation.
//!
//! Both surfaces call the same library operations, so a video generated by
//! the CLI and by the service from equal inputs is byte-identical.

pub mod api;
pub mod artifacts;
pub mod cli;
pub mod store;
pub mod worker;
