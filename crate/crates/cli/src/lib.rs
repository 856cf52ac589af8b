//! Command-line driver for trustci: pipeline runs, consumer verification,
//! threat scenarios and the consumer-growth cost model.

pub mod app;
pub mod fixtures;
pub mod scaling;
pub mod scenario;
