pub mod costmodel;
pub mod demand;
pub mod domain;
pub mod placement;
pub mod routing;
pub mod pool;
pub mod sim;
pub mod metrics;
pub mod traces;
pub mod config;
