//! Sector storage cloud and Sphere compute cloud.

pub mod model;
pub mod runtime;
pub mod time;
pub mod transport;
pub mod proto;
pub mod security;
pub mod master;
pub mod sphere;
pub mod slave;
pub mod client;
pub mod apps;
pub mod harness;
pub mod cli;
