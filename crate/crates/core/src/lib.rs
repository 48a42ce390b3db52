//! Discrete-event simulator of a computational SSD with in-storage trusted execution.

pub mod cache;
pub mod cipher;
pub mod config;
pub mod device;
pub mod experiment;
pub mod flash;
pub mod ftl;
pub mod protect;
pub mod report;
pub mod secmem;
pub mod sim;
pub mod tee;
pub mod workloads;
