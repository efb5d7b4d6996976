pub mod compare;
pub mod config;
pub mod error;
pub mod event;
pub mod experiment;
pub mod messaging;
pub mod models;
pub mod monitor;
pub mod parallel;
pub mod sampler;
pub mod sim;
pub mod ticking;
pub mod time;
pub mod trace;
