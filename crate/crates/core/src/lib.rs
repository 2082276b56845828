pub mod binpack;
pub mod client;
pub mod cost;
pub mod model;
pub mod rng;
pub mod server;
pub mod environment;
pub mod ledger;
pub mod baselines;
pub mod sim;
