pub mod ablation;
pub mod commands;
pub mod config;
pub mod env;
pub mod eval;
pub mod nn;
pub mod replay;
pub mod risk;
pub mod sac;
pub mod sim;
pub mod train;
