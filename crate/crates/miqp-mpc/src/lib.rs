//! Iteration-limited mixed-integer MPC with a uniting low/high-effort
//! supervisor.

pub mod bnb;
pub mod builder;
pub mod cw;
pub mod plot;
pub mod qp;
pub mod scenario;
pub mod sim;
pub mod trace;
pub mod uniting;
