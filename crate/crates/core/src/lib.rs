#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assessment;
pub mod channel;
pub mod config;
pub mod ids;
pub mod mac;
pub mod monitor;
pub mod protocol;
pub mod rng;
pub mod sim;
pub mod sweep;
