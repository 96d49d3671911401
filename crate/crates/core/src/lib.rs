//! Constant-time AES-128 via micro-op scheduling, with a cycle-level timing
//! model, a cache-timing attack harness and a datagram timing service.

pub mod aes;
pub mod attack;
pub mod cli;
pub mod micro_ir;
pub mod scheduler;
pub mod service;
pub mod timing_sim;
