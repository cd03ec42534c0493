//! ReplicaTEE core: a desk-scale model of BFT-replicated storage with
//! trusted-counter attestation, enclave lifecycle management, and a
//! blind-signature key server, plus the deterministic simulation harness
//! that drives all of it.

pub mod attest;
pub mod bft;
pub mod crypto;
pub mod ids;
pub mod runtime;
pub mod sim;
pub mod trace;
pub mod usig;
pub mod wire;

#[cfg(test)]
pub(crate) mod testutil;
