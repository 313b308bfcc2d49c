//! Group key management for multicast groups: MDS-coded session-key
//! derivation over a two-layer hierarchy of weight-balanced 2-3 key trees,
//! with rekeying under join, leave, merge, and partition, plus a
//! deterministic simulation harness that meters communication, computation,
//! and storage costs and probes forward/backward secrecy behaviorally.

pub mod error;
pub mod gf_mds;
pub mod ids;
pub mod keytree;
pub mod rekey;
pub mod roles;
pub mod simnet;
pub mod wire;

pub use error::{Error, Result};
