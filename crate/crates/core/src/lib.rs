//! Cryptographically enforced control flow integrity, desk scale.
//!
//! Control-flow pointers (return addresses, function pointers, method-table
//! pointers) are bound to their storage location with a single-block AES-128
//! MAC keyed by a secret that lives only in an unaddressable register file.
//! The crate provides:
//!
//! - [`mac`]: the MAC engine — class encoding, MAC computation, verification.
//! - [`ir`]: a small typed IR with first-class function pointers, records,
//!   method tables, raw byte copies and attacker trigger points.
//! - [`pass`]: the instrumentation pass that MACs pointers on store, checks
//!   them on load, and protects stack frames.
//! - [`vm`]: a deterministic interpreter with an explicit attacker model
//!   (arbitrary reads, writes to writable memory only).
//! - [`table`]: the shadow MAC table, resident in attacker-writable VM memory.
//! - [`alloc`]: per-allocation randomized heap and stack-frame padding.
//! - [`analyzer`]: static detection of code that defeats automatic MACing.
//! - [`scenario`]: the built-in attack scenario suite.

pub mod aes;
pub mod alloc;
pub mod analyzer;
pub mod ir;
pub mod mac;
pub mod pass;
pub mod prng;
pub mod scenario;
pub mod table;
pub mod vm;

pub use mac::{encode_class, mac_value, verify, ClassKind, ClassTag, MacKey, MacValue};
pub use pass::{instrument_module, PassConfig};
pub use vm::{run, Outcome, RunConfig, RunResult, TrapKind};
