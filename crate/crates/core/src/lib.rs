//! Deterministic simulator and protocol stack for a hardware-enforced
//! software-immutability architecture on low-end MCUs.
//!
//! The crate models a 16-bit microcontroller whose bus traffic is screened by
//! a small Mealy state machine (the hardware monitor). The monitor makes the
//! installed application immutable and non-executable-elsewhere; the only way
//! to change it is the authenticated update protocol between a remote
//! verifier and the device's trusted ROM routines.
//!
//! Module map:
//! - [`layout`] / [`mem`] — the MCU memory space, named protected regions,
//!   bus events, and reset semantics.
//! - [`monitor`] — the hardware monitor FSM and an exhaustive
//!   equivalence-class check of its safety properties.
//! - [`crypto`] — HMAC-SHA256 with an instrumented compression counter,
//!   key derivation, and the request/ack token constructions.
//! - [`image`] — bit-exact serialization of the update image format.
//! - [`trusted`] — the ROM-resident update routines (entry, authenticate,
//!   install with status-flag crash recovery, exit).
//! - [`verifier`] — the remote side: request construction, ack verification,
//!   timeout/retransmission policy, liveness challenges.
//! - [`app`] — the untrusted application model (download/acknowledge) and
//!   the adversary's memory-level actions.
//! - [`channel`] — wire framing and a scripted Dolev-Yao channel.
//! - [`scenario`] — the lock-step scenario driver and its JSON schema.

pub mod app;
pub mod channel;
pub mod crypto;
pub mod image;
pub mod layout;
pub mod mem;
pub mod monitor;
pub mod scenario;
pub mod trusted;
pub mod verifier;

pub use layout::{Address, LayoutConfig, LayoutError, MemoryLayout, Region};
pub use mem::{BusEvent, BusSignals, Machine, StepOutcome};
pub use monitor::{MonitorConfig, MonitorState, Phase};
