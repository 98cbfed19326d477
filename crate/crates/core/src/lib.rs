//! Core building blocks for controller-managed ESP tunnels over a
//! match-action data plane.
//!
//! The crate is split along the boundaries of the system:
//!
//! * [`packet`] — bit-exact Ethernet/IPv4/ESP codec, IPv4 checksums and
//!   RFC 4303 trailer framing.
//! * [`crypto`] — the two cipher suites (NULL and AES-CTR with an
//!   HMAC-MD5 ICV), SA key material and the shared encapsulation path.
//! * [`table`] — a generic match-action table engine with exact, LPM and
//!   ternary match kinds.
//! * [`switch`] — the fixed-function switch pipeline: SPD matching, ESP
//!   encryption/decryption, L3 forwarding, per-SA counter registers and
//!   soft-limit notifications, plus the control API the controller drives.
//! * [`controller`] — the IKE-less controller: tunnel profiles, SA/SPI
//!   generation and the setup / renewal / deletion sequences.
//! * [`agent`] — the roadwarrior host: an in-process ESP stack plus the
//!   agent message protocol.
//!
//! Everything in here is deterministic and IO-free; the companion `espnet-sim`
//! crate supplies topologies, traffic, wall-clock measurement and the CLI.
//!
//! The crate is `no_std` (with `alloc`) so the data-plane pieces can be
//! embedded in hosts that do not carry a full standard library.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod agent;
pub mod controller;
pub mod crypto;
#[cfg(any(test, feature = "oracles"))]
pub mod oracles;
pub mod packet;
pub mod switch;
pub mod table;
pub mod types;
