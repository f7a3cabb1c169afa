//! Live operator interface for the governed robot simulation.
//!
//! [`server::serve`] runs a closed loop in real time and speaks the
//! newline-delimited JSON protocol of [`wire`] over TCP. The frame schema is
//! written down in `docs/wire-protocol.md`.

pub mod server;
pub mod wire;

pub use server::{serve, snapshot_of, Catalog, ServeError, ServeOptions, ServerHandle};
pub use wire::{
    decode_command, decode_frame, decode_snapshot, encode_command, encode_frame, encode_snapshot, ConstraintLine,
    OperatorCommand, ServerFrame, StateSnapshot, WireError, WIRE_VERSION,
};
