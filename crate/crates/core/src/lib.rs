//! Distributed reference governor for a PI-consensus robot network.
//!
//! The [`plant`] is a team of planar single-integrator robots running PI
//! consensus around leader agents that track a reference `r`. The governor
//! replaces `r` with an applied reference `m` found by a distributed
//! primal-dual flow ([`solver`]) over constraints that certify the plant
//! stays inside obstacle half-spaces and input limits ([`constraints`]).
//! [`oracle`] is a centralized brute-force check of the same problem, and
//! [`scenario`] wires everything into a closed loop.

pub mod constraints;
pub mod graph;
pub mod oracle;
pub mod plant;
pub mod scenario;
pub mod solver;
