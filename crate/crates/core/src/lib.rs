//! Joint plug-in electric vehicle (PEV) charging scheduling and AC optimal
//! power flow.
//!
//! The library models a power grid serving both price-inelastic residential
//! demand and a fleet of PEVs that arrive at charging stations (generator
//! buses) over a finite horizon of time slots. The joint dispatch problem is
//! nonconvex; it is handled by:
//!
//! * lifting voltages into a Hermitian matrix `W = V V^H` and solving the
//!   semidefinite relaxation ([`sdr`]),
//! * repairing non-rank-one relaxation solutions with an iterative
//!   trace-minus-largest-eigenvalue penalty ([`noa`]),
//! * committing one slot at a time in a receding-horizon loop ([`mpc`]), and
//! * certifying near-optimality against a full-horizon relaxation lower
//!   bound ([`scenario`]).
//!
//! The semidefinite programs themselves are solved by a small dense
//! primal-dual interior-point method in [`sdp`].

pub mod bundled;
pub mod fleet;
pub mod grid;
pub mod mpc;
pub mod noa;
pub mod scenario;
pub mod sdp;
pub mod sdr;

pub use fleet::{FleetState, Pev};
pub use grid::{Bus, Generator, Line, Network, Profile};
pub use mpc::{MpcResult, MpcSlotRecord};
pub use scenario::{OfflineResult, Scenario};
pub use sdp::{SdpProblem, SdpSolution, SolveStatus, SolverOptions};
