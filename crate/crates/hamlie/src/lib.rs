//! Learning and control of rigid-body dynamics on matrix Lie groups.
//!
//! The library couples three pieces:
//!
//! * a small matrix Lie group kernel for SO(2), SO(3), SE(2) and SE(3)
//!   ([`liegroup`]),
//! * port-Hamiltonian dynamics models whose mass, potential, dissipation and
//!   input terms are parametrized by feed-forward networks with exact
//!   derivatives ([`nets`], [`dynamics`]), trained from state-control
//!   trajectory segments by differentiating through an ODE solver
//!   ([`odeint`], [`training`]),
//! * an energy-shaping / damping-injection (IDA-PBC) tracking controller
//!   synthesized directly from a learned model ([`control`]).
//!
//! Ground-truth simulators for a pendulum, an omnidirectional SE(2) vehicle
//! and a quadrotor live in [`envs`] and are used both to generate training
//! data and to verify predictions, energy conservation, group-constraint
//! satisfaction and closed-loop tracking.

pub mod cli;
pub mod control;
pub mod dynamics;
pub mod envs;
pub mod liegroup;
pub mod nets;
pub mod odeint;
pub mod training;
