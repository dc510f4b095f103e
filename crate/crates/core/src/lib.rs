//! Collision-avoidant model predictive path following for a quadrotor with
//! ellipsoidal body and obstacles. The guide in `book/` walks through the
//! modules; its code blocks run as doctests of this crate.

pub mod controller;
pub mod dynamics;
pub mod geometry;
pub mod ocp;
pub mod pathdef;
pub mod qp;
pub mod scenario;
pub mod simulator;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/dynamics.md")]
    mod dynamics {}
    #[doc = include_str!("../../../book/src/ocp.md")]
    mod ocp {}
    #[doc = include_str!("../../../book/src/controller.md")]
    mod controller {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
