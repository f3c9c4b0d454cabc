//! A two-level hierarchical agent for sparse-reward gridworlds.
//!
//! A low-level controller (LLC) learns offline, from replayed experience, to
//! reach latent goals produced by a variational goal encoder over hindsight
//! relabeled subtrajectories. A high-level controller (HLC) learns online to
//! pick either primitive actions or latent goals, which the runtime executes
//! in call-and-return fashion.

pub mod encoder;
pub mod error;
pub mod goal_space;
pub mod gridworld;
pub mod harness;
pub mod hindsight;
pub mod hlc;
pub mod llc;
pub mod replay;
pub mod smdp;
pub mod vtrace;

pub use error::{Error, Result};

/// The guide in `book/`, compiled so its listings run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/gridworld.md")]
    mod gridworld {}
    #[doc = include_str!("../../../book/src/vtrace.md")]
    mod vtrace {}
    #[doc = include_str!("../../../book/src/hindsight.md")]
    mod hindsight {}
    #[doc = include_str!("../../../book/src/latent_goals.md")]
    mod latent_goals {}
    #[doc = include_str!("../../../book/src/llc.md")]
    mod llc {}
    #[doc = include_str!("../../../book/src/smdp.md")]
    mod smdp {}
    #[doc = include_str!("../../../book/src/hlc.md")]
    mod hlc {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
