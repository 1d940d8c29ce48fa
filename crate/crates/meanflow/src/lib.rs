//! Toy-scale MeanFlow distillation.
//!
//! A flow-matching teacher `v(z, t)` is distilled into an average-velocity
//! student `u(z, r, t)` that can jump from time `t` to time `r` in one
//! network evaluation. Training runs in three stages: a warm-up against a
//! discrete target built from teacher ODE trajectories, fine-tuning against
//! the differential MeanFlow target computed with a forward-mode JVP, and an
//! adversarial stage that aligns the distribution of student endpoints with
//! teacher endpoints.
//!
//! Everything runs on dense `f64` matrices with a small in-crate autodiff
//! engine ([`autodiff`]).

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod net;

pub use error::{Error, Result};

// The guide's listings run as doc-tests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/flow-matching.md")]
    mod flow_matching {}
    #[doc = include_str!("../../../book/src/average-velocity.md")]
    mod average_velocity {}
    #[doc = include_str!("../../../book/src/distillation.md")]
    mod distillation {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
