//! Non-linear mixed-effects estimation and bootstrap confidence intervals.

// `!(x > 0.0)` is the NaN-rejecting form of a positivity check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod bootstrap;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod plot;
pub mod rng;
pub mod saem;
pub mod stats;
pub mod study;

pub use error::{Error, Result};

/// The guide in `book/src`, compiled so that its listings run as doctests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    mod estimation {}
    #[doc = include_str!("../../../book/src/bootstrap.md")]
    mod bootstrap {}
    #[doc = include_str!("../../../book/src/study.md")]
    mod study {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
