//! Branching random walks driven by products of positive matrices.

pub mod cone;
pub mod error;

pub use error::{Error, Result};
pub mod rng;
pub mod stats;
pub mod model;
pub mod spectral;
pub mod branching;
pub mod spine;
pub mod renewal;
pub mod experiments;

// The guide's snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/spectral.md")]
    mod spectral {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/spine.md")]
    mod spine {}
    #[doc = include_str!("../../../book/src/renewal.md")]
    mod renewal {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}
