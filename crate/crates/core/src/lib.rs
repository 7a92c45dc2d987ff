//! Constraint-respecting neural trading policies for a natural gas storage
//! facility, trained on simulated price scenarios, together with a
//! least-squares Monte-Carlo benchmark.

pub mod adam;
pub mod autodiff;
pub mod config;
pub mod episode;
pub mod lsmc;
pub mod market;
pub mod policy;
pub mod report;
pub mod storage;
pub mod train;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/market.md")]
    mod market {}
    #[doc = include_str!("../../../book/src/storage.md")]
    mod storage {}
    #[doc = include_str!("../../../book/src/policy.md")]
    mod policy {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/lsmc.md")]
    mod lsmc {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
