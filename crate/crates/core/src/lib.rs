//! Evaluation and curation of GUI-agent benchmarks, plus a small GRPO core.
//!
//! - [`dataset`]: episodes, actions, traces, and their line-delimited file format.
//! - [`grounding`]: point and bounding-box click evaluators.
//! - [`metrics`]: Type / Grounding / SR per agent and split.
//! - [`consensus`]: episodes failed by every expert agent.
//! - [`review`]: reviewer prompts, reply parsing, and the durable proposal queue.
//! - [`curation`]: applying verified corrections and comparing benchmarks.
//! - [`grpo`]: reward, advantage and clipped objective, stratified sampling,
//!   and a toy trainer.

pub mod consensus;
pub mod curation;
pub mod dataset;
pub mod grounding;
pub mod grpo;
pub mod metrics;
pub mod review;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/data.md")]
    pub struct Data;
    #[doc = include_str!("../../../book/src/grounding.md")]
    pub struct Grounding;
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub struct Metrics;
    #[doc = include_str!("../../../book/src/consensus.md")]
    pub struct Consensus;
    #[doc = include_str!("../../../book/src/review.md")]
    pub struct Review;
    #[doc = include_str!("../../../book/src/curation.md")]
    pub struct Curation;
    #[doc = include_str!("../../../book/src/grpo.md")]
    pub struct Grpo;
    #[doc = include_str!("../../../book/src/sampler.md")]
    pub struct Sampler;
    #[doc = include_str!("../../../book/src/toy.md")]
    pub struct Toy;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
