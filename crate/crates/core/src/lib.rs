//! Automatic generation of anomalies for expected utility theory.
//!
//! A predictive model of lottery choice is searched for small menu
//! collections that no logit expected-utility function can fit, the
//! candidates are checked against every increasing utility function, and
//! the survivors are categorized and clustered.

pub mod adversarial;
pub mod analysis;
pub mod categorizer;
pub mod cpt;
pub mod dataset;
pub mod error;
pub mod eut;
pub mod lottery;
pub mod lp;
pub mod math;
pub mod mlp;
pub mod pipeline;
pub mod morphing;
pub mod predictor;
pub mod verifier;

pub use error::{Error, Result};
pub use predictor::{Predictor, PredictorHandle};
pub use lottery::{Dominance, Example, ExampleCollection, Lottery, Menu, MenuLayout, Provenance};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic per-run generator derived from a master seed and run index.
pub fn run_rng(master_seed: u64, run_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(run_index);
    rng
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/lotteries.md")]
    mod lotteries {}
    #[doc = include_str!("../../../book/src/predictors.md")]
    mod predictors {}
    #[doc = include_str!("../../../book/src/theory-fit.md")]
    mod theory_fit {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
    #[doc = include_str!("../../../book/src/generation.md")]
    mod generation {}
    #[doc = include_str!("../../../book/src/categories.md")]
    mod categories {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
