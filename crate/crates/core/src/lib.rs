//! Synthetic latent-intention languages and exact tools for studying how an
//! ideal next-symbol model relates to the intentions behind its training text.
//!
//! * [`langspec`]: doubly-embedded Markov chain specifications and sampling.
//! * [`oracle`]: exact posteriors, ambiguity and next-symbol conditionals.
//! * [`density`]: a smoothed count model trained by maximum likelihood.
//! * [`verify`]: numerical checks of the composition, understanding,
//!   in-context learning, chain-of-thought and instruction-mixture bounds.
//! * [`experiment`]: sweeps that produce the convergence and KL curves.

pub mod density;
pub mod error;
pub mod experiment;
pub mod langspec;
pub mod math;
pub mod oracle;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
pub use density::{DensityModel, NextSymbolModel};
pub use langspec::{
    build_spec, sample_corpus, sample_message, Corpus, GeneratorConfig, IntentionMode, LanguageSpec, Message, Symbol,
};
pub use oracle::{Boundary, Oracle};
pub use rng::Rng;
