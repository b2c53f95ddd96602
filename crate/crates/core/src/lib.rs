//! Confidence-aware preference-pair mining and DPO fine-tuning of a
//! low-rank adapted toy policy.
//!
//! Pipeline: [`policy::generate_candidates`] → [`scoring::score_pool`] (or
//! [`scoring::ingest_external_scores`]) → [`selection::build_preference_dataset`]
//! → [`dpo::train`]. [`bench`] runs seeded end-to-end experiments on
//! synthetic worlds; [`cli`] chains the stages through files.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dpo;
pub mod error;
pub mod policy;
pub mod records;
pub mod rng;
pub mod scoring;
pub mod selection;
pub mod types;

pub use config::{validate_config, DpoConfig, M3PConfig, RunConfig, SamplingConfig};
pub use error::{Error, Result};
pub use policy::{ReferencePolicy, ToyPolicy};
pub use rng::SeededRng;
pub use types::{Candidate, CandidatePool, Prompt, PreferencePair, ScoreBreakdown, TokenId};
