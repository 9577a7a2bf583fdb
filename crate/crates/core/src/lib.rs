//! Detection, localization and correction of erroneous segments in
//! synthesized speech.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only the
//! algorithmic pieces: interval algebra over time scopes, word-level
//! warping alignment, evaluation metrics, training losses, the iterative
//! correction loop, a seeded simulator that stands in for the neural
//! backends, and the dataset/preference-pair logic. File formats, the
//! out-of-process adapter protocol and the CLI live in the `speechfix`
//! crate.
#![cfg_attr(not(any(test, feature = "std")), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod alignment;
pub mod correction;
pub mod dataset;
pub mod losses;
pub mod metrics;
pub mod preference;
pub mod rng;
pub mod scope;
pub mod sim;
pub mod text;
pub mod track;

pub use alignment::{
    default_word_cost, dtw_align, map_discrepancies_to_words, Alignment, CostSpec, DiscrepancySet,
    EditOp, SubstitutionCost, WarpingPath,
};
pub use correction::{
    build_mask, correct, gate, refine, CallContext, CorrectionConfig, CorrectionOutcome, Editor,
    EvaluationReport, Evaluator, MarginPolicy, Snapshot,
};
pub use scope::{TimeInterval, TimeScope};
pub use text::{TextSequence, WordToken};
pub use track::{Frame, QualityScore, SpeechTrack, UnitLabel, WordSegment};

/// Default frame hop in seconds (50 Hz unit rate).
pub const DEFAULT_HOP_S: f64 = 0.02;
