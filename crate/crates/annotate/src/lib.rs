//! Iterative caption annotation: candidate generation, score-guided
//! refinement with hard negatives, final selection, caption-to-QA conversion
//! and a four-level caption judging table.
//!
//! Backends are traits. [`mock`] has deterministic implementations and
//! [`remote`] talks to HTTP completion and scoring endpoints.

mod error;
pub mod judge;
pub mod mock;
pub mod prompt;
pub mod qa;
pub mod refine;
pub mod remote;

pub use error::{AnnotateError, Result};
pub use judge::{judge_captions, Judge, Rating, ScoreTable};
pub use prompt::PromptTemplates;
pub use qa::{parse_qa_pairs, qa_from_caption, QaGenerator, QaPair};
pub use refine::{
    final_select, refine_loop, AnnotationState, Candidate, GenContext, Generator, ImageRef, LoopFailure, Scorer,
    Selector,
};
