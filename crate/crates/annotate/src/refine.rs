use std::fmt;
use std::path::PathBuf;

use serde::Serialize;

use crate::error::{AnnotateError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRef {
    pub id: String,
    pub path: Option<PathBuf>,
}

impl ImageRef {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            path: None,
        }
    }

    pub fn with_path(id: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        Self {
            id: id.into(),
            path: Some(path.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub text: String,
    /// Higher means better aligned with the image.
    pub score: f64,
    pub round: usize,
}

/// Everything the loop has produced for one image. Candidates are only ever
/// appended; `hard_negatives` indexes into `candidates`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationState {
    pub image: ImageRef,
    pub candidates: Vec<Candidate>,
    pub hard_negatives: Vec<usize>,
    /// Best score seen up to and including each completed round.
    pub best_per_round: Vec<f64>,
}

#[derive(Serialize)]
struct ArtifactRecord<'a> {
    image_id: &'a str,
    round: usize,
    text: &'a str,
    score: f64,
    is_hard_negative: bool,
}

impl AnnotationState {
    pub fn new(image: ImageRef) -> Self {
        Self {
            image,
            candidates: Vec::new(),
            hard_negatives: Vec::new(),
            best_per_round: Vec::new(),
        }
    }

    pub fn rounds_completed(&self) -> usize {
        self.best_per_round.len()
    }

    pub fn is_hard_negative(&self, idx: usize) -> bool {
        self.hard_negatives.contains(&idx)
    }

    pub fn hard_negative_texts(&self) -> Vec<&str> {
        self.hard_negatives
            .iter()
            .map(|&i| self.candidates[i].text.as_str())
            .collect()
    }

    /// Highest score; ties go to the earliest candidate, hence the earliest round.
    pub fn best(&self) -> Option<&Candidate> {
        let mut best: Option<&Candidate> = None;
        for c in &self.candidates {
            if best.is_none_or(|b| c.score > b.score) {
                best = Some(c);
            }
        }
        best
    }

    /// Checks the structural invariants: hard negatives point at existing
    /// candidates, rounds are in order and complete, and the best-so-far
    /// sequence is the running maximum.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AnnotateError::InvalidArgument(m));
        if let Some(&i) = self.hard_negatives.iter().find(|&&i| i >= self.candidates.len()) {
            return bad(format!(
                "hard negative {i} outside {} candidates",
                self.candidates.len()
            ));
        }
        if self.candidates.windows(2).any(|w| w[1].round < w[0].round) {
            return bad("candidate rounds out of order".into());
        }
        let mut running = f64::NEG_INFINITY;
        for (r, &b) in self.best_per_round.iter().enumerate() {
            let round_max = self
                .candidates
                .iter()
                .filter(|c| c.round == r)
                .map(|c| c.score)
                .fold(f64::NEG_INFINITY, f64::max);
            running = running.max(round_max);
            if b != running {
                return bad(format!("best-so-far at round {r} is {b}, expected {running}"));
            }
        }
        if self.candidates.iter().any(|c| c.round >= self.rounds_completed()) {
            return bad("candidate from an unfinished round".into());
        }
        Ok(())
    }

    /// One JSON object per line: `image_id, round, text, score, is_hard_negative`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (i, c) in self.candidates.iter().enumerate() {
            let rec = ArtifactRecord {
                image_id: &self.image.id,
                round: c.round,
                text: &c.text,
                score: c.score,
                is_hard_negative: self.is_hard_negative(i),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// What a generator sees when asked for a round's candidates.
#[derive(Debug, Clone, Copy)]
pub struct GenContext<'a> {
    pub round: usize,
    pub fanout: usize,
    pub state: &'a AnnotationState,
}

pub trait Generator {
    fn generate(&mut self, ctx: &GenContext<'_>) -> Result<Vec<String>>;
}

pub trait Scorer {
    fn score(&self, text: &str, image: &ImageRef) -> Result<f64>;
}

pub trait Selector {
    fn select(&mut self, state: &AnnotationState) -> Result<String>;
}

impl<T: Generator + ?Sized> Generator for &mut T {
    fn generate(&mut self, ctx: &GenContext<'_>) -> Result<Vec<String>> {
        (**self).generate(ctx)
    }
}

impl<T: Scorer + ?Sized> Scorer for &T {
    fn score(&self, text: &str, image: &ImageRef) -> Result<f64> {
        (**self).score(text, image)
    }
}

/// The loop stopped early. `state` holds every round that completed.
#[derive(Debug)]
pub struct LoopFailure {
    pub state: AnnotationState,
    pub error: AnnotateError,
}

impl fmt::Display for LoopFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "annotation loop stopped after {} round(s): {}",
            self.state.rounds_completed(),
            self.error
        )
    }
}

impl std::error::Error for LoopFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Hard negatives per round: the bottom quarter, at least one.
pub fn hard_negative_count(fanout: usize) -> usize {
    fanout.div_ceil(4)
}

fn run_round<G: Generator, S: Scorer>(
    gen: &mut G,
    scorer: &S,
    state: &AnnotationState,
    round: usize,
    fanout: usize,
) -> Result<Vec<(String, f64)>> {
    let ctx = GenContext { round, fanout, state };
    let mut texts = gen.generate(&ctx)?;
    if texts.len() < fanout {
        return Err(AnnotateError::Malformed(format!(
            "generator returned {} candidate(s) for a fanout of {fanout}",
            texts.len()
        )));
    }
    texts.truncate(fanout);
    texts
        .into_iter()
        .map(|t| {
            let s = scorer.score(&t, &state.image)?;
            if !s.is_finite() {
                return Err(AnnotateError::Malformed(format!("non-finite score {s} for {t:?}")));
            }
            Ok((t, s))
        })
        .collect()
}

/// Runs `rounds` generate-and-score rounds. A round's candidates are appended
/// only once all of them are scored, so a failure leaves whole rounds behind.
pub fn refine_loop<G: Generator, S: Scorer>(
    gen: &mut G,
    scorer: &S,
    image: ImageRef,
    rounds: usize,
    fanout: usize,
) -> std::result::Result<AnnotationState, LoopFailure> {
    let mut state = AnnotationState::new(image);
    if rounds == 0 || fanout == 0 {
        return Err(LoopFailure {
            state,
            error: AnnotateError::InvalidArgument(format!("rounds ({rounds}) and fanout ({fanout}) must be positive")),
        });
    }
    for round in 0..rounds {
        let scored = match run_round(gen, scorer, &state, round, fanout) {
            Ok(s) => s,
            Err(error) => return Err(LoopFailure { state, error }),
        };
        let base = state.candidates.len();
        // lowest scores first; among equal scores the later candidate is the negative
        let mut order: Vec<usize> = (0..scored.len()).collect();
        order.sort_by(|&a, &b| scored[a].1.total_cmp(&scored[b].1).then(b.cmp(&a)));
        let mut negs: Vec<usize> = order[..hard_negative_count(fanout)].iter().map(|&i| base + i).collect();
        negs.sort_unstable();
        let prev = state.best_per_round.last().copied().unwrap_or(f64::NEG_INFINITY);
        let round_max = scored.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        state
            .candidates
            .extend(scored.into_iter().map(|(text, score)| Candidate { text, score, round }));
        state.hard_negatives.extend(negs);
        state.best_per_round.push(prev.max(round_max));
    }
    Ok(state)
}

pub fn final_select<S: Selector + ?Sized>(selector: &mut S, state: &AnnotationState) -> Result<String> {
    if state.candidates.is_empty() {
        return Err(AnnotateError::InvalidArgument("no candidates to select from".into()));
    }
    selector.select(state)
}
