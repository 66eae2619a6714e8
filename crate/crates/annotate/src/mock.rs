//! Deterministic backends for tests and offline runs.

use std::cell::Cell;

use lxfuse::Rng;

use crate::error::{AnnotateError, Result};
use crate::judge::Judge;
use crate::qa::QaGenerator;
use crate::refine::{AnnotationState, GenContext, Generator, ImageRef, Scorer, Selector};

const WORDS: [&str; 24] = [
    "a", "warm", "person", "walks", "near", "the", "parked", "car", "on", "dark", "road", "two", "bright", "figures",
    "stand", "beside", "cold", "building", "wall", "hot", "engine", "street", "at", "night",
];

/// Proposes random edits of the best caption so far. Optionally emits a fixed
/// target caption as the first candidate of one round.
#[derive(Debug, Clone)]
pub struct MockGenerator {
    rng: Rng,
    target: Option<(usize, String)>,
}

impl MockGenerator {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Rng::derive(seed, "mock-generator"),
            target: None,
        }
    }

    pub fn with_target(mut self, round: usize, text: impl Into<String>) -> Self {
        self.target = Some((round, text.into()));
        self
    }

    fn word(&mut self) -> &'static str {
        WORDS[self.rng.below(WORDS.len())]
    }

    fn fresh(&mut self) -> String {
        (0..6).map(|_| self.word()).collect::<Vec<_>>().join(" ")
    }

    fn mutate(&mut self, text: &str) -> String {
        let mut words: Vec<&str> = text.split_whitespace().collect();
        if words.is_empty() {
            return self.fresh();
        }
        let i = self.rng.below(words.len());
        words[i] = self.word();
        words.join(" ")
    }
}

impl Generator for MockGenerator {
    fn generate(&mut self, ctx: &GenContext<'_>) -> Result<Vec<String>> {
        let base = ctx.state.best().map(|c| c.text.clone());
        let mut out = Vec::with_capacity(ctx.fanout);
        for i in 0..ctx.fanout {
            match (&self.target, &base) {
                (Some((r, t)), _) if *r == ctx.round && i == 0 => out.push(t.clone()),
                (_, Some(b)) => out.push(self.mutate(b)),
                (_, None) => out.push(self.fresh()),
            }
        }
        Ok(out)
    }
}

/// Character-level Levenshtein distance.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.chars().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != *cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Score = minus the edit distance to a hidden target caption.
#[derive(Debug, Clone)]
pub struct EditDistanceScorer {
    pub target: String,
}

impl Scorer for EditDistanceScorer {
    fn score(&self, text: &str, _: &ImageRef) -> Result<f64> {
        Ok(-(edit_distance(text, &self.target) as f64))
    }
}

/// Pseudo-random but fixed score in `[0, 1)` per (image, text).
#[derive(Debug, Clone, Copy, Default)]
pub struct HashScorer;

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Scorer for HashScorer {
    fn score(&self, text: &str, image: &ImageRef) -> Result<f64> {
        let h = fnv1a(image.id.bytes().chain([0]).chain(text.bytes()));
        Ok((h >> 11) as f64 / (1u64 << 53) as f64)
    }
}

/// Wraps a scorer and fails every call after the first `ok_calls`.
#[derive(Debug)]
pub struct FailingScorer<S> {
    pub inner: S,
    pub ok_calls: usize,
    calls: Cell<usize>,
}

impl<S> FailingScorer<S> {
    pub fn new(inner: S, ok_calls: usize) -> Self {
        Self {
            inner,
            ok_calls,
            calls: Cell::new(0),
        }
    }
}

impl<S: Scorer> Scorer for FailingScorer<S> {
    fn score(&self, text: &str, image: &ImageRef) -> Result<f64> {
        let n = self.calls.get();
        self.calls.set(n + 1);
        if n >= self.ok_calls {
            return Err(AnnotateError::Backend {
                backend: "mock scorer".into(),
                attempts: 1,
                detail: format!("injected failure on call {n}"),
            });
        }
        self.inner.score(text, image)
    }
}

/// Returns the highest-scored candidate, earliest on ties.
#[derive(Debug, Clone, Copy, Default)]
pub struct ArgmaxSelector;

impl Selector for ArgmaxSelector {
    fn select(&mut self, state: &AnnotationState) -> Result<String> {
        state
            .best()
            .map(|c| c.text.clone())
            .ok_or_else(|| AnnotateError::InvalidArgument("no candidates to select from".into()))
    }
}

/// Replays canned QA outputs in order, repeating the last one.
#[derive(Debug, Clone)]
pub struct ScriptedQa {
    outputs: Vec<String>,
    pub calls: usize,
}

impl ScriptedQa {
    pub fn new(outputs: Vec<String>) -> Self {
        Self { outputs, calls: 0 }
    }
}

impl QaGenerator for ScriptedQa {
    fn qa_text(&mut self, _: &str) -> Result<String> {
        let i = self.calls.min(self.outputs.len().saturating_sub(1));
        self.calls += 1;
        self.outputs
            .get(i)
            .cloned()
            .ok_or_else(|| AnnotateError::Malformed("scripted QA backend has no outputs".into()))
    }
}

/// Gives every pair the same labels.
#[derive(Debug, Clone)]
pub struct ConstantJudge {
    pub accuracy: String,
    pub detail: String,
}

impl Judge for ConstantJudge {
    fn judge(&mut self, _: &str, _: &str) -> Result<(String, String)> {
        Ok((self.accuracy.clone(), self.detail.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance("", "abc"), 3);
        assert_eq!(edit_distance("kitten", "sitting"), 3);
        assert_eq!(edit_distance("same", "same"), 0);
    }

    #[test]
    fn hash_scores_are_stable_and_bounded() {
        let img = ImageRef::new("img0");
        let a = HashScorer.score("a car", &img).unwrap();
        assert_eq!(a, HashScorer.score("a car", &img).unwrap());
        assert!((0.0..1.0).contains(&a));
        assert_ne!(a, HashScorer.score("a car", &ImageRef::new("img1")).unwrap());
    }
}
