//! Thirteen-condition robustness evaluation and fusion-mode ablations.

use std::fmt::{self, Write as _};
use std::thread;

use crate::degrade::{apply, DegradationKind, DegradationSpec, ImageBuf, Severity};
use crate::error::{Error, Result};

use super::dataset::{Dataset, Sample};
use super::model::{Encoded, FusionMode, ModelConfig, ToyModel};
use super::train::{train, TrainConfig};
use super::vocab::EOS;

/// One evaluation condition; `None` is the clean input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Condition(pub Option<DegradationSpec>);

impl Condition {
    pub const CLEAN: Condition = Condition(None);

    /// Clean plus every kind at every non-clean severity, 13 in total.
    pub fn all() -> Vec<Condition> {
        let mut out = vec![Self::CLEAN];
        for kind in DegradationKind::ALL {
            for sev in Severity::DEGRADED {
                out.push(Condition(Some(DegradationSpec::new(kind, sev))));
            }
        }
        out
    }

    pub fn kind_str(&self) -> &'static str {
        self.0.map_or("none", |s| s.kind.as_str())
    }

    pub fn severity(&self) -> Severity {
        self.0.map_or(Severity::Clean, |s| s.severity)
    }

    /// Degrades a 3-channel image and re-quantizes it to 8 bits.
    pub fn apply(&self, rgb: &ImageBuf) -> Result<ImageBuf> {
        if rgb.channels() != 3 {
            return Err(Error::InvalidArgument(format!(
                "degradations apply to RGB only, got a {}-channel image",
                rgb.channels()
            )));
        }
        match self.0 {
            None => Ok(rgb.clone()),
            Some(spec) => Ok(apply(spec, rgb)?.quantize_u8()),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            None => f.write_str("clean"),
            Some(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionRow {
    pub condition: Condition,
    pub n: usize,
    pub correct: usize,
}

impl ConditionRow {
    pub fn accuracy(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub rows: Vec<ConditionRow>,
}

impl ConditionReport {
    pub fn row(&self, condition: Condition) -> Option<&ConditionRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    pub fn accuracy(&self, condition: Condition) -> Option<f64> {
        self.row(condition).map(ConditionRow::accuracy)
    }

    pub fn clean(&self) -> Option<f64> {
        self.accuracy(Condition::CLEAN)
    }

    /// Accuracy at `kind` for severities clean through highest.
    pub fn curve(&self, kind: DegradationKind) -> Vec<f64> {
        Severity::ALL
            .iter()
            .filter_map(|&s| {
                let c = if s == Severity::Clean {
                    Condition::CLEAN
                } else {
                    Condition(Some(DegradationSpec::new(kind, s)))
                };
                self.accuracy(c)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("condition,kind,severity,n,correct,accuracy\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6}",
                r.condition,
                r.condition.kind_str(),
                r.condition.severity(),
                r.n,
                r.correct,
                r.accuracy()
            );
        }
        s
    }
}

/// Anything that answers a question about a (possibly degraded) image pair.
pub trait Answerer: Sync {
    /// Per-pair precomputation shared across that pair's questions.
    type Prepared;

    fn prepare(&self, rgb: &ImageBuf, ir: &ImageBuf) -> Result<Self::Prepared>;

    fn answer(&self, prepared: &Self::Prepared, sample: &Sample) -> Result<Vec<usize>>;
}

impl Answerer for ToyModel {
    type Prepared = Encoded;

    fn prepare(&self, rgb: &ImageBuf, ir: &ImageBuf) -> Result<Encoded> {
        self.encode_pair(rgb, ir)
    }

    fn answer(&self, z: &Encoded, sample: &Sample) -> Result<Vec<usize>> {
        self.generate(z, &sample.qa.question, sample.qa.answer.len().max(2))
    }
}

/// Answers from the ground truth.
pub struct OracleAnswerer;

impl Answerer for OracleAnswerer {
    type Prepared = ();

    fn prepare(&self, _: &ImageBuf, _: &ImageBuf) -> Result<()> {
        Ok(())
    }

    fn answer(&self, _: &(), sample: &Sample) -> Result<Vec<usize>> {
        Ok(sample.qa.answer.clone())
    }
}

/// Always gives the same answer.
pub struct ConstantAnswerer(pub Vec<usize>);

impl Answerer for ConstantAnswerer {
    type Prepared = ();

    fn prepare(&self, _: &ImageBuf, _: &ImageBuf) -> Result<()> {
        Ok(())
    }

    fn answer(&self, _: &(), _: &Sample) -> Result<Vec<usize>> {
        Ok(self.0.clone())
    }
}

fn exact_match(pred: &[usize], reference: &[usize]) -> bool {
    let strip = |s: &[usize]| -> Vec<usize> { s.iter().copied().take_while(|&t| t != EOS).collect() };
    strip(pred) == strip(reference) && pred.contains(&EOS)
}

fn count_pairs<A: Answerer>(
    model: &A,
    data: &Dataset,
    by_pair: &[Vec<&Sample>],
    pairs: &[usize],
    condition: Condition,
) -> Result<usize> {
    let mut correct = 0;
    for &p in pairs {
        let (rgb, ir) = &data.pairs[p];
        let prepared = model.prepare(&condition.apply(rgb)?, ir)?;
        for s in &by_pair[p] {
            if exact_match(&model.answer(&prepared, s)?, &s.qa.answer) {
                correct += 1;
            }
        }
    }
    Ok(correct)
}

/// Exact-match accuracy under each condition. RGB is degraded, IR never is.
/// Work is split across `threads` workers; the counts do not depend on it.
pub fn evaluate<A: Answerer>(
    model: &A,
    data: &Dataset,
    conditions: &[Condition],
    threads: usize,
) -> Result<ConditionReport> {
    let mut by_pair: Vec<Vec<&Sample>> = vec![Vec::new(); data.pairs.len()];
    for s in &data.samples {
        by_pair[s.pair].push(s);
    }
    let active: Vec<usize> = (0..data.pairs.len()).filter(|&p| !by_pair[p].is_empty()).collect();
    let threads = threads.clamp(1, active.len().max(1));
    let chunk = active.len().div_ceil(threads).max(1);
    let mut rows = Vec::with_capacity(conditions.len());
    for &condition in conditions {
        let correct = if threads == 1 {
            count_pairs(model, data, &by_pair, &active, condition)?
        } else {
            thread::scope(|scope| {
                let handles: Vec<_> = active
                    .chunks(chunk)
                    .map(|part| {
                        let by_pair = &by_pair;
                        scope.spawn(move || count_pairs(model, data, by_pair, part, condition))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("evaluation worker panicked"))
                    .sum::<Result<usize>>()
            })?
        };
        rows.push(ConditionRow {
            condition,
            n: data.len(),
            correct,
        });
    }
    Ok(ConditionReport { rows })
}

pub fn default_threads() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

/// Trains one model per mode from the same seed, data and schedule and
/// evaluates each on all 13 conditions.
pub fn run_ablation(
    modes: &[FusionMode],
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    train_set: &Dataset,
    eval_set: &Dataset,
    threads: usize,
) -> Result<Vec<(FusionMode, ConditionReport)>> {
    modes
        .iter()
        .map(|&mode| {
            let mut m = ToyModel::new(ModelConfig { mode, ..model.clone() }, seed)?;
            train(&mut m, train_set, train_cfg, seed, |_| {})?;
            Ok((mode, evaluate(&m, eval_set, &Condition::all(), threads)?))
        })
        .collect()
}
