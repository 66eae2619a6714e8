//! Adapter / projection / fusion training with degradation-aware augmentation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::degrade::{augment_sample, DEFAULT_AUGMENT_PROB, DEFAULT_FOG_GRAY};
use crate::error::{Error, Result};
use crate::optim::{AdamW, LrMap, LrSchedule};
use crate::rng::Rng;
use crate::tensor::{Parameterized, Tensor};

use super::dataset::Dataset;
use super::model::{Encoded, ToyModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub warmup: usize,
    pub lr_fusion: f64,
    pub lr_proj: f64,
    pub lr_adapter: f64,
    /// Degrade RGB inputs with probability `p_d` during training.
    pub augment: bool,
    pub p_d: f64,
    pub fog_gray: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            warmup: 100,
            lr_fusion: 1e-4,
            lr_proj: 1e-5,
            lr_adapter: 3e-3,
            augment: true,
            p_d: DEFAULT_AUGMENT_PROB,
            fog_gray: DEFAULT_FOG_GRAY,
        }
    }
}

impl TrainConfig {
    pub fn lr_map(&self) -> Result<LrMap> {
        LrMap::new(
            vec![
                ("fusion".into(), self.lr_fusion),
                ("proj".into(), self.lr_proj),
                ("decoder".into(), self.lr_adapter),
            ],
            0.0,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_d) {
            return Err(Error::InvalidArgument(format!(
                "p_d must be in [0, 1], got {}",
                self.p_d
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr_factor: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
}

impl TrainTrace {
    /// `step,loss,lr_factor`, with losses printed in full round-trip precision.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,lr_factor\n");
        for r in &self.steps {
            let _ = writeln!(s, "{},{:e},{:e}", r.step, r.loss, r.lr_factor);
        }
        s
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|r| r.loss)
    }
}

/// Encodes the (never degraded) IR image of every pair once.
pub fn encode_ir_cache(model: &ToyModel, data: &Dataset) -> Result<Vec<Tensor>> {
    data.pairs.iter().map(|(_, ir)| model.encode_ir(ir)).collect()
}

/// Runs `config.steps` optimizer steps. Batches are drawn with replacement
/// from a stream derived from `seed`; augmentation draws from the same stream.
pub fn train(
    model: &mut ToyModel,
    data: &Dataset,
    config: &TrainConfig,
    seed: u64,
    mut progress: impl FnMut(&StepRecord),
) -> Result<TrainTrace> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let lrs = config.lr_map()?;
    let schedule = LrSchedule {
        warmup_steps: config.warmup,
        total_steps: config.steps,
    };
    let mut opt = AdamW::default();
    let mut rng = Rng::derive(seed, "train");
    let ir_cache = encode_ir_cache(model, data)?;
    let clean_rgb: Vec<Tensor> = data
        .pairs
        .iter()
        .map(|(rgb, _)| model.encode_rgb(rgb))
        .collect::<Result<_>>()?;
    let mut trace = TrainTrace::default();
    let inv_b = 1.0 / config.batch as f64;

    for step in 0..config.steps {
        model.zero_grads();
        let mut total = 0.0;
        for _ in 0..config.batch {
            let sample = &data.samples[rng.below(data.len())];
            let rgb = if config.augment {
                match augment_sample(&mut rng, data.rgb(sample), config.p_d, config.fog_gray)? {
                    (img, Some(_)) => model.encode_rgb(&img.quantize_u8())?,
                    (_, None) => clean_rgb[sample.pair].clone(),
                }
            } else {
                clean_rgb[sample.pair].clone()
            };
            let z = Encoded {
                rgb,
                ir: ir_cache[sample.pair].clone(),
            };
            let mask = vec![true; sample.qa.answer.len()];
            let (loss, cache, mut grad) = model.loss(&z, &sample.qa.question, &sample.qa.answer, &mask)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("sample {} produced loss {loss}", sample.id),
                });
            }
            total += loss;
            grad.scale(inv_b);
            model.backward(&cache, &grad)?;
        }
        let mut bad_grad = None;
        model.visit_params("", &mut |name, p| {
            if p.trainable && bad_grad.is_none() && !p.grad.all_finite() {
                bad_grad = Some(name.to_string());
            }
        });
        if let Some(name) = bad_grad {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("non-finite gradient in {name}"),
            });
        }
        let lr_factor = opt.step(model, &lrs, &schedule, step);
        let rec = StepRecord {
            step,
            loss: total * inv_b,
            lr_factor,
        };
        progress(&rec);
        trace.steps.push(rec);
    }
    Ok(trace)
}
