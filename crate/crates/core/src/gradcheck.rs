//! Central finite-difference gradient oracle.
//!
//! Relative error is measured per tensor as
//! `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, 1e-12)`, which keeps
//! entries whose true gradient is near zero from dominating the report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionStack};
use crate::grid::PatchGrid;
use crate::rng::Rng;
use crate::tensor::{Param, Parameterized, Tensor};

/// Default perturbation for double-precision checks.
pub const FD_STEP: f64 = 1e-5;

/// Numerical gradient of `f` at `x` by central differences.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + h;
        let fp = f(&buf);
        buf[i] = orig - h;
        let fm = f(&buf);
        buf[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
}

impl ParamCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn set_element<M: Parameterized + ?Sized>(model: &mut M, name: &str, idx: usize, v: f64) {
    model.visit_params_mut("", &mut |n, p| {
        if n == name {
            p.value.data_mut()[idx] = v;
        }
    });
}

/// Compares analytic gradients against central differences for every
/// trainable parameter of `model`.
///
/// `backward` must zero nothing itself: grads are cleared before it runs, it
/// performs one forward/backward pass, and the accumulated grads are read
/// back. `loss` evaluates the scalar objective without touching grads.
pub fn check_params<M: Parameterized>(
    model: &mut M,
    h: f64,
    mut loss: impl FnMut(&M) -> f64,
    backward: impl FnOnce(&mut M),
) -> Vec<ParamCheck> {
    model.zero_grads();
    backward(model);
    let mut targets: Vec<(String, Param)> = Vec::new();
    model.visit_params("", &mut |name, p| {
        if p.trainable {
            targets.push((name.to_string(), p.clone()));
        }
    });
    let mut report = Vec::with_capacity(targets.len());
    for (name, p) in targets {
        let mut numeric = Vec::with_capacity(p.numel());
        for (i, &orig) in p.value.data().iter().enumerate() {
            set_element(model, &name, i, orig + h);
            let fp = loss(model);
            set_element(model, &name, i, orig - h);
            let fm = loss(model);
            set_element(model, &name, i, orig);
            numeric.push((fp - fm) / (2.0 * h));
        }
        report.push(ParamCheck {
            max_rel_err: rel_error(p.grad.data(), &numeric),
            numel: p.numel(),
            name,
        });
    }
    report
}

/// Setup for checking a randomly initialized fusion stack end to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackCheck {
    pub grid: usize,
    pub d: usize,
    pub radii: Vec<f64>,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for StackCheck {
    fn default() -> Self {
        Self {
            grid: 4,
            d: 8,
            radii: vec![1.0, 2.0, 3.0],
            seed: 0,
            tolerance: 1e-4,
        }
    }
}

/// Checks every parameter of a stack with non-zero output layers and
/// perturbed norms under a random linear probe of the fused tokens.
/// `fault` names a parameter whose analytic gradient is corrupted after
/// backward, to exercise the failure path.
pub fn check_stack(check: &StackCheck, fault: Option<&str>) -> Result<Vec<ParamCheck>> {
    let grid = PatchGrid::new(check.grid, check.grid)?;
    let cfg = FusionConfig {
        radii: check.radii.clone(),
        identity_init: false,
        ..FusionConfig::with_width(check.d)
    };
    let mut rng = Rng::derive(check.seed, "gradcheck");
    let mut stack = FusionStack::new(&cfg, &mut rng)?;
    stack.visit_params_mut("", &mut |name, p| {
        if name.contains("ln_") || name.ends_with("bias") {
            for v in p.value.data_mut() {
                *v += rng.uniform_range(-0.3, 0.3);
            }
        }
    });
    let mut known = false;
    stack.visit_params("", &mut |name, _| known |= Some(name) == fault);
    if let (Some(name), false) = (fault, known) {
        return Err(Error::InvalidArgument(format!("no parameter named {name:?}")));
    }
    let tables = stack.tables(grid, grid)?;
    let n = grid.len();
    let mut rand = |r: usize, c: usize| Tensor::from_fn(r, c, |_, _| rng.uniform_range(-1.0, 1.0));
    let (rgb, ir, w) = (rand(n, check.d), rand(n, check.d), rand(n, check.d));
    let probe = |out: &Tensor| out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>();
    let mut failure = None;
    let report = check_params(
        &mut stack,
        FD_STEP,
        |s| s.forward(&rgb, &ir, &tables).map_or(f64::NAN, |(out, _)| probe(&out)),
        |s| {
            let result = s
                .forward(&rgb, &ir, &tables)
                .and_then(|(_, cache)| s.backward(&cache, &w));
            if let Err(e) = result {
                failure = Some(e);
            }
            if let Some(name) = fault {
                s.visit_params_mut("", &mut |n, p| {
                    if n == name {
                        for g in p.grad.data_mut() {
                            *g = *g * 1.5 + 1e-3;
                        }
                    }
                });
            }
        },
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}
