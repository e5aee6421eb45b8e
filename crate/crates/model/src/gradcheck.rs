//! Central finite differences against the analytic gradient.

use cmdrec_core::features::MaskedBatch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{ModelError, Result};
use crate::network::{ForwardOptions, Model};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter, flat index, analytic and numeric values at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-12)
}

/// Checks one coordinate of every trainable tensor plus `sample_size` random
/// coordinates. Dropout is off and MoE routing is replayed from the
/// unperturbed pass, so the loss is smooth in every checked direction.
pub fn finite_diff_check(model: &Model, batch: &MaskedBatch, eps: f64, sample_size: usize, seed: u64) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(ModelError::InvalidStep(eps));
    }
    let (_, grads, routing) = model.loss_and_grads(batch, &ForwardOptions::eval())?;
    let opts = ForwardOptions { fixed_routing: Some(routing), ..ForwardOptions::eval() };
    let trainable: Vec<usize> = (0..model.params.len()).filter(|i| model.params.param(*i).trainable).collect();
    let sizes: Vec<usize> = trainable.iter().map(|i| model.params.param(*i).value.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<(usize, usize)> = trainable.iter().zip(&sizes).map(|(p, n)| (*p, rng.random_range(0..*n))).collect();
    for _ in 0..sample_size {
        let mut r = rng.random_range(0..total);
        for (p, n) in trainable.iter().zip(&sizes) {
            if r < *n {
                coords.push((*p, r));
                break;
            }
            r -= n;
        }
    }
    let mut probe = model.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    for (p, i) in coords {
        let analytic = grads[p].as_ref().map_or(0.0, |g| g.data[i]);
        let orig = probe.params.param(p).value.data[i];
        probe.params.param_mut(p).value.data[i] = orig + eps;
        let plus = probe.loss(batch, &opts)?;
        probe.params.param_mut(p).value.data[i] = orig - eps;
        let minus = probe.loss(batch, &opts)?;
        probe.params.param_mut(p).value.data[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = rel_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((model.params.param(p).name.clone(), i, analytic, numeric));
        }
    }
    Ok(report)
}

/// Moves a freshly initialized model to a generic point: unit-scale embedding
/// tables and perturbed norm gains and biases. At initialization the small
/// embeddings push some gradients below the finite-difference noise floor.
pub fn generic_point(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..model.params.len() {
        let p = model.params.param_mut(i);
        let (r, c) = p.value.shape();
        if p.name.starts_with("embed.") || p.name == "fuse.type" {
            p.value = Tensor::randn(r, c, 1.0, &mut rng);
        } else if p.name.ends_with(".g") {
            p.value = Tensor::randn(r, c, 0.1, &mut rng);
            p.value.data.iter_mut().for_each(|x| *x += 1.0);
        } else if p.name.ends_with("_b") || p.name.ends_with(".b") {
            p.value = Tensor::randn(r, c, 0.1, &mut rng);
        }
    }
}
