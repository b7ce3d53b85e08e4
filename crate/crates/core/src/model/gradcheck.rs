use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{forward, ForwardOptions, KtModel};
use crate::data::Batch;
use crate::error::Result;
use crate::numerics::{finite_difference, relative_error};

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub coords: usize,
    pub max_rel_error: f64,
    /// `(parameter, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: (String, usize, f64, f64),
}

/// Mean BCE of `model` on `batch` over valid positions.
pub fn batch_loss(model: &KtModel, batch: &Batch, opts: ForwardOptions<'_>) -> Result<f64> {
    let mut out = forward(model, batch, opts)?;
    let loss = out.tape.bce_loss(out.preds, &batch.labels(), &batch.valid_mask)?;
    Ok(out.tape.value(loss).item())
}

/// Compares backprop gradients of the batch BCE against central differences
/// with step `h` on `coords` parameter entries drawn uniformly with `seed`.
/// Monotonic distances are frozen at their unperturbed values for both
/// routes, matching the stop-gradient in the backward pass.
pub fn gradient_check(model: &KtModel, batch: &Batch, coords: usize, h: f64, seed: u64) -> Result<GradCheckReport> {
    let mut out = forward(model, batch, ForwardOptions::default())?;
    let loss = out.tape.bce_loss(out.preds, &batch.labels(), &batch.valid_mask)?;
    out.tape.backward(loss)?;
    let grads: Vec<Vec<f64>> = out.params.iter().map(|&v| out.tape.grad_or_zeros(v)).collect();
    let frozen = out.mono_distances.clone();

    let sizes: Vec<usize> = model.params().iter().map(|t| t.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        coords,
        max_rel_error: 0.0,
        worst: (String::new(), 0, 0.0, 0.0),
    };
    for _ in 0..coords {
        let mut flat = rng.gen_range(0..total);
        let mut p = 0;
        while flat >= sizes[p] {
            flat -= sizes[p];
            p += 1;
        }
        let mut probe_model = model.clone();
        let base = model.params()[p].data().to_vec();
        let numeric = finite_difference(&base, h, &[flat], |x| {
            probe_model.params_mut()[p].data_mut().copy_from_slice(x);
            let opts = ForwardOptions {
                mono_distances: Some(&frozen),
                ..Default::default()
            };
            batch_loss(&probe_model, batch, opts).expect("probe forward")
        })[0];
        let analytic = grads[p][flat];
        let err = relative_error(analytic, numeric);
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (model.names()[p].clone(), flat, analytic, numeric);
        }
    }
    Ok(report)
}
