//! Central finite-difference check of analytic gradients.
//!
//! Probes whose `±eps` perturbation flips a ReLU sign or moves a max-pool
//! argmax are skipped: the loss is not differentiable across such kinks and
//! the difference quotient there says nothing about the backward pass.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{cross_entropy_grad, sample_cross_entropy, CnnModel, LayerSpec, Tensor};

/// Denominator floor of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCheck {
    /// Layer index, or `None` for the input pixels.
    pub layer: Option<usize>,
    pub kind: String,
    pub probes: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checks: Vec<LayerCheck>,
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol && self.checks.iter().any(|c| c.probes > 0)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Parameters sampled per weight/bias blob and input pixels sampled.
    pub probes_per_blob: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-3,
            probes_per_blob: 24,
            seed: 0,
        }
    }
}

/// Mean loss plus the kink signature of every sample.
fn evaluate(model: &CnnModel, inputs: &Tensor, labels: &[usize]) -> Result<(f64, Vec<u8>)> {
    let mut loss = 0.0;
    let mut sig = Vec::new();
    for (i, &label) in labels.iter().enumerate() {
        let f = model.forward_sample(inputs.row(i), true)?;
        loss += sample_cross_entropy(&f.logits, label);
        let rec = f.record.expect("recorded");
        for (li, layer) in model.layers().iter().enumerate() {
            match layer.spec {
                LayerSpec::Relu => sig.extend(rec.inputs[li].iter().map(|&v| (v > 0.0) as u8)),
                LayerSpec::MaxPool2d { .. } => {
                    if let Some(a) = &rec.argmax[li] {
                        sig.extend(a.iter().flat_map(|v| v.to_le_bytes()));
                    }
                }
                _ => {}
            }
        }
    }
    Ok((loss / labels.len() as f64, sig))
}

fn pick(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= n {
        return (0..len).collect();
    }
    let mut v = index::sample(rng, len, n).into_vec();
    v.sort_unstable();
    v
}

/// Compares the analytic gradients of the mean cross-entropy of
/// `(inputs, labels)` with central differences, per parameter blob and for
/// the input.
pub fn gradient_check(
    model: &CnnModel,
    inputs: &Tensor,
    labels: &[usize],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(opts.eps > 0.0) {
        return Err(Error::InvalidConfig("eps must be positive".into()));
    }
    let out = model.forward(inputs, true)?;
    let dz = cross_entropy_grad(&out.logits, labels)?;
    let (grads, dx) = model.backward(&out, &dz)?;
    let dx = dx.grad().expect("input gradient").to_vec();
    let (_, base_sig) = evaluate(model, inputs, labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checks = Vec::new();
    let mut skipped = 0;

    let probe = |eval_plus: Result<(f64, Vec<u8>)>,
                     eval_minus: Result<(f64, Vec<u8>)>,
                     analytic: f64,
                     check: &mut LayerCheck,
                     skipped: &mut usize|
     -> Result<()> {
        let (lp, sp) = eval_plus?;
        let (lm, sm) = eval_minus?;
        if sp != base_sig || sm != base_sig {
            *skipped += 1;
            return Ok(());
        }
        let numeric = (lp - lm) / (2.0 * opts.eps);
        check.probes += 1;
        check.max_rel_err = check.max_rel_err.max(relative_error(analytic, numeric));
        Ok(())
    };

    for (li, layer) in model.layers().iter().enumerate() {
        if !layer.has_params() {
            continue;
        }
        let kind = match layer.spec {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Linear { .. } => "linear",
            _ => "other",
        };
        for (blob, len) in [("weight", layer.weight.len()), ("bias", layer.bias.len())] {
            let mut check = LayerCheck {
                layer: Some(li),
                kind: format!("{kind}.{blob}"),
                probes: 0,
                max_rel_err: 0.0,
            };
            for idx in pick(len, opts.probes_per_blob, &mut rng) {
                let eval_at = |delta: f64| {
                    let mut m = model.clone();
                    let l = &mut m.layers_mut()[li];
                    let p = if blob == "weight" { &mut l.weight } else { &mut l.bias };
                    p[idx] += delta;
                    evaluate(&m, inputs, labels)
                };
                let g = &grads.layers[li];
                let analytic = if blob == "weight" { g.weight[idx] } else { g.bias[idx] };
                probe(eval_at(opts.eps), eval_at(-opts.eps), analytic, &mut check, &mut skipped)?;
            }
            checks.push(check);
        }
    }

    let mut check = LayerCheck {
        layer: None,
        kind: "input".into(),
        probes: 0,
        max_rel_err: 0.0,
    };
    for idx in pick(inputs.data().len(), opts.probes_per_blob, &mut rng) {
        let eval_at = |delta: f64| {
            let mut data = inputs.data().to_vec();
            data[idx] += delta;
            evaluate(model, &Tensor::new(inputs.shape().to_vec(), data)?, labels)
        };
        probe(eval_at(opts.eps), eval_at(-opts.eps), dx[idx], &mut check, &mut skipped)?;
    }
    checks.push(check);

    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        checks,
        skipped,
        max_rel_err,
    })
}
