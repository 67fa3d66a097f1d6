//! Analytic-vs-numeric gradient verification by central finite differences.

use super::tape::{tape_backward, tape_forward, GradMap};
use super::{cross_entropy, LinearHead};
use crate::backbone::BackboneModel;
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-tensor maximum relative error between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_tensor: Vec<(String, f64)>,
    pub max_relative_error: f64,
}

fn loss_of(
    model: &BackboneModel,
    head: &LinearHead,
    input: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let tape = tape_forward(model, input, None)?;
    let logits = head.logits(&tape.features)?;
    let (loss, _, _) = cross_entropy(&logits, labels)?;
    Ok(loss)
}

/// Compare float-mode analytic gradients against central finite differences
/// of the cross-entropy loss. Checks up to `samples_per_tensor` seeded
/// positions per trainable tensor (running statistics are not parameters and
/// are skipped). Relative error uses max(|a|, |n|, 1e-6) as denominator.
pub fn grad_check(
    model: &BackboneModel,
    head: &LinearHead,
    input: &Tensor,
    labels: &[usize],
    epsilon: f64,
    samples_per_tensor: usize,
) -> Result<GradCheckReport> {
    // Analytic pass.
    let tape = tape_forward(model, input, None)?;
    let logits = head.logits(&tape.features)?;
    let (_, d_logits, _) = cross_entropy(&logits, labels)?;
    let (d_head_w, d_head_b, d_features) = super::head_backward(head, &tape.features, &d_logits);
    let mut analytic: GradMap = tape_backward(&tape, &d_features)?;
    analytic.insert("head.weight".into(), d_head_w);
    analytic.insert("head.bias".into(), d_head_b);

    let mut work_model = model.clone();
    let mut work_head = head.clone();
    let mut per_tensor = Vec::new();
    let mut rng = Rng::new(0x6D1F_F00D);

    for (name, grad) in &analytic {
        let len = grad.len();
        let positions: Vec<usize> = if len <= samples_per_tensor {
            (0..len).collect()
        } else {
            rng.sample_without_replacement(len, samples_per_tensor)
        };
        let mut worst = 0.0f64;
        for &pos in &positions {
            let nudge = |m: &mut BackboneModel, h: &mut LinearHead, delta: f64| {
                let slot = match name.as_str() {
                    "head.weight" => &mut h.weight.data_mut()[pos],
                    "head.bias" => &mut h.bias.data_mut()[pos],
                    other => &mut m
                        .weights
                        .get_mut(other)
                        .expect("analytic grad names a stored tensor")
                        .data_mut()[pos],
                };
                *slot += delta;
            };
            nudge(&mut work_model, &mut work_head, epsilon);
            let plus = loss_of(&work_model, &work_head, input, labels)?;
            nudge(&mut work_model, &mut work_head, -2.0 * epsilon);
            let minus = loss_of(&work_model, &work_head, input, labels)?;
            nudge(&mut work_model, &mut work_head, epsilon);

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.data()[pos];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
        }
        per_tensor.push((name.clone(), worst));
    }

    let max_relative_error = per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_tensor,
        max_relative_error,
    })
}
