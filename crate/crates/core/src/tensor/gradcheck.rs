use super::{Parameterized, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    /// Number of coordinates compared.
    pub checked: usize,
}

/// Compare backward gradients with central differences on every trainable
/// coordinate of `model`. Relative error per coordinate is
/// `|a − n| / max(1e-12, |a| + |n|)`.
pub fn grad_check<M, F>(model: &mut M, eps: f64, mut loss: F) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: FnMut(&M, &mut Tape) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::validation("grad_check eps must be positive"));
    }
    let mut tape = Tape::new();
    let out = loss(model, &mut tape)?;
    let grads = tape.backward(out)?;

    let mut targets: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |name, t| {
        if t.requires_grad() {
            let analytic = grads
                .of(t)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            targets.push((name.to_string(), analytic));
        }
    });

    let mut eval = |model: &M| -> Result<f64> {
        let mut tape = Tape::new();
        let v = loss(model, &mut tape)?;
        Ok(tape.scalar_value(v))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for (name, analytic) in &targets {
        for (i, &a) in analytic.iter().enumerate() {
            nudge(model, name, i, eps);
            let plus = eval(model)?;
            nudge(model, name, i, -2.0 * eps);
            let minus = eval(model)?;
            nudge(model, name, i, eps);

            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

fn nudge<M: Parameterized>(model: &mut M, name: &str, index: usize, delta: f64) {
    model.visit_params_mut(&mut |n, t| {
        if n == name {
            t.data_mut()[index] += delta;
        }
    });
}
