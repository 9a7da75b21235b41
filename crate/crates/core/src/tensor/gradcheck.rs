//! Central finite-difference oracle for tape gradients.
//!
//! Only forward values are used to build the numeric gradient, so the check
//! is independent of every backward rule it validates.

use super::{Result, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Per input: `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compare reverse-mode gradients of the scalar `f(inputs)` with central
/// differences of step `h`.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.param(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let mut diff_sq = 0.0;
        let mut num_sq = 0.0;
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[k] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            diff_sq += (numeric - a.data()[k]).powi(2);
            num_sq += numeric * numeric;
        }
        let denom = a.norm_sq().sqrt().max(num_sq.sqrt());
        rel_errors.push(if denom == 0.0 { 0.0 } else { diff_sq.sqrt() / denom });
    }
    Ok(GradCheck { rel_errors })
}
