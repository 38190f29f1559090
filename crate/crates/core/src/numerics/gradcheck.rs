//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ParamSet, Tape, Var};
use crate::error::{OreoError, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error, scaled by `max(1, |loss|)`
    /// since round-off in the difference grows with the loss value.
    pub floor: f64,
    /// Coordinates checked per parameter; `None` checks all of them.
    pub samples_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-6,
            samples_per_param: Some(200),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(ps: &ParamSet, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(ps);
    let loss = f(&mut tape)?;
    tape.value(loss).item()
}

/// Compares tape gradients of the scalar built by `f` with central differences.
pub fn check_gradients<F>(ps: &ParamSet, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let (loss, grads) = {
        let mut tape = Tape::new(ps);
        let loss = f(&mut tape)?;
        let value = tape.value(loss).item()?;
        (value, tape.backward(loss)?)
    };
    if !loss.is_finite() {
        return Err(OreoError::Numerical(format!("loss is {loss}")));
    }
    let floor = opts.floor * loss.abs().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = ps.clone();
    let mut report = GradCheckReport {
        loss,
        max_rel_error: 0.0,
        coordinates: 0,
        params: Vec::new(),
    };
    for pi in 0..ps.len() {
        let id = super::ParamId(pi);
        let param = ps.get(id);
        let n = param.value.len();
        let mut coords: Vec<usize> = match opts.samples_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        coords.sort_unstable();
        let analytic = grads.get(id);
        let mut pc = ParamCheck {
            name: param.name.clone(),
            checked: coords.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &c in &coords {
            let orig = param.value.data()[c];
            work.get_mut(id).value.data_mut()[c] = orig + opts.step;
            let up = eval(&work, &f)?;
            work.get_mut(id).value.data_mut()[c] = orig - opts.step;
            let down = eval(&work, &f)?;
            work.get_mut(id).value.data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.map_or(0.0, |g| g.data()[c]);
            let err = relative_error(a, numeric, floor);
            if !err.is_finite() {
                return Err(OreoError::Numerical(format!(
                    "non-finite difference at {}[{c}]",
                    param.name
                )));
            }
            if err > pc.max_rel_error {
                pc.max_rel_error = err;
                pc.worst_index = c;
                pc.analytic = a;
                pc.numeric = numeric;
            }
        }
        report.coordinates += coords.len();
        report.max_rel_error = report.max_rel_error.max(pc.max_rel_error);
        report.params.push(pc);
    }
    Ok(report)
}
