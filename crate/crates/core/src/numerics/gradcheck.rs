use serde::{Deserialize, Serialize};

use super::{Rng, Tensor};
use crate::error::{Error, Result};

/// A collection of named tensors that can be perturbed coordinate-wise.
pub trait ParamSet {
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;
    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)>;
}

/// Ad-hoc parameter set, mostly for tests.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensors(pub Vec<(String, Tensor)>);

impl ParamSet for NamedTensors {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.0.iter().map(|(n, t)| (n.clone(), t)).collect()
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.0.iter_mut().map(|(n, t)| (n.clone(), t)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub parameter: String,
    pub max_relative_error: f64,
    pub coordinates_checked: usize,
}

/// Central-difference steps, tried in order. A coordinate within one step of
/// a ReLU or hinge kink gets a meaningless difference at that step, so a poor
/// match is retried with a smaller one; a wrong gradient fails at every step.
pub const GRAD_CHECK_STEPS: [f64; 2] = [1e-5, 1e-7];
const GRAD_CHECK_RETRY_ABOVE: f64 = 1e-6;
pub const GRAD_CHECK_MAX_COORDS: usize = 50;

/// Compares the analytic gradient returned by `f` against central finite
/// differences on up to 50 coordinates of every tensor.
///
/// `f` must be deterministic: any stochastic inputs (Gumbel noise) have to be
/// drawn before the check and captured by the closure.
pub fn grad_check<P, F>(f: F, params: &P, rng: &mut Rng) -> Result<Vec<GradCheckReport>>
where
    P: ParamSet + Clone,
    F: Fn(&P) -> Result<(f64, P)>,
{
    let (loss, analytic) = f(params)?;
    if !loss.is_finite() {
        return Err(Error::Evaluation(format!("loss is {loss}")));
    }
    let analytic: Vec<Vec<f64>> = analytic
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.data().to_vec())
        .collect();

    let mut probe = params.clone();
    let names: Vec<(String, usize)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    let mut reports = Vec::with_capacity(names.len());

    for (ti, (name, len)) in names.into_iter().enumerate() {
        let coords = sample_coords(len, rng);
        let mut worst = 0.0f64;
        for &c in &coords {
            let original = probe.named_tensors()[ti].1.data()[c];
            let mut eval_at = |v: f64| -> Result<f64> {
                probe.named_tensors_mut()[ti].1.data_mut()[c] = v;
                let (l, _) = f(&probe)?;
                if !l.is_finite() {
                    return Err(Error::Evaluation(format!(
                        "loss is {l} with {name}[{c}] = {v}"
                    )));
                }
                Ok(l)
            };
            let ga = analytic[ti][c];
            let mut rel = f64::INFINITY;
            for step in GRAD_CHECK_STEPS {
                let plus = eval_at(original + step)?;
                let minus = eval_at(original - step)?;
                let fd = (plus - minus) / (2.0 * step);
                rel = rel.min((ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8));
                if rel < GRAD_CHECK_RETRY_ABOVE {
                    break;
                }
            }
            probe.named_tensors_mut()[ti].1.data_mut()[c] = original;
            worst = worst.max(rel);
        }
        reports.push(GradCheckReport {
            parameter: name,
            max_relative_error: worst,
            coordinates_checked: coords.len(),
        });
    }
    Ok(reports)
}

fn sample_coords(len: usize, rng: &mut Rng) -> Vec<usize> {
    let mut all: Vec<usize> = (0..len).collect();
    if len > GRAD_CHECK_MAX_COORDS {
        rng.shuffle(&mut all);
        all.truncate(GRAD_CHECK_MAX_COORDS);
        all.sort_unstable();
    }
    all
}
