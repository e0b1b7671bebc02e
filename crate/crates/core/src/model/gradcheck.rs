//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Parameters, Params};
use super::{batch_loss_grad, ModelError};
use crate::examples::PretrainExample;

/// A scalar function of a set of named flat tensors, with its gradient.
pub trait GradObjective {
    /// `(name, len)` for every tensor, in a fixed order.
    fn tensors(&self) -> Vec<(String, usize)>;
    fn value(&self) -> Result<f64, ModelError>;
    /// One flat gradient per tensor, in `tensors()` order.
    fn gradient(&self) -> Result<Vec<Vec<f64>>, ModelError>;
    fn get(&self, tensor: usize, index: usize) -> f64;
    fn set(&mut self, tensor: usize, index: usize, value: f64);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub worst: CoordinateCheck,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !t.passed)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.worst.rel_error.total_cmp(&b.worst.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares analytic and central-difference gradients on up to `samples`
/// coordinates per tensor (all of them for smaller tensors). A coordinate
/// passes when its relative error is at most `tolerance`; with
/// `tolerance = 0` any rounding difference fails, so exact agreement is not
/// something to expect.
pub fn grad_check<O: GradObjective>(
    obj: &mut O,
    h: f64,
    tolerance: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport, ModelError> {
    let analytic = obj.gradient()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::new();
    for (t, (name, len)) in obj.tensors().into_iter().enumerate() {
        let picks: Vec<usize> = if len <= samples {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, samples).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst: Option<CoordinateCheck> = None;
        let mut passed = true;
        for &i in &picks {
            let orig = obj.get(t, i);
            obj.set(t, i, orig + h);
            let plus = obj.value()?;
            obj.set(t, i, orig - h);
            let minus = obj.value()?;
            obj.set(t, i, orig);
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[t][i];
            let c = CoordinateCheck {
                index: i,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            };
            // NaN compares false, so treat it as a failure explicitly
            if !(c.rel_error <= tolerance) {
                passed = false;
            }
            if worst.map_or(true, |w| !(c.rel_error <= w.rel_error)) {
                worst = Some(c);
            }
        }
        if let Some(worst) = worst {
            tensors.push(TensorCheck {
                name,
                checked: picks.len(),
                worst,
                passed,
            });
        }
    }
    Ok(GradCheckReport {
        h,
        tolerance,
        tensors,
    })
}

/// `mlm_loss + nsp_loss` over a fixed batch, perturbed in 64-bit.
pub struct PretrainObjective<'a> {
    pub weights: Params<f64>,
    pub batch: &'a [PretrainExample],
}

impl GradObjective for PretrainObjective<'_> {
    fn tensors(&self) -> Vec<(String, usize)> {
        self.weights
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.len()))
            .collect()
    }

    fn value(&self) -> Result<f64, ModelError> {
        Ok(batch_loss_grad(&self.weights, self.batch, false)?.0.total())
    }

    fn gradient(&self) -> Result<Vec<Vec<f64>>, ModelError> {
        let (_, g) = batch_loss_grad(&self.weights, self.batch, true)?;
        Ok(g.expect("gradient requested")
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.data.clone())
            .collect())
    }

    fn get(&self, tensor: usize, index: usize) -> f64 {
        self.weights.named_tensors()[tensor].1.data[index]
    }

    fn set(&mut self, tensor: usize, index: usize, value: f64) {
        self.weights.named_tensors_mut()[tensor].1.data[index] = value;
    }
}

/// Gradient check of the pretraining loss on `batch`.
pub fn grad_check_encoder(
    params: &Parameters,
    batch: &[PretrainExample],
    h: f64,
    tolerance: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport, ModelError> {
    let mut obj = PretrainObjective {
        weights: params.to_f64(),
        batch,
    };
    grad_check(&mut obj, h, tolerance, samples, seed)
}

/// One weight, squared error `0.5 * mean((w*x - y)^2)`: a quadratic, so
/// central differences are exact up to rounding.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub weight: f64,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl GradObjective for LinearProbe {
    fn tensors(&self) -> Vec<(String, usize)> {
        vec![("probe.weight".into(), 1)]
    }

    fn value(&self) -> Result<f64, ModelError> {
        let n = self.xs.len() as f64;
        Ok(self
            .xs
            .iter()
            .zip(&self.ys)
            .map(|(x, y)| 0.5 * (self.weight * x - y).powi(2))
            .sum::<f64>()
            / n)
    }

    fn gradient(&self) -> Result<Vec<Vec<f64>>, ModelError> {
        let n = self.xs.len() as f64;
        let g = self
            .xs
            .iter()
            .zip(&self.ys)
            .map(|(x, y)| (self.weight * x - y) * x)
            .sum::<f64>()
            / n;
        Ok(vec![vec![g]])
    }

    fn get(&self, _: usize, _: usize) -> f64 {
        self.weight
    }

    fn set(&mut self, _: usize, _: usize, value: f64) {
        self.weight = value;
    }
}
