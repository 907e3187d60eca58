use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::{forward, Dataset, Mode, ModelState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Mse,
    ThresholdAccuracy,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Metric {
    Mse,
    /// Fraction of samples whose error is strictly below the threshold.
    ThresholdAccuracy { threshold: f64 },
}

/// Mean squared output error of each eval sample, from an infer-mode
/// forward (no routing).
pub fn per_sample_errors(state: &ModelState, dataset: &Dataset) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("evaluate"));
    }
    let pass = forward(state, &dataset.inputs, Mode::Infer)?;
    let d_out = pass.y.cols() as f64;
    Ok((0..pass.y.rows())
        .map(|b| {
            pass.y
                .row(b)
                .iter()
                .zip(dataset.targets.row(b))
                .map(|(y, t)| (y - t).powi(2))
                .sum::<f64>()
                / d_out
        })
        .collect())
}

pub fn evaluate(state: &ModelState, dataset: &Dataset, metric: Metric) -> Result<f64> {
    let errors = per_sample_errors(state, dataset)?;
    let n = errors.len() as f64;
    Ok(match metric {
        Metric::Mse => errors.iter().sum::<f64>() / n,
        Metric::ThresholdAccuracy { threshold } => errors.iter().filter(|e| **e < threshold).count() as f64 / n,
    })
}

/// Median of a non-empty slice (mean of the middle pair for even length).
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("median"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{matmul_nt, mean_rows, Matrix, Rng};
    use crate::training::TrainConfig;

    fn state(seed: u64) -> ModelState {
        let cfg = TrainConfig { rank: 4, num_programs: 2, key_dim: 3, ..Default::default() };
        let mut rng = Rng::new(seed);
        let mut s = ModelState::init(3, 2, &cfg, &mut rng).unwrap();
        s.a = rng.gaussian_matrix(2, 4, 1.0);
        s
    }

    fn data(rng: &mut Rng, n: usize, targets: Option<Matrix>) -> Dataset {
        let inputs: Vec<Matrix> = (0..n).map(|_| rng.gaussian_matrix(2, 3, 1.0)).collect();
        let t = targets.unwrap_or_else(|| rng.gaussian_matrix(n, 2, 1.0));
        Dataset::new(inputs, t).unwrap()
    }

    #[test]
    fn perfect_predictor() {
        let s = state(1);
        let mut rng = Rng::new(2);
        let mut d = data(&mut rng, 5, None);
        d.targets = forward(&s, &d.inputs, Mode::Infer).unwrap().y;
        assert_eq!(evaluate(&s, &d, Metric::Mse).unwrap(), 0.0);
        assert_eq!(evaluate(&s, &d, Metric::ThresholdAccuracy { threshold: 1e-9 }).unwrap(), 1.0);
    }

    #[test]
    fn zero_predictor_on_zero_targets() {
        let mut s = state(3);
        s.w0 = Matrix::zeros(2, 3);
        s.a = Matrix::zeros(2, 4);
        let mut rng = Rng::new(4);
        let d = data(&mut rng, 4, Some(Matrix::zeros(4, 2)));
        assert_eq!(evaluate(&s, &d, Metric::ThresholdAccuracy { threshold: 0.1 }).unwrap(), 1.0);
    }

    #[test]
    fn matches_direct_oracle() {
        let s = state(5);
        let mut rng = Rng::new(6);
        let d = data(&mut rng, 7, None);
        let w = s.w0.add(&crate::numerics::matmul(&s.a, s.adapter.weight()).unwrap()).unwrap();
        let mut errs = Vec::new();
        for (b, x) in d.inputs.iter().enumerate() {
            let z = Matrix::row_vector(&mean_rows(x).unwrap()).unwrap();
            let y = matmul_nt(&z, &w).unwrap();
            let e: f64 = y.row(0).iter().zip(d.targets.row(b)).map(|(a, t)| (a - t) * (a - t)).sum();
            errs.push(e / 2.0);
        }
        let mse = errs.iter().sum::<f64>() / 7.0;
        assert!((evaluate(&s, &d, Metric::Mse).unwrap() - mse).abs() < 1e-12);
        let thr = median(&errs).unwrap();
        let acc = errs.iter().filter(|e| **e < thr).count() as f64 / 7.0;
        assert_eq!(evaluate(&s, &d, Metric::ThresholdAccuracy { threshold: thr }).unwrap(), acc);
        assert_eq!(s.ops.routing_evaluations(), 0);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
        assert!(median(&[]).is_err());
    }
}
