//! Ridge-regression gap predictor used by best-of-N with a learned scorer.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::paramspace::{self, ParamConfig, ParameterSpec};
use crate::seed::{self, Seed};

pub const MIN_SAMPLES: usize = 10;
pub const LAMBDA_GRID: [f64; 4] = [0.01, 0.1, 1.0, 10.0];
pub const FOLDS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurrogateError {
    #[error("need at least {MIN_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
    #[error("all feature rows are identical; nothing to regress on")]
    DegenerateDesign,
    #[error("ridge system could not be factorized")]
    Singular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorConfig {
    #[serde(default = "default_grid")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub fold_seed: Seed,
}

fn default_grid() -> Vec<f64> {
    LAMBDA_GRID.to_vec()
}

fn default_folds() -> usize {
    FOLDS
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            lambdas: default_grid(),
            folds: FOLDS,
            fold_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    /// Mean held-out MSE for each grid value, in grid order.
    pub cv_mse: Vec<f64>,
    /// Held-out R² per fold at the chosen `lambda`.
    pub fold_r2: Vec<f64>,
}

impl SurrogateModel {
    pub fn predict_features(&self, f: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(f).map(|(w, x)| w * x).sum::<f64>()
    }

    pub fn predict(&self, spec: &ParameterSpec, config: &ParamConfig) -> f64 {
        self.predict_features(&paramspace::featurize(spec, config))
    }

    pub fn mean_r2(&self) -> f64 {
        self.fold_r2.iter().sum::<f64>() / self.fold_r2.len() as f64
    }
}

struct Fit {
    w: DVector<f64>,
    b: f64,
}

/// Ridge with an unpenalized intercept (fit on centred data).
fn ridge(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<Fit, SurrogateError> {
    let n = x.nrows() as f64;
    let x_mean = x.row_mean();
    let y_mean = y.sum() / n;
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= &x_mean;
    }
    let yc = y.add_scalar(-y_mean);
    let p = x.ncols();
    let gram = xc.transpose() * &xc + DMatrix::<f64>::identity(p, p) * lambda;
    let chol = gram.cholesky().ok_or(SurrogateError::Singular)?;
    let w = chol.solve(&(xc.transpose() * yc));
    let b = y_mean - (x_mean * &w)[(0, 0)];
    Ok(Fit { w, b })
}

fn predict_rows(fit: &Fit, x: &DMatrix<f64>) -> DVector<f64> {
    (x * &fit.w).add_scalar(fit.b)
}

fn rows(x: &DMatrix<f64>, y: &DVector<f64>, idx: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    (x.select_rows(idx), y.select_rows(idx))
}

fn r2(truth: &DVector<f64>, pred: &DVector<f64>) -> f64 {
    let mean = truth.mean();
    let sst: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    let sse: f64 = truth.iter().zip(pred.iter()).map(|(t, p)| (t - p).powi(2)).sum();
    if sst == 0.0 {
        // constant fold: perfect iff the residuals vanish
        return if sse < 1e-12 { 1.0 } else { 0.0 };
    }
    1.0 - sse / sst
}

/// Fits ridge on `featurize` outputs, choosing λ by k-fold CV mean squared
/// error. Samples are put in a canonical order before folds are assigned, so
/// the fit does not depend on the order samples were supplied in.
pub fn train_surrogate(
    samples: &[(ParamConfig, f64)],
    spec: &ParameterSpec,
    cfg: &RegressorConfig,
) -> Result<SurrogateModel, SurrogateError> {
    if samples.len() < MIN_SAMPLES {
        return Err(SurrogateError::TooFewSamples(samples.len()));
    }
    let mut keyed: Vec<(String, u64, Vec<f64>, f64)> = samples
        .iter()
        .map(|(c, g)| (c.canonical_json(), g.to_bits(), paramspace::featurize(spec, c), *g))
        .collect();
    keyed.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
    if keyed.iter().all(|k| k.2 == keyed[0].2) {
        return Err(SurrogateError::DegenerateDesign);
    }

    let n = keyed.len();
    let p = keyed[0].2.len();
    let x = DMatrix::from_fn(n, p, |i, j| keyed[i].2[j]);
    let y = DVector::from_iterator(n, keyed.iter().map(|k| k.3));

    let folds = cfg.folds.clamp(2, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(cfg.fold_seed, "folds", 0)));
    let fold_of: Vec<usize> = {
        let mut f = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            f[i] = pos % folds;
        }
        f
    };
    let split = |k: usize| -> (Vec<usize>, Vec<usize>) { (0..n).partition(|i| fold_of[*i] != k) };

    let mut cv_mse = Vec::with_capacity(cfg.lambdas.len());
    for &lambda in &cfg.lambdas {
        let mut sse = 0.0;
        for k in 0..folds {
            let (train, test) = split(k);
            let (xt, yt) = rows(&x, &y, &train);
            let (xv, yv) = rows(&x, &y, &test);
            let fit = ridge(&xt, &yt, lambda)?;
            sse += (predict_rows(&fit, &xv) - yv).norm_squared();
        }
        cv_mse.push(sse / n as f64);
    }
    let best = cv_mse
        .iter()
        .enumerate()
        .fold(0, |best, (i, m)| if *m < cv_mse[best] { i } else { best });
    let lambda = cfg.lambdas[best];

    let fold_r2 = (0..folds)
        .map(|k| {
            let (train, test) = split(k);
            let (xt, yt) = rows(&x, &y, &train);
            let (xv, yv) = rows(&x, &y, &test);
            ridge(&xt, &yt, lambda).map(|fit| r2(&yv, &predict_rows(&fit, &xv)))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let fit = ridge(&x, &y, lambda)?;
    Ok(SurrogateModel {
        weights: fit.w.iter().copied().collect(),
        intercept: fit.b,
        lambda,
        cv_mse,
        fold_r2,
    })
}

/// Index of the lowest predicted gap; ties go to the earliest candidate.
pub fn bon_ml_select(model: &SurrogateModel, spec: &ParameterSpec, candidates: &[ParamConfig]) -> usize {
    let preds: Vec<f64> = candidates.iter().map(|c| model.predict(spec, c)).collect();
    argmin(&preds)
}

pub(crate) fn argmin(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(0, |best, (i, v)| if *v < values[best] { i } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paramspace::ParamDomain;

    fn spec() -> ParameterSpec {
        ParameterSpec::new("toy")
            .param("a", ParamDomain::int_range(0, 100))
            .param("b", ParamDomain::boolean())
    }

    fn samples(n: u64, f: impl Fn(&ParamConfig) -> f64) -> Vec<(ParamConfig, f64)> {
        let s = spec();
        (0..n)
            .map(|i| {
                let c = paramspace::sample_uniform(&s, i);
                let g = f(&c);
                (c, g)
            })
            .collect()
    }

    #[test]
    fn too_few_samples() {
        let s = samples(9, |_| 0.1);
        assert_eq!(train_surrogate(&s, &spec(), &RegressorConfig::default()), Err(SurrogateError::TooFewSamples(9)));
    }

    #[test]
    fn identical_rows_are_degenerate() {
        let c = ParamConfig::new().with("a", 3i64).with("b", true);
        let s: Vec<_> = (0..12).map(|i| (c.clone(), i as f64 / 12.0)).collect();
        assert_eq!(train_surrogate(&s, &spec(), &RegressorConfig::default()), Err(SurrogateError::DegenerateDesign));
    }

    #[test]
    fn constant_gaps_predict_the_constant() {
        let s = samples(30, |_| 0.3);
        let m = train_surrogate(&s, &spec(), &RegressorConfig::default()).unwrap();
        for c in samples(5, |_| 0.0) {
            assert!((m.predict(&spec(), &c.0) - 0.3).abs() < 1e-9);
        }
    }

    #[test]
    fn order_invariant() {
        let mut s = samples(40, |c| c.int("a").unwrap() as f64 / 200.0);
        let a = train_surrogate(&s, &spec(), &RegressorConfig::default()).unwrap();
        s.reverse();
        let b = train_surrogate(&s, &spec(), &RegressorConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ties_go_first() {
        assert_eq!(argmin(&[0.4, 0.1, 0.3]), 1);
        assert_eq!(argmin(&[0.2, 0.2]), 0);
        assert_eq!(argmin(&[0.9]), 0);
    }
}
