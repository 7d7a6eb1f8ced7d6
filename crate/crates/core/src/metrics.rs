//! MSE training objective and Pearson-correlation evaluation.

use serde::{Deserialize, Serialize};

use crate::data::{collate, CollateLimits, FeatureRecord};
use crate::error::{Error, Result};
use crate::model::TaemiModel;
use crate::tensor::{Graph, Var};

/// `Σ‖pred − target‖² / (k·N)` for `[N×k]` operands.
pub fn mse_loss(g: &mut Graph<'_>, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::dim("mse_loss", g.shape(pred), g.shape(target)));
    }
    let n = g.value(pred).len();
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Plain-value MSE, same normalization as [`mse_loss`].
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::dim("mse", &[pred.len()], &[target.len()]));
    }
    let total: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(total / pred.len() as f64)
}

/// Pearson correlation of two columns.
///
/// Returns `Ok(None)` when either column has zero variance; the correlation
/// is undefined there and must not be reported as a number.
pub fn pearson(pred: &[f64], target: &[f64]) -> Result<Option<f64>> {
    if pred.len() != target.len() {
        return Err(Error::dim("pearson", &[pred.len()], &[target.len()]));
    }
    if pred.len() < 2 {
        return Err(Error::Validation(format!(
            "pearson needs at least 2 samples, got {}",
            pred.len()
        )));
    }
    let constant = |xs: &[f64]| xs.iter().all(|&x| x == xs[0]);
    if constant(pred) || constant(target) {
        return Ok(None);
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = target.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(target) {
        let (dp, dt) = (p - mp, t - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// One entry per target dimension; `None` marks an undefined correlation.
    pub rho_per_dim: Vec<Option<f64>>,
    /// Mean over the defined dimensions; `None` if none is defined.
    pub mean_rho: Option<f64>,
    pub mse: f64,
    pub n_samples: usize,
    pub undefined_dims: usize,
}

impl EvalResult {
    /// Scores row-major `[n×k]` predictions against targets of the same shape.
    pub fn from_predictions(pred: &[f64], target: &[f64], k: usize) -> Result<Self> {
        if pred.len() != target.len() || k == 0 || !pred.len().is_multiple_of(k) {
            return Err(Error::dim("evaluate", &[pred.len()], &[target.len(), k]));
        }
        let n = pred.len() / k;
        let column = |xs: &[f64], j: usize| -> Vec<f64> { (0..n).map(|i| xs[i * k + j]).collect() };
        let rho_per_dim = (0..k)
            .map(|j| pearson(&column(pred, j), &column(target, j)))
            .collect::<Result<Vec<_>>>()?;
        let defined: Vec<f64> = rho_per_dim.iter().flatten().copied().collect();
        let undefined_dims = k - defined.len();
        if undefined_dims > 0 {
            log::warn!("{undefined_dims} of {k} target dimensions have an undefined correlation");
        }
        let mean_rho = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        Ok(EvalResult {
            rho_per_dim,
            mean_rho,
            mse: mse(pred, target)?,
            n_samples: n,
            undefined_dims,
        })
    }
}

impl std::fmt::Display for EvalResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let fmt_rho = |r: &Option<f64>| r.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"));
        writeln!(f, "samples     {}", self.n_samples)?;
        for (i, r) in self.rho_per_dim.iter().enumerate() {
            writeln!(f, "rho[{i}]      {}", fmt_rho(r))?;
        }
        writeln!(f, "mean_rho    {}", fmt_rho(&self.mean_rho))?;
        write!(f, "mse         {:.6}", self.mse)
    }
}

/// Eval-mode predictions for every record, row-major `[n×n_targets]`.
pub fn predict(model: &TaemiModel, records: &[FeatureRecord], batch_size: usize) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    let limits = CollateLimits::from(&model.config);
    let mut out = Vec::with_capacity(records.len() * model.config.n_targets);
    for chunk in records.chunks(batch_size) {
        let batch = collate(chunk, &limits)?;
        out.extend(model.predict(&batch.bundles())?);
    }
    Ok(out)
}

/// Eval-mode evaluation over a whole split (one correlation per dimension
/// over all samples, never averaged per batch).
pub fn evaluate(model: &TaemiModel, records: &[FeatureRecord], batch_size: usize) -> Result<EvalResult> {
    if records.len() < 2 {
        return Err(Error::Validation(format!(
            "evaluation needs at least 2 records, got {}",
            records.len()
        )));
    }
    let pred = predict(model, records, batch_size)?;
    let target: Vec<f64> = records.iter().flat_map(|r| r.target.iter().copied()).collect();
    EvalResult::from_predictions(&pred, &target, model.config.n_targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn mse_identity_and_unit_residual() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::matrix(1, 6, vec![0.5; 6]).unwrap());
        let t = g.constant(Tensor::matrix(1, 6, vec![0.5; 6]).unwrap());
        let l = mse_loss(&mut g, p, t).unwrap();
        assert_eq!(g.scalar(l).unwrap(), 0.0);

        let p = g.constant(Tensor::matrix(1, 6, vec![1.5; 6]).unwrap());
        let l = mse_loss(&mut g, p, t).unwrap();
        assert_eq!(g.scalar(l).unwrap(), 1.0);
    }

    #[test]
    fn mse_shape_mismatch() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::matrix(2, 6, vec![0.0; 12]).unwrap());
        let t = g.constant(Tensor::matrix(1, 6, vec![0.0; 6]).unwrap());
        assert!(matches!(mse_loss(&mut g, p, t), Err(Error::Dimension { .. })));
    }

    #[test]
    fn pearson_perfect_and_anti() {
        let t = [0.1, 0.7, 0.3, 0.9, 0.2];
        assert!((pearson(&t, &t).unwrap().unwrap() - 1.0).abs() < 1e-15);
        let anti: Vec<f64> = t.iter().map(|x| -x + 7.0).collect();
        assert!((pearson(&anti, &t).unwrap().unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn pearson_undefined_on_constant_column() {
        assert_eq!(pearson(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), None);
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn undefined_dims_are_reported_not_zero_filled() {
        // dim 0 perfectly correlated, dim 1 constant predictions
        let pred = [0.0, 5.0, 1.0, 5.0, 2.0, 5.0];
        let target = [0.0, 0.1, 1.0, 0.4, 2.0, 0.2];
        let r = EvalResult::from_predictions(&pred, &target, 2).unwrap();
        assert_eq!(r.rho_per_dim[1], None);
        assert_eq!(r.undefined_dims, 1);
        assert!((r.mean_rho.unwrap() - 1.0).abs() < 1e-15);
    }
}
