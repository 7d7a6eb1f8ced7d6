//! Slow, independent reference implementations.
//!
//! The numeric references never call the tensor kernels or the graph. The
//! gradient checks necessarily run the layers under test, but their
//! finite-difference side only evaluates forward passes.

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureRecord;
use crate::error::{Error, Result};
use crate::metrics::mse_loss;
use crate::model::{ModalityBundle, TaemiModel};
use crate::nn::{Bound, CrossAttentionBlock, LinearLayer, MlpHead, NormPlacement, ParamStore, SelfAttentionBlock};
use crate::tensor::{Graph, Tensor, Var};

/// Error function from its power series `2/√π · e^{−x²} · Σ 2ⁿx^{2n+1}/(2n+1)!!`,
/// whose terms are all positive.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    if x.abs() > 6.0 {
        return x.signum();
    }
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    while term.abs() > 1e-17 * sum.abs() {
        n += 1.0;
        term *= 2.0 * x2 / (2.0 * n + 1.0);
        sum += term;
    }
    2.0 / std::f64::consts::PI.sqrt() * (-x2).exp() * sum
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Softmax over the unmasked entries of one row; masked entries are 0.
pub fn naive_softmax(x: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let valid = |i: usize| mask.is_none_or(|m| m[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in x.iter().enumerate() {
        if valid(i) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateMask { row: 0 });
    }
    let mut total = 0.0;
    for (i, &v) in x.iter().enumerate() {
        if valid(i) {
            total += (v - max).exp();
        }
    }
    Ok(x.iter()
        .enumerate()
        .map(|(i, &v)| if valid(i) { (v - max).exp() / total } else { 0.0 })
        .collect())
}

/// One query against a list of keys and values, scores scaled by `scale`.
pub fn naive_attention(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>], mask: &[bool], scale: f64) -> Result<Vec<f64>> {
    if keys.len() != values.len() || keys.len() != mask.len() || keys.is_empty() {
        return Err(Error::Validation("keys, values and mask must have equal nonzero length".into()));
    }
    let mut scores = vec![0.0; keys.len()];
    for t in 0..keys.len() {
        for j in 0..q.len() {
            scores[t] += q[j] * keys[t][j];
        }
        scores[t] *= scale;
    }
    let w = naive_softmax(&scores, Some(mask))?;
    let mut out = vec![0.0; values[0].len()];
    for t in 0..values.len() {
        for j in 0..out.len() {
            out[j] += w[t] * values[t][j];
        }
    }
    Ok(out)
}

/// `x·W + b` with `W` stored `[in][out]`.
pub fn naive_linear(x: &[f64], w: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    for i in 0..x.len() {
        for j in 0..out.len() {
            out[j] += x[i] * w[i][j];
        }
    }
    out
}

pub fn naive_mse(pred: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..pred.len() {
        for j in 0..pred[i].len() {
            let d = pred[i][j] - target[i][j];
            total += d * d;
            count += 1;
        }
    }
    total / count as f64
}

/// Sample covariance over the product of sample standard deviations.
pub fn naive_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0);
    let vx = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / (n - 1.0);
    let vy = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / (n - 1.0);
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx.sqrt() * vy.sqrt()))
}

/// Five-point central differences of `f` at `x`, one coordinate at a time:
/// `(f(x−2h) − 8f(x−h) + 8f(x+h) − f(x+2h)) / 12h`, exact for quartics.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut at = |offset: f64| {
            probe[i] = x[i] + offset;
            f(&probe)
        };
        let values = [at(-2.0 * eps), at(-eps), at(eps), at(2.0 * eps)];
        probe[i] = x[i];
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("function is {v} near coordinate {i}")));
        }
        grad.push((values[0] - 8.0 * values[1] + 8.0 * values[2] - values[3]) / (12.0 * eps));
    }
    Ok(grad)
}

/// Gradient magnitude below which errors are measured in absolute terms.
/// Structurally zero gradients (key biases, padded rows) come back from
/// finite differences as round-off near 1e-13, which must not read as a
/// relative error of order one.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, GRAD_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Stop epoch (1-based) of patience-based early stopping, found by asking
/// at every epoch whether the last `patience` values all failed to beat the
/// best value seen before them. Undefined metrics count as −∞.
pub fn brute_force_stop_epoch(metrics: &[Option<f64>], patience: usize) -> Option<usize> {
    let value = |m: &Option<f64>| m.filter(|v| !v.is_nan()).unwrap_or(f64::NEG_INFINITY);
    (patience.max(1)..=metrics.len()).find(|&e| {
        let best_before = metrics[..e - patience].iter().map(value).fold(f64::NEG_INFINITY, f64::max);
        metrics[e - patience..e].iter().all(|m| value(m) <= best_before)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
    pub eps: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(9).max(9);
        writeln!(
            f,
            "{:<width$}  {:>7}  {:>12}  {:>8}  {:>14}  {:>14}",
            "parameter", "checked", "max rel err", "index", "analytic", "numeric"
        )?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<width$}  {:>7}  {:>12.3e}  {:>8}  {:>14.6e}  {:>14.6e}",
                e.name, e.checked, e.max_rel_error, e.worst_index, e.analytic, e.numeric
            )?;
        }
        write!(
            f,
            "verdict: {} (max rel err {:.3e}, tolerance {:.1e}, eps {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error(),
            self.tolerance,
            self.eps
        )
    }
}

/// Compares backward gradients of the eval-mode MSE loss with central
/// differences, for up to `per_param` coordinates of every parameter
/// (all of them when `None`). The coordinate with the largest analytic
/// gradient is always included.
pub fn gradcheck_model(
    model: &TaemiModel,
    bundles: &[ModalityBundle],
    targets: &[Vec<f64>],
    per_param: Option<usize>,
    eps: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let k = model.config.n_targets;
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let mut rng = crate::seeded_rng(seed, 0);
        let trace = model.forward_graph(&mut g, &p, bundles, false, &mut rng)?;
        let flat: Vec<f64> = targets.iter().flatten().copied().collect();
        let t = g.constant(Tensor::matrix(bundles.len(), k, flat)?);
        let loss = mse_loss(&mut g, trace.prediction, t)?;
        g.backward(loss)?;
        p.take_grads(&mut g)
            .into_iter()
            .zip(model.params.iter())
            .map(|(gr, prm)| gr.unwrap_or_else(|| vec![0.0; prm.tensor.numel()]))
            .collect()
    };

    let loss_of = |m: &TaemiModel| -> f64 {
        match m.predict(bundles) {
            Ok(pred) => naive_mse(&pred.chunks(k).map(<[f64]>::to_vec).collect::<Vec<_>>(), targets),
            Err(_) => f64::NAN,
        }
    };

    let mut probe = model.clone();
    let mut rng = crate::seeded_rng(seed, 1);
    let mut entries = Vec::with_capacity(model.params.len());
    for (pi, id) in model.params.ids().enumerate() {
        let param = model.params.param(id);
        let n = param.tensor.numel();
        let grad = &analytic[pi];
        let mut coords: Vec<usize> = match per_param {
            Some(c) if c < n => sample(&mut rng, n, c).into_vec(),
            _ => (0..n).collect(),
        };
        let largest = (0..n)
            .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()))
            .unwrap_or(0);
        if !coords.contains(&largest) {
            coords.push(largest);
        }
        coords.sort_unstable();
        let mut entry = GradCheckEntry {
            name: param.name.clone(),
            checked: coords.len(),
            max_rel_error: 0.0,
            worst_index: coords[0],
            analytic: grad[coords[0]],
            numeric: f64::NAN,
        };
        for &c in &coords {
            let original = param.tensor.data()[c];
            let numeric = finite_diff_grad(
                |v| {
                    probe.params.get_mut(id).data_mut()[c] = v[0];
                    loss_of(&probe)
                },
                &[original],
                eps,
            )
            .map_err(|e| Error::Numeric(format!("{}[{c}]: {e}", param.name)))?[0];
            probe.params.get_mut(id).data_mut()[c] = original;
            let err = relative_error(grad[c], numeric);
            if err >= entry.max_rel_error {
                entry.max_rel_error = err;
                entry.worst_index = c;
                entry.analytic = grad[c];
                entry.numeric = numeric;
            }
        }
        entries.push(entry);
    }
    let passed = entries.iter().all(|e| e.max_rel_error < tolerance);
    Ok(GradCheckReport {
        entries,
        tolerance,
        eps,
        passed,
    })
}

type LayerForward = dyn for<'a> Fn(&mut Graph<'a>, &Bound, &[Var]) -> Result<Var>;

/// Fixed non-uniform weights reducing an output to a scalar loss.
fn probe_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 + ((i * 7 + 3) % 11) as f64 / 10.0).collect()
}

fn probe_loss(out: &[f64]) -> f64 {
    out.iter().zip(probe_weights(out.len())).map(|(o, w)| o * w).sum()
}

/// Checks every input and parameter coordinate of one layer.
fn check_layer(
    name: &str,
    store: &ParamStore,
    inputs: &[Tensor],
    forward: &LayerForward,
    eps: f64,
) -> Result<Vec<GradCheckEntry>> {
    let run = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = forward(&mut g, &p, &xs)?;
        Ok(probe_loss(g.value(out)))
    };
    let (param_grads, input_grads) = {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xs: Vec<Var> = inputs.iter().map(|t| g.input(t.clone().requiring_grad())).collect();
        let out = forward(&mut g, &p, &xs)?;
        let w = g.constant(Tensor::new(g.shape(out).to_vec(), probe_weights(g.value(out).len()))?);
        let weighted = g.mul(out, w)?;
        let loss = g.sum(weighted);
        g.backward(loss)?;
        let inputs: Vec<Option<Vec<f64>>> = xs.iter().map(|&x| g.take_grad(x)).collect();
        (p.take_grads(&mut g), inputs)
    };
    let mut entries = Vec::new();
    let mut push = |label: String, analytic: Option<Vec<f64>>, numeric: Vec<f64>| {
        let analytic = analytic.unwrap_or_else(|| vec![0.0; numeric.len()]);
        let mut entry = GradCheckEntry {
            name: label,
            checked: numeric.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: analytic[0],
            numeric: numeric[0],
        };
        for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            let err = relative_error(a, n);
            if err > entry.max_rel_error {
                entry = GradCheckEntry {
                    max_rel_error: err,
                    worst_index: i,
                    analytic: a,
                    numeric: n,
                    ..entry
                };
            }
        }
        entries.push(entry);
    };
    for (k, grad) in input_grads.into_iter().enumerate() {
        let numeric = finite_diff_grad(
            |v| {
                let mut probe = inputs.to_vec();
                probe[k].data_mut().copy_from_slice(v);
                run(store, &probe).unwrap_or(f64::NAN)
            },
            inputs[k].data(),
            eps,
        )?;
        push(format!("{name}/input{k}"), grad, numeric);
    }
    for (id, grad) in store.ids().zip(param_grads) {
        let numeric = finite_diff_grad(
            |v| {
                let mut probe = store.clone();
                probe.get_mut(id).data_mut().copy_from_slice(v);
                run(&probe, inputs).unwrap_or(f64::NAN)
            },
            store.get(id).data(),
            eps,
        )?;
        push(format!("{name}/{}", store.param(id).name), grad, numeric);
    }
    Ok(entries)
}

/// Finite-difference check of every layer type in isolation, on small
/// random instances, covering input and parameter gradients.
pub fn gradcheck_layers(eps: f64, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = crate::seeded_rng(seed, 0);
    let mut random = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let mut init = crate::seeded_rng(seed, 1);
    let mut entries = Vec::new();

    let mut store = ParamStore::new();
    let linear = LinearLayer::new(&mut store, "linear", 5, 3, &mut init)?;
    let forward = move |g: &mut Graph<'_>, p: &Bound, x: &[Var]| linear.forward(g, p, x[0]);
    entries.extend(check_layer("linear", &store, &[random(&[2, 5])?], &forward, eps)?);

    for norm in [NormPlacement::Post, NormPlacement::Pre, NormPlacement::None] {
        let mut store = ParamStore::new();
        let block = SelfAttentionBlock::new(&mut store, "self_attn", 4, 2, norm, &mut init)?;
        // perturb the affine norm parameters away from the identity
        for id in [block.norm_scale, block.norm_shift] {
            let t = store.get_mut(id);
            for v in t.data_mut() {
                *v += init.gen_range(-0.5..0.5);
            }
        }
        let mask = [true, true, false];
        let forward = move |g: &mut Graph<'_>, p: &Bound, x: &[Var]| block.forward(g, p, x[0], &mask);
        let label = format!("self_attn_{norm:?}").to_lowercase();
        entries.extend(check_layer(&label, &store, &[random(&[3, 4])?], &forward, eps)?);
        let forward =
            move |g: &mut Graph<'_>, p: &Bound, x: &[Var]| block.forward_segments(g, p, x[0], &[0..2, 2..3]);
        entries.extend(check_layer(&format!("{label}_segments"), &store, &[random(&[3, 4])?], &forward, eps)?);
    }

    let mut store = ParamStore::new();
    let cross = CrossAttentionBlock::new(&mut store, "cross", 3, 5, 4, 4, 2, &mut init)?;
    let mask = [true, false, true];
    let forward = move |g: &mut Graph<'_>, p: &Bound, x: &[Var]| cross.forward(g, p, x[0], x[1], &mask);
    entries.extend(check_layer("cross_attn", &store, &[random(&[3])?, random(&[3, 5])?], &forward, eps)?);
    let forward =
        move |g: &mut Graph<'_>, p: &Bound, x: &[Var]| cross.forward_segments(g, p, x[0], x[1], &[0..1, 1..3]);
    let inputs = [random(&[2, 3])?, random(&[3, 5])?];
    entries.extend(check_layer("cross_attn_segments", &store, &inputs, &forward, eps)?);

    let mut store = ParamStore::new();
    let head = MlpHead::new(&mut store, "head", 6, 5, 2, 0.1, &mut init)?;
    let forward = move |g: &mut Graph<'_>, p: &Bound, x: &[Var]| {
        head.forward(g, p, x[0], false, &mut crate::seeded_rng(0, 0))
    };
    entries.extend(check_layer("mlp_head", &store, &[random(&[2, 6])?], &forward, eps)?);

    let passed = entries.iter().all(|e| e.max_rel_error < tolerance);
    Ok(GradCheckReport {
        entries,
        tolerance,
        eps,
        passed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeastSquaresReport {
    pub rho_per_dim: Vec<f64>,
    pub mean_rho: f64,
    /// Largest condition number of the regularized normal matrices.
    pub condition_number: f64,
    pub n_records: usize,
}

/// Best linear readout of the targets from text features, scored
/// out-of-sample with 2-fold cross-fitting (fit on even-indexed records,
/// predict odd ones, and vice versa). Features and targets are centred
/// with training-fold means, which stands in for an intercept.
pub fn least_squares_readout(records: &[FeatureRecord], ridge: f64) -> Result<LeastSquaresReport> {
    let with_text: Vec<&FeatureRecord> = records.iter().filter(|r| r.text.is_some()).collect();
    if with_text.len() < 50 {
        return Err(Error::Validation(format!(
            "least-squares readout needs at least 50 records with text, got {}",
            with_text.len()
        )));
    }
    let d = with_text[0].text.as_ref().map_or(0, Vec::len);
    let k = with_text[0].target.len();
    let n = with_text.len();
    let mut pred = vec![vec![0.0; k]; n];
    let mut condition_number: f64 = 0.0;
    for fold in 0..2 {
        let fit: Vec<usize> = (0..n).filter(|i| i % 2 == fold).collect();
        let held: Vec<usize> = (0..n).filter(|i| i % 2 != fold).collect();
        let mean = |rows: &[usize], get: &dyn Fn(usize) -> Vec<f64>, width: usize| {
            let mut m = vec![0.0; width];
            for &i in rows {
                for (a, b) in m.iter_mut().zip(get(i)) {
                    *a += b;
                }
            }
            m.iter_mut().for_each(|v| *v /= rows.len() as f64);
            m
        };
        let text = |i: usize| with_text[i].text.clone().expect("filtered");
        let target = |i: usize| with_text[i].target.clone();
        let mx = mean(&fit, &text, d);
        let my = mean(&fit, &target, k);
        let x = DMatrix::from_fn(fit.len(), d, |r, c| text(fit[r])[c] - mx[c]);
        let y = DMatrix::from_fn(fit.len(), k, |r, c| target(fit[r])[c] - my[c]);
        let gram = x.transpose() * &x;
        let eig = SymmetricEigen::new(gram);
        let shifted: Vec<f64> = eig.eigenvalues.iter().map(|e| e.max(0.0) + ridge).collect();
        let hi = shifted.iter().copied().fold(f64::MIN, f64::max);
        let lo = shifted.iter().copied().fold(f64::MAX, f64::min);
        condition_number = condition_number.max(hi / lo);
        let v = &eig.eigenvectors;
        let mut rhs = v.transpose() * (x.transpose() * &y);
        for (r, s) in shifted.iter().enumerate() {
            for c in 0..k {
                rhs[(r, c)] /= s;
            }
        }
        let w = v * rhs;
        for &i in &held {
            let t = text(i);
            for c in 0..k {
                let mut acc = my[c];
                for j in 0..d {
                    acc += (t[j] - mx[j]) * w[(j, c)];
                }
                pred[i][c] = acc;
            }
        }
    }
    let rho_per_dim: Vec<f64> = (0..k)
        .map(|c| {
            let p: Vec<f64> = pred.iter().map(|r| r[c]).collect();
            let t: Vec<f64> = with_text.iter().map(|r| r.target[c]).collect();
            naive_pearson(&p, &t).unwrap_or(0.0)
        })
        .collect();
    Ok(LeastSquaresReport {
        mean_rho: rho_per_dim.iter().sum::<f64>() / k as f64,
        rho_per_dim,
        condition_number,
        n_records: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_reference_values() {
        // values from a 30-digit evaluation
        for (x, want) in [
            (0.5, 0.520_499_877_813_046_5),
            (1.0, 0.842_700_792_949_714_9),
            (-2.0, -0.995_322_265_018_952_7),
            (3.5, 0.999_999_256_901_627_7),
        ] {
            assert!((erf(x) - want).abs() < 4e-15, "erf({x})");
        }
        assert_eq!(erf(0.0), 0.0);
    }

    #[test]
    fn finite_differences_on_analytic_cases() {
        let g = finite_diff_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-4).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let g = finite_diff_grad(|x| x.iter().sum(), &[0.5, -1.0, 3.0], 0.25).unwrap();
        assert_eq!(g, vec![1.0, 1.0, 1.0]);
        let err = finite_diff_grad(|x| if x[1] > 0.0 { f64::NAN } else { 0.0 }, &[0.0, 0.0], 1e-4).unwrap_err();
        assert!(err.to_string().contains("coordinate 1"));
    }

    #[test]
    fn attention_oracle_trivial_cases() {
        let v = vec![vec![3.0, -1.0]];
        assert_eq!(naive_attention(&[1.0, 2.0], &[vec![0.3, 0.1]], &v, &[true], 1.0).unwrap(), v[0]);
        let keys = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let values = vec![vec![2.0, 0.0], vec![0.0, 4.0]];
        let out = naive_attention(&[0.7, -0.2], &keys, &values, &[true, true], 1.0).unwrap();
        assert_eq!(out, vec![1.0, 2.0]);
    }

    #[test]
    fn brute_force_scan_small_cases() {
        let s = |xs: &[f64]| xs.iter().map(|&x| Some(x)).collect::<Vec<_>>();
        assert_eq!(brute_force_stop_epoch(&s(&[0.1, 0.2, 0.3]), 2), None);
        assert_eq!(brute_force_stop_epoch(&s(&[0.5, 0.1, 0.5]), 2), Some(3));
        assert_eq!(brute_force_stop_epoch(&s(&[0.1, 0.5, 0.4, 0.6, 0.2, 0.3]), 2), Some(6));
    }
}
