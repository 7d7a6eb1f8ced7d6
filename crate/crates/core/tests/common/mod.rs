#![allow(dead_code)]

use rand::Rng;
use taemi_core::oracle::{finite_diff_grad, relative_error};
use taemi_core::tensor::{Graph, Tensor, Var};
use taemi_core::{seeded_rng, Result};

pub fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded_rng(seed, 99);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::new(shape.to_vec(), random_vec(shape.iter().product(), seed)).unwrap()
}

/// Reduces `out` to a scalar with fixed non-uniform weights so that every
/// output element matters.
pub fn weighted_sum(g: &mut Graph<'_>, out: Var) -> Var {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.5 + ((i * 7 + 3) % 11) as f64 / 10.0).collect();
    let w = g.constant(Tensor::new(shape, w).unwrap());
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

/// Largest relative error between backward and central differences for a
/// scalar function of one input tensor.
pub fn max_grad_error<F>(x: &Tensor, build: F, eps: f64) -> f64
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone().requiring_grad());
    let out = build(&mut g, xv).unwrap();
    let loss = weighted_sum(&mut g, out);
    g.backward(loss).unwrap();
    let analytic = g.grad(xv).unwrap().to_vec();

    let shape = x.shape().to_vec();
    let numeric = finite_diff_grad(
        |v| {
            let mut g = Graph::new();
            let xv = g.constant(Tensor::new(shape.clone(), v.to_vec()).unwrap());
            let out = build(&mut g, xv).unwrap();
            let loss = weighted_sum(&mut g, out);
            g.scalar(loss).unwrap()
        },
        x.data(),
        eps,
    )
    .unwrap();
    analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
