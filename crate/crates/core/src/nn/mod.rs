//! Layers of the fusion network: linear projection, masked multi-head
//! self-attention, single-query cross-attention and the prediction MLP.
//!
//! Layers only hold [`ParamId`] handles; the tensors live in a
//! [`ParamStore`] that is bound to a graph once per forward pass.

mod attention;
mod params;

pub use attention::{multi_head_attention, CrossAttentionBlock, NormPlacement, SelfAttentionBlock};
pub use params::{Bound, Param, ParamId, ParamStore};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// `x·W + b` along the last axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

/// Uniform(−1/√fan_in, 1/√fan_in) weights.
pub fn uniform_init<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("positive extents")
}

impl LinearLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::Parameter(format!("{name}: linear extents must be positive")));
        }
        let weight = store.add(format!("{name}.weight"), uniform_init(d_in, d_out, d_in, rng), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![d_out])?, false);
        Ok(LinearLayer {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    /// Applies the layer to `x[...×d_in]`, giving `[...×d_out]`.
    pub fn forward(&self, g: &mut Graph<'_>, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.d_in) {
            return Err(Error::dim("linear", &shape, &[self.d_in, self.d_out]));
        }
        let rows = shape.iter().product::<usize>() / self.d_in;
        let flat = if shape.len() == 2 {
            x
        } else {
            g.reshape(x, vec![rows, self.d_in])?
        };
        let y = g.matmul(flat, p[self.weight])?;
        let y = g.add(y, p[self.bias])?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = self.d_out;
            g.reshape(y, out_shape)
        }
    }
}

/// Prediction head: linear → GELU → dropout → linear.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlpHead {
    pub hidden: LinearLayer,
    pub output: LinearLayer,
    pub dropout: f64,
}

impl MlpHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Parameter(format!("{name}: dropout {dropout} not in [0, 1)")));
        }
        Ok(MlpHead {
            hidden: LinearLayer::new(store, &format!("{name}.hidden"), d_in, d_hidden, rng)?,
            output: LinearLayer::new(store, &format!("{name}.output"), d_hidden, d_out, rng)?,
            dropout,
        })
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        f: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let h = self.hidden.forward(g, p, f)?;
        let h = g.gelu(h);
        let h = g.dropout(h, self.dropout, train, rng)?;
        self.output.forward(g, p, h)
    }
}

/// Sinusoidal position codes for positions `0..len`, `[len×d]` row-major.
pub fn sinusoidal_positions(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    #[test]
    fn zero_input_and_zero_bias_give_zero() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(1, 0);
        let layer = LinearLayer::new(&mut store, "l", 5, 3, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(vec![5]).unwrap());
        let y = layer.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(y), &[3]);
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reference_projection_extents() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(2, 0);
        let audio = LinearLayer::new(&mut store, "audio", 1027, 512, &mut rng).unwrap();
        let text = LinearLayer::new(&mut store, "text", 768, 512, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let a = g.constant(Tensor::zeros(vec![3, 1027]).unwrap());
        let t = g.constant(Tensor::zeros(vec![768]).unwrap());
        let ya = audio.forward(&mut g, &p, a).unwrap();
        let yt = text.forward(&mut g, &p, t).unwrap();
        assert_eq!(g.shape(ya), &[3, 512]);
        assert_eq!(g.shape(yt), &[512]);
    }

    #[test]
    fn extent_mismatch_is_a_dimension_error() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(3, 0);
        let layer = LinearLayer::new(&mut store, "l", 4, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(vec![2, 5]).unwrap());
        assert!(matches!(layer.forward(&mut g, &p, x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let mut r1 = seeded_rng(9, 0);
        let mut r2 = seeded_rng(9, 0);
        let a = uniform_init(16, 8, 16, &mut r1);
        let b = uniform_init(16, 8, 16, &mut r2);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() < 0.25));
    }

    #[test]
    fn mlp_head_zero_weights_eval_gives_zero() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(4, 0);
        let head = MlpHead::new(&mut store, "mlp", 1792, 512, 6, 0.1, &mut rng).unwrap();
        for p in store.iter_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(Tensor::vector(vec![0.3; 1792]));
        let y = head.forward(&mut g, &p, f, false, &mut rng).unwrap();
        assert_eq!(g.shape(y), &[6]);
        assert_eq!(g.value(y), &[0.0; 6]);
    }

    #[test]
    fn mlp_head_rejects_wrong_fused_extent() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(5, 0);
        let head = MlpHead::new(&mut store, "mlp", 1792, 16, 6, 0.1, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(Tensor::vector(vec![0.0; 1791]));
        assert!(matches!(
            head.forward(&mut g, &p, f, false, &mut rng),
            Err(Error::Dimension { .. })
        ));
    }
}
