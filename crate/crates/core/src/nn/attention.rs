use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Bound, LinearLayer, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

/// Where the self-attention block applies layer normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// `norm(x + attn(x))`
    #[default]
    Post,
    /// `x + attn(norm(x))`
    Pre,
    /// `x + attn(x)`
    None,
}

/// Scaled dot-product attention split over `heads` column groups.
///
/// `q` is `[Tq×d]`, `k` and `v` are `[Tk×d]`. Keys whose `key_mask` entry is
/// false get exactly zero weight. Returns the `[Tq×d]` readout and the
/// per-head `[Tq×Tk]` weight matrices.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&[bool]>,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = g.shape(q)[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Parameter(format!("width {d} not divisible by {heads} heads")));
    }
    if g.shape(k) != g.shape(v) || g.shape(k)[1] != d {
        return Err(Error::dim("attention", g.shape(k), g.shape(v)));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = g.matmul_bt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let w = g.softmax(scores, key_mask)?;
        outs.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((out, weights))
}

fn check_mask(mask: &[bool], len: usize) -> Result<()> {
    if mask.len() != len {
        return Err(Error::dim("attention mask", &[len], &[mask.len()]));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::DegenerateMask { row: 0 });
    }
    Ok(())
}

fn check_segments(segments: &[Range<usize>], rows: usize) -> Result<()> {
    let mut next = 0;
    for s in segments {
        if s.start != next || s.is_empty() {
            return Err(Error::Contract(format!(
                "segments must tile the rows contiguously and be nonempty, got {segments:?}"
            )));
        }
        next = s.end;
    }
    if next != rows {
        return Err(Error::dim("segments", &[rows], &[next]));
    }
    Ok(())
}

/// Multi-head self-attention with a residual connection and layer norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelfAttentionBlock {
    pub query: LinearLayer,
    pub key: LinearLayer,
    pub value: LinearLayer,
    pub output: LinearLayer,
    pub norm_scale: ParamId,
    pub norm_shift: ParamId,
    pub heads: usize,
    pub width: usize,
    pub norm: NormPlacement,
}

/// Valid-position layout of the rows entering a self-attention block.
enum Layout<'m> {
    /// One sequence with a key/validity mask.
    Masked(&'m [bool]),
    /// Several fully valid sequences stacked row-wise.
    Segments(&'m [Range<usize>]),
}

impl SelfAttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        norm: NormPlacement,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Parameter(format!(
                "{name}: width {width} not divisible by {heads} heads"
            )));
        }
        Ok(SelfAttentionBlock {
            query: LinearLayer::new(store, &format!("{name}.query"), width, width, rng)?,
            key: LinearLayer::new(store, &format!("{name}.key"), width, width, rng)?,
            value: LinearLayer::new(store, &format!("{name}.value"), width, width, rng)?,
            output: LinearLayer::new(store, &format!("{name}.output"), width, width, rng)?,
            norm_scale: store.add(format!("{name}.norm.scale"), Tensor::vector(vec![1.0; width]), false),
            norm_shift: store.add(format!("{name}.norm.shift"), Tensor::zeros(vec![width])?, false),
            heads,
            width,
            norm,
        })
    }

    /// Attends within one `[T×d]` sequence. Masked positions are excluded as
    /// keys and their output rows are zero.
    pub fn forward(&self, g: &mut Graph<'_>, p: &Bound, x: Var, mask: &[bool]) -> Result<Var> {
        self.check_input(g, x)?;
        check_mask(mask, g.shape(x)[0])?;
        let y = self.run(g, p, x, Layout::Masked(mask))?;
        g.mask_rows(y, mask)
    }

    /// Attends independently within each row range of a stacked `[N×d]`
    /// input whose rows are all valid.
    pub fn forward_segments(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        x: Var,
        segments: &[Range<usize>],
    ) -> Result<Var> {
        self.check_input(g, x)?;
        check_segments(segments, g.shape(x)[0])?;
        self.run(g, p, x, Layout::Segments(segments))
    }

    fn check_input(&self, g: &Graph<'_>, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.width {
            return Err(Error::dim("self_attention", s, &[self.width]));
        }
        Ok(())
    }

    fn run(&self, g: &mut Graph<'_>, p: &Bound, x: Var, layout: Layout<'_>) -> Result<Var> {
        let normed = |g: &mut Graph<'_>, v: Var| g.layer_norm(v, p[self.norm_scale], p[self.norm_shift], NORM_EPS);
        let src = match self.norm {
            NormPlacement::Pre => normed(g, x)?,
            _ => x,
        };
        let q = self.query.forward(g, p, src)?;
        let k = self.key.forward(g, p, src)?;
        let v = self.value.forward(g, p, src)?;
        let mixed = match layout {
            Layout::Masked(mask) => multi_head_attention(g, q, k, v, Some(mask), self.heads)?.0,
            Layout::Segments(segments) => {
                let mut parts = Vec::with_capacity(segments.len());
                for s in segments {
                    let qs = g.slice_rows(q, s.start, s.len())?;
                    let ks = g.slice_rows(k, s.start, s.len())?;
                    let vs = g.slice_rows(v, s.start, s.len())?;
                    parts.push(multi_head_attention(g, qs, ks, vs, None, self.heads)?.0);
                }
                g.concat_rows(&parts)?
            }
        };
        let attended = self.output.forward(g, p, mixed)?;
        let sum = g.add(x, attended)?;
        match self.norm {
            NormPlacement::Post => normed(g, sum),
            _ => Ok(sum),
        }
    }
}

/// One attention readout of a key/value sequence by a single query vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossAttentionBlock {
    pub query: LinearLayer,
    pub key: LinearLayer,
    pub value: LinearLayer,
    pub output: LinearLayer,
    pub heads: usize,
    pub width: usize,
}

impl CrossAttentionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_query: usize,
        d_kv: usize,
        width: usize,
        d_out: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Parameter(format!(
                "{name}: width {width} not divisible by {heads} heads"
            )));
        }
        Ok(CrossAttentionBlock {
            query: LinearLayer::new(store, &format!("{name}.query"), d_query, width, rng)?,
            key: LinearLayer::new(store, &format!("{name}.key"), d_kv, width, rng)?,
            value: LinearLayer::new(store, &format!("{name}.value"), d_kv, width, rng)?,
            output: LinearLayer::new(store, &format!("{name}.output"), width, d_out, rng)?,
            heads,
            width,
        })
    }

    /// Reads out `kv[T×d_kv]` with `query[d_q]`, giving `[d_out]`.
    pub fn forward(&self, g: &mut Graph<'_>, p: &Bound, query: Var, kv: Var, mask: &[bool]) -> Result<Var> {
        Ok(self.forward_with_weights(g, p, query, kv, mask)?.0)
    }

    /// As [`forward`](Self::forward), also returning the per-head `[1×T]`
    /// attention weights.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        query: Var,
        kv: Var,
        mask: &[bool],
    ) -> Result<(Var, Vec<Var>)> {
        let qs = g.shape(query).to_vec();
        if qs.iter().product::<usize>() != self.query.d_in {
            return Err(Error::dim("cross_attention query", &qs, &[self.query.d_in]));
        }
        let kvs = g.shape(kv);
        if kvs.len() != 2 || kvs[1] != self.key.d_in {
            return Err(Error::dim("cross_attention keys", kvs, &[self.key.d_in]));
        }
        check_mask(mask, kvs[0])?;
        let query = if qs.len() == 2 {
            query
        } else {
            g.reshape(query, vec![1, self.query.d_in])?
        };
        let q = self.query.forward(g, p, query)?;
        let k = self.key.forward(g, p, kv)?;
        let v = self.value.forward(g, p, kv)?;
        let (mixed, weights) = multi_head_attention(g, q, k, v, Some(mask), self.heads)?;
        let out = self.output.forward(g, p, mixed)?;
        Ok((g.reshape(out, vec![self.output.d_out])?, weights))
    }

    /// Batched readout: row `i` of `queries[B×d_q]` reads the fully valid
    /// row range `segments[i]` of the stacked `kv[N×d_kv]`. Returns `[B×d_out]`.
    pub fn forward_segments(
        &self,
        g: &mut Graph<'_>,
        p: &Bound,
        queries: Var,
        kv: Var,
        segments: &[Range<usize>],
    ) -> Result<Var> {
        let qs = g.shape(queries);
        if qs.len() != 2 || qs[0] != segments.len() || qs[1] != self.query.d_in {
            return Err(Error::dim("cross_attention queries", qs, &[segments.len(), self.query.d_in]));
        }
        let kvs = g.shape(kv);
        if kvs.len() != 2 || kvs[1] != self.key.d_in {
            return Err(Error::dim("cross_attention keys", kvs, &[self.key.d_in]));
        }
        check_segments(segments, kvs[0])?;
        let q = self.query.forward(g, p, queries)?;
        let k = self.key.forward(g, p, kv)?;
        let v = self.value.forward(g, p, kv)?;
        let mut parts = Vec::with_capacity(segments.len());
        for (i, s) in segments.iter().enumerate() {
            let qi = g.slice_rows(q, i, 1)?;
            let ks = g.slice_rows(k, s.start, s.len())?;
            let vs = g.slice_rows(v, s.start, s.len())?;
            parts.push(multi_head_attention(g, qi, ks, vs, None, self.heads)?.0);
        }
        let mixed = g.concat_rows(&parts)?;
        self.output.forward(g, p, mixed)
    }
}
