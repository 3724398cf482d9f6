//! Layers assembled from tape primitives.

use rand::Rng;

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{MadiError, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_xavier(format!("{name}.w"), &[d_in, d_out], rng)?;
        let b = if bias {
            Some(store.add_zeros(format!("{name}.b"), &[d_out])?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    /// A projection whose weight starts at zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let w = store.add_zeros(format!("{name}.w"), &[d_in, d_out])?;
        Ok(Linear { w, b: None })
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let w = t.param(s, self.w);
        let y = t.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = t.param(s, b);
                t.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

/// Row-wise layer norm with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add_filled(format!("{name}.g"), &[dim], 1.0)?,
            bias: store.add_zeros(format!("{name}.b"), &[dim])?,
        })
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let n = t.layer_norm_rows(x, LN_EPS)?;
        let g = t.param(s, self.gain);
        let b = t.param(s, self.bias);
        let y = t.mul_row(n, g)?;
        t.add_row(y, b)
    }
}

/// Multi-head scaled dot-product attention with bias-free projections.
/// Serves as self-attention (`kv == q`) and cross-attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub causal: bool,
}

impl Attention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        causal: bool,
        zero_output: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(MadiError::config(format!(
                "{name}: dimension {dim} not divisible into {heads} heads"
            )));
        }
        let wq = Linear::new(store, &format!("{name}.q"), dim, dim, false, rng)?;
        let wk = Linear::new(store, &format!("{name}.k"), dim, dim, false, rng)?;
        let wv = Linear::new(store, &format!("{name}.v"), dim, dim, false, rng)?;
        let wo = if zero_output {
            Linear::zeroed(store, &format!("{name}.o"), dim, dim)?
        } else {
            Linear::new(store, &format!("{name}.o"), dim, dim, false, rng)?
        };
        Ok(Attention {
            wq,
            wk,
            wv,
            wo,
            heads,
            causal,
        })
    }

    /// Attends from the rows of `q` over the rows of `kv`.
    pub fn forward(&self, t: &mut Tape, s: &ParamStore, q: Var, kv: Var) -> Result<Var> {
        let dim = t.shape(q)[1];
        if t.shape(kv)[1] != dim {
            return Err(MadiError::Shape {
                context: "attention key/value width".into(),
                expected: vec![t.shape(kv)[0], dim],
                actual: t.shape(kv).to_vec(),
            });
        }
        let qp = self.wq.forward(t, s, q)?;
        let kp = self.wk.forward(t, s, kv)?;
        let vp = self.wv.forward(t, s, kv)?;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (qp, kp, vp)
            } else {
                (
                    t.slice_cols(qp, h * dh, dh)?,
                    t.slice_cols(kp, h * dh, dh)?,
                    t.slice_cols(vp, h * dh, dh)?,
                )
            };
            let sc = t.matmul_t(qh, kh)?;
            let sc = t.scale(sc, scale)?;
            let a = t.softmax_rows(sc, self.causal)?;
            outs.push(t.matmul(a, vh)?);
        }
        let cat = t.concat_cols(&outs)?;
        self.wo.forward(t, s, cat)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        causal: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, causal, false, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, 2 * dim, true, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), 2 * dim, dim, true, rng)?,
        })
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ln1.forward(t, s, x)?;
        let a = self.attn.forward(t, s, h, h)?;
        let x = t.add(x, a)?;
        let h = self.ln2.forward(t, s, x)?;
        let h = self.ff1.forward(t, s, h)?;
        let h = t.gelu(h)?;
        let h = self.ff2.forward(t, s, h)?;
        t.add(x, h)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp {
            l1: Linear::new(store, &format!("{name}.l1"), d_in, d_hidden, true, rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), d_hidden, d_out, true, rng)?,
        })
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(t, s, x)?;
        let h = t.gelu(h)?;
        self.l2.forward(t, s, h)
    }
}

/// Plain-array attention used as an oracle in tests: softmax(q kᵀ / √d) v
/// for a single head with identity projections.
pub fn reference_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<Vec<f64>> {
    let d = q.cols() as f64;
    (0..q.rows())
        .map(|i| {
            let sc: Vec<f64> = (0..k.rows())
                .map(|j| q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let m = sc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = sc.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v.cols())
                .map(|c| (0..v.rows()).map(|j| e[j] / z * v.get(j, c)).sum())
                .collect()
        })
        .collect()
}
