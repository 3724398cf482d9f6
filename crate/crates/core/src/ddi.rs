//! Shared hierarchical residual quantisation, disentanglement losses and
//! unique-signal cross-attention.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::nn::{Attention, Linear, Mlp};
use crate::diffcore::{ParamStore, Tape, Tensor, Var};
use crate::error::{MadiError, Result};
use crate::pa::{infonce, NORM_FLOOR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdiConfig {
    /// Quantisation width.
    pub d: usize,
    /// Codes at the coarsest level; level `m` has `k · 2^(m-1)`.
    pub k: usize,
    pub levels: usize,
    pub gamma: f64,
    pub eps: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for DdiConfig {
    fn default() -> Self {
        DdiConfig {
            d: 32,
            k: 16,
            levels: 3,
            gamma: 0.99,
            eps: 1e-5,
            alpha: 5.0,
            beta: 1.0,
        }
    }
}

impl DdiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(MadiError::config("at least one codebook level is required"));
        }
        if self.levels > 16 {
            return Err(MadiError::config("at most 16 codebook levels are supported"));
        }
        if self.k == 0 || self.d == 0 {
            return Err(MadiError::config("codebook size and width must be positive"));
        }
        if !(0.0..1.0).contains(&self.gamma) || self.eps <= 0.0 {
            return Err(MadiError::config("EMA decay must lie in [0, 1) and epsilon be positive"));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(MadiError::config("DDI loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Averages non-overlapping runs of `w` rows (the last run may be shorter)
/// and writes each mean back to every row of its run.
pub fn pool_broadcast(x: &Tensor, w: usize) -> Tensor {
    let w = w.max(1);
    let (n, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    if w == 1 {
        return out;
    }
    let mut start = 0;
    while start < n {
        let end = (start + w).min(n);
        let mut mean = vec![0.0; d];
        for r in start..end {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        let len = (end - start) as f64;
        for m in &mut mean {
            *m /= len;
        }
        for r in start..end {
            out.row_mut(r).copy_from_slice(&mean);
        }
        start = end;
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest code per row (squared Euclidean, ties to the lowest index).
pub fn vq_assign(codes: &Tensor, vectors: &Tensor) -> Result<(Vec<usize>, Tensor)> {
    if codes.rank() != 2 || codes.rows() == 0 {
        return Err(MadiError::contract("vector quantisation needs a non-empty codebook"));
    }
    if vectors.cols() != codes.cols() {
        return Err(MadiError::Shape {
            context: "vq_assign vector width".into(),
            expected: vec![vectors.rows(), codes.cols()],
            actual: vectors.shape().to_vec(),
        });
    }
    let mut idx = Vec::with_capacity(vectors.rows());
    let mut data = Vec::with_capacity(vectors.numel());
    for r in 0..vectors.rows() {
        let v = vectors.row(r);
        let mut best = (0, f64::INFINITY);
        for k in 0..codes.rows() {
            let dist = sq_dist(v, codes.row(k));
            if dist < best.1 {
                best = (k, dist);
            }
        }
        idx.push(best.0);
        data.extend_from_slice(codes.row(best.0));
    }
    Ok((idx, Tensor::matrix(vectors.rows(), codes.cols(), data)?))
}

/// One level of the hierarchy with its EMA accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookLevel {
    pub codes: Tensor,
    pub counts: Vec<f64>,
    pub sums: Tensor,
    pub window: usize,
}

/// Codebooks shared by both modalities. Codes are maintained by EMA, never
/// by gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookHierarchy {
    pub levels: Vec<CodebookLevel>,
    pub gamma: f64,
    pub eps: f64,
    pub initialized: bool,
}

fn round_f32(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

impl CodebookHierarchy {
    pub fn new(cfg: &DdiConfig) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.levels;
        let levels = (1..=m)
            .map(|level| {
                let size = cfg.k << (level - 1);
                CodebookLevel {
                    codes: Tensor::zeros(&[size, cfg.d]),
                    counts: vec![1.0; size],
                    sums: Tensor::zeros(&[size, cfg.d]),
                    window: 1 << (m - level),
                }
            })
            .collect();
        Ok(CodebookHierarchy {
            levels,
            gamma: cfg.gamma,
            eps: cfg.eps,
            initialized: false,
        })
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.codes.rows()).collect()
    }

    pub fn windows(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.window).collect()
    }

    pub fn dim(&self) -> usize {
        self.levels[0].codes.cols()
    }

    /// Sets the codes of a level and resets its accumulators to match.
    pub fn set_codes(&mut self, level: usize, mut codes: Tensor) -> Result<()> {
        let l = &mut self.levels[level];
        if codes.shape() != l.codes.shape() {
            return Err(MadiError::Shape {
                context: format!("codebook level {level}"),
                expected: l.codes.shape().to_vec(),
                actual: codes.shape().to_vec(),
            });
        }
        codes.round_to_f32();
        let mut sums = codes.clone();
        for v in sums.data_mut() {
            *v *= 1.0 + self.eps;
        }
        l.counts = vec![1.0; codes.rows()];
        l.codes = codes;
        l.sums = sums;
        Ok(())
    }

    /// Seeds every level from pooled residuals of a batch of down-projected
    /// token matrices, plus small noise.
    pub fn init_from<R: Rng>(&mut self, samples: &[Tensor], rng: &mut R) -> Result<()> {
        if samples.is_empty() {
            return Err(MadiError::contract("codebook initialisation needs samples"));
        }
        let mut residuals: Vec<Tensor> = samples.to_vec();
        for li in 0..self.levels.len() {
            let w = self.levels[li].window;
            let mut pool = Vec::new();
            for r in &residuals {
                let p = pool_broadcast(r, w);
                for start in (0..p.rows()).step_by(w) {
                    pool.push(p.row(start).to_vec());
                }
            }
            let rms = (pool.iter().flatten().map(|v| v * v).sum::<f64>()
                / (pool.len() * self.dim()) as f64)
                .sqrt();
            let noise = Normal::new(0.0, 0.01 * rms.max(1e-6)).expect("valid std");
            let size = self.levels[li].codes.rows();
            let mut data = Vec::with_capacity(size * self.dim());
            for _ in 0..size {
                let pick = &pool[rng.random_range(0..pool.len())];
                data.extend(pick.iter().map(|v| v + noise.sample(rng)));
            }
            self.set_codes(li, Tensor::matrix(size, self.dim(), data)?)?;
            for r in &mut residuals {
                let pooled = pool_broadcast(r, w);
                let (_, q) = vq_assign(&self.levels[li].codes, &pooled)?;
                for (a, b) in r.data_mut().iter_mut().zip(q.data()) {
                    *a -= b;
                }
            }
        }
        self.initialized = true;
        Ok(())
    }

    /// Coarse-to-fine quantisation of `x` (`Ñ × d`), off the tape.
    pub fn quantize(&self, x: &Tensor) -> Result<Quantized> {
        let mut residual = x.clone();
        let mut total = Tensor::zeros(x.shape());
        let mut indices = Vec::with_capacity(self.levels.len());
        let mut pooled_all = Vec::with_capacity(self.levels.len());
        let mut per_level = Vec::with_capacity(self.levels.len());
        let mut residual_norms = Vec::with_capacity(self.levels.len());
        for l in &self.levels {
            let pooled = pool_broadcast(&residual, l.window);
            let (idx, q) = vq_assign(&l.codes, &pooled)?;
            for (r, v) in residual.data_mut().iter_mut().zip(q.data()) {
                *r -= v;
            }
            for (t, v) in total.data_mut().iter_mut().zip(q.data()) {
                *t += v;
            }
            let norm = (0..residual.rows())
                .map(|i| residual.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
                .sum::<f64>()
                / residual.rows() as f64;
            residual_norms.push(norm);
            indices.push(idx);
            pooled_all.push(pooled);
            per_level.push(q);
        }
        Ok(Quantized {
            total,
            per_level,
            indices,
            pooled: pooled_all,
            residual,
            residual_norms,
        })
    }

    /// EMA step from accumulated assignments. Codes with no assignment are
    /// left untouched.
    pub fn ema_update(&mut self, acc: &EmaAccumulator) -> Result<()> {
        if acc.levels.len() != self.levels.len() {
            return Err(MadiError::contract("accumulator does not match the hierarchy"));
        }
        let (g, eps) = (self.gamma, self.eps);
        for (l, (counts, sums)) in self.levels.iter_mut().zip(&acc.levels) {
            let d = l.codes.cols();
            for k in 0..l.codes.rows() {
                if counts[k] == 0.0 {
                    continue;
                }
                let n = g * l.counts[k] + (1.0 - g) * counts[k];
                l.counts[k] = n as f32 as f64;
                let sum_row = &sums[k * d..(k + 1) * d];
                let m_row = l.sums.row_mut(k);
                for (m, s) in m_row.iter_mut().zip(sum_row) {
                    *m = g * *m + (1.0 - g) * s;
                }
                round_f32(m_row);
                let m_row = l.sums.row(k).to_vec();
                let denom = l.counts[k] + eps;
                let c_row = l.codes.row_mut(k);
                for (c, m) in c_row.iter_mut().zip(&m_row) {
                    *c = m / denom;
                }
                round_f32(c_row);
            }
        }
        Ok(())
    }
}

/// Result of quantising one token matrix.
#[derive(Clone, Debug)]
pub struct Quantized {
    /// Accumulated `Σ_m q^(m)`.
    pub total: Tensor,
    pub per_level: Vec<Tensor>,
    /// Per level, the chosen code of every row.
    pub indices: Vec<Vec<usize>>,
    /// Per level, the pooled residual each row was assigned from.
    pub pooled: Vec<Tensor>,
    /// Final residual `r^(M)`.
    pub residual: Tensor,
    pub residual_norms: Vec<f64>,
}

/// Batch statistics for one EMA update.
#[derive(Clone, Debug)]
pub struct EmaAccumulator {
    /// Per level: per-code assignment counts and flattened vector sums.
    pub levels: Vec<(Vec<f64>, Vec<f64>)>,
}

impl EmaAccumulator {
    pub fn new(h: &CodebookHierarchy) -> Self {
        EmaAccumulator {
            levels: h
                .levels
                .iter()
                .map(|l| (vec![0.0; l.codes.rows()], vec![0.0; l.codes.numel()]))
                .collect(),
        }
    }

    /// Adds every row's assignment; rows sharing a pooling window each count.
    pub fn add(&mut self, q: &Quantized) {
        for (li, (counts, sums)) in self.levels.iter_mut().enumerate() {
            let d = q.pooled[li].cols();
            for (r, &k) in q.indices[li].iter().enumerate() {
                counts[k] += 1.0;
                for (s, v) in sums[k * d..(k + 1) * d].iter_mut().zip(q.pooled[li].row(r)) {
                    *s += v;
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.levels.iter().all(|(c, _)| c.iter().all(|v| *v == 0.0))
    }
}

/// Common / unique split of one modality's tokens.
#[derive(Clone, Debug)]
pub struct Disentangled {
    pub e_tilde: Var,
    /// Straight-through quantised path (forward value `Σ q`).
    pub q_ste: Var,
    pub z: Var,
    pub u: Var,
    pub l_vq: Var,
    pub quantized: Option<Quantized>,
}

/// Trainable DDI parameters: shared projections, the continuous projector
/// used when quantisation is ablated, and the two interaction attentions.
#[derive(Clone, Debug)]
pub struct DdiModule {
    pub down: Linear,
    pub up: Linear,
    pub projector: Mlp,
    pub attn_n: Attention,
    pub attn_v: Attention,
}

impl DdiModule {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        cfg: &DdiConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(DdiModule {
            down: Linear::new(store, &format!("{name}.down"), dim, cfg.d, true, rng)?,
            up: Linear::new(store, &format!("{name}.up"), cfg.d, dim, true, rng)?,
            projector: Mlp::new(store, &format!("{name}.proj"), dim, dim, dim, rng)?,
            attn_n: Attention::new(store, &format!("{name}.attn_n"), dim, heads, false, true, rng)?,
            attn_v: Attention::new(store, &format!("{name}.attn_v"), dim, heads, false, true, rng)?,
        })
    }

    /// Down-projection `Ẽ` of a token matrix.
    pub fn project_down(&self, t: &mut Tape, s: &ParamStore, e: Var) -> Result<Var> {
        self.down.forward(t, s, e)
    }

    /// Quantised decomposition: `Z = up(STE(Σ q))`, `U = E − Z`, and the
    /// commitment loss `mean_j ‖Ẽ_j − sg(q_j)‖²`.
    pub fn rvq_forward(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        e: Var,
        h: &CodebookHierarchy,
    ) -> Result<Disentangled> {
        if !h.initialized {
            return Err(MadiError::contract("codebooks must be initialised before quantising"));
        }
        let et = self.project_down(t, s, e)?;
        let q = h.quantize(t.value(et))?;
        let qc = t.constant(q.total.clone());
        let q_ste = t.straight_through(et, qc)?;
        let z = self.up.forward(t, s, q_ste)?;
        let u = t.sub(e, z)?;
        let sq = t.stop_gradient(qc)?;
        let diff = t.sub(et, sq)?;
        let d2 = t.mul(diff, diff)?;
        let tot = t.sum(d2)?;
        let n = t.shape(et)[0] as f64;
        let l_vq = t.scale(tot, 1.0 / n)?;
        Ok(Disentangled {
            e_tilde: et,
            q_ste,
            z,
            u,
            l_vq,
            quantized: Some(q),
        })
    }

    /// Continuous stand-in: `Z` from the shared projector, no commitment term.
    pub fn projector_forward(&self, t: &mut Tape, s: &ParamStore, e: Var) -> Result<Disentangled> {
        let z = self.projector.forward(t, s, e)?;
        let u = t.sub(e, z)?;
        let zero = t.constant(Tensor::scalar(0.0));
        Ok(Disentangled {
            e_tilde: e,
            q_ste: z,
            z,
            u,
            l_vq: zero,
            quantized: None,
        })
    }

    /// `Ē^n = E^n + A_n(E^n, U^v)`, `Ē^v = E^v + A_v(E^v, U^n)`.
    pub fn unique_interaction(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        en: Var,
        ev: Var,
        un: Var,
        uv: Var,
    ) -> Result<(Var, Var)> {
        if t.shape(en) != t.shape(ev) {
            return Err(MadiError::Shape {
                context: "unique interaction numeric vs visual".into(),
                expected: t.shape(en).to_vec(),
                actual: t.shape(ev).to_vec(),
            });
        }
        let an = self.attn_n.forward(t, s, en, uv)?;
        let av = self.attn_v.forward(t, s, ev, un)?;
        Ok((t.add(en, an)?, t.add(ev, av)?))
    }
}

/// The three DDI terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct DdiLosses {
    pub vq: Var,
    pub com: Var,
    pub orth: Var,
    pub total: Var,
}

/// `L_vq + α·L_com + β·L_orth` for a pair of disentangled modalities.
pub fn ddi_loss(
    t: &mut Tape,
    n: &Disentangled,
    v: &Disentangled,
    alpha: f64,
    beta: f64,
    tau: f64,
) -> Result<DdiLosses> {
    if t.shape(n.z) != t.shape(v.z) {
        return Err(MadiError::Shape {
            context: "ddi loss numeric vs visual".into(),
            expected: t.shape(n.z).to_vec(),
            actual: t.shape(v.z).to_vec(),
        });
    }
    let vq = t.add(n.l_vq, v.l_vq)?;
    let c1 = infonce(t, n.z, v.z, tau, false)?;
    let c2 = infonce(t, v.z, n.z, tau, false)?;
    let c = t.add(c1, c2)?;
    let com = t.scale(c, 0.5)?;
    let sn = t.row_cosine(n.z, n.u, NORM_FLOOR)?;
    let sv = t.row_cosine(v.z, v.u, NORM_FLOOR)?;
    let an = t.abs(sn)?;
    let av = t.abs(sv)?;
    // summed over tokens, like the contrastive term
    let mn = t.sum(an)?;
    let mv = t.sum(av)?;
    let o = t.add(mn, mv)?;
    let orth = t.scale(o, 0.5)?;
    let total = weighted_sum(t, &[(vq, 1.0), (com, alpha), (orth, beta)])?;
    Ok(DdiLosses { vq, com, orth, total })
}

/// `Σ w_i · x_i` on the tape.
pub fn weighted_sum(t: &mut Tape, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(x, w) in terms {
        let y = if w == 1.0 { x } else { t.scale(x, w)? };
        acc = Some(match acc {
            Some(a) => t.add(a, y)?,
            None => y,
        });
    }
    acc.ok_or_else(|| MadiError::contract("weighted sum of nothing"))
}

#[cfg(test)]
mod tests;
