//! Critical-token highlighting: question-conditioned and intrinsic query
//! branches whose summed outputs are prepended to each modality sequence.

use rand::Rng;

use crate::diffcore::nn::Attention;
use crate::diffcore::{ParamId, ParamStore, Tape, Var};
use crate::error::{MadiError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Numeric,
    Visual,
}

/// Learnable queries plus the five single-head cross-attentions that use them.
#[derive(Clone, Debug)]
pub struct HighlightQueries {
    pub queries: usize,
    pub q_question: ParamId,
    pub q_numeric: ParamId,
    pub q_visual: ParamId,
    pub pool: Attention,
    pub numeric_q: Attention,
    pub numeric_s: Attention,
    pub visual_q: Attention,
    pub visual_s: Attention,
}

impl HighlightQueries {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, queries: usize, rng: &mut R) -> Result<Self> {
        if queries == 0 {
            return Err(MadiError::config("highlight query count must be at least 1"));
        }
        let mut q = |tag: &str, rng: &mut R| store.add_xavier(format!("{name}.{tag}"), &[queries, dim], rng);
        let q_question = q("qq", rng)?;
        let q_numeric = q("qn", rng)?;
        let q_visual = q("qv", rng)?;
        let mut attn = |tag: &str| Attention::new(store, &format!("{name}.{tag}"), dim, 1, false, false, rng);
        Ok(HighlightQueries {
            queries,
            q_question,
            q_numeric,
            q_visual,
            pool: attn("pool")?,
            numeric_q: attn("nq")?,
            numeric_s: attn("ns")?,
            visual_q: attn("vq")?,
            visual_s: attn("vs")?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.q_question, self.q_numeric, self.q_visual]
    }

    /// Attention-pools a variable-length question into `H` rows.
    pub fn pool_question(&self, t: &mut Tape, s: &ParamStore, eq: Var) -> Result<Var> {
        if t.shape(eq)[0] == 0 {
            return Err(MadiError::Validation("question has no tokens".into()));
        }
        let qq = t.param(s, self.q_question);
        self.pool.forward(t, s, qq, eq)
    }

    /// Sum of the question-conditioned and intrinsic branches for one modality.
    pub fn highlight(&self, t: &mut Tape, s: &ParamStore, modality: Modality, e: Var, pooled_q: Var) -> Result<Var> {
        let (qa, sa, own) = match modality {
            Modality::Numeric => (&self.numeric_q, &self.numeric_s, self.q_numeric),
            Modality::Visual => (&self.visual_q, &self.visual_s, self.q_visual),
        };
        let hq = qa.forward(t, s, pooled_q, e)?;
        let qo = t.param(s, own);
        let hs = sa.forward(t, s, qo, e)?;
        t.add(hq, hs)
    }
}

/// `[h; e]` along rows.
pub fn prepend(t: &mut Tape, h: Var, e: Var) -> Result<Var> {
    if t.shape(h)[0] == 0 {
        return Err(MadiError::contract("prepend needs at least one highlight row"));
    }
    if t.shape(h)[1] != t.shape(e)[1] {
        return Err(MadiError::Shape {
            context: "highlight vs token width".into(),
            expected: vec![t.shape(h)[0], t.shape(e)[1]],
            actual: t.shape(h).to_vec(),
        });
    }
    t.concat_rows(&[h, e])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::nn::reference_attention;
    use crate::diffcore::{finite_diff_check, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn with_identity_values(store: &mut ParamStore, h: &HighlightQueries, dim: usize) {
        for a in [&h.pool, &h.numeric_q, &h.numeric_s, &h.visual_q, &h.visual_s] {
            store.set(a.wv.w, Tensor::identity(dim)).unwrap();
            store.set(a.wo.w, Tensor::identity(dim)).unwrap();
        }
    }

    fn setup(dim: usize, queries: usize, seed: u64) -> (ParamStore, HighlightQueries, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = HighlightQueries::new(&mut store, "cth", dim, queries, &mut rng).unwrap();
        (store, h, rng)
    }

    #[test]
    fn pooling_examples() {
        let (mut store, h, mut rng) = setup(8, 4, 0);
        with_identity_values(&mut store, &h, 8);
        let tok = rand_tensor(&mut rng, 1, 8);
        let mut t = Tape::new();
        let eq = t.constant(tok.clone());
        let p = h.pool_question(&mut t, &store, eq).unwrap();
        assert_eq!(t.shape(p), &[4, 8]);
        for r in 0..4 {
            for (a, b) in t.value(p).row(r).iter().zip(tok.row(0)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        let same = Tensor::from_rows(&vec![tok.row(0).to_vec(); 5]).unwrap();
        let eq = t.constant(same);
        let p = h.pool_question(&mut t, &store, eq).unwrap();
        for r in 0..4 {
            for (a, b) in t.value(p).row(r).iter().zip(tok.row(0)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        let eq = t.constant(rand_tensor(&mut rng, 11, 8));
        let p = h.pool_question(&mut t, &store, eq).unwrap();
        assert_eq!(t.shape(p), &[4, 8]);
        assert!(HighlightQueries::new(&mut store, "x", 8, 0, &mut rng).is_err());
    }

    #[test]
    fn equal_values_fuse_to_twice_the_value() {
        let (mut store, h, mut rng) = setup(6, 4, 1);
        with_identity_values(&mut store, &h, 6);
        let v = rand_tensor(&mut rng, 1, 6);
        let mut t = Tape::new();
        let e = t.constant(Tensor::from_rows(&vec![v.row(0).to_vec(); 7]).unwrap());
        let eq = t.constant(rand_tensor(&mut rng, 3, 6));
        let pq = h.pool_question(&mut t, &store, eq).unwrap();
        let out = h.highlight(&mut t, &store, Modality::Visual, e, pq).unwrap();
        assert_eq!(t.shape(out), &[4, 6]);
        for r in 0..4 {
            for (a, b) in t.value(out).row(r).iter().zip(v.row(0)) {
                assert!((a - 2.0 * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn highlight_matches_attention_oracle() {
        let (mut store, h, mut rng) = setup(6, 3, 2);
        // identity values and outputs leave only the query/key projections
        with_identity_values(&mut store, &h, 6);
        let e = rand_tensor(&mut rng, 5, 6);
        let pq = rand_tensor(&mut rng, 3, 6);
        let mut t = Tape::new();
        let (ev, pv) = (t.constant(e.clone()), t.constant(pq.clone()));
        let out = h.highlight(&mut t, &store, Modality::Numeric, ev, pv).unwrap();

        let proj = |x: &Tensor, w: &Tensor| {
            let rows: Vec<Vec<f64>> = (0..x.rows())
                .map(|i| (0..w.cols()).map(|j| (0..x.cols()).map(|k| x.get(i, k) * w.get(k, j)).sum()).collect())
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let branch = |a: &Attention, q: &Tensor| {
            reference_attention(&proj(q, store.get(a.wq.w)), &proj(&e, store.get(a.wk.w)), &e)
        };
        let x = branch(&h.numeric_q, &pq);
        let y = branch(&h.numeric_s, store.get(h.q_numeric));
        for r in 0..3 {
            for c in 0..6 {
                assert!((t.value(out).get(r, c) - (x[r][c] + y[r][c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prepend_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let e = rand_tensor(&mut rng, 3, 4);
        let (hv, ev) = (t.constant(rand_tensor(&mut rng, 2, 4)), t.constant(e.clone()));
        let out = prepend(&mut t, hv, ev).unwrap();
        assert_eq!(t.shape(out), &[5, 4]);
        let tail = t.slice_rows(out, 2, 3).unwrap();
        assert_eq!(t.value(tail), &e);
        let empty = t.constant(Tensor::zeros(&[0, 4]));
        assert!(prepend(&mut t, empty, ev).is_err());
    }

    #[test]
    fn gradient_check() {
        let (mut store, h, mut rng) = setup(6, 2, 4);
        let e = store.add("e", rand_tensor(&mut rng, 4, 6)).unwrap();
        let q = store.add("q", rand_tensor(&mut rng, 3, 6)).unwrap();
        let mut ids = h.params();
        ids.extend([h.pool.wq.w, h.visual_s.wv.w, e, q]);
        let err = finite_diff_check(
            |t, s| {
                let (ev, qv) = (t.param(s, e), t.param(s, q));
                let pq = h.pool_question(t, s, qv)?;
                let a = h.highlight(t, s, Modality::Numeric, ev, pq)?;
                let b = h.highlight(t, s, Modality::Visual, ev, pq)?;
                let c = prepend(t, a, b)?;
                let g = t.gelu(c)?;
                t.sum(g)
            },
            &mut store,
            &ids,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
