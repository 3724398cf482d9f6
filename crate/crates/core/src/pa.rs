//! Patch-wise contrastive alignment of numeric tokens to visual and caption
//! tokens.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{MadiError, Result};

/// Norm floor used by every cosine similarity.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub tau: f64,
    pub numeric_visual: bool,
    pub numeric_caption: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            tau: 0.07,
            numeric_visual: true,
            numeric_caption: true,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(MadiError::config(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Cosine-similarity InfoNCE summed over anchors; row `j` of `positives` is
/// the positive of anchor `j`, the other rows are its negatives. With
/// `stop_positives` no gradient reaches `positives`.
pub fn infonce(t: &mut Tape, anchors: Var, positives: Var, tau: f64, stop_positives: bool) -> Result<Var> {
    let (sa, sp) = (t.shape(anchors).to_vec(), t.shape(positives).to_vec());
    if sa.len() != 2 || sa != sp {
        return Err(MadiError::Shape {
            context: "infonce anchors vs positives".into(),
            expected: sa,
            actual: sp,
        });
    }
    if !(tau > 0.0) {
        return Err(MadiError::config(format!("temperature must be positive, got {tau}")));
    }
    let p = if stop_positives { t.stop_gradient(positives)? } else { positives };
    let an = t.normalize_rows(anchors, NORM_FLOOR)?;
    let pn = t.normalize_rows(p, NORM_FLOOR)?;
    let sim = t.matmul_t(an, pn)?;
    let logits = t.scale(sim, 1.0 / tau)?;
    let targets: Vec<usize> = (0..sa[0]).collect();
    t.cross_entropy_rows(logits, &targets)
}

/// `L^{n-v} + L^{n-s}` over the enabled pairs; disabled pairs contribute 0.
pub fn pa_loss(t: &mut Tape, en: Var, ev: Var, es: Var, cfg: &AlignmentConfig) -> Result<Var> {
    cfg.validate()?;
    let n = t.shape(en)[0];
    for (x, what) in [(ev, "visual"), (es, "caption")] {
        if t.shape(x)[0] != n {
            return Err(MadiError::Shape {
                context: format!("numeric vs {what} token rows"),
                expected: vec![n, t.shape(en)[1]],
                actual: t.shape(x).to_vec(),
            });
        }
    }
    let mut parts = Vec::new();
    if cfg.numeric_visual {
        parts.push(infonce(t, en, ev, cfg.tau, true)?);
    }
    if cfg.numeric_caption {
        parts.push(infonce(t, en, es, cfg.tau, true)?);
    }
    match parts.as_slice() {
        [] => Ok(t.constant(Tensor::scalar(0.0))),
        [one] => Ok(*one),
        [a, b] => t.add(*a, *b),
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_check, AdamW, AdamWConfig, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Straight-line O(Ñ²) InfoNCE.
    fn brute_infonce(a: &Tensor, p: &Tensor, tau: f64) -> f64 {
        let cos = |x: &[f64], y: &[f64]| {
            let d: f64 = x.iter().zip(y).map(|(u, v)| u * v).sum();
            let nx = x.iter().map(|u| u * u).sum::<f64>().sqrt();
            let ny = y.iter().map(|u| u * u).sum::<f64>().sqrt();
            d / (nx * ny)
        };
        let mut total = 0.0;
        for j in 0..a.rows() {
            let s: Vec<f64> = (0..p.rows()).map(|k| cos(a.row(j), p.row(k)) / tau).collect();
            let denom: f64 = s.iter().map(|v| v.exp()).sum();
            total -= (s[j].exp() / denom).ln();
        }
        total
    }

    fn eval(a: &Tensor, p: &Tensor, tau: f64) -> f64 {
        let mut t = Tape::new();
        let (av, pv) = (t.constant(a.clone()), t.constant(p.clone()));
        let l = infonce(&mut t, av, pv, tau, true).unwrap();
        t.value(l).item()
    }

    #[test]
    fn single_candidate_is_zero() {
        let a = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let p = Tensor::matrix(1, 3, vec![-1.0, 0.5, 0.0]).unwrap();
        assert_eq!(eval(&a, &p, 0.07), 0.0);
    }

    #[test]
    fn two_token_closed_form() {
        // anchor 0 equals positive 0 and is orthogonal to positive 1
        let a = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = a.clone();
        let per_anchor = (1.0 + (-1.0f64).exp()).ln();
        assert!((per_anchor - 0.3133).abs() < 1e-4);
        assert!((eval(&a, &p, 1.0) - 2.0 * per_anchor).abs() < 1e-14);
    }

    #[test]
    fn positives_receive_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tape::new();
        let a = t.leaf(rand_tensor(&mut rng, 5, 4));
        let p = t.leaf(rand_tensor(&mut rng, 5, 4));
        let l = infonce(&mut t, a, p, 0.1, true).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.wrt(p).data().iter().all(|v| *v == 0.0));
        assert!(g.wrt(a).data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn zero_rows_are_guarded() {
        let a = Tensor::zeros(&[3, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = rand_tensor(&mut rng, 3, 4);
        let v = eval(&a, &p, 0.5);
        assert!((v - 3.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_check_random_4x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let a = store.add("a", rand_tensor(&mut rng, 4, 8)).unwrap();
        let p = store.add("p", rand_tensor(&mut rng, 4, 8)).unwrap();
        let err = finite_diff_check(
            |t, s| {
                let (av, pv) = (t.param(s, a), t.param(s, p));
                infonce(t, av, pv, 1.0, false)
            },
            &mut store,
            &[a, p],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn pa_loss_composition_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (en, ev, es) = (rand_tensor(&mut rng, 6, 16), rand_tensor(&mut rng, 6, 16), rand_tensor(&mut rng, 6, 16));
        let run = |cfg: &AlignmentConfig| {
            let mut t = Tape::new();
            let (a, b, c) = (t.constant(en.clone()), t.constant(ev.clone()), t.constant(es.clone()));
            let l = pa_loss(&mut t, a, b, c, cfg).unwrap();
            t.value(l).item()
        };
        let tau = 0.07;
        let both = run(&AlignmentConfig::default());
        let want = brute_infonce(&en, &ev, tau) + brute_infonce(&en, &es, tau);
        assert!((both - want).abs() < 1e-9 * want.abs().max(1.0));
        let off = AlignmentConfig { numeric_visual: false, numeric_caption: false, ..Default::default() };
        assert_eq!(run(&off), 0.0);
        let nv = AlignmentConfig { numeric_caption: false, ..Default::default() };
        assert!((run(&nv) - eval(&en, &ev, tau)).abs() < 1e-12);

        let mut t = Tape::new();
        let a = t.constant(en.clone());
        let b = t.constant(rand_tensor(&mut rng, 5, 16));
        let c = t.constant(es.clone());
        assert!(pa_loss(&mut t, a, b, c, &AlignmentConfig::default()).is_err());
    }

    #[test]
    fn training_separates_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let positives = rand_tensor(&mut rng, 6, 8);
        let mut store = ParamStore::new();
        let a = store.add("a", rand_tensor(&mut rng, 6, 8)).unwrap();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..300 {
            let mut t = Tape::new();
            let av = t.param(&store, a);
            let pv = t.constant(positives.clone());
            let l = infonce(&mut t, av, pv, 0.1, true).unwrap();
            let g = t.backward(l).unwrap().into_params();
            opt.step(&mut store, &g, 0.01).unwrap();
        }
        let an = store.get(a);
        let cos = |x: &[f64], y: &[f64]| crate::diffcore::cosine(x, y, NORM_FLOOR);
        let (mut diag, mut off) = (0.0, 0.0);
        for i in 0..6 {
            for j in 0..6 {
                let c = cos(an.row(i), positives.row(j));
                if i == j { diag += c / 6.0 } else { off += c / 30.0 }
            }
        }
        assert!(diag > off + 0.5, "diag {diag} off {off}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn invariant_to_row_rescaling(seed in 0u64..500, row in 0usize..5, scale in 0.1f64..10.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = rand_tensor(&mut rng, 5, 6);
                let p = rand_tensor(&mut rng, 5, 6);
                let mut a2 = a.clone();
                for v in a2.row_mut(row) { *v *= scale; }
                let mut p2 = p.clone();
                for v in p2.row_mut((row + 1) % 5) { *v *= scale; }
                let (x, y) = (eval(&a, &p, 0.2), eval(&a2, &p2, 0.2));
                prop_assert!((x - y).abs() < 1e-9 * x.abs().max(1.0));
            }
        }
    }
}
