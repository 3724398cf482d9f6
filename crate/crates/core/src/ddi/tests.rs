use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{finite_diff_check_many, ParamId};

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn small_cfg() -> DdiConfig {
    DdiConfig { d: 8, k: 4, levels: 2, ..Default::default() }
}

fn seeded_hierarchy(cfg: &DdiConfig, rng: &mut ChaCha8Rng) -> CodebookHierarchy {
    let mut h = CodebookHierarchy::new(cfg).unwrap();
    let samples: Vec<Tensor> = (0..4).map(|_| rand_tensor(rng, 6, cfg.d)).collect();
    h.init_from(&samples, rng).unwrap();
    h
}

#[test]
fn pooling_examples() {
    let x = Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap();
    assert_eq!(pool_broadcast(&x, 1), x);
    assert_eq!(pool_broadcast(&x, 2).data(), &[2.0, 2.0]);
    let y = Tensor::matrix(5, 1, vec![1.0, 2.0, 3.0, 5.0, 7.0]).unwrap();
    assert_eq!(pool_broadcast(&y, 2).data(), &[1.5, 1.5, 4.0, 4.0, 7.0]);
}

#[test]
fn assignment_examples() {
    let codes = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
    let v = Tensor::matrix(3, 2, vec![0.9, 0.8, 1.0, 1.0, 0.5, 0.5]).unwrap();
    let (idx, q) = vq_assign(&codes, &v).unwrap();
    assert_eq!(idx, vec![1, 1, 0]);
    assert_eq!(q.row(1), &[1.0, 1.0]);
    let bad = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
    assert!(vq_assign(&codes, &bad).is_err());
}

#[test]
fn hierarchy_layout_and_config_errors() {
    let h = CodebookHierarchy::new(&DdiConfig { k: 5, levels: 3, ..Default::default() }).unwrap();
    assert_eq!(h.windows(), vec![4, 2, 1]);
    assert_eq!(h.level_sizes(), vec![5, 10, 20]);
    assert!(matches!(
        CodebookHierarchy::new(&DdiConfig { levels: 0, ..Default::default() }),
        Err(MadiError::Config(_))
    ));
    assert!(CodebookHierarchy::new(&DdiConfig { k: 0, ..Default::default() }).is_err());
}

#[test]
fn uninitialised_codebooks_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = small_cfg();
    let mut store = ParamStore::new();
    let m = DdiModule::new(&mut store, "ddi", 16, 2, &cfg, &mut rng).unwrap();
    let h = CodebookHierarchy::new(&cfg).unwrap();
    let mut t = Tape::new();
    let e = t.constant(rand_tensor(&mut rng, 6, 16));
    assert!(m.rvq_forward(&mut t, &store, e, &h).is_err());
}

/// Independent coarse-to-fine recursion with exhaustive code scans.
fn brute_rvq(h: &CodebookHierarchy, x: &Tensor) -> (Tensor, Vec<Vec<usize>>) {
    let (n, d) = (x.rows(), x.cols());
    let mut r: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).to_vec()).collect();
    let mut total = vec![vec![0.0; d]; n];
    let mut all_idx = Vec::new();
    for l in &h.levels {
        let w = l.window;
        let mut idx = vec![0; n];
        let mut seg = 0;
        while seg < n {
            let end = (seg + w).min(n);
            let mut mean = vec![0.0; d];
            for row in &r[seg..end] {
                for c in 0..d {
                    mean[c] += row[c] / (end - seg) as f64;
                }
            }
            let dists: Vec<f64> = (0..l.codes.rows())
                .map(|k| (0..d).map(|c| (mean[c] - l.codes.get(k, c)).powi(2)).sum())
                .collect();
            let best = (0..dists.len())
                .fold(0, |b, k| if dists[k] < dists[b] { k } else { b });
            for i in seg..end {
                idx[i] = best;
                for c in 0..d {
                    r[i][c] -= l.codes.get(best, c);
                    total[i][c] += l.codes.get(best, c);
                }
            }
            seg = end;
        }
        all_idx.push(idx);
    }
    (Tensor::from_rows(&total).unwrap(), all_idx)
}

#[test]
fn telescoping_and_nearest_code_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = DdiConfig { d: 6, k: 4, levels: 3, ..Default::default() };
    let h = seeded_hierarchy(&cfg, &mut rng);
    for _ in 0..100 {
        let n = rng.random_range(1..12);
        let x = rand_tensor(&mut rng, n, cfg.d);
        let q = h.quantize(&x).unwrap();
        for i in 0..x.numel() {
            let sum: f64 = q.per_level.iter().map(|p| p.data()[i]).sum::<f64>() + q.residual.data()[i];
            assert!((sum - x.data()[i]).abs() <= 1e-12);
        }
        for (li, l) in h.levels.iter().enumerate() {
            for r in 0..n {
                let chosen = q.indices[li][r];
                let v = q.pooled[li].row(r);
                let dc = sq_dist(v, l.codes.row(chosen));
                for k in 0..l.codes.rows() {
                    assert!(dc <= sq_dist(v, l.codes.row(k)));
                }
            }
        }
        let (total, idx) = brute_rvq(&h, &x);
        assert_eq!(idx, q.indices);
        assert!(total.max_abs_diff(&q.total) < 1e-12);
    }
}

#[test]
fn rvq_forward_matches_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = small_cfg();
    let dim = 16;
    let mut store = ParamStore::new();
    let m = DdiModule::new(&mut store, "ddi", dim, 2, &cfg, &mut rng).unwrap();
    let h = seeded_hierarchy(&cfg, &mut rng);
    let e = rand_tensor(&mut rng, 6, dim);
    let mut t = Tape::new();
    let ev = t.constant(e.clone());
    let out = m.rvq_forward(&mut t, &store, ev, &h).unwrap();

    // Ẽ = E·W_down + b_down, then the brute recursion, then Z = q·W_up + b_up
    let lin = |x: &Tensor, w: &Tensor, b: &Tensor| -> Tensor {
        let rows: Vec<Vec<f64>> = (0..x.rows())
            .map(|i| {
                (0..w.cols())
                    .map(|j| b.data()[j] + (0..x.cols()).map(|k| x.get(i, k) * w.get(k, j)).sum::<f64>())
                    .collect()
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    };
    let et = lin(&e, store.get(m.down.w), store.get(m.down.b.unwrap()));
    let (q, _) = brute_rvq(&h, &et);
    let z = lin(&q, store.get(m.up.w), store.get(m.up.b.unwrap()));
    assert!(t.value(out.z).max_abs_diff(&z) < 1e-12);
    let lvq: f64 = et.data().iter().zip(q.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 6.0;
    assert!((t.value(out.l_vq).item() - lvq).abs() < 1e-12);

    // Z + U reproduces E up to one rounding
    let zu = t.value(out.z).data().iter().zip(t.value(out.u).data()).map(|(a, b)| a + b);
    for (s, x) in zu.zip(e.data()) {
        assert!((s - x).abs() <= 4.0 * f64::EPSILON * x.abs().max(1.0));
    }
}

#[test]
fn straight_through_gradient_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = small_cfg();
    let mut store = ParamStore::new();
    let m = DdiModule::new(&mut store, "ddi", 16, 2, &cfg, &mut rng).unwrap();
    let h = seeded_hierarchy(&cfg, &mut rng);
    let mut t = Tape::new();
    let e = t.constant(rand_tensor(&mut rng, 6, 16));
    let out = m.rvq_forward(&mut t, &store, e, &h).unwrap();
    // downstream scalar without the commitment term
    let w = t.constant(rand_tensor(&mut rng, 6, 16));
    let p = t.mul(out.z, w).unwrap();
    let g = t.gelu(p).unwrap();
    let l = t.sum(g).unwrap();
    let grads = t.backward(l).unwrap();
    let (ge, gq) = (grads.wrt(out.e_tilde), grads.wrt(out.q_ste));
    assert!(gq.data().iter().any(|v| *v != 0.0));
    assert_eq!(ge.data(), gq.data());
}

#[test]
fn ema_behaviour() {
    let cfg = DdiConfig { d: 2, k: 2, levels: 1, ..Default::default() };
    let mut h = CodebookHierarchy::new(&cfg).unwrap();
    h.set_codes(0, Tensor::matrix(2, 2, vec![1.0, 1.0, -3.0, 2.0]).unwrap()).unwrap();
    h.initialized = true;
    let v = Tensor::matrix(1, 2, vec![0.5, -0.25]).unwrap();
    let c0 = h.levels[0].codes.row(0).to_vec();
    let untouched = h.levels[0].codes.row(1).to_vec();
    let dist0 = sq_dist(&c0, v.row(0)).sqrt();
    let mut prev = dist0;
    for _ in 0..200 {
        let q = h.quantize(&v).unwrap();
        assert_eq!(q.indices[0], vec![0]);
        let mut acc = EmaAccumulator::new(&h);
        acc.add(&q);
        h.ema_update(&acc).unwrap();
        let dist = sq_dist(h.levels[0].codes.row(0), v.row(0)).sqrt();
        assert!(dist < prev);
        prev = dist;
    }
    assert!(prev < 0.15 * dist0, "{prev} vs {dist0}");
    let after: Vec<u64> = h.levels[0].codes.row(1).iter().map(|x| x.to_bits()).collect();
    let before: Vec<u64> = untouched.iter().map(|x| x.to_bits()).collect();
    assert_eq!(after, before);

    // gamma 0 jumps to the batch mean
    let mut h0 = CodebookHierarchy::new(&DdiConfig { gamma: 0.0, ..cfg.clone() }).unwrap();
    h0.set_codes(0, Tensor::matrix(2, 2, vec![0.0, 0.0, 9.0, 9.0]).unwrap()).unwrap();
    h0.initialized = true;
    let batch = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 0.0]).unwrap();
    let q = h0.quantize(&batch).unwrap();
    let mut acc = EmaAccumulator::new(&h0);
    acc.add(&q);
    h0.ema_update(&acc).unwrap();
    let c = h0.levels[0].codes.row(0);
    assert!((c[0] - 2.0).abs() < 1e-4 && (c[1] - 1.0).abs() < 1e-4, "{c:?}");
}

#[test]
fn shared_hierarchy_mutation_is_visible_to_both_modalities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = small_cfg();
    let mut h = seeded_hierarchy(&cfg, &mut rng);
    let (a, b) = (rand_tensor(&mut rng, 4, 8), rand_tensor(&mut rng, 4, 8));
    let before = (h.quantize(&a).unwrap().total, h.quantize(&b).unwrap().total);
    let shifted: Vec<f64> = h.levels[0].codes.data().iter().map(|v| v + 10.0).collect();
    let rows = h.levels[0].codes.rows();
    h.set_codes(0, Tensor::matrix(rows, 8, shifted).unwrap()).unwrap();
    let after = (h.quantize(&a).unwrap().total, h.quantize(&b).unwrap().total);
    assert_ne!(before.0, after.0);
    assert_ne!(before.1, after.1);
}

fn disentangled_const(t: &mut Tape, z: Tensor, u: Tensor, lvq: f64) -> Disentangled {
    let (zv, uv) = (t.constant(z), t.constant(u));
    let l = t.constant(Tensor::scalar(lvq));
    Disentangled { e_tilde: zv, q_ste: zv, z: zv, u: uv, l_vq: l, quantized: None }
}

#[test]
fn ddi_loss_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut t = Tape::new();
    let n = disentangled_const(&mut t, rand_tensor(&mut rng, 4, 6), Tensor::zeros(&[4, 6]), 0.3);
    let v = disentangled_const(&mut t, rand_tensor(&mut rng, 4, 6), Tensor::zeros(&[4, 6]), 0.2);
    let l = ddi_loss(&mut t, &n, &v, 5.0, 1.0, 0.07).unwrap();
    assert_eq!(t.value(l.orth).item(), 0.0);
    assert!((t.value(l.vq).item() - 0.5).abs() < 1e-15);

    let n1 = disentangled_const(&mut t, rand_tensor(&mut rng, 1, 6), rand_tensor(&mut rng, 1, 6), 0.0);
    let v1 = disentangled_const(&mut t, rand_tensor(&mut rng, 1, 6), rand_tensor(&mut rng, 1, 6), 0.0);
    let l1 = ddi_loss(&mut t, &n1, &v1, 5.0, 1.0, 0.07).unwrap();
    assert_eq!(t.value(l1.com).item(), 0.0);

    let ones: Vec<Var> = (0..3).map(|_| t.constant(Tensor::scalar(1.0))).collect();
    let w = weighted_sum(&mut t, &[(ones[0], 1.0), (ones[1], 5.0), (ones[2], 1.0)]).unwrap();
    assert_eq!(t.value(w).item(), 7.0);

    let bad = disentangled_const(&mut t, rand_tensor(&mut rng, 3, 6), rand_tensor(&mut rng, 3, 6), 0.0);
    assert!(ddi_loss(&mut t, &n, &bad, 5.0, 1.0, 0.07).is_err());
}

#[test]
fn orthogonality_term_sums_absolute_cosines() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut t = Tape::new();
    let tensors: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, 5, 6)).collect();
    let n = disentangled_const(&mut t, tensors[0].clone(), tensors[1].clone(), 0.0);
    let v = disentangled_const(&mut t, tensors[2].clone(), tensors[3].clone(), 0.0);
    let l = ddi_loss(&mut t, &n, &v, 5.0, 1.0, 0.07).unwrap();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let mut want = 0.0;
    for j in 0..5 {
        want += cos(tensors[0].row(j), tensors[1].row(j)).abs() + cos(tensors[2].row(j), tensors[3].row(j)).abs();
    }
    want *= 0.5;
    assert!((t.value(l.orth).item() - want).abs() < 1e-12);
}

#[test]
fn unique_interaction_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = small_cfg();
    let mut store = ParamStore::new();
    let m = DdiModule::new(&mut store, "ddi", 16, 2, &cfg, &mut rng).unwrap();
    let (en, ev) = (rand_tensor(&mut rng, 5, 16), rand_tensor(&mut rng, 5, 16));
    let (un, uv) = (rand_tensor(&mut rng, 5, 16), rand_tensor(&mut rng, 5, 16));
    let run = |store: &ParamStore, uv: &Tensor| {
        let mut t = Tape::new();
        let vars: Vec<Var> = [&en, &ev, &un, uv].iter().map(|x| t.constant((*x).clone())).collect();
        let (a, b) = m.unique_interaction(&mut t, store, vars[0], vars[1], vars[2], vars[3]).unwrap();
        (t.value(a).clone(), t.value(b).clone())
    };
    let (a, b) = run(&store, &uv);
    assert_eq!(a, en);
    assert_eq!(b, ev);
    // with a live output projection, zero unique values still leave E^n alone
    store.set(m.attn_n.wo.w, rand_tensor(&mut rng, 16, 16)).unwrap();
    store.set(m.attn_v.wo.w, rand_tensor(&mut rng, 16, 16)).unwrap();
    let (a, b) = run(&store, &Tensor::zeros(&[5, 16]));
    assert_eq!(a, en);
    assert_ne!(b, ev);
    assert_eq!(a.shape(), en.shape());
}

#[test]
fn ddi_losses_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = small_cfg();
    let mut store = ParamStore::new();
    let m = DdiModule::new(&mut store, "ddi", 16, 2, &cfg, &mut rng).unwrap();
    let en = store.add("en", rand_tensor(&mut rng, 6, 16)).unwrap();
    let ev = store.add("ev", rand_tensor(&mut rng, 6, 16)).unwrap();
    let mut h = CodebookHierarchy::new(&cfg).unwrap();
    let mut tmp = Tape::new();
    let a = tmp.param(&store, en);
    let b = tmp.param(&store, ev);
    let ta = m.project_down(&mut tmp, &store, a).unwrap();
    let tb = m.project_down(&mut tmp, &store, b).unwrap();
    h.init_from(&[tmp.value(ta).clone(), tmp.value(tb).clone()], &mut rng).unwrap();

    let ids: Vec<ParamId> = [m.down.w, m.down.b.unwrap(), m.up.w, m.up.b.unwrap(), en, ev].to_vec();
    let errs = finite_diff_check_many(
        |t, s| {
            let (a, b) = (t.param(s, en), t.param(s, ev));
            let dn = m.rvq_forward(t, s, a, &h)?;
            let dv = m.rvq_forward(t, s, b, &h)?;
            let l = ddi_loss(t, &dn, &dv, 5.0, 1.0, 0.5)?;
            Ok(vec![l.vq, l.com, l.orth, l.total])
        },
        &mut store,
        &ids,
        1e-6,
    )
    .unwrap();
    for (name, e) in ["vq", "com", "orth", "total"].iter().zip(&errs) {
        assert!(*e < 1e-3, "{name}: {e}");
    }
}

#[test]
fn projector_variant_keeps_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let m = DdiModule::new(&mut store, "ddi", 16, 2, &small_cfg(), &mut rng).unwrap();
    let mut t = Tape::new();
    let e = t.constant(rand_tensor(&mut rng, 4, 16));
    let out = m.projector_forward(&mut t, &store, e).unwrap();
    assert_eq!(t.shape(out.z), &[4, 16]);
    assert_eq!(t.value(out.l_vq).item(), 0.0);
    assert!(out.quantized.is_none());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn pooling_preserves_segment_sums(n in 1usize..20, w in 1usize..9, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, n, 3);
            let p = pool_broadcast(&x, w);
            let total_x: f64 = x.data().iter().sum();
            let total_p: f64 = p.data().iter().sum();
            prop_assert!((total_x - total_p).abs() < 1e-9);
        }

        #[test]
        fn codes_in_level_bounds(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = DdiConfig { d: 4, k: 3, levels: 3, ..Default::default() };
            let h = seeded_hierarchy(&cfg, &mut rng);
            let x = rand_tensor(&mut rng, 7, 4);
            let q = h.quantize(&x).unwrap();
            for (li, idx) in q.indices.iter().enumerate() {
                prop_assert!(idx.iter().all(|&k| k < h.levels[li].codes.rows()));
            }
        }
    }
}
