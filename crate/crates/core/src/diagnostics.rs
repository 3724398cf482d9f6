//! Similarity diagnostics: per-instance cosine matrices, similarity
//! histograms and summary scalars.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::{AblationTag, Madi, PreparedSample};
use crate::diffcore::{cosine, Tape, Tensor};
use crate::error::{MadiError, Result};
use crate::pa::NORM_FLOOR;

pub const HIST_BINS: usize = 64;

/// `out[i][j] = cos(a_i, b_j)`.
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(&[a.rows(), b.rows()]);
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out.row_mut(i)[j] = cosine(a.row(i), b.row(j), NORM_FLOOR);
        }
    }
    out
}

/// `cos(a_j, b_j)` for every row.
pub fn aligned_cosines(a: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..a.rows()).map(|j| cosine(a.row(j), b.row(j), NORM_FLOOR)).collect()
}

/// Uniform bins over `[-1, 1]`; 1.0 falls in the last bin.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: i32,
    pub hi: i32,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new() -> Self {
        Histogram { lo: -1, hi: 1, counts: vec![0; HIST_BINS] }
    }

    pub fn add(&mut self, v: f64) {
        let x = v.clamp(-1.0, 1.0);
        let b = (((x + 1.0) / 2.0) * HIST_BINS as f64).floor() as usize;
        self.counts[b.min(HIST_BINS - 1)] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

impl Default for Histogram {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub instances: usize,
    /// Numeric-visual matrix: mean of the diagonal and of the rest.
    pub diag_mean: f64,
    pub offdiag_mean: f64,
    pub caption_diag_mean: f64,
    pub caption_offdiag_mean: f64,
    /// Aligned-pair means of `sim(e^n, e^v)` and `sim(z^n, z^v)`.
    pub mean_sim_continuous: f64,
    pub mean_sim_common: f64,
    pub mean_sim_unique: f64,
    pub mean_abs_zu_numeric: f64,
    pub mean_abs_zu_visual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histograms {
    pub continuous: Histogram,
    pub common: Histogram,
    pub unique: Histogram,
}

#[derive(Clone, Debug)]
pub struct Diagnostics {
    pub numeric_visual: Vec<Tensor>,
    pub numeric_caption: Vec<Tensor>,
    pub histograms: Histograms,
    pub summary: Summary,
}

fn diag_split(m: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (mut d, mut o) = (Vec::new(), Vec::new());
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            if i == j { d.push(m.get(i, j)) } else { o.push(m.get(i, j)) }
        }
    }
    (d, o)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 }
}

/// Runs the model on each sample (all series) and collects similarity
/// statistics. A checkpoint whose codebooks were never initialised gets
/// them seeded from these samples, so fresh models can be diagnosed too.
pub fn diagnose(model: &Madi, samples: &[PreparedSample], tag: AblationTag) -> Result<Diagnostics> {
    let tog = tag.toggles();
    if !tog.numeric {
        return Err(MadiError::config("diagnostics need the numeric modality"));
    }
    let seeded;
    let model = if tog.uses_codebooks() && !model.codebooks.initialized {
        let mut m = model.clone();
        let refs: Vec<&PreparedSample> = samples.iter().collect();
        let seeds = m.codebook_seed_tokens(&refs)?;
        m.codebooks.init_from(&seeds, &mut ChaCha8Rng::seed_from_u64(0))?;
        seeded = m;
        &seeded
    } else {
        model
    };
    let mut nv = Vec::new();
    let mut ns = Vec::new();
    let mut hist = Histograms { continuous: Histogram::new(), common: Histogram::new(), unique: Histogram::new() };
    let (mut cont, mut com, mut uni, mut zu_n, mut zu_v) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in samples {
        let mut t = Tape::new();
        let fwd = model.forward_prefix(&mut t, s, tog, true)?;
        for tr in &fwd.traces {
            let en = t.value(tr.numeric.expect("numeric modality enabled")).clone();
            let ev = t.value(tr.visual).clone();
            nv.push(cosine_matrix(&en, &ev));
            if let Some(c) = tr.caption {
                ns.push(cosine_matrix(&en, t.value(c)));
            }
            for v in aligned_cosines(&en, &ev) {
                hist.continuous.add(v);
                cont.push(v);
            }
            if let Some((dn, dv)) = &tr.disentangled {
                let (zn, zv) = (t.value(dn.z), t.value(dv.z));
                let (un, uv) = (t.value(dn.u), t.value(dv.u));
                for v in aligned_cosines(zn, zv) {
                    hist.common.add(v);
                    com.push(v);
                }
                for v in aligned_cosines(un, uv) {
                    hist.unique.add(v);
                    uni.push(v);
                }
                zu_n.extend(aligned_cosines(zn, un).into_iter().map(f64::abs));
                zu_v.extend(aligned_cosines(zv, uv).into_iter().map(f64::abs));
            }
        }
    }
    let (mut d, mut o) = (Vec::new(), Vec::new());
    for m in &nv {
        let (a, b) = diag_split(m);
        d.extend(a);
        o.extend(b);
    }
    let (mut cd, mut co) = (Vec::new(), Vec::new());
    for m in &ns {
        let (a, b) = diag_split(m);
        cd.extend(a);
        co.extend(b);
    }
    let summary = Summary {
        instances: nv.len(),
        diag_mean: mean(&d),
        offdiag_mean: mean(&o),
        caption_diag_mean: mean(&cd),
        caption_offdiag_mean: mean(&co),
        mean_sim_continuous: mean(&cont),
        mean_sim_common: mean(&com),
        mean_sim_unique: mean(&uni),
        mean_abs_zu_numeric: mean(&zu_n),
        mean_abs_zu_visual: mean(&zu_v),
    };
    Ok(Diagnostics { numeric_visual: nv, numeric_caption: ns, histograms: hist, summary })
}

/// Header row of patch indices, then one row per numeric patch.
pub fn matrix_csv(m: &Tensor) -> String {
    let mut s = (0..m.cols()).map(|j| j.to_string()).collect::<Vec<_>>().join(",");
    s.push('\n');
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:.6}")).collect();
        writeln!(s, "{}", row.join(",")).expect("writing to a String");
    }
    s
}

/// Writes `sim_nv_<i>.csv`, `sim_ns_<i>.csv`, `histograms.json` and
/// `summary.json` into `dir`.
pub fn write_diagnostics(dir: &Path, d: &Diagnostics) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| MadiError::io(dir, e))?;
    let write = |name: String, body: String| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| MadiError::io(&p, e))
    };
    for (i, m) in d.numeric_visual.iter().enumerate() {
        write(format!("sim_nv_{i}.csv"), matrix_csv(m))?;
    }
    for (i, m) in d.numeric_caption.iter().enumerate() {
        write(format!("sim_ns_{i}.csv"), matrix_csv(m))?;
    }
    let js = |v: &dyn erased::Ser| v.json();
    write("histograms.json".into(), js(&d.histograms))?;
    write("summary.json".into(), js(&d.summary))?;
    Ok(())
}

mod erased {
    pub trait Ser {
        fn json(&self) -> String;
    }

    impl<T: serde::Serialize> Ser for T {
        fn json(&self) -> String {
            serde_json::to_string_pretty(self).expect("diagnostics serialise")
        }
    }
}
