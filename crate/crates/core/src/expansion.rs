//! Normalisation, the statistics prompt, and the aligned numeric / pixel /
//! caption patch triplets.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use crate::diffcore::Tensor;
use crate::error::{MadiError, Result};

/// A zero-centred, unit-scaled series plus statistics of the original.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedSeries {
    pub values: Vec<f64>,
    pub offset: f64,
    pub scaling: f64,
    pub length: usize,
    pub max: f64,
    pub min: f64,
    pub first: f64,
    pub last: f64,
}

impl NormalizedSeries {
    /// Maps normalised values back to the original scale.
    pub fn denormalize(&self) -> Vec<f64> {
        self.values.iter().map(|v| v / self.scaling - self.offset).collect()
    }
}

pub fn normalize(series: &[f64]) -> Result<NormalizedSeries> {
    if series.is_empty() {
        return Err(MadiError::Validation("cannot normalise an empty series".into()));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(MadiError::Validation("series contains NaN or infinity".into()));
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let std = (series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let scaling = if std > 1e-6 { 1.0 / std } else { 1.0 };
    Ok(NormalizedSeries {
        values: series.iter().map(|v| (v - mean) * scaling).collect(),
        // adding 0.0 turns a negative zero into a positive one
        offset: -mean + 0.0,
        scaling,
        length: series.len(),
        max: series.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        min: series.iter().copied().fold(f64::INFINITY, f64::min),
        first: series[0],
        last: series[series.len() - 1],
    })
}

pub fn stats_prompt(ns: &NormalizedSeries) -> String {
    format!(
        "[offset={:.3}|scaling={:.3}|length={}|max={:.3}|min={:.3}|left={:.3}|right={:.3}]",
        ns.offset, ns.scaling, ns.length, ns.max, ns.min, ns.first, ns.last
    )
}

/// The seven fields of a statistics prompt, as printed.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptFields {
    pub offset: f64,
    pub scaling: f64,
    pub length: usize,
    pub max: f64,
    pub min: f64,
    pub left: f64,
    pub right: f64,
}

pub fn parse_stats_prompt(s: &str) -> Option<PromptFields> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        let num = r"(-?\d+\.\d{3})";
        Regex::new(&format!(
            r"^\[offset={num}\|scaling={num}\|length=(\d+)\|max={num}\|min={num}\|left={num}\|right={num}\]$"
        ))
        .expect("static regex")
    });
    let c = re.captures(s)?;
    let f = |i: usize| c[i].parse::<f64>().ok();
    Some(PromptFields {
        offset: f(1)?,
        scaling: f(2)?,
        length: c[3].parse().ok()?,
        max: f(4)?,
        min: f(5)?,
        left: f(6)?,
        right: f(7)?,
    })
}

/// Right-pads with the last value to a multiple of `pn` and returns the
/// `Ñ × pn` patch matrix.
pub fn patchify(values: &[f64], pn: usize) -> Result<Tensor> {
    if pn == 0 {
        return Err(MadiError::config("numeric patch size must be at least 1"));
    }
    if values.is_empty() {
        return Err(MadiError::Validation("cannot patch an empty series".into()));
    }
    let n = values.len().div_ceil(pn);
    let last = values[values.len() - 1];
    let mut data = values.to_vec();
    data.resize(n * pn, last);
    Tensor::matrix(n, pn, data)
}

/// Binary line-plot raster, row 0 at the top.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.pixels[r * self.width + c]
    }

    fn set(&mut self, r: usize, c: usize) {
        self.pixels[r * self.width + c] = 1;
    }

    /// The `pv`-wide column slice `[j·pv, (j+1)·pv)` flattened row-major.
    pub fn column_block(&self, j: usize, pv: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.height * pv);
        for r in 0..self.height {
            out.extend_from_slice(&self.pixels[r * self.width + j * pv..r * self.width + (j + 1) * pv]);
        }
        out
    }

    /// Plain PGM (P2) text.
    pub fn to_pgm(&self) -> String {
        let mut s = format!("P2\n{} {}\n1\n", self.width, self.height);
        for r in 0..self.height {
            let row: Vec<String> = (0..self.width).map(|c| self.get(r, c).to_string()).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| MadiError::io(path, e))
    }
}

/// Column of time step `t` in an image of `width` columns showing
/// `steps` time steps.
pub fn column_of(t: usize, steps: usize, width: usize) -> usize {
    if steps <= 1 {
        return 0;
    }
    let num = (t * (width - 1)) as f64;
    (num / (steps - 1) as f64).round() as usize
}

fn bresenham(img: &mut Image, (r0, c0): (i64, i64), (r1, c1): (i64, i64)) {
    let (dc, dr) = ((c1 - c0).abs(), -(r1 - r0).abs());
    let (sc, sr) = (if c0 < c1 { 1 } else { -1 }, if r0 < r1 { 1 } else { -1 });
    let (mut c, mut r, mut err) = (c0, r0, dc + dr);
    loop {
        img.set(r as usize, c as usize);
        if c == c1 && r == r1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dr {
            err += dr;
            c += sc;
        }
        if e2 <= dc {
            err += dc;
            r += sr;
        }
    }
}

/// Renders the padded series (`Ñ·pn` steps) into a `pv × Ñ·pv` image.
/// Requires `pv >= pn` so every time step lands in its own patch's columns.
pub fn rasterize(values: &[f64], pn: usize, pv: usize) -> Result<Image> {
    if pv < 4 {
        return Err(MadiError::config(format!("pixel patch size {pv} must be at least 4")));
    }
    if pv < pn {
        return Err(MadiError::config(format!(
            "pixel patch size {pv} must be at least the numeric patch size {pn}"
        )));
    }
    let patches = patchify(values, pn)?;
    let padded = patches.data();
    let n = patches.rows();
    let width = n * pv;
    let mut img = Image {
        height: pv,
        width,
        pixels: vec![0; pv * width],
    };
    let max = padded.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = padded.iter().copied().fold(f64::INFINITY, f64::min);
    let row_of = |v: f64| -> i64 {
        if max - min <= 0.0 {
            ((pv - 1) / 2) as i64
        } else {
            ((max - v) / (max - min) * (pv - 1) as f64).round() as i64
        }
    };
    let steps = padded.len();
    let point = |t: usize| (row_of(padded[t]), column_of(t, steps, width) as i64);
    if steps == 1 {
        let (r, _) = point(0);
        for c in 0..width {
            img.set(r as usize, c);
        }
        return Ok(img);
    }
    for t in 0..steps - 1 {
        bresenham(&mut img, point(t), point(t + 1));
    }
    Ok(img)
}

fn f3(v: f64) -> String {
    format!("{v:.3}")
}

pub fn caption_patch(patch: &[f64], start: usize) -> Result<String> {
    if patch.is_empty() {
        return Err(MadiError::contract("caption of an empty patch"));
    }
    let n = patch.len() as f64;
    let mean = patch.iter().sum::<f64>() / n;
    let std = (patch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let max = patch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = patch.iter().copied().fold(f64::INFINITY, f64::min);
    let mut s = String::new();
    write!(
        s,
        "t={}..{} max={} min={} mean={} std={}",
        start,
        start + patch.len() - 1,
        f3(max),
        f3(min),
        f3(mean),
        f3(std)
    )
    .expect("writing to a String");
    Ok(s)
}

/// Aligned triplet for one series: row `j` of every field describes time
/// steps `spans[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBundle {
    pub numeric: Tensor,
    /// `Ñ × pv²`, each row a flattened binary pixel patch.
    pub pixels: Tensor,
    pub captions: Vec<String>,
    pub spans: Vec<(usize, usize)>,
    pub image: Image,
    pub pn: usize,
    pub pv: usize,
}

impl PatchBundle {
    pub fn patch_count(&self) -> usize {
        self.numeric.rows()
    }
}

pub fn expand(ns: &NormalizedSeries, pn: usize, pv: usize) -> Result<PatchBundle> {
    let numeric = patchify(&ns.values, pn)?;
    let image = rasterize(&ns.values, pn, pv)?;
    let n = numeric.rows();
    let mut pix = Vec::with_capacity(n * pv * pv);
    let mut captions = Vec::with_capacity(n);
    let mut spans = Vec::with_capacity(n);
    for j in 0..n {
        pix.extend(image.column_block(j, pv).into_iter().map(f64::from));
        captions.push(caption_patch(numeric.row(j), j * pn)?);
        spans.push((j * pn, (j + 1) * pn - 1));
    }
    Ok(PatchBundle {
        pixels: Tensor::matrix(n, pv * pv, pix)?,
        numeric,
        captions,
        spans,
        image,
        pn,
        pv,
    })
}
