//! Attribute-based synthetic series and templated question/answer pairs.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MadiError, Result};

/// Placeholder token marking where a series is spliced into the text.
pub const SERIES_PLACEHOLDER: &str = "<ts>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendKind {
    None,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trend {
    pub kind: TrendKind,
    pub slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seasonality {
    pub period: usize,
    pub amplitude: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Spike,
    Dip,
    LevelShift,
    Shake,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalEvent {
    pub kind: EventKind,
    pub position: usize,
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSpec {
    pub length: usize,
    pub trend: Trend,
    pub seasonality: Seasonality,
    pub noise_sigma: f64,
    pub local_events: Vec<LocalEvent>,
    pub base_level: f64,
    pub seed: u64,
}

impl AttributeSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MadiError::Validation(m));
        if self.length < 2 {
            return bad(format!("series length {} must be at least 2", self.length));
        }
        let s = &self.seasonality;
        if !s.amplitude.is_finite() || s.amplitude < 0.0 {
            return bad(format!("amplitude {} must be finite and non-negative", s.amplitude));
        }
        if s.amplitude > 0.0 && (s.period == 0 || s.period > self.length / 2) {
            return bad(format!(
                "period {} must lie in 1..={} for a seasonal series of length {}",
                s.period,
                self.length / 2,
                self.length
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} must be finite and >= 0", self.noise_sigma));
        }
        if !self.trend.slope.is_finite() || !self.base_level.is_finite() {
            return bad("slope and base level must be finite".into());
        }
        if self.trend.kind == TrendKind::None && self.trend.slope != 0.0 {
            return bad("trend kind none requires slope 0".into());
        }
        for e in &self.local_events {
            if e.position >= self.length {
                return bad(format!("event position {} outside 0..{}", e.position, self.length));
            }
            if !e.magnitude.is_finite() {
                return bad("event magnitude must be finite".into());
            }
        }
        Ok(())
    }

    pub fn is_periodic(&self) -> bool {
        self.seasonality.amplitude > 0.0
    }
}

/// Inclusive sampling ranges for [`sample_spec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenRanges {
    pub length: (usize, usize),
    /// Probability of a linear trend; otherwise the series is trendless.
    pub trend_prob: f64,
    /// Range of |slope| for linear trends.
    pub slope_abs: (f64, f64),
    pub negative_slope_prob: f64,
    pub periodic_prob: f64,
    pub period: (usize, usize),
    pub amplitude: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub base_level: (f64, f64),
    pub event_prob: f64,
    pub max_events: usize,
    pub event_magnitude: (f64, f64),
}

impl Default for GenRanges {
    fn default() -> Self {
        GenRanges {
            length: (64, 512),
            trend_prob: 2.0 / 3.0,
            slope_abs: (0.03, 0.08),
            negative_slope_prob: 0.5,
            periodic_prob: 0.8,
            period: (20, 30),
            amplitude: (1.0, 3.0),
            noise_sigma: (0.0, 0.3),
            base_level: (-5.0, 5.0),
            event_prob: 0.5,
            max_events: 2,
            event_magnitude: (2.0, 5.0),
        }
    }
}

fn check_range<T: PartialOrd + fmt::Debug>(name: &str, r: &(T, T)) -> Result<()> {
    if r.0 > r.1 {
        return Err(MadiError::config(format!("empty range for {name}: {r:?}")));
    }
    Ok(())
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(MadiError::config(format!("{name} must be a probability, got {p}")));
    }
    Ok(())
}

impl GenRanges {
    pub fn validate(&self) -> Result<()> {
        check_range("length", &self.length)?;
        check_range("slope_abs", &self.slope_abs)?;
        check_range("period", &self.period)?;
        check_range("amplitude", &self.amplitude)?;
        check_range("noise_sigma", &self.noise_sigma)?;
        check_range("base_level", &self.base_level)?;
        check_range("event_magnitude", &self.event_magnitude)?;
        for (n, p) in [
            ("trend_prob", self.trend_prob),
            ("negative_slope_prob", self.negative_slope_prob),
            ("periodic_prob", self.periodic_prob),
            ("event_prob", self.event_prob),
        ] {
            check_prob(n, p)?;
        }
        if self.length.0 < 2 {
            return Err(MadiError::config("series length must be at least 2"));
        }
        if self.periodic_prob > 0.0 && (self.period.0 == 0 || self.period.1 > self.length.0 / 2) {
            return Err(MadiError::config(format!(
                "period range {:?} must fit within half the shortest length {}",
                self.period, self.length.0
            )));
        }
        if self.periodic_prob > 0.0 && self.amplitude.0 <= 0.0 {
            return Err(MadiError::config("seasonal amplitude range must be positive"));
        }
        if self.noise_sigma.0 < 0.0 || self.slope_abs.0 < 0.0 {
            return Err(MadiError::config("noise sigma and |slope| ranges must be non-negative"));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..=r.1)
    }
}

fn uniform_usize(rng: &mut impl Rng, r: (usize, usize)) -> usize {
    rng.random_range(r.0..=r.1)
}

/// Draws an attribute specification; reproducible per seed.
pub fn sample_spec(seed: u64, ranges: &GenRanges) -> Result<AttributeSpec> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let length = uniform_usize(&mut rng, ranges.length);
    let trend = if rng.random_bool(ranges.trend_prob) {
        let mag = uniform(&mut rng, ranges.slope_abs);
        let sign = if rng.random_bool(ranges.negative_slope_prob) { -1.0 } else { 1.0 };
        Trend {
            kind: TrendKind::Linear,
            slope: sign * mag,
        }
    } else {
        Trend {
            kind: TrendKind::None,
            slope: 0.0,
        }
    };
    let seasonality = if rng.random_bool(ranges.periodic_prob) {
        Seasonality {
            period: uniform_usize(&mut rng, ranges.period),
            amplitude: uniform(&mut rng, ranges.amplitude),
        }
    } else {
        Seasonality {
            period: 0,
            amplitude: 0.0,
        }
    };
    let noise_sigma = uniform(&mut rng, ranges.noise_sigma);
    let base_level = uniform(&mut rng, ranges.base_level);
    let mut local_events = Vec::new();
    if ranges.max_events > 0 && rng.random_bool(ranges.event_prob) {
        let n = rng.random_range(1..=ranges.max_events);
        for _ in 0..n {
            let kind = match rng.random_range(0..4) {
                0 => EventKind::Spike,
                1 => EventKind::Dip,
                2 => EventKind::LevelShift,
                _ => EventKind::Shake,
            };
            local_events.push(LocalEvent {
                kind,
                position: rng.random_range(0..length),
                magnitude: uniform(&mut rng, ranges.event_magnitude),
            });
        }
        local_events.sort_by_key(|e| e.position);
    }
    let spec = AttributeSpec {
        length,
        trend,
        seasonality,
        noise_sigma,
        local_events,
        base_level,
        seed: rng.next_u64(),
    };
    spec.validate()?;
    Ok(spec)
}

/// Summary statistics of a raw series (population std).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub mean: f64,
    pub std: f64,
    pub max: f64,
    pub min: f64,
    pub first: f64,
    pub last: f64,
}

impl SeriesStats {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(MadiError::Validation("empty series".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MadiError::Validation("series contains a non-finite value".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(SeriesStats {
            mean,
            std: var.sqrt(),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            first: values[0],
            last: values[values.len() - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesInstance {
    pub values: Vec<f64>,
    pub spec: AttributeSpec,
    pub stats: SeriesStats,
}

impl TimeSeriesInstance {
    pub fn new(values: Vec<f64>, spec: AttributeSpec) -> Result<Self> {
        if values.len() != spec.length {
            return Err(MadiError::Validation(format!(
                "series has {} values but spec length is {}",
                values.len(),
                spec.length
            )));
        }
        let stats = SeriesStats::of(&values)?;
        Ok(TimeSeriesInstance {
            values,
            spec,
            stats,
        })
    }
}

/// Additive contribution of a local event at step `t`.
fn event_delta(e: &LocalEvent, t: usize) -> f64 {
    let p = e.position as i64;
    let d = t as i64 - p;
    match e.kind {
        EventKind::Spike | EventKind::Dip => {
            let sign = if e.kind == EventKind::Spike { 1.0 } else { -1.0 };
            match d {
                0 => sign * e.magnitude,
                -1 | 1 => sign * e.magnitude * 0.5,
                _ => 0.0,
            }
        }
        EventKind::LevelShift => {
            if d >= 0 {
                e.magnitude
            } else {
                0.0
            }
        }
        EventKind::Shake => {
            if (0..6).contains(&d) {
                if d % 2 == 0 {
                    e.magnitude
                } else {
                    -e.magnitude
                }
            } else {
                0.0
            }
        }
    }
}

/// Renders a specification into values. Pure: noise is drawn from `spec.seed`.
pub fn synthesize(spec: &AttributeSpec) -> Result<TimeSeriesInstance> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| MadiError::Validation(format!("noise distribution: {e}")))?;
    let s = &spec.seasonality;
    let values = (0..spec.length)
        .map(|t| {
            let tf = t as f64;
            let mut v = spec.base_level + spec.trend.slope * tf;
            if s.amplitude > 0.0 {
                v += s.amplitude * (2.0 * PI * tf / s.period as f64).sin();
            }
            if spec.noise_sigma > 0.0 {
                v += normal.sample(&mut rng);
            }
            v + spec.local_events.iter().map(|e| event_delta(e, t)).sum::<f64>()
        })
        .collect();
    TimeSeriesInstance::new(values, spec.clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TrendClass,
    PeriodValue,
    AmplitudeValue,
    NoiseClass,
    EventPresence,
    EventPosition,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::TrendClass,
        TaskKind::PeriodValue,
        TaskKind::AmplitudeValue,
        TaskKind::NoiseClass,
        TaskKind::EventPresence,
        TaskKind::EventPosition,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::TrendClass => "trend_class",
            TaskKind::PeriodValue => "period_value",
            TaskKind::AmplitudeValue => "amplitude_value",
            TaskKind::NoiseClass => "noise_class",
            TaskKind::EventPresence => "event_presence",
            TaskKind::EventPosition => "event_position",
        }
    }

    pub fn is_categorical(self) -> bool {
        matches!(
            self,
            TaskKind::TrendClass | TaskKind::NoiseClass | TaskKind::EventPresence
        )
    }

    /// Answer classes for categorical tasks.
    pub fn classes(self) -> &'static [&'static str] {
        match self {
            TaskKind::TrendClass => &["increasing", "decreasing", "steady"],
            TaskKind::NoiseClass => &["low", "high"],
            TaskKind::EventPresence => &["yes", "no"],
            _ => &[],
        }
    }

    pub fn question(self) -> &'static str {
        match self {
            TaskKind::TrendClass => "what is the overall trend of the series?",
            TaskKind::PeriodValue => "what is the period of the series?",
            TaskKind::AmplitudeValue => "what is the seasonal amplitude of the series?",
            TaskKind::NoiseClass => "is the noise level of the series low or high?",
            TaskKind::EventPresence => "does the series contain a local event?",
            TaskKind::EventPosition => "at which index does the first local event occur?",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = MadiError;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| MadiError::config(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Categorical(String),
    Numeric(f64),
}

impl Label {
    pub fn kind(&self) -> &'static str {
        match self {
            Label::Categorical(_) => "categorical",
            Label::Numeric(_) => "numeric",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaSample {
    pub task: TaskKind,
    pub context: String,
    pub question: String,
    pub answer: String,
    pub label: Label,
    pub series: Vec<TimeSeriesInstance>,
}

/// Thresholds used when deriving labels from specifications.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QaConfig {
    /// Trend is increasing when `slope * length > theta`, decreasing when
    /// below `-theta`.
    pub trend_theta: f64,
    /// Noise sigma at or above this is "high".
    pub noise_threshold: f64,
}

impl Default for QaConfig {
    fn default() -> Self {
        QaConfig {
            trend_theta: 1.0,
            noise_threshold: 0.15,
        }
    }
}

/// Formats a numeric label the way answers render it.
pub fn render_numeric(task: TaskKind, v: f64) -> String {
    match task {
        TaskKind::AmplitudeValue => format!("{v:.2}"),
        _ => format!("{}", v.round() as i64),
    }
}

/// Builds a sample from one series. `None` means the template does not apply
/// to this specification (the skip signal).
pub fn make_qa(
    instance: &TimeSeriesInstance,
    task: TaskKind,
    cfg: &QaConfig,
) -> Option<QaSample> {
    let spec = &instance.spec;
    let label = match task {
        TaskKind::TrendClass => {
            let rise = spec.trend.slope * spec.length as f64;
            let c = if rise > cfg.trend_theta {
                "increasing"
            } else if rise < -cfg.trend_theta {
                "decreasing"
            } else {
                "steady"
            };
            Label::Categorical(c.into())
        }
        TaskKind::PeriodValue => {
            if !spec.is_periodic() {
                return None;
            }
            Label::Numeric(spec.seasonality.period as f64)
        }
        TaskKind::AmplitudeValue => {
            if !spec.is_periodic() {
                return None;
            }
            let a: f64 = render_numeric(task, spec.seasonality.amplitude).parse().ok()?;
            Label::Numeric(a)
        }
        TaskKind::NoiseClass => Label::Categorical(
            if spec.noise_sigma >= cfg.noise_threshold { "high" } else { "low" }.into(),
        ),
        TaskKind::EventPresence => Label::Categorical(
            if spec.local_events.is_empty() { "no" } else { "yes" }.into(),
        ),
        TaskKind::EventPosition => {
            let first = spec.local_events.iter().map(|e| e.position).min()?;
            Label::Numeric(first as f64)
        }
    };
    let answer = match &label {
        Label::Categorical(c) => c.clone(),
        Label::Numeric(v) => render_numeric(task, *v),
    };
    Some(QaSample {
        task,
        context: format!(
            "a series of {} observations is given: {SERIES_PLACEHOLDER}",
            spec.length
        ),
        question: task.question().to_string(),
        answer,
        label,
        series: vec![instance.clone()],
    })
}

/// Derives the seed of the `index`-th item in stream `stream` of a run.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(2 * index as u128);
    rng.next_u64()
}

/// Generates `n` samples cycling through `tasks`; specs that a template
/// cannot use are redrawn.
pub fn generate_dataset(
    n: usize,
    seed: u64,
    tasks: &[TaskKind],
    ranges: &GenRanges,
    qa: &QaConfig,
) -> Result<Vec<QaSample>> {
    ranges.validate()?;
    if n > 0 && tasks.is_empty() {
        return Err(MadiError::config("at least one task is required"));
    }
    let mut out = Vec::with_capacity(n);
    let mut draw = 0u64;
    for i in 0..n {
        let task = tasks[i % tasks.len()];
        let mut tries = 0;
        loop {
            let spec = sample_spec(derive_seed(seed, 0, draw), ranges)?;
            draw += 1;
            let inst = synthesize(&spec)?;
            if let Some(s) = make_qa(&inst, task, qa) {
                out.push(s);
                break;
            }
            tries += 1;
            if tries > 1000 {
                return Err(MadiError::config(format!(
                    "generation ranges never produce a usable {task} sample"
                )));
            }
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    task: TaskKind,
    context: String,
    question: String,
    answer: String,
    label_kind: String,
    label: serde_json::Value,
    series: Vec<Vec<f64>>,
    spec: Vec<AttributeSpec>,
}

impl Record {
    fn from_sample(s: &QaSample) -> Self {
        Record {
            task: s.task,
            context: s.context.clone(),
            question: s.question.clone(),
            answer: s.answer.clone(),
            label_kind: s.label.kind().to_string(),
            label: match &s.label {
                Label::Categorical(c) => serde_json::Value::String(c.clone()),
                Label::Numeric(v) => serde_json::json!(v),
            },
            series: s.series.iter().map(|i| i.values.clone()).collect(),
            spec: s.series.iter().map(|i| i.spec.clone()).collect(),
        }
    }

    fn into_sample(self) -> std::result::Result<QaSample, String> {
        let label = match (self.label_kind.as_str(), self.label) {
            ("categorical", serde_json::Value::String(c)) => Label::Categorical(c),
            ("numeric", serde_json::Value::Number(n)) => {
                Label::Numeric(n.as_f64().ok_or("numeric label out of range")?)
            }
            (k, v) => return Err(format!("label {v} does not match label_kind {k:?}")),
        };
        if self.series.len() != self.spec.len() {
            return Err(format!(
                "{} series but {} specs",
                self.series.len(),
                self.spec.len()
            ));
        }
        let series = self
            .series
            .into_iter()
            .zip(self.spec)
            .map(|(v, s)| TimeSeriesInstance::new(v, s).map_err(|e| e.to_string()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(QaSample {
            task: self.task,
            context: self.context,
            question: self.question,
            answer: self.answer,
            label,
            series,
        })
    }
}

pub fn write_dataset(samples: &[QaSample], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| MadiError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in samples {
        let line = serde_json::to_string(&Record::from_sample(s))
            .map_err(|e| MadiError::Validation(format!("serialising sample: {e}")))?;
        writeln!(w, "{line}").map_err(|e| MadiError::io(path, e))?;
    }
    w.flush().map_err(|e| MadiError::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<QaSample>> {
    let f = std::fs::File::open(path).map_err(|e| MadiError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| MadiError::io(path, e))?;
        let parse_err = |message: String| MadiError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        out.push(rec.into_sample().map_err(parse_err)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(length: usize) -> AttributeSpec {
        AttributeSpec {
            length,
            trend: Trend {
                kind: TrendKind::None,
                slope: 0.0,
            },
            seasonality: Seasonality {
                period: 0,
                amplitude: 0.0,
            },
            noise_sigma: 0.0,
            local_events: vec![],
            base_level: 0.0,
            seed: 1,
        }
    }

    /// Label recomputation written independently of `make_qa`.
    fn independent_label(s: &QaSample, qa: &QaConfig) -> Label {
        let spec = &s.series[0].spec;
        match s.task {
            TaskKind::TrendClass => {
                let total = spec.trend.slope * spec.length as f64;
                Label::Categorical(
                    match total.partial_cmp(&0.0).unwrap() {
                        _ if total.abs() <= qa.trend_theta => "steady",
                        std::cmp::Ordering::Greater => "increasing",
                        _ => "decreasing",
                    }
                    .into(),
                )
            }
            TaskKind::PeriodValue => Label::Numeric(spec.seasonality.period as f64),
            TaskKind::AmplitudeValue => {
                Label::Numeric((spec.seasonality.amplitude * 100.0).round() / 100.0)
            }
            TaskKind::NoiseClass => Label::Categorical(
                (if spec.noise_sigma < qa.noise_threshold { "low" } else { "high" }).into(),
            ),
            TaskKind::EventPresence => Label::Categorical(
                (if spec.local_events.is_empty() { "no" } else { "yes" }).into(),
            ),
            TaskKind::EventPosition => Label::Numeric(
                spec.local_events.iter().map(|e| e.position as f64).fold(f64::INFINITY, f64::min),
            ),
        }
    }

    fn label_close(a: &Label, b: &Label) -> bool {
        match (a, b) {
            (Label::Categorical(x), Label::Categorical(y)) => x == y,
            (Label::Numeric(x), Label::Numeric(y)) => (x - y).abs() < 1e-9,
            _ => false,
        }
    }

    #[test]
    fn collapsed_ranges_give_exact_values() {
        let r = GenRanges {
            length: (100, 100),
            trend_prob: 1.0,
            slope_abs: (0.5, 0.5),
            negative_slope_prob: 0.0,
            periodic_prob: 1.0,
            period: (25, 25),
            amplitude: (2.0, 2.0),
            noise_sigma: (0.1, 0.1),
            base_level: (3.0, 3.0),
            event_prob: 0.0,
            max_events: 0,
            event_magnitude: (1.0, 1.0),
        };
        let s = sample_spec(9, &r).unwrap();
        assert_eq!(s.length, 100);
        assert_eq!(s.trend.slope, 0.5);
        assert_eq!(s.seasonality, Seasonality { period: 25, amplitude: 2.0 });
        assert_eq!(s.noise_sigma, 0.1);
        assert_eq!(s.base_level, 3.0);
        assert!(s.local_events.is_empty());
    }

    #[test]
    fn same_seed_same_spec() {
        let r = GenRanges::default();
        assert_eq!(sample_spec(42, &r).unwrap(), sample_spec(42, &r).unwrap());
        assert_ne!(sample_spec(42, &r).unwrap(), sample_spec(43, &r).unwrap());
    }

    #[test]
    fn every_period_value_is_drawn() {
        let r = GenRanges {
            periodic_prob: 1.0,
            ..Default::default()
        };
        let mut seen = [0usize; 31];
        for seed in 0..1000 {
            seen[sample_spec(seed, &r).unwrap().seasonality.period] += 1;
        }
        assert!(seen[20..=30].iter().all(|&c| c >= 1), "{seen:?}");
    }

    #[test]
    fn empty_range_is_config_error() {
        let r = GenRanges {
            period: (30, 20),
            ..Default::default()
        };
        assert!(matches!(sample_spec(0, &r), Err(MadiError::Config(_))));
    }

    #[test]
    fn all_components_off_is_constant() {
        let mut s = plain(4);
        s.base_level = 5.0;
        assert_eq!(synthesize(&s).unwrap().values, vec![5.0; 4]);
    }

    /// Pearson autocorrelation over the overlapping segment.
    fn autocorr(x: &[f64], lag: usize) -> f64 {
        let (a, b) = (&x[..x.len() - lag], &x[lag..]);
        let ma = a.iter().sum::<f64>() / a.len() as f64;
        let mb = b.iter().sum::<f64>() / b.len() as f64;
        let cov: f64 = a.iter().zip(b).map(|(p, q)| (p - ma) * (q - mb)).sum();
        let va: f64 = a.iter().map(|p| (p - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|q| (q - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn period_is_autocorrelation_peak() {
        let mut s = plain(100);
        s.seasonality = Seasonality { period: 25, amplitude: 1.0 };
        let v = synthesize(&s).unwrap().values;
        let at25 = autocorr(&v, 25);
        for lag in 2..=50 {
            // lag 50 is a second full period and ties with lag 25
            assert!(autocorr(&v, lag) <= at25 + 1e-9, "lag {lag}");
        }
        assert!(autocorr(&v, 24) < at25 - 1e-3);
    }

    #[test]
    fn level_shift_moves_mean() {
        let mut s = plain(100);
        s.local_events = vec![LocalEvent {
            kind: EventKind::LevelShift,
            position: 50,
            magnitude: 10.0,
        }];
        let v = synthesize(&s).unwrap().values;
        let after = v[50..].iter().sum::<f64>() / 50.0;
        let before = v[..50].iter().sum::<f64>() / 50.0;
        assert!((after - before - 10.0).abs() < 1e-12);
    }

    #[test]
    fn event_shapes() {
        let mut s = plain(20);
        s.local_events = vec![
            LocalEvent { kind: EventKind::Spike, position: 3, magnitude: 2.0 },
            LocalEvent { kind: EventKind::Shake, position: 10, magnitude: 1.0 },
        ];
        let v = synthesize(&s).unwrap().values;
        assert_eq!(&v[2..5], &[1.0, 2.0, 1.0]);
        assert_eq!(&v[10..16], &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
        assert_eq!(v[16], 0.0);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = plain(40);
        s.seasonality = Seasonality { period: 25, amplitude: 1.0 };
        assert!(synthesize(&s).is_err());
        let mut s = plain(10);
        s.local_events = vec![LocalEvent { kind: EventKind::Dip, position: 10, magnitude: 1.0 }];
        assert!(synthesize(&s).is_err());
        let mut s = plain(10);
        s.noise_sigma = -1.0;
        assert!(synthesize(&s).is_err());
    }

    #[test]
    fn qa_examples() {
        let qa = QaConfig::default();
        let mut s = plain(256);
        s.trend = Trend { kind: TrendKind::Linear, slope: 0.5 };
        let inst = synthesize(&s).unwrap();
        let q = make_qa(&inst, TaskKind::TrendClass, &qa).unwrap();
        assert_eq!(q.label, Label::Categorical("increasing".into()));
        assert_eq!(q.answer, "increasing");
        assert!(make_qa(&inst, TaskKind::PeriodValue, &qa).is_none());
        assert!(make_qa(&inst, TaskKind::EventPosition, &qa).is_none());
        let q = make_qa(&inst, TaskKind::EventPresence, &qa).unwrap();
        assert_eq!(q.answer, "no");

        let mut s = plain(100);
        s.seasonality = Seasonality { period: 25, amplitude: 1.234 };
        let inst = synthesize(&s).unwrap();
        let q = make_qa(&inst, TaskKind::PeriodValue, &qa).unwrap();
        assert_eq!(q.answer, "25");
        assert_eq!(q.label, Label::Numeric(25.0));
        let q = make_qa(&inst, TaskKind::AmplitudeValue, &qa).unwrap();
        assert_eq!(q.answer, "1.23");
        assert_eq!(q.context.matches(SERIES_PLACEHOLDER).count(), 1);
    }

    #[test]
    fn labels_match_independent_checker() {
        let qa = QaConfig::default();
        let data =
            generate_dataset(300, 5, &TaskKind::ALL, &GenRanges::default(), &qa).unwrap();
        assert_eq!(data.len(), 300);
        for s in &data {
            assert!(label_close(&s.label, &independent_label(s, &qa)), "{s:?}");
        }
    }

    #[test]
    fn round_trip_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let data = generate_dataset(100, 1, &TaskKind::ALL, &GenRanges::default(), &QaConfig::default())
            .unwrap();
        write_dataset(&data, &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), data);

        let empty = dir.path().join("e.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(read_dataset(&empty).unwrap().is_empty());

        let text = std::fs::read_to_string(&path).unwrap();
        let cut = &text[..text.len() - 20];
        std::fs::write(&path, cut).unwrap();
        match read_dataset(&path) {
            Err(MadiError::Parse { line, .. }) => assert_eq!(line, 100),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn synthesize_is_pure(seed in any::<u64>()) {
                let s = sample_spec(seed, &GenRanges::default()).unwrap();
                prop_assert_eq!(synthesize(&s).unwrap().values, synthesize(&s).unwrap().values);
            }

            #[test]
            fn noiseless_series_repeat_after_a_period(seed in any::<u64>()) {
                let r = GenRanges {
                    noise_sigma: (0.0, 0.0),
                    periodic_prob: 1.0,
                    event_prob: 0.0,
                    ..Default::default()
                };
                let s = sample_spec(seed, &r).unwrap();
                let v = synthesize(&s).unwrap().values;
                let p = s.seasonality.period;
                for t in 0..v.len() - p {
                    let want = v[t + p] - s.trend.slope * p as f64;
                    prop_assert!((v[t] - want).abs() < 1e-9);
                }
            }

            #[test]
            fn stats_match_values(seed in any::<u64>()) {
                let s = sample_spec(seed, &GenRanges::default()).unwrap();
                let inst = synthesize(&s).unwrap();
                let again = SeriesStats::of(&inst.values).unwrap();
                prop_assert!((again.mean - inst.stats.mean).abs() < 1e-9);
                prop_assert!((again.std - inst.stats.std).abs() < 1e-9);
                prop_assert_eq!(inst.values.len(), s.length);
            }
        }
    }
}
