//! Command implementations behind the `madi` binary. Each command reads a
//! resolved [`RunConfig`] and writes its artifacts under `out_dir`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use madi_core::assembly::{checkpoint, prepare_all, train, AblationTag, EvalSet, Madi, PreparedSample, TrainOutcome};
use madi_core::config::RunConfig;
use madi_core::datagen::{generate_dataset, read_dataset, write_dataset, QaSample, TaskKind};
use madi_core::diagnostics::{diagnose, write_diagnostics, Diagnostics};
use madi_core::encoders::TextVocab;
use madi_core::evalmetrics::{run_eval, EvalReport};
use madi_core::{MadiError, Result};

pub const OUT_DIR_ENV: &str = "MADI_OUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    pub fn path(self, cfg: &RunConfig) -> PathBuf {
        match self {
            Split::Train => cfg.train_data_path(),
            Split::Eval => cfg.eval_data_path(),
        }
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| MadiError::io(p, e))
}

fn write_file(p: &Path, body: &str) -> Result<()> {
    fs::write(p, body).map_err(|e| MadiError::io(p, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report types serialise")
}

/// Writes the resolved config next to the run's other artifacts.
pub fn log_config(cfg: &RunConfig) -> Result<()> {
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("config.json"), &cfg.to_json())
}

/// Writes both splits; returns their paths.
pub fn cmd_gen(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let (train_seed, eval_seed) = cfg.split_seeds();
    let ranges = cfg.ranges();
    let qa = cfg.qa();
    let mut out = Vec::new();
    for (n, seed, path) in [
        (cfg.n_train, train_seed, cfg.train_data_path()),
        (cfg.n_eval, eval_seed, cfg.eval_data_path()),
    ] {
        let samples = generate_dataset(n, seed, &cfg.tasks, &ranges, &qa)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        write_dataset(&samples, &path)?;
        out.push(path);
    }
    let eval = out.pop().expect("two splits");
    Ok((out.pop().expect("two splits"), eval))
}

/// A dataset split with its model inputs.
pub struct LoadedSplit {
    pub samples: Vec<QaSample>,
    pub prepared: Vec<PreparedSample>,
}

impl LoadedSplit {
    pub fn load(path: &Path, vocab: &TextVocab, model: &madi_core::assembly::ModelConfig) -> Result<Self> {
        let samples = read_dataset(path)?;
        let prepared = prepare_all(&samples, vocab, model)?;
        Ok(LoadedSplit { samples, prepared })
    }

    pub fn as_eval_set(&self) -> EvalSet<'_> {
        EvalSet { samples: &self.samples, prepared: &self.prepared }
    }
}

pub struct TrainedRun {
    pub model: Madi,
    pub outcome: TrainOutcome,
}

/// Trains a fresh model on already-loaded data and writes `config.json`,
/// `metrics.jsonl`, `model.ckpt` and, when evaluation ran, `best.ckpt`.
pub fn train_on(
    cfg: &RunConfig,
    train_split: &LoadedSplit,
    eval_split: Option<&LoadedSplit>,
    progress: &mut dyn FnMut(&madi_core::assembly::StepRecord),
) -> Result<TrainedRun> {
    log_config(cfg)?;
    let mut model = Madi::new(cfg.model()?, TextVocab::standard(), cfg.seed)?;
    let metrics_path = cfg.out_dir.join("metrics.jsonl");
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| MadiError::io(&metrics_path, e))?;
    let mut write_err = None;
    let outcome = train(
        &mut model,
        cfg.ablation,
        &cfg.train()?,
        &train_split.prepared,
        eval_split.map(LoadedSplit::as_eval_set),
        &mut |rec| {
            let line = serde_json::to_string(rec).expect("step records serialise");
            if let Err(e) = writeln!(metrics, "{line}") {
                write_err.get_or_insert(e);
            }
            progress(rec);
        },
    )?;
    if let Some(e) = write_err {
        return Err(MadiError::io(&metrics_path, e));
    }
    checkpoint::save(&model, &cfg.out_dir.join("model.ckpt"))?;
    if let Some(best) = &outcome.best {
        checkpoint::save(&best.model, &cfg.out_dir.join("best.ckpt"))?;
    }
    Ok(TrainedRun { model, outcome })
}

pub fn cmd_train(cfg: &RunConfig, progress: &mut dyn FnMut(&madi_core::assembly::StepRecord)) -> Result<TrainedRun> {
    let vocab = TextVocab::standard();
    let model_cfg = cfg.model()?;
    let train_split = LoadedSplit::load(&cfg.train_data_path(), &vocab, &model_cfg)?;
    let eval_split = if cfg.eval_interval > 0 {
        Some(LoadedSplit::load(&cfg.eval_data_path(), &vocab, &model_cfg)?)
    } else {
        None
    };
    train_on(cfg, &train_split, eval_split.as_ref(), progress)
}

pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("model.ckpt")
}

/// Evaluates with `cfg.ablation` and writes `eval_<split>_<tag>.json` plus
/// the raw answers.
pub fn eval_on(cfg: &RunConfig, model: &Madi, data: &LoadedSplit, split: Split) -> Result<EvalReport> {
    let (report, answers) = run_eval(model, &data.samples, &data.prepared, cfg.ablation, cfg.max_answer)?;
    create_dir(&cfg.out_dir)?;
    let stem = format!("eval_{}_{}", split.as_str(), cfg.ablation);
    write_file(&cfg.out_dir.join(format!("{stem}.json")), &to_json(&report))?;
    let lines: String = data
        .samples
        .iter()
        .zip(&answers)
        .map(|(s, a)| {
            let row = serde_json::json!({ "task": s.task, "answer": s.answer, "prediction": a });
            format!("{row}\n")
        })
        .collect();
    write_file(&cfg.out_dir.join(format!("{stem}_answers.jsonl")), &lines)?;
    Ok(report)
}

pub fn cmd_eval(cfg: &RunConfig, ckpt: &Path, split: Split) -> Result<EvalReport> {
    let model = checkpoint::load(ckpt)?;
    let data = LoadedSplit::load(&split.path(cfg), &model.vocab, &model.config)?;
    eval_on(cfg, &model, &data, split)
}

/// Diagnostics over the first `diag_instances` samples of `split`, written
/// to `out_dir/diagnostics`.
pub fn cmd_diagnose(cfg: &RunConfig, ckpt: &Path, split: Split) -> Result<Diagnostics> {
    let model = checkpoint::load(ckpt)?;
    let mut samples = read_dataset(&split.path(cfg))?;
    samples.truncate(cfg.diag_instances);
    if samples.is_empty() {
        return Err(MadiError::Validation("no samples to diagnose".into()));
    }
    let prepared = prepare_all(&samples, &model.vocab, &model.config)?;
    let d = diagnose(&model, &prepared, cfg.ablation)?;
    write_diagnostics(&cfg.out_dir.join("diagnostics"), &d)?;
    Ok(d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub tag: AblationTag,
    pub seed: u64,
    pub categorical_accuracy: Option<f64>,
    pub numeric_relative_accuracy: Option<f64>,
}

impl AblationRow {
    pub fn from_report(seed: u64, r: &EvalReport) -> Self {
        AblationRow {
            tag: r.ablation,
            seed,
            categorical_accuracy: r.categorical_accuracy,
            numeric_relative_accuracy: r.numeric_relative_accuracy,
        }
    }
}

/// Config of one ablation cell: same data, its own seed, tag and directory.
pub fn ablation_cell(cfg: &RunConfig, tag: AblationTag, seed: u64) -> RunConfig {
    RunConfig {
        seed,
        ablation: tag,
        train_path: Some(cfg.train_data_path()),
        eval_path: Some(cfg.eval_data_path()),
        out_dir: cfg.out_dir.join("ablate").join(format!("{tag}_seed{seed}")),
        ..cfg.clone()
    }
}

/// Trains and evaluates every (tag, seed) pair on the held-out split and
/// writes `ablation.json` and `ablation.tsv`.
pub fn cmd_ablate(cfg: &RunConfig, progress: &mut dyn FnMut(&str)) -> Result<Vec<AblationRow>> {
    log_config(cfg)?;
    let vocab = TextVocab::standard();
    let model_cfg = cfg.model()?;
    let train_split = LoadedSplit::load(&cfg.train_data_path(), &vocab, &model_cfg)?;
    let eval_split = LoadedSplit::load(&cfg.eval_data_path(), &vocab, &model_cfg)?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        for &tag in &cfg.tags {
            let cell = ablation_cell(cfg, tag, seed);
            progress(&format!("ablate {tag} seed {seed}"));
            let run = train_on(&cell, &train_split, Some(&eval_split), &mut |_| {})?;
            let report = eval_on(&cell, &run.model, &eval_split, Split::Eval)?;
            rows.push(AblationRow::from_report(seed, &report));
        }
    }
    write_file(&cfg.out_dir.join("ablation.json"), &to_json(&rows))?;
    write_file(&cfg.out_dir.join("ablation.tsv"), &ablation_table(&rows))?;
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let mut s = String::from("tag\tseed\tcategorical_accuracy\tnumeric_relative_accuracy\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.tag,
            r.seed,
            fmt(r.categorical_accuracy),
            fmt(r.numeric_relative_accuracy)
        ));
    }
    s
}

/// Accuracy of one categorical task in a report, if present.
pub fn task_accuracy(r: &EvalReport, task: TaskKind) -> Option<f64> {
    r.task(task).and_then(|t| t.accuracy.or(t.relative_accuracy))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(tag: AblationTag, seed: u64, acc: f64) -> AblationRow {
        AblationRow { tag, seed, categorical_accuracy: Some(acc), numeric_relative_accuracy: None }
    }

    #[test]
    fn table_has_one_line_per_row() {
        let rows = vec![row(AblationTag::Full, 0, 0.5), row(AblationTag::NoPa, 0, 0.25)];
        let t = ablation_table(&rows);
        assert_eq!(t.lines().count(), 3);
        assert_eq!(t.lines().nth(2).unwrap(), "no_pa\t0\t0.2500\t-");
    }

    #[test]
    fn cells_share_data_but_not_directories() {
        let cfg = RunConfig::default();
        let a = ablation_cell(&cfg, AblationTag::Full, 0);
        let b = ablation_cell(&cfg, AblationTag::NoDdi, 1);
        assert_eq!(a.train_data_path(), b.train_data_path());
        assert_eq!(a.eval_data_path(), cfg.eval_data_path());
        assert_ne!(a.out_dir, b.out_dir);
        assert_eq!((b.seed, b.ablation), (1, AblationTag::NoDdi));
    }
}
