//! Flat run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::assembly::{AblationTag, ModelConfig, TrainConfig};
use crate::datagen::{derive_seed, GenRanges, QaConfig, TaskKind};
use crate::ddi::DdiConfig;
use crate::error::{MadiError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // model
    pub dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub pn: usize,
    pub pv: usize,
    pub max_patches: usize,
    pub queries: usize,
    pub max_seq: usize,
    pub d: usize,
    pub k: usize,
    pub levels: usize,
    pub gamma: f64,
    pub ema_eps: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    // training
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub freeze_ratio: f64,
    pub steps: usize,
    pub batch: usize,
    pub eval_interval: usize,
    pub eval_samples: usize,
    pub max_answer: usize,
    pub seed: u64,
    pub ablation: AblationTag,
    // data
    pub n_train: usize,
    pub n_eval: usize,
    pub tasks: Vec<TaskKind>,
    pub length_min: usize,
    pub length_max: usize,
    pub trend_theta: f64,
    pub noise_threshold: f64,
    pub train_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    // ablation and diagnostics
    pub seeds: Vec<u64>,
    pub tags: Vec<AblationTag>,
    pub diag_instances: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let dd = DdiConfig::default();
        RunConfig {
            dim: m.dim,
            heads: m.heads,
            encoder_layers: m.encoder_layers,
            decoder_layers: m.decoder_layers,
            pn: m.pn,
            pv: m.pv,
            max_patches: m.max_patches,
            queries: m.queries,
            max_seq: m.max_seq,
            d: dd.d,
            k: dd.k,
            levels: dd.levels,
            gamma: dd.gamma,
            ema_eps: dd.eps,
            alpha: dd.alpha,
            beta: dd.beta,
            tau: m.tau,
            lambda1: m.lambda1,
            lambda2: m.lambda2,
            lr: t.lr,
            weight_decay: t.weight_decay,
            warmup_ratio: t.warmup_ratio,
            freeze_ratio: t.freeze_ratio,
            steps: t.steps,
            batch: 16,
            eval_interval: t.eval_interval,
            eval_samples: t.eval_samples,
            max_answer: t.max_answer,
            seed: 0,
            ablation: AblationTag::Full,
            n_train: 2000,
            n_eval: 400,
            tasks: vec![TaskKind::TrendClass, TaskKind::PeriodValue],
            length_min: 128,
            length_max: 256,
            trend_theta: QaConfig::default().trend_theta,
            noise_threshold: QaConfig::default().noise_threshold,
            train_path: None,
            eval_path: None,
            out_dir: PathBuf::from("runs/default"),
            seeds: vec![0, 1, 2],
            tags: vec![AblationTag::Full, AblationTag::NoPa, AblationTag::NoDdi],
            diag_instances: 4,
        }
    }
}

/// Parses `key=value`; the value is read as JSON when it parses, else as a
/// bare string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| MadiError::config(format!("override {s:?} is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl RunConfig {
    /// Defaults, then the optional JSON file, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut obj: Map<String, Value> = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| MadiError::io(p, e))?;
                match serde_json::from_str(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(MadiError::config(format!("{} is not a JSON object", p.display()))),
                    Err(e) => {
                        return Err(MadiError::Parse {
                            path: p.to_path_buf(),
                            line: e.line(),
                            message: e.to_string(),
                        })
                    }
                }
            }
            None => Map::new(),
        };
        for (k, v) in overrides {
            obj.insert(k.clone(), v.clone());
        }
        let cfg: RunConfig =
            serde_json::from_value(Value::Object(obj)).map_err(|e| MadiError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model()?.validate()?;
        self.train()?.validate()?;
        self.ranges().validate()?;
        if self.tasks.is_empty() {
            return Err(MadiError::config("at least one task is required"));
        }
        if self.length_max.div_ceil(self.pn) > self.max_patches {
            return Err(MadiError::config(format!(
                "length_max {} needs more than max_patches {} patches",
                self.length_max, self.max_patches
            )));
        }
        if self.seeds.is_empty() || self.tags.is_empty() {
            return Err(MadiError::config("ablation needs at least one seed and one tag"));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            dim: self.dim,
            heads: self.heads,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            pn: self.pn,
            pv: self.pv,
            max_patches: self.max_patches,
            queries: self.queries,
            max_seq: self.max_seq,
            tau: self.tau,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            ddi: DdiConfig {
                d: self.d,
                k: self.k,
                levels: self.levels,
                gamma: self.gamma,
                eps: self.ema_eps,
                alpha: self.alpha,
                beta: self.beta,
            },
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_ratio: self.warmup_ratio,
            freeze_ratio: self.freeze_ratio,
            eval_interval: self.eval_interval,
            eval_samples: self.eval_samples,
            max_answer: self.max_answer,
            seed: self.seed,
        })
    }

    pub fn ranges(&self) -> GenRanges {
        GenRanges {
            length: (self.length_min, self.length_max),
            ..Default::default()
        }
    }

    pub fn qa(&self) -> QaConfig {
        QaConfig {
            trend_theta: self.trend_theta,
            noise_threshold: self.noise_threshold,
        }
    }

    /// Data seeds of the two splits; they come from different streams.
    pub fn split_seeds(&self) -> (u64, u64) {
        (derive_seed(self.seed, 10, 0), derive_seed(self.seed, 11, 0))
    }

    pub fn train_data_path(&self) -> PathBuf {
        self.train_path.clone().unwrap_or_else(|| self.out_dir.join("train.jsonl"))
    }

    pub fn eval_data_path(&self) -> PathBuf {
        self.eval_path.clone().unwrap_or_else(|| self.out_dir.join("eval.jsonl"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_rejections() {
        let o = vec![parse_override("steps=7").unwrap(), parse_override("ablation=no_pa").unwrap()];
        let c = RunConfig::resolve(None, &o).unwrap();
        assert_eq!(c.steps, 7);
        assert_eq!(c.ablation, AblationTag::NoPa);
        assert!(RunConfig::resolve(None, &[parse_override("bogus=1").unwrap()]).is_err());
        assert!(RunConfig::resolve(None, &[parse_override("levels=0").unwrap()]).is_err());
        assert!(RunConfig::resolve(None, &[parse_override("ablation=no_such").unwrap()]).is_err());
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"steps": 3, "dim": 32}"#).unwrap();
        let c = RunConfig::resolve(Some(&p), &[parse_override("steps=5").unwrap()]).unwrap();
        assert_eq!((c.steps, c.dim), (5, 32));
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        std::fs::write(&p, "{\n\"steps\": }").unwrap();
        assert!(matches!(RunConfig::resolve(Some(&p), &[]), Err(MadiError::Parse { line: 2, .. })));
        assert!(RunConfig::resolve(Some(&dir.path().join("none.json")), &[]).is_err());
    }

    #[test]
    fn split_seeds_differ() {
        let (a, b) = RunConfig::default().split_seeds();
        assert_ne!(a, b);
    }
}
