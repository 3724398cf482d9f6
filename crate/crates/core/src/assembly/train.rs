use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{AblationTag, Madi, PreparedSample};
use crate::datagen::QaSample;
use crate::ddi::EmaAccumulator;
use crate::diffcore::{AdamW, AdamWConfig, CosineSchedule, Tape};
use crate::error::{MadiError, Result};
use crate::evalmetrics::score_answer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    /// Fraction of steps spent in the first stage.
    pub freeze_ratio: f64,
    /// Steps between evaluations; 0 disables them.
    pub eval_interval: usize,
    /// Evaluation samples scored at each interval.
    pub eval_samples: usize,
    pub max_answer: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1200,
            batch: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_ratio: 0.02,
            freeze_ratio: 0.02,
            eval_interval: 200,
            eval_samples: 64,
            max_answer: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(MadiError::config("batch size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return Err(MadiError::config("learning rate must be positive and weight decay non-negative"));
        }
        for (name, r) in [("warmup_ratio", self.warmup_ratio), ("freeze_ratio", self.freeze_ratio)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(MadiError::config(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        Ok(())
    }

    pub fn frozen_steps(&self) -> usize {
        (self.freeze_ratio * self.steps as f64).ceil() as usize
    }
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(rename = "L_LM")]
    pub l_lm: f64,
    #[serde(rename = "L_PA")]
    pub l_pa: f64,
    #[serde(rename = "L_DDI")]
    pub l_ddi: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Clone, Copy)]
pub struct EvalSet<'a> {
    pub samples: &'a [QaSample],
    pub prepared: &'a [PreparedSample],
}

#[derive(Clone, Debug)]
pub struct BestCheckpoint {
    pub step: usize,
    pub score: f64,
    pub model: Box<Madi>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<StepRecord>,
    pub best: Option<BestCheckpoint>,
}

/// Mean per-sample score (exact match or relative accuracy) over the first
/// `limit` samples.
pub fn quick_score(model: &Madi, tag: AblationTag, set: EvalSet, limit: usize, max_answer: usize) -> Result<f64> {
    let n = limit.min(set.samples.len());
    if n == 0 {
        return Ok(0.0);
    }
    let tog = tag.toggles();
    let mut total = 0.0;
    for (s, p) in set.samples.iter().zip(set.prepared).take(n) {
        let ans = model.answer(p, tog, max_answer)?;
        total += score_answer(s, &ans);
    }
    Ok(total / n as f64)
}

/// Two-stage training. The model is updated in place; the returned log has
/// one record per step.
pub fn train(
    model: &mut Madi,
    tag: AblationTag,
    cfg: &TrainConfig,
    data: &[PreparedSample],
    eval: Option<EvalSet>,
    progress: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(MadiError::Validation("training set is empty".into()));
    }
    let tog = tag.toggles();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut best: Option<BestCheckpoint> = None;
    if cfg.steps == 0 {
        return Ok(TrainOutcome { log, best });
    }

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut order_rng);
    let mut cursor = 0;
    let mut next_batch = |order: &mut Vec<usize>| {
        let mut b = Vec::with_capacity(cfg.batch);
        while b.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            b.push(order[cursor]);
            cursor += 1;
        }
        b
    };

    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let sched = CosineSchedule::new(cfg.lr, cfg.steps, cfg.warmup_ratio);
    let frozen_steps = cfg.frozen_steps();

    for step in 0..cfg.steps {
        let batch = next_batch(&mut order);
        if tog.uses_codebooks() && !model.codebooks.initialized {
            let refs: Vec<&PreparedSample> = batch.iter().map(|&i| &data[i]).collect();
            let seeds = model.codebook_seed_tokens(&refs)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(2);
            model.codebooks.init_from(&seeds, &mut rng)?;
        }
        model.set_stage1_frozen(step < frozen_steps);

        let mut t = Tape::new();
        let mut acc = EmaAccumulator::new(&model.codebooks);
        let (mut totals, mut lm, mut pa, mut ddi) = (Vec::new(), 0.0, 0.0, 0.0);
        for &i in &batch {
            let (fwd, parts) = model
                .sample_loss(&mut t, &data[i], tog)
                .map_err(|e| diverged(step, e))?;
            for q in fwd.quantized() {
                acc.add(q);
            }
            lm += t.value(parts.lm).item();
            pa += parts.pa.map_or(0.0, |v| t.value(v).item());
            ddi += parts.ddi.map_or(0.0, |v| t.value(v).item());
            totals.push((parts.total, 1.0 / batch.len() as f64));
        }
        let loss = crate::ddi::weighted_sum(&mut t, &totals)?;
        let lv = t.value(loss).item();
        if !lv.is_finite() {
            return Err(MadiError::Diverged { step, component: format!("total loss {lv}") });
        }
        let grads = t.backward(loss).map_err(|e| diverged(step, e))?.into_params();
        opt.step(&mut model.store, &grads, sched.lr(step))?;
        if tog.uses_codebooks() && !acc.is_empty() {
            model.codebooks.ema_update(&acc)?;
        }

        let b = batch.len() as f64;
        let mut rec = StepRecord { step, l_lm: lm / b, l_pa: pa / b, l_ddi: ddi / b, eval_acc: None };
        if let Some(set) = eval {
            if cfg.eval_interval > 0 && ((step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps) {
                model.store.unfreeze_all();
                let score = quick_score(model, tag, set, cfg.eval_samples, cfg.max_answer)?;
                rec.eval_acc = Some(score);
                if best.as_ref().is_none_or(|b| score > b.score) {
                    best = Some(BestCheckpoint { step, score, model: Box::new(model.clone()) });
                }
            }
        }
        progress(&rec);
        log.push(rec);
    }
    model.store.unfreeze_all();
    Ok(TrainOutcome { log, best })
}

fn diverged(step: usize, e: MadiError) -> MadiError {
    match e {
        MadiError::NonFinite(what) => MadiError::Diverged { step, component: what },
        MadiError::Numerical { node, op } => MadiError::Diverged {
            step,
            component: format!("gradient of node {node} ({op})"),
        },
        other => other,
    }
}

/// Alignment-only training of the encoders at a constant learning rate.
/// Returns the mean alignment loss of every step.
pub fn train_alignment(
    model: &mut Madi,
    data: &[PreparedSample],
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if data.is_empty() || batch == 0 {
        return Err(MadiError::Validation("alignment training needs data and a positive batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut opt = AdamW::new(AdamWConfig { lr, weight_decay: 0.0, ..Default::default() });
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        order.shuffle(&mut rng);
        let mut t = Tape::new();
        let mut terms = Vec::with_capacity(batch);
        for &i in order.iter().cycle().take(batch) {
            let l = model.alignment_loss(&mut t, &data[i]).map_err(|e| diverged(step, e))?;
            terms.push((l, 1.0 / batch as f64));
        }
        let loss = crate::ddi::weighted_sum(&mut t, &terms)?;
        let lv = t.value(loss).item();
        if !lv.is_finite() {
            return Err(MadiError::Diverged { step, component: "L_PA".into() });
        }
        let grads = t.backward(loss).map_err(|e| diverged(step, e))?.into_params();
        opt.step(&mut model.store, &grads, lr)?;
        log.push(lv);
    }
    Ok(log)
}
