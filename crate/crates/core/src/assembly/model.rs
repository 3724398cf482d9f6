use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decoder::{lm_loss, Decoder};
use super::fuse::{pos_concat, FusedSequence, InstanceBlock};
use crate::cth::{prepend, HighlightQueries, Modality};
use crate::datagen::QaSample;
use crate::ddi::{ddi_loss, CodebookHierarchy, DdiConfig, DdiLosses, DdiModule, Disentangled, Quantized};
use crate::diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoders::{caption_ids, embed_ids, EncoderDims, NumericEncoder, TextVocab, VisualEncoder};
use crate::error::{MadiError, Result};
use crate::expansion::{expand, normalize, stats_prompt};
use crate::pa::{pa_loss, AlignmentConfig};

/// Parameter-name prefixes frozen during the first training stage.
pub const STAGE1_FROZEN: [&str; 3] = ["dec.", "embed", "venc."];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationTag {
    Full,
    NoPa,
    NoDdi,
    NoCth,
    NoNva,
    NoNca,
    NoMd,
    NoVq,
    NoNum,
}

/// Which modules a forward pass runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    pub numeric_visual: bool,
    pub numeric_caption: bool,
    pub ddi: bool,
    /// Split tokens into common and unique parts before the interaction.
    pub disentangle: bool,
    pub quantize: bool,
    pub cth: bool,
    pub numeric: bool,
}

impl AblationTag {
    pub const ALL: [AblationTag; 9] = [
        AblationTag::Full,
        AblationTag::NoPa,
        AblationTag::NoDdi,
        AblationTag::NoCth,
        AblationTag::NoNva,
        AblationTag::NoNca,
        AblationTag::NoMd,
        AblationTag::NoVq,
        AblationTag::NoNum,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationTag::Full => "full",
            AblationTag::NoPa => "no_pa",
            AblationTag::NoDdi => "no_ddi",
            AblationTag::NoCth => "no_cth",
            AblationTag::NoNva => "no_nva",
            AblationTag::NoNca => "no_nca",
            AblationTag::NoMd => "no_md",
            AblationTag::NoVq => "no_vq",
            AblationTag::NoNum => "no_num",
        }
    }

    pub fn toggles(self) -> Toggles {
        let mut t = Toggles {
            numeric_visual: true,
            numeric_caption: true,
            ddi: true,
            disentangle: true,
            quantize: true,
            cth: true,
            numeric: true,
        };
        match self {
            AblationTag::Full => {}
            AblationTag::NoPa => {
                t.numeric_visual = false;
                t.numeric_caption = false;
            }
            AblationTag::NoDdi => t.ddi = false,
            AblationTag::NoCth => t.cth = false,
            AblationTag::NoNva => t.numeric_visual = false,
            AblationTag::NoNca => t.numeric_caption = false,
            AblationTag::NoMd => t.disentangle = false,
            AblationTag::NoVq => t.quantize = false,
            AblationTag::NoNum => {
                t.numeric = false;
                t.numeric_visual = false;
                t.numeric_caption = false;
                t.ddi = false;
            }
        }
        t
    }
}

impl Toggles {
    pub fn pa(&self) -> bool {
        self.numeric && (self.numeric_visual || self.numeric_caption)
    }

    /// Whether the shared codebooks are used at all.
    pub fn uses_codebooks(&self) -> bool {
        self.numeric && self.ddi && self.disentangle && self.quantize
    }
}

impl fmt::Display for AblationTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationTag {
    type Err = MadiError;

    fn from_str(s: &str) -> Result<Self> {
        AblationTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| MadiError::config(format!("unknown ablation tag {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub pn: usize,
    pub pv: usize,
    pub max_patches: usize,
    pub queries: usize,
    pub max_seq: usize,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub ddi: DdiConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            pn: 8,
            pv: 16,
            max_patches: 64,
            queries: 4,
            max_seq: 512,
            tau: 0.07,
            lambda1: 0.02,
            lambda2: 0.2,
            ddi: DdiConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(MadiError::config(msg.to_string())) };
        c(self.dim > 0 && self.heads > 0 && self.dim % self.heads == 0, "dim must be a positive multiple of heads")?;
        c(self.decoder_layers >= 1, "the decoder needs at least one block")?;
        c(self.pn >= 1, "numeric patch length must be positive")?;
        c(self.pv >= 4 && self.pv >= self.pn, "pixel patch size must be at least 4 and at least pn")?;
        c(self.max_patches >= 1 && self.max_seq >= 2, "positional tables must be non-empty")?;
        c(self.queries >= 1, "highlight query count must be at least 1")?;
        c(self.tau > 0.0 && self.tau.is_finite(), "temperature must be positive")?;
        c(self.lambda1 >= 0.0 && self.lambda2 >= 0.0, "loss weights must be non-negative")?;
        self.ddi.validate()
    }

    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            dim: self.dim,
            heads: self.heads,
            layers: self.encoder_layers,
            pn: self.pn,
            pv: self.pv,
            max_patches: self.max_patches,
        }
    }
}

/// Host-side inputs of one series, computed once per sample.
#[derive(Clone, Debug)]
pub struct PreparedInstance {
    pub prompt_ids: Vec<usize>,
    pub patches: Tensor,
    pub pixels: Tensor,
    pub captions: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub context_ids: Vec<usize>,
    pub question_ids: Vec<usize>,
    /// Answer tokens followed by `<eos>`.
    pub answer_ids: Vec<usize>,
    pub instances: Vec<PreparedInstance>,
}

pub fn prepare(sample: &QaSample, vocab: &TextVocab, cfg: &ModelConfig) -> Result<PreparedSample> {
    let instances = sample
        .series
        .iter()
        .map(|inst| {
            let ns = normalize(&inst.values)?;
            let b = expand(&ns, cfg.pn, cfg.pv)?;
            if b.patch_count() > cfg.max_patches {
                return Err(MadiError::Validation(format!(
                    "series of length {} needs {} patches, more than max_patches {}",
                    inst.values.len(),
                    b.patch_count(),
                    cfg.max_patches
                )));
            }
            Ok(PreparedInstance {
                prompt_ids: vocab.encode_strict(&stats_prompt(&ns))?,
                patches: b.numeric,
                pixels: b.pixels,
                captions: caption_ids(vocab, &b.captions)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut answer_ids = vocab.encode_strict(&sample.answer)?;
    answer_ids.push(vocab.eos());
    let question_ids = vocab.encode_strict(&sample.question)?;
    if question_ids.is_empty() {
        return Err(MadiError::Validation("question has no tokens".into()));
    }
    Ok(PreparedSample {
        context_ids: vocab.encode_strict(&sample.context)?,
        question_ids,
        answer_ids,
        instances,
    })
}

pub fn prepare_all(samples: &[QaSample], vocab: &TextVocab, cfg: &ModelConfig) -> Result<Vec<PreparedSample>> {
    samples.iter().map(|s| prepare(s, vocab, cfg)).collect()
}

/// Intermediate tokens of one series, kept for losses and diagnostics.
#[derive(Clone, Debug)]
pub struct InstanceTrace {
    pub numeric: Option<Var>,
    pub visual: Var,
    pub caption: Option<Var>,
    pub disentangled: Option<(Disentangled, Disentangled)>,
}

/// Result of one forward pass through everything before the decoder.
#[derive(Clone, Debug)]
pub struct SampleForward {
    pub fused: FusedSequence,
    pub l_pa: Option<Var>,
    pub l_ddi: Option<DdiLosses>,
    pub traces: Vec<InstanceTrace>,
}

impl SampleForward {
    pub fn quantized(&self) -> impl Iterator<Item = &Quantized> {
        self.traces
            .iter()
            .filter_map(|t| t.disentangled.as_ref())
            .flat_map(|(a, b)| [a.quantized.as_ref(), b.quantized.as_ref()])
            .flatten()
    }
}

/// Per-sample loss components.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub lm: Var,
    pub pa: Option<Var>,
    pub ddi: Option<Var>,
    pub total: Var,
}

/// The full model: shared text table, encoders, DDI, CTH and decoder, plus
/// the EMA codebooks that live outside the parameter store.
#[derive(Clone, Debug)]
pub struct Madi {
    pub config: ModelConfig,
    pub vocab: TextVocab,
    pub store: ParamStore,
    pub embed: ParamId,
    pub numeric: NumericEncoder,
    pub visual: VisualEncoder,
    pub ddi: DdiModule,
    pub codebooks: CodebookHierarchy,
    pub cth: HighlightQueries,
    pub decoder: Decoder,
}

impl Madi {
    pub fn new(config: ModelConfig, vocab: TextVocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let embed = store.add_xavier("embed", &[vocab.len(), d], &mut rng)?;
        let dims = config.encoder_dims();
        let numeric = NumericEncoder::new(&mut store, "nenc", dims, &mut rng)?;
        let visual = VisualEncoder::new(&mut store, "venc", dims, &mut rng)?;
        let ddi = DdiModule::new(&mut store, "ddi", d, config.heads, &config.ddi, &mut rng)?;
        let cth = HighlightQueries::new(&mut store, "cth", d, config.queries, &mut rng)?;
        let decoder = Decoder::new(&mut store, "dec", &config, &mut rng)?;
        Ok(Madi {
            codebooks: CodebookHierarchy::new(&config.ddi)?,
            config,
            vocab,
            store,
            embed,
            numeric,
            visual,
            ddi,
            cth,
            decoder,
        })
    }

    fn alignment(&self, tog: Toggles) -> AlignmentConfig {
        AlignmentConfig {
            tau: self.config.tau,
            numeric_visual: tog.numeric_visual,
            numeric_caption: tog.numeric_caption,
        }
    }

    /// Down-projected numeric and visual tokens of every instance, used to
    /// seed the codebooks.
    pub fn codebook_seed_tokens(&self, samples: &[&PreparedSample]) -> Result<Vec<Tensor>> {
        let mut out = Vec::new();
        for s in samples {
            for inst in &s.instances {
                let mut t = Tape::new();
                let p = t.constant(inst.patches.clone());
                let en = self.numeric.forward(&mut t, &self.store, p)?;
                let px = t.constant(inst.pixels.clone());
                let ev = self.visual.forward(&mut t, &self.store, px)?;
                for e in [en, ev] {
                    let d = self.ddi.project_down(&mut t, &self.store, e)?;
                    out.push(t.value(d).clone());
                }
            }
        }
        Ok(out)
    }

    /// Encodes every series, applies alignment, disentanglement and
    /// highlighting as toggled, and fuses the result with the text.
    pub fn forward_prefix(
        &self,
        t: &mut Tape,
        s: &PreparedSample,
        tog: Toggles,
        want_captions: bool,
    ) -> Result<SampleForward> {
        let st = &self.store;
        let table = t.param(st, self.embed);
        let context = embed_ids(t, table, &s.context_ids)?;
        let question = embed_ids(t, table, &s.question_ids)?;
        let pooled_q = if tog.cth { Some(self.cth.pool_question(t, st, question)?) } else { None };
        let align = self.alignment(tog);
        let (mut pa_terms, mut ddi_terms) = (Vec::new(), Vec::new());
        let mut blocks = Vec::new();
        let mut traces = Vec::new();
        for inst in &s.instances {
            let prompt = embed_ids(t, table, &inst.prompt_ids)?;
            let px = t.constant(inst.pixels.clone());
            let ev = self.visual.forward(t, st, px)?;
            let en = if tog.numeric {
                let p = t.constant(inst.patches.clone());
                Some(self.numeric.forward(t, st, p)?)
            } else {
                None
            };
            let es = if (tog.pa() && tog.numeric_caption) || want_captions {
                Some(crate::encoders::encode_caption_ids(t, table, &inst.captions)?)
            } else {
                None
            };
            if let (Some(en), true) = (en, tog.pa()) {
                let es_v = es.unwrap_or(ev);
                pa_terms.push(pa_loss(t, en, ev, es_v, &align)?);
            }
            let mut disentangled = None;
            let (bar_n, bar_v) = match en {
                Some(en) if tog.ddi => {
                    if tog.disentangle {
                        let (dn, dv) = if tog.quantize {
                            (
                                self.ddi.rvq_forward(t, st, en, &self.codebooks)?,
                                self.ddi.rvq_forward(t, st, ev, &self.codebooks)?,
                            )
                        } else {
                            (self.ddi.projector_forward(t, st, en)?, self.ddi.projector_forward(t, st, ev)?)
                        };
                        let c = &self.config.ddi;
                        ddi_terms.push(ddi_loss(t, &dn, &dv, c.alpha, c.beta, self.config.tau)?);
                        let out = self.ddi.unique_interaction(t, st, en, ev, dn.u, dv.u)?;
                        disentangled = Some((dn, dv));
                        out
                    } else {
                        self.ddi.unique_interaction(t, st, en, ev, en, ev)?
                    }
                }
                Some(en) => (en, ev),
                None => (ev, ev),
            };
            let (hat_n, hat_v) = match pooled_q {
                Some(pq) => {
                    let hv = self.cth.highlight(t, st, Modality::Visual, bar_v, pq)?;
                    let hat_v = prepend(t, hv, bar_v)?;
                    let hat_n = if en.is_some() {
                        let hn = self.cth.highlight(t, st, Modality::Numeric, bar_n, pq)?;
                        Some(prepend(t, hn, bar_n)?)
                    } else {
                        None
                    };
                    (hat_n, hat_v)
                }
                None => (en.map(|_| bar_n), bar_v),
            };
            blocks.push(InstanceBlock { prompt, numeric: hat_n, visual: hat_v });
            traces.push(InstanceTrace { numeric: en, visual: ev, caption: es, disentangled });
        }
        let fused = pos_concat(t, &s.context_ids, context, self.vocab.ts(), question, &blocks)?;
        let l_pa = sum_vars(t, &pa_terms)?;
        let l_ddi = if ddi_terms.is_empty() {
            None
        } else {
            let pick = |f: fn(&DdiLosses) -> Var| ddi_terms.iter().map(f).collect::<Vec<_>>();
            let (vq, com, orth, total) = (pick(|d| d.vq), pick(|d| d.com), pick(|d| d.orth), pick(|d| d.total));
            Some(DdiLosses {
                vq: sum_vars(t, &vq)?.expect("non-empty"),
                com: sum_vars(t, &com)?.expect("non-empty"),
                orth: sum_vars(t, &orth)?.expect("non-empty"),
                total: sum_vars(t, &total)?.expect("non-empty"),
            })
        };
        Ok(SampleForward { fused, l_pa, l_ddi, traces })
    }

    /// Teacher-forced loss of one sample.
    pub fn sample_loss(&self, t: &mut Tape, s: &PreparedSample, tog: Toggles) -> Result<(SampleForward, LossParts)> {
        let fwd = self.forward_prefix(t, s, tog, false)?;
        let table = t.param(&self.store, self.embed);
        let lm = lm_loss(t, &self.store, &self.decoder, table, &fwd.fused, &s.answer_ids)?;
        let ddi = fwd.l_ddi.as_ref().map(|d| d.total);
        let total = total_loss(t, lm, fwd.l_pa, ddi, self.config.lambda1, self.config.lambda2)?;
        let pa = fwd.l_pa;
        Ok((fwd, LossParts { lm, pa, ddi, total }))
    }

    /// Alignment loss alone, summed over the sample's series. Only the two
    /// encoders and the caption embedding take part.
    pub fn alignment_loss(&self, t: &mut Tape, s: &PreparedSample) -> Result<Var> {
        let st = &self.store;
        let table = t.param(st, self.embed);
        let align = self.alignment(AblationTag::Full.toggles());
        let mut terms = Vec::with_capacity(s.instances.len());
        for inst in &s.instances {
            let px = t.constant(inst.pixels.clone());
            let ev = self.visual.forward(t, st, px)?;
            let p = t.constant(inst.patches.clone());
            let en = self.numeric.forward(t, st, p)?;
            let es = crate::encoders::encode_caption_ids(t, table, &inst.captions)?;
            terms.push(pa_loss(t, en, ev, es, &align)?);
        }
        sum_vars(t, &terms)?.ok_or_else(|| MadiError::Validation("sample has no series".into()))
    }

    /// Greedy answer for one sample.
    pub fn answer(&self, s: &PreparedSample, tog: Toggles, max_len: usize) -> Result<String> {
        let mut t = Tape::new();
        let fwd = self.forward_prefix(&mut t, s, tog, false)?;
        let table = t.param(&self.store, self.embed);
        super::decoder::generate(&mut t, &self.store, &self.decoder, table, &self.vocab, &fwd.fused, max_len)
    }

    pub fn set_stage1_frozen(&mut self, frozen: bool) {
        if frozen {
            self.store.set_frozen_by_prefix(&STAGE1_FROZEN, true);
        } else {
            self.store.unfreeze_all();
        }
    }
}

fn sum_vars(t: &mut Tape, vs: &[Var]) -> Result<Option<Var>> {
    let mut it = vs.iter();
    let Some(&first) = it.next() else { return Ok(None) };
    let mut acc = first;
    for &v in it {
        acc = t.add(acc, v)?;
    }
    Ok(Some(acc))
}

/// `L_LM + λ1·L_PA + λ2·L_DDI`; absent components count as zero. Every
/// present component must be finite.
pub fn total_loss(
    t: &mut Tape,
    lm: Var,
    pa: Option<Var>,
    ddi: Option<Var>,
    lambda1: f64,
    lambda2: f64,
) -> Result<Var> {
    let mut terms = vec![(lm, 1.0, "L_LM")];
    if let Some(p) = pa {
        terms.push((p, lambda1, "L_PA"));
    }
    if let Some(d) = ddi {
        terms.push((d, lambda2, "L_DDI"));
    }
    for (v, _, name) in &terms {
        let x = t.value(*v);
        if !x.is_scalar() {
            return Err(MadiError::contract(format!("{name} is not a scalar")));
        }
        if !x.item().is_finite() {
            return Err(MadiError::NonFinite(format!("{name} = {}", x.item())));
        }
    }
    let weighted: Vec<(Var, f64)> = terms.iter().map(|(v, w, _)| (*v, *w)).collect();
    crate::ddi::weighted_sum(t, &weighted)
}
