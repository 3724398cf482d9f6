use rand::Rng;

use super::fuse::FusedSequence;
use super::model::ModelConfig;
use crate::diffcore::nn::{LayerNorm, TransformerBlock};
use crate::diffcore::{ParamId, ParamStore, Tape, Var};
use crate::encoders::{embed_ids, TextVocab};
use crate::error::{MadiError, Result};

/// Causal transformer over `[E*; answer]` with learned positions and an
/// output layer tied to the shared embedding table.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln: LayerNorm,
    pub max_seq: usize,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let pos = store.add_xavier(format!("{name}.pos"), &[cfg.max_seq, cfg.dim], rng)?;
        let blocks = (0..cfg.decoder_layers)
            .map(|l| TransformerBlock::new(store, &format!("{name}.block{l}"), cfg.dim, cfg.heads, true, rng))
            .collect::<Result<_>>()?;
        let ln = LayerNorm::new(store, &format!("{name}.ln"), cfg.dim)?;
        Ok(Decoder { pos, blocks, ln, max_seq: cfg.max_seq })
    }

    /// Vocabulary logits for rows `start..start+len` of the input sequence.
    pub fn logits(&self, t: &mut Tape, s: &ParamStore, table: Var, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = t.shape(x)[0];
        if n > self.max_seq {
            return Err(MadiError::Validation(format!(
                "decoder input of {n} rows exceeds max_seq {}",
                self.max_seq
            )));
        }
        let pos = t.param(s, self.pos);
        let pos = t.slice_rows(pos, 0, n)?;
        let mut h = t.add(x, pos)?;
        for b in &self.blocks {
            h = b.forward(t, s, h)?;
        }
        let h = t.slice_rows(h, start, len)?;
        let h = self.ln.forward(t, s, h)?;
        t.matmul_t(h, table)
    }
}

/// Summed cross-entropy of `targets` under row-wise `logits`.
pub fn answer_loss(t: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let vocab = t.shape(logits)[1];
    if let Some(bad) = targets.iter().find(|&&id| id >= vocab) {
        return Err(MadiError::Validation(format!("answer token {bad} outside vocabulary of {vocab}")));
    }
    t.cross_entropy_rows(logits, targets)
}

/// Teacher-forced `−Σ_b log P(A_b | A_<b, E*)`. The last prefix row predicts
/// the first answer token.
pub fn lm_loss(
    t: &mut Tape,
    s: &ParamStore,
    dec: &Decoder,
    table: Var,
    fused: &FusedSequence,
    answer: &[usize],
) -> Result<Var> {
    if answer.is_empty() {
        return Err(MadiError::contract("answer must contain at least one token"));
    }
    let vocab = t.shape(table)[0];
    if let Some(bad) = answer.iter().find(|&&id| id >= vocab) {
        return Err(MadiError::Validation(format!("answer token {bad} outside vocabulary of {vocab}")));
    }
    let p = fused.len();
    let x = if answer.len() > 1 {
        let a = embed_ids(t, table, &answer[..answer.len() - 1])?;
        t.concat_rows(&[fused.tokens, a])?
    } else {
        fused.tokens
    };
    let logits = dec.logits(t, s, table, x, p - 1, answer.len())?;
    answer_loss(t, logits, answer)
}

/// Greedy decoding until `<eos>` or `max_len` tokens.
pub fn generate(
    t: &mut Tape,
    s: &ParamStore,
    dec: &Decoder,
    table: Var,
    vocab: &TextVocab,
    fused: &FusedSequence,
    max_len: usize,
) -> Result<String> {
    let mut out: Vec<usize> = Vec::new();
    let mut x = fused.tokens;
    while out.len() < max_len {
        let n = t.shape(x)[0];
        let logits = dec.logits(t, s, table, x, n - 1, 1)?;
        let row = t.value(logits).row(0);
        // lowest index wins ties
        let next = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        if next == vocab.eos() {
            break;
        }
        out.push(next);
        let e = embed_ids(t, table, &[next])?;
        x = t.concat_rows(&[x, e])?;
    }
    Ok(vocab.decode(&out))
}
