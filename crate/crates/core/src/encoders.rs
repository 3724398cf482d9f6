//! Closed-vocabulary tokenizer and the per-modality encoders.

use std::collections::HashMap;

use rand::Rng;

use crate::datagen::TaskKind;
use crate::diffcore::nn::{Linear, TransformerBlock};
use crate::diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{MadiError, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const TS: &str = "<ts>";
const SPECIALS: [&str; 4] = [PAD, UNK, EOS, TS];

/// Lowercased letter runs become words; every other visible character is a
/// token of its own; the special markers are matched literally.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '<' {
            if let Some(sp) = SPECIALS.iter().find(|s| {
                let sc: Vec<char> = s.chars().collect();
                chars[i..].starts_with(&sc)
            }) {
                out.push(sp.to_string());
                i += sp.chars().count();
                continue;
            }
        }
        if c.is_alphabetic() {
            let start = i;
            while i < chars.len() && chars[i].is_alphabetic() {
                i += 1;
            }
            out.push(chars[start..i].iter().collect::<String>().to_lowercase());
            continue;
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
        i += 1;
    }
    out
}

fn is_word(tok: &str) -> bool {
    tok.chars().next().is_some_and(char::is_alphabetic)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TextVocab {
    /// Special markers first (so `<pad>` is 0), then `extra` in order,
    /// skipping duplicates.
    pub fn from_tokens<S: AsRef<str>>(extra: &[S]) -> Self {
        let mut v = TextVocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in SPECIALS.iter().copied().chain(extra.iter().map(|s| s.as_ref())) {
            if !v.index.contains_key(t) {
                v.index.insert(t.to_string(), v.tokens.len());
                v.tokens.push(t.to_string());
            }
        }
        v
    }

    /// Every token the generators, prompts and captions can emit.
    pub fn standard() -> Self {
        let mut toks: Vec<String> = ('0'..='9').map(String::from).collect();
        for p in ['.', ',', ':', '?', '-', '[', ']', '|', '=', '+'] {
            toks.push(p.to_string());
        }
        let mut text = String::from(
            "a series of observations is given offset scaling length max min left right \
             t mean std yes no",
        );
        for task in TaskKind::ALL {
            text.push(' ');
            text.push_str(task.question());
            for c in task.classes() {
                text.push(' ');
                text.push_str(c);
            }
        }
        for t in tokenize(&text) {
            if !toks.contains(&t) {
                toks.push(t);
            }
        }
        TextVocab::from_tokens(&toks)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, tok: &str) -> Option<usize> {
        self.index.get(tok).copied()
    }

    pub fn unk(&self) -> usize {
        self.index[UNK]
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    pub fn ts(&self) -> usize {
        self.index[TS]
    }

    /// Token ids; unknown tokens map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or_else(|| self.unk()))
            .collect()
    }

    /// Like [`encode`](Self::encode) but rejects tokens outside the vocabulary.
    pub fn encode_strict(&self, text: &str) -> Result<Vec<usize>> {
        tokenize(text)
            .iter()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| MadiError::Validation(format!("token {t:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Inverse of tokenisation: a space goes only between two word tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        let mut prev_word = false;
        for &id in ids {
            let tok = self.tokens.get(id).map_or(UNK, String::as_str);
            let w = is_word(tok);
            if w && prev_word {
                s.push(' ');
            }
            s.push_str(tok);
            prev_word = w;
        }
        s
    }
}

/// Sizes shared by the encoders.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderDims {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub pn: usize,
    pub pv: usize,
    pub max_patches: usize,
}

fn run_blocks(blocks: &[TransformerBlock], t: &mut Tape, s: &ParamStore, mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(t, s, x)?;
    }
    Ok(x)
}

fn check_patches(t: &Tape, x: Var, width: usize, max: usize, what: &str) -> Result<usize> {
    let shape = t.shape(x);
    if shape.len() != 2 || shape[1] != width {
        return Err(MadiError::Shape {
            context: format!("{what} patches"),
            expected: vec![shape.first().copied().unwrap_or(0), width],
            actual: shape.to_vec(),
        });
    }
    if shape[0] > max {
        return Err(MadiError::contract(format!(
            "{} {what} patches exceed the positional table of {max}",
            shape[0]
        )));
    }
    Ok(shape[0])
}

/// Patch values concatenated with a learned position embedding, a two-layer
/// GELU projection, then bidirectional transformer blocks.
#[derive(Clone, Debug)]
pub struct NumericEncoder {
    pub pos: ParamId,
    pub lin1: Linear,
    pub lin2: Linear,
    pub blocks: Vec<TransformerBlock>,
    dims: EncoderDims,
}

impl NumericEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: EncoderDims, rng: &mut R) -> Result<Self> {
        let d = dims.dim;
        let pos = store.add_xavier(format!("{name}.pos"), &[dims.max_patches, d], rng)?;
        let lin1 = Linear::new(store, &format!("{name}.in1"), dims.pn + d, d, true, rng)?;
        let lin2 = Linear::new(store, &format!("{name}.in2"), d, d, true, rng)?;
        let blocks = (0..dims.layers)
            .map(|l| TransformerBlock::new(store, &format!("{name}.block{l}"), d, dims.heads, false, rng))
            .collect::<Result<_>>()?;
        Ok(NumericEncoder { pos, lin1, lin2, blocks, dims })
    }

    /// `patches` is `Ñ × pn`; returns `Ñ × D`.
    pub fn forward(&self, t: &mut Tape, s: &ParamStore, patches: Var) -> Result<Var> {
        let n = check_patches(t, patches, self.dims.pn, self.dims.max_patches, "numeric")?;
        let pos = t.param(s, self.pos);
        let pos = t.slice_rows(pos, 0, n)?;
        let x = t.concat_cols(&[patches, pos])?;
        let x = self.lin1.forward(t, s, x)?;
        let x = t.gelu(x)?;
        let x = self.lin2.forward(t, s, x)?;
        run_blocks(&self.blocks, t, s, x)
    }
}

/// Flattened pixel patches, a linear projection plus learned positions,
/// then transformer blocks.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub proj: Linear,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    dims: EncoderDims,
}

impl VisualEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: EncoderDims, rng: &mut R) -> Result<Self> {
        let d = dims.dim;
        let proj = Linear::new(store, &format!("{name}.proj"), dims.pv * dims.pv, d, true, rng)?;
        let pos = store.add_xavier(format!("{name}.pos"), &[dims.max_patches, d], rng)?;
        let blocks = (0..dims.layers)
            .map(|l| TransformerBlock::new(store, &format!("{name}.block{l}"), d, dims.heads, false, rng))
            .collect::<Result<_>>()?;
        Ok(VisualEncoder { proj, pos, blocks, dims })
    }

    /// Projection of the flattened patches before positions are added.
    pub fn project(&self, t: &mut Tape, s: &ParamStore, pixels: Var) -> Result<Var> {
        check_patches(t, pixels, self.dims.pv * self.dims.pv, self.dims.max_patches, "pixel")?;
        self.proj.forward(t, s, pixels)
    }

    /// `pixels` is `Ñ × pv²`; returns `Ñ × D`.
    pub fn forward(&self, t: &mut Tape, s: &ParamStore, pixels: Var) -> Result<Var> {
        let x = self.project(t, s, pixels)?;
        let n = t.shape(x)[0];
        let pos = t.param(s, self.pos);
        let pos = t.slice_rows(pos, 0, n)?;
        let x = t.add(x, pos)?;
        run_blocks(&self.blocks, t, s, x)
    }
}

/// Rows of the shared embedding table for each token id.
pub fn embed_ids(t: &mut Tape, table: Var, ids: &[usize]) -> Result<Var> {
    if ids.is_empty() {
        return Err(MadiError::contract("cannot embed an empty token sequence"));
    }
    t.gather_rows(table, ids)
}

/// Embeds `text` with the shared table.
pub fn embed_text(t: &mut Tape, table: Var, vocab: &TextVocab, text: &str) -> Result<Var> {
    let ids = vocab.encode(text);
    if ids.is_empty() {
        return Err(MadiError::contract("cannot embed empty text"));
    }
    embed_ids(t, table, &ids)
}

/// Token ids of every caption, in order.
pub fn caption_ids(vocab: &TextVocab, captions: &[String]) -> Result<Vec<Vec<usize>>> {
    captions
        .iter()
        .map(|c| {
            let ids = vocab.encode(c);
            if ids.is_empty() {
                Err(MadiError::contract("empty caption"))
            } else {
                Ok(ids)
            }
        })
        .collect()
}

/// One mean-pooled embedding row per caption.
pub fn encode_caption_ids(t: &mut Tape, table: Var, captions: &[Vec<usize>]) -> Result<Var> {
    if captions.is_empty() {
        return Err(MadiError::contract("no captions to encode"));
    }
    let all: Vec<usize> = captions.iter().flatten().copied().collect();
    let rows = embed_ids(t, table, &all)?;
    let mut avg = Tensor::zeros(&[captions.len(), all.len()]);
    let mut col = 0;
    for (i, c) in captions.iter().enumerate() {
        if c.is_empty() {
            return Err(MadiError::contract("empty caption"));
        }
        let w = 1.0 / c.len() as f64;
        for v in &mut avg.row_mut(i)[col..col + c.len()] {
            *v = w;
        }
        col += c.len();
    }
    let avg = t.constant(avg);
    t.matmul(avg, rows)
}

pub fn encode_caption(t: &mut Tape, table: Var, vocab: &TextVocab, captions: &[String]) -> Result<Var> {
    let ids = caption_ids(vocab, captions)?;
    encode_caption_ids(t, table, &ids)
}
