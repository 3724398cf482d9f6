use crate::diffcore::{Tape, Var};
use crate::error::{MadiError, Result};

/// Origin of one row of the fused sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Context,
    Question,
    StatsPrompt(usize),
    Numeric(usize),
    Visual(usize),
    Answer,
}

/// Token blocks that replace the `i`-th placeholder. `numeric` is `None`
/// when the numeric modality is removed.
#[derive(Clone, Copy, Debug)]
pub struct InstanceBlock {
    pub prompt: Var,
    pub numeric: Option<Var>,
    pub visual: Var,
}

#[derive(Clone, Debug)]
pub struct FusedSequence {
    pub tokens: Var,
    pub segments: Vec<Segment>,
}

impl FusedSequence {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// First row and length of a segment, if present.
    pub fn span(&self, seg: Segment) -> Option<(usize, usize)> {
        let start = self.segments.iter().position(|s| *s == seg)?;
        let len = self.segments[start..].iter().take_while(|s| **s == seg).count();
        Some((start, len))
    }

    pub fn extract(&self, t: &mut Tape, seg: Segment) -> Result<Var> {
        let (start, len) = self
            .span(seg)
            .ok_or_else(|| MadiError::contract(format!("segment {seg:?} not in sequence")))?;
        t.slice_rows(self.tokens, start, len)
    }
}

/// Replaces each placeholder row of the context (rows whose id equals
/// `placeholder`) by `[prompt; numeric; visual]` of the matching instance,
/// then appends the question.
pub fn pos_concat(
    t: &mut Tape,
    context_ids: &[usize],
    context: Var,
    placeholder: usize,
    question: Var,
    blocks: &[InstanceBlock],
) -> Result<FusedSequence> {
    if t.shape(context)[0] != context_ids.len() {
        return Err(MadiError::contract("context embedding and ids disagree in length"));
    }
    let slots: Vec<usize> = (0..context_ids.len()).filter(|&i| context_ids[i] == placeholder).collect();
    if slots.len() != blocks.len() {
        return Err(MadiError::Validation(format!(
            "context has {} series placeholders but {} series were given",
            slots.len(),
            blocks.len()
        )));
    }
    let mut parts = Vec::new();
    let mut segments = Vec::new();
    let mut push = |t: &mut Tape, v: Var, seg: Segment, parts: &mut Vec<Var>| {
        segments.extend(std::iter::repeat_n(seg, t.shape(v)[0]));
        parts.push(v);
    };
    let mut cursor = 0;
    for (i, (&slot, b)) in slots.iter().zip(blocks).enumerate() {
        if slot > cursor {
            let v = t.slice_rows(context, cursor, slot - cursor)?;
            push(t, v, Segment::Context, &mut parts);
        }
        push(t, b.prompt, Segment::StatsPrompt(i), &mut parts);
        if let Some(n) = b.numeric {
            push(t, n, Segment::Numeric(i), &mut parts);
        }
        push(t, b.visual, Segment::Visual(i), &mut parts);
        cursor = slot + 1;
    }
    if cursor < context_ids.len() {
        let v = t.slice_rows(context, cursor, context_ids.len() - cursor)?;
        push(t, v, Segment::Context, &mut parts);
    }
    push(t, question, Segment::Question, &mut parts);
    let tokens = if parts.len() == 1 { parts[0] } else { t.concat_rows(&parts)? };
    Ok(FusedSequence { tokens, segments })
}
