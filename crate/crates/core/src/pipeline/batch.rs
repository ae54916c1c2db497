use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{encode_series, PadSide, RawSeries};
use crate::error::{Error, Result};
use crate::model::{SequenceLayout, Slot};
use crate::tokenizer::BpeVocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Ts,
}

pub fn sample_modality(rng: &mut impl Rng, text_prob: f64) -> Modality {
    if rng.random_bool(text_prob.clamp(0.0, 1.0)) {
        Modality::Text
    } else {
        Modality::Ts
    }
}

/// What the output at one position is trained to predict.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    None,
    Token(u32),
    /// Normalized values and validity of the next patch.
    Patch { y: Vec<f32>, z: Vec<f32> },
}

/// Equal-length sequences plus one target per row (`b·S + s`).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub modality: Modality,
    pub seqs: Vec<SequenceLayout>,
    pub targets: Vec<Target>,
}

impl TrainBatch {
    pub fn seq_len(&self) -> usize {
        self.seqs.first().map_or(0, SequenceLayout::len)
    }

    pub fn positions(&self) -> usize {
        self.seqs.len() * self.seq_len()
    }

    pub fn text_rows(&self) -> (Vec<usize>, Vec<Option<usize>>) {
        self.targets
            .iter()
            .enumerate()
            .filter_map(|(i, t)| match t {
                Target::Token(id) => Some((i, Some(*id as usize))),
                _ => None,
            })
            .unzip()
    }

    /// Rows with a patch target whose mask is not all zero, and the
    /// flattened `y`, `z`.
    pub fn ts_rows(&self) -> (Vec<usize>, Vec<f32>, Vec<f32>) {
        let mut rows = Vec::new();
        let (mut ys, mut zs) = (Vec::new(), Vec::new());
        for (i, t) in self.targets.iter().enumerate() {
            if let Target::Patch { y, z } = t {
                if z.iter().any(|&m| m > 0.0) {
                    rows.push(i);
                    ys.extend_from_slice(y);
                    zs.extend_from_slice(z);
                }
            }
        }
        (rows, ys, zs)
    }

    pub fn is_supervised(&self) -> bool {
        self.targets.iter().any(|t| match t {
            Target::Token(_) => true,
            Target::Patch { z, .. } => z.iter().any(|&m| m > 0.0),
            Target::None => false,
        })
    }
}

/// Documents joined as `<|bos|> doc <|eos|>` into one token stream.
#[derive(Clone, Debug, PartialEq)]
pub struct TextCorpus {
    pub stream: Vec<u32>,
}

impl TextCorpus {
    pub fn new<D: AsRef<[u8]>>(docs: &[D], tok: &BpeVocab) -> Self {
        let mut stream = Vec::new();
        for d in docs {
            stream.push(tok.bos());
            stream.extend(tok.encode(d.as_ref()));
            stream.push(tok.eos());
        }
        Self { stream }
    }

    /// Windows of the stream in order: `[kS, kS + S]`, the last one
    /// possibly shorter. Used for whole-corpus evaluation.
    pub fn windows(&self, seq_len: usize) -> Vec<&[u32]> {
        let n = self.stream.len();
        (0..n.saturating_sub(1))
            .step_by(seq_len.max(1))
            .map(|s| &self.stream[s..(s + seq_len + 1).min(n)])
            .collect()
    }
}

fn text_window(tokens: &[u32]) -> (SequenceLayout, Vec<Target>) {
    let s = tokens.len() - 1;
    (
        SequenceLayout::from_tokens(&tokens[..s]),
        tokens[1..].iter().map(|&t| Target::Token(t)).collect(),
    )
}

/// Next-token windows at random offsets of the packed stream.
pub fn build_text_batch(corpus: &TextCorpus, seq_len: usize, batch: usize, rng: &mut impl Rng) -> Result<TrainBatch> {
    let n = corpus.stream.len();
    if seq_len == 0 || n < seq_len + 1 {
        return Err(Error::Data(format!(
            "text corpus of {n} tokens is too short for sequences of {seq_len}"
        )));
    }
    let mut out = TrainBatch {
        modality: Modality::Text,
        seqs: Vec::with_capacity(batch),
        targets: Vec::with_capacity(batch * seq_len),
    };
    for _ in 0..batch {
        let off = rng.random_range(0..=n - seq_len - 1);
        let (l, t) = text_window(&corpus.stream[off..off + seq_len + 1]);
        out.seqs.push(l);
        out.targets.extend(t);
    }
    Ok(out)
}

/// One contiguous run of patches with next-patch targets inside it.
fn push_series(layout: &mut SequenceLayout, targets: &mut Vec<Target>, series: &RawSeries, p: usize) -> Result<()> {
    let enc = encode_series(series, p, PadSide::Right)?;
    for span in &enc.layout {
        for k in 0..span.n_patches {
            let t = span.first_patch + k;
            layout.push_patch(enc.feature_row(t));
            targets.push(if k + 1 < span.n_patches {
                let next = (t + 1) * p..(t + 2) * p;
                Target::Patch {
                    y: enc.values[next.clone()].iter().map(|&v| v as f32).collect(),
                    z: enc.validity[next].iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
                }
            } else {
                Target::None
            });
        }
    }
    Ok(())
}

fn pad_patches(layout: &mut SequenceLayout, targets: &mut Vec<Target>, p: usize, seq_len: usize) {
    let zero = vec![0.0f32; 4 * p];
    while layout.len() < seq_len {
        layout.push_patch(&zero);
        targets.push(Target::None);
    }
}

/// Causal next-patch batch. Each series is encoded with its own visible
/// statistics; sequences shorter than `seq_len` are padded with all-zero
/// patches that carry no target.
pub fn build_ts_batch(series: &[RawSeries], p: usize, seq_len: usize) -> Result<TrainBatch> {
    let mut out = TrainBatch {
        modality: Modality::Ts,
        seqs: Vec::with_capacity(series.len()),
        targets: Vec::with_capacity(series.len() * seq_len),
    };
    for s in series {
        let mut layout = SequenceLayout::default();
        let mut targets = Vec::new();
        push_series(&mut layout, &mut targets, s, p)?;
        if layout.len() > seq_len {
            return Err(Error::Data(format!(
                "series needs {} patches but sequences hold {seq_len}",
                layout.len()
            )));
        }
        pad_patches(&mut layout, &mut targets, p, seq_len);
        out.seqs.push(layout);
        out.targets.extend(targets);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Segment {
    Text(String),
    Series(RawSeries),
}

/// Ordered text and series segments forming one training sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct InterleavedSample {
    pub segments: Vec<Segment>,
}

/// Appends a token; a preceding text position learns to predict it.
fn push_tok(layout: &mut SequenceLayout, targets: &mut Vec<Target>, id: u32) {
    if let (Some(Slot::Text(_)), Some(last)) = (layout.slots.last(), targets.last_mut()) {
        *last = Target::Token(id);
    }
    layout.push_text(id);
    targets.push(Target::None);
}

/// `<|bos|>`, then each segment in order (series wrapped in
/// `<|ts_begin|>`/`<|ts_end|>`), then `<|eos|>`. CE applies where a text
/// position is followed by a text position, QL between consecutive patches
/// of one series. Short sequences are right-padded with untargeted
/// `<|eos|>`.
pub fn build_interleaved_batch(
    samples: &[InterleavedSample],
    tok: &BpeVocab,
    p: usize,
    seq_len: usize,
) -> Result<TrainBatch> {
    let mut out = TrainBatch {
        modality: Modality::Ts,
        seqs: Vec::with_capacity(samples.len()),
        targets: Vec::new(),
    };
    for s in samples {
        let mut layout = SequenceLayout::default();
        let mut targets: Vec<Target> = Vec::new();
        push_tok(&mut layout, &mut targets, tok.bos());
        for seg in &s.segments {
            match seg {
                Segment::Text(t) => {
                    for id in tok.encode(t.as_bytes()) {
                        push_tok(&mut layout, &mut targets, id);
                    }
                }
                Segment::Series(series) => {
                    push_tok(&mut layout, &mut targets, tok.ts_begin());
                    push_series(&mut layout, &mut targets, series, p)?;
                    // The last patch has no successor inside the block.
                    layout.push_text(tok.ts_end());
                    targets.push(Target::None);
                }
            }
        }
        push_tok(&mut layout, &mut targets, tok.eos());
        if layout.len() > seq_len {
            return Err(Error::Data(format!(
                "interleaved sample needs {} positions but sequences hold {seq_len}",
                layout.len()
            )));
        }
        while layout.len() < seq_len {
            layout.push_text(tok.eos());
            targets.push(Target::None);
        }
        out.seqs.push(layout);
        out.targets.extend(targets);
    }
    Ok(out)
}

/// Joins batches with equal sequence length.
pub fn concat_batches(parts: Vec<TrainBatch>) -> Result<TrainBatch> {
    let mut it = parts.into_iter();
    let mut out = it.next().ok_or_else(|| Error::Data("no batches to join".into()))?;
    for b in it {
        if b.seq_len() != out.seq_len() {
            return Err(Error::dim("joined batches differ in sequence length"));
        }
        out.seqs.extend(b.seqs);
        out.targets.extend(b.targets);
    }
    Ok(out)
}
