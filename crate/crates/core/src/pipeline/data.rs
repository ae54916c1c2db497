use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::batch::{
    build_interleaved_batch, build_text_batch, build_ts_batch, concat_batches, InterleavedSample, Modality, Segment,
    TextCorpus, TrainBatch,
};
use super::config::{RunConfig, StageConfig};
use crate::codec::{read_series_jsonl, RawSeries};
use crate::error::{Error, Result};
use crate::synth::{augment_batch, sample_series, series_rng, Category, SynthConfig, SynthSample, SynthStream};
use crate::tokenizer::BpeVocab;

/// Everything a run draws batches from. Synthetic series are indexed, so
/// `synth_next` alone pins the generator's position.
pub struct DataSources {
    pub tokenizer: Option<BpeVocab>,
    pub text: Option<TextCorpus>,
    pub series: Vec<RawSeries>,
    pub synth: SynthConfig,
    pub synth_seed: u64,
    pub synth_next: u64,
    /// Generate synthetic series on a background thread.
    pub prefetch: bool,
    stream: Option<(usize, SynthStream)>,
}

impl DataSources {
    pub fn new(synth: SynthConfig, synth_seed: u64) -> Self {
        Self {
            tokenizer: None,
            text: None,
            series: Vec::new(),
            synth,
            synth_seed,
            synth_next: 0,
            prefetch: false,
            stream: None,
        }
    }

    pub fn with_text<D: AsRef<[u8]>>(mut self, docs: &[D], tok: BpeVocab) -> Self {
        self.text = Some(TextCorpus::new(docs, &tok));
        self.tokenizer = Some(tok);
        self
    }

    /// Loads the files named in `cfg.data`. Without a tokenizer file one
    /// is trained on the text corpus to fill the model's vocabulary.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let mut out = Self::new(cfg.data.synth.clone(), cfg.seed);
        out.prefetch = true;
        let docs: Vec<String> = match &cfg.data.text {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Data(format!("cannot read text corpus {}: {e}", p.display())))?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::to_owned)
                .collect(),
            None => Vec::new(),
        };
        let tok = match &cfg.data.tokenizer {
            Some(p) => Some(BpeVocab::load(p)?),
            None if !docs.is_empty() => {
                let size = cfg.model.vocab_size.saturating_sub(4);
                Some(BpeVocab::train(&docs, size)?)
            }
            None => None,
        };
        if let Some(t) = &tok {
            if t.vocab_size() > cfg.model.vocab_size {
                return Err(Error::Config(format!(
                    "tokenizer has {} ids but the model vocabulary is {}",
                    t.vocab_size(),
                    cfg.model.vocab_size
                )));
            }
        }
        if let Some(t) = tok {
            out = if docs.is_empty() {
                Self { tokenizer: Some(t), ..out }
            } else {
                out.with_text(&docs, t)
            };
        }
        if let Some(p) = &cfg.data.series {
            out.series = read_series_jsonl(p)?;
        }
        Ok(out)
    }

    /// Synthetic series number `synth_next`, from the prefetch thread when
    /// enabled. Either path yields the same values.
    pub fn next_synth(&mut self, len: usize) -> Result<SynthSample> {
        let idx = self.synth_next;
        let s = if self.prefetch {
            if self.stream.as_ref().is_none_or(|(l, _)| *l != len) {
                let st = SynthStream::spawn(self.synth.clone(), len, self.synth_seed, idx, 16)?;
                self.stream = Some((len, st));
            }
            let (_, st) = self.stream.as_mut().expect("stream just attached");
            st.next()
                .ok_or_else(|| Error::Data("synthetic stream ended".into()))??
        } else {
            sample_series(&self.synth, len, &mut series_rng(self.synth_seed, idx))?
        };
        self.synth_next += 1;
        Ok(s)
    }

    fn real_window(&self, len: usize, rng: &mut ChaCha8Rng) -> RawSeries {
        let s = &self.series[rng.random_range(0..self.series.len())];
        let ch = &s.values[rng.random_range(0..s.channels())];
        let w = len.min(ch.len());
        let start = rng.random_range(0..=ch.len() - w);
        RawSeries {
            id: s.id.clone(),
            values: vec![ch[start..start + w].to_vec()],
            freq: s.freq.clone(),
        }
    }

    /// One batch of the chosen modality for `stage`.
    pub fn batch(&mut self, modality: Modality, stage: &StageConfig, p: usize, rng: &mut ChaCha8Rng) -> Result<TrainBatch> {
        match modality {
            Modality::Text => {
                let corpus = self
                    .text
                    .as_ref()
                    .ok_or_else(|| Error::Data("text step requested without a text corpus".into()))?;
                build_text_batch(corpus, stage.seq_len, stage.micro_batch, rng)
            }
            Modality::Ts => self.ts_batch(stage, p, rng),
        }
    }

    fn ts_batch(&mut self, stage: &StageConfig, p: usize, rng: &mut ChaCha8Rng) -> Result<TrainBatch> {
        let n_align = if self.tokenizer.is_some() {
            (0..stage.micro_batch)
                .filter(|_| rng.random_bool(stage.alignment_frac))
                .count()
        } else {
            0
        };
        let n_plain = stage.micro_batch - n_align;
        let window = stage.seq_len * p;
        let mut parts = Vec::new();
        if n_plain > 0 {
            let synthetic = self.series.is_empty() || rng.random_bool(self.synth.synth_batch_prob);
            let mut values: Vec<Vec<f64>> = Vec::with_capacity(n_plain);
            let mut meta = Vec::with_capacity(n_plain);
            for _ in 0..n_plain {
                let s = if synthetic {
                    self.next_synth(window)?.into_series("synth")
                } else {
                    self.real_window(window, rng)
                };
                meta.push((s.id, s.freq));
                values.push(s.values.into_iter().next().unwrap_or_default());
            }
            augment_batch(&mut values, &self.synth, rng);
            let series: Vec<RawSeries> = values
                .into_iter()
                .zip(meta)
                .map(|(v, (id, freq))| RawSeries {
                    id,
                    values: vec![v],
                    freq,
                })
                .collect();
            parts.push(build_ts_batch(&series, p, stage.seq_len)?);
        }
        if n_align > 0 {
            let samples = (0..n_align)
                .map(|_| self.alignment_sample(stage.seq_len, p))
                .collect::<Result<Vec<_>>>()?;
            let tok = self.tokenizer.as_ref().expect("checked above");
            parts.push(build_interleaved_batch(&samples, tok, p, stage.seq_len)?);
        }
        concat_batches(parts)
    }

    /// A synthetic series preceded by a template description. The series
    /// takes at most half the sequence and is shortened if the text needs
    /// more room.
    pub fn alignment_sample(&mut self, seq_len: usize, p: usize) -> Result<InterleavedSample> {
        // Drawn at the full window length so the prefetch stream keeps a
        // single length, then cut to half the sequence.
        let mut sample = self.next_synth(seq_len * p)?;
        sample.values.truncate((seq_len / 2).max(2) * p);
        let text = describe(&sample);
        let tok = self
            .tokenizer
            .as_ref()
            .ok_or_else(|| Error::Data("alignment samples need a tokenizer".into()))?;
        let n_text = tok.encode(text.as_bytes()).len();
        let room = seq_len.saturating_sub(n_text + 4);
        if room < 2 {
            return Err(Error::Config(format!(
                "seq_len {seq_len} leaves no room for a series after {n_text} description tokens"
            )));
        }
        let keep = (room.min(seq_len / 2) * p).min(sample.values.len());
        let mut series = sample.into_series("align");
        series.values[0].truncate(keep);
        Ok(InterleavedSample {
            segments: vec![Segment::Text(text), Segment::Series(series)],
        })
    }
}

/// Placeholder description built from the generating kernels and a
/// least-squares slope.
pub fn describe(s: &SynthSample) -> String {
    let x: Vec<f64> = s.values.iter().map(|&v| v as f64).collect();
    let n = x.len() as f64;
    let tm = (n - 1.0) / 2.0;
    let xm = x.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().enumerate().map(|(i, v)| (i as f64 - tm) * (v - xm)).sum();
    let var_t: f64 = (0..x.len()).map(|i| (i as f64 - tm).powi(2)).sum();
    let sd = (x.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / n).sqrt();
    // Total change over the window relative to the spread.
    let rise = if var_t > 0.0 && sd > 0.0 {
        cov / var_t * (n - 1.0) / sd
    } else {
        0.0
    };
    let trend = if rise > 1.0 {
        "rises"
    } else if rise < -1.0 {
        "falls"
    } else {
        "stays level"
    };
    let has = |cats: &[Category]| s.kernels.iter().any(|k| cats.contains(&k.category()));
    let seasonal = has(&[Category::Periodic, Category::PeriodicHarmonics, Category::DampedOscillation]);
    let noisy = has(&[Category::WhiteNoise, Category::HeteroskedasticNoise, Category::PeriodicNoise]);
    let tail = match (seasonal, noisy) {
        (true, true) => " with a seasonal pattern and noise",
        (true, false) => " with a seasonal pattern",
        (false, true) => " with noise",
        (false, false) => "",
    };
    format!("The series {trend}{tail}.")
}
