use super::{Layer, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{AttentionSpec, Graph, Real, Tensor, Var};

/// What occupies one sequence position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Text(u32),
    /// Row index into [`SequenceLayout::features`].
    Patch(usize),
}

/// One input sequence: positions in causal order plus the `4P` feature
/// rows referenced by patch slots.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SequenceLayout {
    pub slots: Vec<Slot>,
    pub features: Vec<f32>,
}

impl SequenceLayout {
    pub fn from_tokens(ids: &[u32]) -> Self {
        Self {
            slots: ids.iter().map(|&i| Slot::Text(i)).collect(),
            features: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn push_text(&mut self, id: u32) {
        self.slots.push(Slot::Text(id));
    }

    /// Appends a patch position backed by a new feature row.
    pub fn push_patch(&mut self, feature_row: &[f32]) {
        let row = if feature_row.is_empty() { 0 } else { self.features.len() / feature_row.len() };
        self.features.extend_from_slice(feature_row);
        self.slots.push(Slot::Patch(row));
    }

    pub fn text_positions(&self) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| matches!(s, Slot::Text(_)).then_some(i))
            .collect()
    }

    pub fn patch_positions(&self) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| matches!(s, Slot::Patch(_)).then_some(i))
            .collect()
    }
}

/// Per-layer rotated keys and values of everything already decoded.
#[derive(Clone, Debug)]
pub struct KvCache<F: Real> {
    k: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    len: usize,
}

impl<F: Real> KvCache<F> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let empty = Tensor::zeros(&[0, cfg.kv_width()]);
        Self {
            k: vec![empty.clone(); cfg.n_layers],
            v: vec![empty; cfg.n_layers],
            len: 0,
        }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl<F: Real> ModelParams<Tensor<F>> {
    /// Places every tensor on `g`, as trainable leaves or as constants.
    pub fn register(&self, g: &mut Graph<F>, trainable: bool) -> ModelParams<Var> {
        self.map(|_, t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
    }
}

fn embed<F: Real>(
    g: &mut Graph<F>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    seqs: &[SequenceLayout],
) -> Result<Var> {
    let fw = cfg.feature_width();
    let mut text_ids = Vec::new();
    let mut text_rows = Vec::new();
    let mut feats: Vec<F> = Vec::new();
    let mut patch_rows = Vec::new();
    let mut row = 0;
    for s in seqs {
        if s.features.len() % fw != 0 {
            return Err(Error::dim(format!(
                "feature buffer of {} values is not a multiple of 4P = {fw}",
                s.features.len()
            )));
        }
        let n_rows = s.features.len() / fw;
        for slot in &s.slots {
            match *slot {
                Slot::Text(id) => {
                    if id as usize >= cfg.vocab_size {
                        return Err(Error::UnknownToken {
                            id,
                            vocab_size: cfg.vocab_size,
                        });
                    }
                    text_ids.push(id as usize);
                    text_rows.push(row);
                }
                Slot::Patch(r) => {
                    if r >= n_rows {
                        return Err(Error::dim(format!("patch row {r} of {n_rows}")));
                    }
                    feats.extend(s.features[r * fw..(r + 1) * fw].iter().map(|&x| F::of(x as f64)));
                    patch_rows.push(row);
                }
            }
            row += 1;
        }
    }
    let eps = F::of(cfg.norm_eps);
    let mut parts = Vec::new();
    if !text_ids.is_empty() {
        parts.push(g.embedding(p.embed, &text_ids)?);
    }
    if !patch_rows.is_empty() {
        let f = g.constant(Tensor::new(vec![patch_rows.len(), fw], feats)?);
        let proj = g.linear(f, p.patch_proj)?;
        parts.push(g.rmsnorm(proj, Some(p.patch_norm), eps)?);
    }
    let x = if parts.len() == 1 {
        parts[0]
    } else {
        let cat = g.concat_rows(&parts)?;
        let mut perm = vec![0; row];
        for (i, &r) in text_rows.iter().chain(&patch_rows).enumerate() {
            perm[r] = i;
        }
        g.gather_rows(cat, &perm)?
    };
    g.rmsnorm(x, Some(p.embed_norm), eps)
}

fn qk_norm<F: Real>(g: &mut Graph<F>, x: Var, scale: Var, head_dim: usize, eps: F) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let heads = g.reshape(x, &[shape[0] * shape[1] / head_dim, head_dim])?;
    let normed = g.rmsnorm(heads, Some(scale), eps)?;
    g.reshape(normed, &shape)
}

struct Geometry<'a> {
    batch: usize,
    seq: usize,
    start: usize,
    positions: &'a [usize],
}

fn block<F: Real>(
    g: &mut Graph<F>,
    l: &Layer<Var>,
    cfg: &ModelConfig,
    x: Var,
    geo: &Geometry<'_>,
    cache: Option<(&Tensor<F>, &Tensor<F>)>,
) -> Result<(Var, Var, Var)> {
    let eps = F::of(cfg.norm_eps);
    let hd = cfg.head_dim;
    let h = g.rmsnorm(x, Some(l.attn_norm), eps)?;
    let q = g.linear(h, l.wq)?;
    let k = g.linear(h, l.wk)?;
    let v = g.linear(h, l.wv)?;
    let q = qk_norm(g, q, l.q_norm, hd, eps)?;
    let k = qk_norm(g, k, l.k_norm, hd, eps)?;
    let q = g.rope(q, geo.positions, hd, cfg.rope_base)?;
    let k = g.rope(k, geo.positions, hd, cfg.rope_base)?;
    let (k_all, v_all) = match cache {
        Some((ck, cv)) => {
            let ck = g.constant(ck.clone());
            let cv = g.constant(cv.clone());
            (g.concat_rows(&[ck, k])?, g.concat_rows(&[cv, v])?)
        }
        None => (k, v),
    };
    let spec = AttentionSpec {
        batch: geo.batch,
        q_len: geo.seq,
        kv_len: geo.start + geo.seq,
        n_q_heads: cfg.n_q_heads,
        n_kv_heads: cfg.n_kv_heads,
        head_dim: hd,
        q_offset: geo.start,
    };
    let a = g.attention(q, k_all, v_all, spec)?;
    let o = g.linear(a, l.wo)?;
    let x = g.add(x, o)?;

    let h = g.rmsnorm(x, Some(l.mlp_norm), eps)?;
    let gate = g.linear(h, l.w1)?;
    let gate = g.silu(gate);
    let up = g.linear(h, l.w2)?;
    let m = g.mul(gate, up)?;
    let down = g.linear(m, l.w3)?;
    Ok((g.add(x, down)?, k_all, v_all))
}

/// Full causal forward over equal-length sequences.
///
/// Returns final-normed hidden states `[batch·seq, d]`, rows ordered by
/// sequence then position.
pub fn forward<F: Real>(
    g: &mut Graph<F>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    seqs: &[SequenceLayout],
) -> Result<Var> {
    let seq = seqs.first().map_or(0, SequenceLayout::len);
    if seq == 0 || seqs.iter().any(|s| s.len() != seq) {
        return Err(Error::dim("forward needs non-empty sequences of equal length"));
    }
    if seq > cfg.max_seq {
        return Err(Error::Config(format!(
            "sequence of {seq} positions exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    let positions: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..seq).collect();
    let geo = Geometry {
        batch: seqs.len(),
        seq,
        start: 0,
        positions: &positions,
    };
    let mut x = embed(g, p, cfg, seqs)?;
    for l in &p.layers {
        x = block(g, l, cfg, x, &geo, None)?.0;
    }
    g.rmsnorm(x, Some(p.final_norm), F::of(cfg.norm_eps))
}

/// Incremental forward of `seq` placed at absolute positions
/// `start..start + seq.len()`, reading and extending `cache`.
///
/// `start` must equal the number of cached positions.
pub fn forward_cached<F: Real>(
    g: &mut Graph<F>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    seq: &SequenceLayout,
    cache: &mut KvCache<F>,
    start: usize,
) -> Result<Var> {
    if start != cache.len {
        return Err(Error::Cache(format!(
            "decoding at position {start} but {} positions are cached",
            cache.len
        )));
    }
    if seq.is_empty() {
        return Err(Error::dim("empty sequence"));
    }
    let end = start + seq.len();
    if end > cfg.max_seq {
        return Err(Error::Config(format!(
            "sequence of {end} positions exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    let positions: Vec<usize> = (start..end).collect();
    let geo = Geometry {
        batch: 1,
        seq: seq.len(),
        start,
        positions: &positions,
    };
    let mut x = embed(g, p, cfg, std::slice::from_ref(seq))?;
    let mut new_k = Vec::with_capacity(cfg.n_layers);
    let mut new_v = Vec::with_capacity(cfg.n_layers);
    for (i, l) in p.layers.iter().enumerate() {
        let (y, k, v) = block(g, l, cfg, x, &geo, Some((&cache.k[i], &cache.v[i])))?;
        x = y;
        new_k.push(g.value(k).clone());
        new_v.push(g.value(v).clone());
    }
    let out = g.rmsnorm(x, Some(p.final_norm), F::of(cfg.norm_eps))?;
    cache.k = new_k;
    cache.v = new_v;
    cache.len = end;
    Ok(out)
}
