use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub attn_norm: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub q_norm: T,
    pub k_norm: T,
    pub mlp_norm: T,
    pub w1: T,
    pub w2: T,
    pub w3: T,
}

/// Every trainable tensor. Linear weights are stored `[out, in]`.
///
/// Generic so the same structure can hold tensors, graph handles or
/// optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    /// `[vocab, d]`; doubles as the output head when tied.
    pub embed: T,
    pub lm_head: Option<T>,
    /// `[d, 4P]`.
    pub patch_proj: T,
    pub patch_norm: T,
    pub embed_norm: T,
    pub layers: Vec<Layer<T>>,
    pub final_norm: T,
    pub qhead_norm: T,
    /// `[P·Q, d]`.
    pub qhead: T,
}

impl<T> Layer<T> {
    fn fields(&self) -> [(&'static str, &T); 11] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("q_norm", &self.q_norm),
            ("k_norm", &self.k_norm),
            ("mlp_norm", &self.mlp_norm),
            ("w1", &self.w1),
            ("w2", &self.w2),
            ("w3", &self.w3),
        ]
    }
}

impl<T> ModelParams<T> {
    /// `(name, tensor)` in a fixed canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        if let Some(h) = &self.lm_head {
            out.push(("lm_head".into(), h));
        }
        out.push(("patch_proj".into(), &self.patch_proj));
        out.push(("patch_norm".into(), &self.patch_norm));
        out.push(("embed_norm".into(), &self.embed_norm));
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in l.fields() {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("qhead_norm".into(), &self.qhead_norm));
        out.push(("qhead".into(), &self.qhead));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        if let Some(h) = &mut self.lm_head {
            out.push(("lm_head".into(), h));
        }
        out.push(("patch_proj".into(), &mut self.patch_proj));
        out.push(("patch_norm".into(), &mut self.patch_norm));
        out.push(("embed_norm".into(), &mut self.embed_norm));
        for (i, l) in self.layers.iter_mut().enumerate() {
            let Layer {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                q_norm,
                k_norm,
                mlp_norm,
                w1,
                w2,
                w3,
            } = l;
            for (n, t) in [
                ("attn_norm", attn_norm),
                ("wq", wq),
                ("wk", wk),
                ("wv", wv),
                ("wo", wo),
                ("q_norm", q_norm),
                ("k_norm", k_norm),
                ("mlp_norm", mlp_norm),
                ("w1", w1),
                ("w2", w2),
                ("w3", w3),
            ] {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("qhead_norm".into(), &mut self.qhead_norm));
        out.push(("qhead".into(), &mut self.qhead));
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.named().into_iter().map(|(n, _)| n).collect()
    }

    /// Structure-preserving map; `f` sees each entry's canonical name, in
    /// the same order as [`ModelParams::named`].
    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &T) -> std::result::Result<U, E>) -> std::result::Result<ModelParams<U>, E> {
        let embed = f("embed", &self.embed)?;
        let lm_head = self.lm_head.as_ref().map(|h| f("lm_head", h)).transpose()?;
        let patch_proj = f("patch_proj", &self.patch_proj)?;
        let patch_norm = f("patch_norm", &self.patch_norm)?;
        let embed_norm = f("embed_norm", &self.embed_norm)?;
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let mut g = |n: &str, t: &T| f(&format!("layers.{i}.{n}"), t);
                Ok(Layer {
                    attn_norm: g("attn_norm", &l.attn_norm)?,
                    wq: g("wq", &l.wq)?,
                    wk: g("wk", &l.wk)?,
                    wv: g("wv", &l.wv)?,
                    wo: g("wo", &l.wo)?,
                    q_norm: g("q_norm", &l.q_norm)?,
                    k_norm: g("k_norm", &l.k_norm)?,
                    mlp_norm: g("mlp_norm", &l.mlp_norm)?,
                    w1: g("w1", &l.w1)?,
                    w2: g("w2", &l.w2)?,
                    w3: g("w3", &l.w3)?,
                })
            })
            .collect::<std::result::Result<Vec<_>, E>>()?;
        Ok(ModelParams {
            embed,
            lm_head,
            patch_proj,
            patch_norm,
            embed_norm,
            layers,
            final_norm: f("final_norm", &self.final_norm)?,
            qhead_norm: f("qhead_norm", &self.qhead_norm)?,
            qhead: f("qhead", &self.qhead)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        self.try_map(|n, t| Ok::<U, std::convert::Infallible>(f(n, t)))
            .unwrap_or_else(|e| match e {})
    }
}

impl<F: Real> ModelParams<Tensor<F>> {
    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<G: Real>(&self) -> ModelParams<Tensor<G>> {
        self.map(|_, t| t.cast())
    }

    /// Shapes implied by `cfg`, keyed by canonical name.
    pub fn expected_shapes(cfg: &ModelConfig) -> ModelParams<Vec<usize>> {
        let d = cfg.d_model;
        let h = cfg.mlp_hidden();
        let layer = Layer {
            attn_norm: vec![d],
            wq: vec![cfg.n_q_heads * cfg.head_dim, d],
            wk: vec![cfg.kv_width(), d],
            wv: vec![cfg.kv_width(), d],
            wo: vec![d, cfg.n_q_heads * cfg.head_dim],
            q_norm: vec![cfg.head_dim],
            k_norm: vec![cfg.head_dim],
            mlp_norm: vec![d],
            w1: vec![h, d],
            w2: vec![h, d],
            w3: vec![d, h],
        };
        ModelParams {
            embed: vec![cfg.vocab_size, d],
            lm_head: (!cfg.tie_embeddings).then(|| vec![cfg.vocab_size, d]),
            patch_proj: vec![d, cfg.feature_width()],
            patch_norm: vec![d],
            embed_norm: vec![d],
            layers: vec![layer; cfg.n_layers],
            final_norm: vec![d],
            qhead_norm: vec![d],
            qhead: vec![cfg.quantile_width(), d],
        }
    }

    /// Rebuilds parameters from a name-keyed lookup, checking every shape.
    pub fn from_lookup(
        cfg: &ModelConfig,
        mut get: impl FnMut(&str) -> Option<Tensor<F>>,
    ) -> Result<Self> {
        Self::expected_shapes(cfg).try_map(|name, shape| {
            let t = get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        })
    }
}

/// Standard deviation of the fan-scaled normal init for a `[out, in]` weight.
pub fn fan_scaled_std(fan_in: usize, fan_out: usize) -> f64 {
    let (i, o) = (fan_in as f64, fan_out as f64);
    (o / i).sqrt().min(1.0) / i.sqrt()
}

const ZERO_INIT: [&str; 3] = ["wo", "w3", "qhead"];

/// Fan-scaled normal weights, N(0, 0.02) embeddings, unit norm scales;
/// attention output, SwiGLU `w3`, the quantile head and any untied LM
/// head start at zero.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<Tensor<f32>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = ModelParams::<Tensor<f32>>::expected_shapes(cfg);
    shapes.try_map(|name, shape| {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        if shape.len() == 1 {
            return Ok(Tensor::full(shape, 1.0));
        }
        if ZERO_INIT.contains(&leaf) || leaf == "lm_head" {
            return Ok(Tensor::zeros(shape));
        }
        let std = if leaf == "embed" {
            0.02
        } else {
            fan_scaled_std(shape[1], shape[0])
        };
        let normal = Normal::new(0.0f64, std).map_err(|e| Error::Config(e.to_string()))?;
        let data: Vec<f32> = (0..shape.iter().product::<usize>())
            .map(|_| normal.sample(&mut rng) as f32)
            .collect();
        Tensor::new(shape.clone(), data)
    })
}
