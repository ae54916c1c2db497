use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::class_balanced_weights;
use crate::optim::{adamw_update, AdamHyper};
use crate::tensor::{Graph, Tensor, Var};

const ADAM: AdamHyper = AdamHyper {
    beta1: 0.9,
    beta2: 0.999,
    eps: 1e-8,
    weight_decay: 0.0,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub class_balanced: bool,
    /// MLP only.
    pub hidden: usize,
    /// MLP only.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self::linear_probe()
    }
}

impl HeadConfig {
    pub fn linear_probe() -> Self {
        Self {
            epochs: 200,
            lr: 1e-2,
            weight_decay: 0.0,
            batch_size: 64,
            class_balanced: false,
            hidden: 0,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn mlp() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            batch_size: 8,
            class_balanced: true,
            hidden: 128,
            dropout: 0.1,
            ..Self::linear_probe()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// A stack of dense layers with ReLU between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseHead {
    /// `(weight [out, in], bias [out])` per layer.
    pub layers: Vec<(Vec<usize>, Vec<f32>, Vec<f32>)>,
}

impl DenseHead {
    fn init(sizes: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut layers = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
            let weight = (0..fan_in * fan_out).map(|_| normal.sample(rng) as f32).collect();
            layers.push((vec![fan_out, fan_in], weight, vec![0.0; fan_out]));
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.0[1])
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.0[0])
    }

    fn tensors(&self) -> Vec<Tensor<f32>> {
        self.layers
            .iter()
            .flat_map(|(s, w, b)| {
                [
                    Tensor::new(s.clone(), w.clone()).expect("stored shape"),
                    Tensor::new(vec![b.len()], b.clone()).expect("bias"),
                ]
            })
            .collect()
    }

    /// Forward pass; `dropout` is `(rate, rng)` during training.
    fn apply(g: &mut Graph<f32>, vars: &[Var], x: Var, mut dropout: Option<(f64, &mut ChaCha8Rng)>) -> Result<Var> {
        let mut h = x;
        let n = vars.len() / 2;
        for i in 0..n {
            h = g.linear(h, vars[2 * i])?;
            h = g.add_bias(h, vars[2 * i + 1])?;
            if i + 1 < n {
                h = g.relu(h);
                if let Some((rate, rng)) = dropout.as_mut() {
                    if *rate > 0.0 {
                        let keep = 1.0 - *rate;
                        let shape = g.shape(h).to_vec();
                        let numel = shape.iter().product();
                        let mask: Vec<f32> = (0..numel)
                            .map(|_| if rng.random_bool(keep) { (1.0 / keep) as f32 } else { 0.0 })
                            .collect();
                        let m = g.constant(Tensor::new(shape, mask)?);
                        h = g.mul(h, m)?;
                    }
                }
            }
        }
        Ok(h)
    }

    /// Raw outputs for each input row.
    pub fn outputs(&self, x: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        if x.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::<f32>::new();
        let vars: Vec<Var> = self.tensors().into_iter().map(|t| g.constant(t)).collect();
        let xv = g.constant(stack(x, self.input_dim())?);
        let out = Self::apply(&mut g, &vars, xv, None)?;
        let k = self.output_dim();
        Ok(g.value(out).data().chunks(k).map(<[f32]>::to_vec).collect())
    }

    /// Softmax class probabilities.
    pub fn predict_proba(&self, x: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .outputs(x)?
            .into_iter()
            .map(|row| {
                let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let e: Vec<f64> = row.iter().map(|&v| (v as f64 - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect()
            })
            .collect())
    }

    pub fn predict(&self, x: &[Vec<f32>]) -> Result<Vec<usize>> {
        Ok(self
            .outputs(x)?
            .iter()
            .map(|row| {
                (0..row.len())
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                    .unwrap_or(0)
            })
            .collect())
    }
}

fn stack(x: &[Vec<f32>], d: usize) -> Result<Tensor<f32>> {
    if let Some(r) = x.iter().find(|r| r.len() != d) {
        return Err(Error::dim(format!("embedding of width {} for a head expecting {d}", r.len())));
    }
    Tensor::new(vec![x.len(), d], x.concat())
}

enum Objective<'a> {
    Classes { labels: &'a [usize], weights: Option<Vec<f32>> },
    Regression(&'a [Vec<f32>]),
}

fn fit(head: &mut DenseHead, x: &[Vec<f32>], obj: Objective, cfg: &HeadConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut params = head.tensors();
    let mut m: Vec<Vec<f32>> = params.iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut v = m.clone();
    let hyper = AdamHyper {
        weight_decay: cfg.weight_decay,
        ..ADAM
    };
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut t = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.batch_size) {
            let mut g = Graph::<f32>::new();
            let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
            let rows: Vec<Vec<f32>> = idx.iter().map(|&i| x[i].clone()).collect();
            let xv = g.constant(stack(&rows, head.input_dim())?);
            let out = DenseHead::apply(&mut g, &vars, xv, Some((cfg.dropout, &mut *rng)))?;
            let loss = match &obj {
                Objective::Classes { labels, weights } => {
                    let tg: Vec<Option<usize>> = idx.iter().map(|&i| Some(labels[i])).collect();
                    let w: Option<Vec<f32>> = weights.as_ref().map(|w| idx.iter().map(|&i| w[labels[i]]).collect());
                    g.cross_entropy(out, &tg, w.as_deref())?
                }
                Objective::Regression(y) => {
                    let tg: Vec<f32> = idx.iter().flat_map(|&i| y[i].iter().copied()).collect();
                    g.mse(out, &tg)?
                }
            };
            g.backward(loss)?;
            t += 1;
            for (i, p) in params.iter_mut().enumerate() {
                if let Some(gr) = g.grad(vars[i]) {
                    let gr = gr.to_vec();
                    adamw_update(p.data_mut(), &gr, &mut m[i], &mut v[i], t, cfg.lr, hyper);
                }
            }
        }
    }
    for (i, layer) in head.layers.iter_mut().enumerate() {
        layer.1 = params[2 * i].data().to_vec();
        layer.2 = params[2 * i + 1].data().to_vec();
    }
    if head.layers.iter().any(|l| l.1.iter().chain(&l.2).any(|v| !v.is_finite())) {
        return Err(Error::Numeric("head weights diverged".into()));
    }
    Ok(())
}

fn check_labels(x: &[Vec<f32>], labels: &[usize]) -> Result<usize> {
    if x.is_empty() || x.len() != labels.len() {
        return Err(Error::Data(format!("{} embeddings with {} labels", x.len(), labels.len())));
    }
    Ok(labels.iter().max().map_or(0, |&m| m + 1))
}

fn class_weights(labels: &[usize], k: usize, balanced: bool) -> Result<Option<Vec<f32>>> {
    if !balanced {
        return Ok(None);
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    Ok(Some(class_balanced_weights(&counts)?.into_iter().map(|w| w as f32).collect()))
}

/// Single linear layer trained with softmax cross-entropy.
pub fn train_linear_probe(x: &[Vec<f32>], labels: &[usize], cfg: &HeadConfig) -> Result<DenseHead> {
    cfg.validate()?;
    let k = check_labels(x, labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = DenseHead::init(&[x[0].len(), k], &mut rng)?;
    let weights = class_weights(labels, k, cfg.class_balanced)?;
    fit(&mut head, x, Objective::Classes { labels, weights }, cfg, &mut rng)?;
    Ok(head)
}

/// Two-layer ReLU MLP with dropout after the hidden layer.
pub fn train_mlp_head(x: &[Vec<f32>], labels: &[usize], cfg: &HeadConfig) -> Result<DenseHead> {
    cfg.validate()?;
    if cfg.hidden == 0 {
        return Err(Error::config("MLP head needs a hidden width"));
    }
    let k = check_labels(x, labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = DenseHead::init(&[x[0].len(), cfg.hidden, k], &mut rng)?;
    let weights = class_weights(labels, k, cfg.class_balanced)?;
    fit(&mut head, x, Objective::Classes { labels, weights }, cfg, &mut rng)?;
    Ok(head)
}

/// Linear map from a pooled embedding to an `H`-step forecast, trained
/// with MSE.
pub fn train_forecast_head(x: &[Vec<f32>], targets: &[Vec<f32>], cfg: &HeadConfig) -> Result<DenseHead> {
    cfg.validate()?;
    if x.is_empty() || x.len() != targets.len() {
        return Err(Error::Data(format!("{} embeddings with {} targets", x.len(), targets.len())));
    }
    let h = targets[0].len();
    if h == 0 || targets.iter().any(|t| t.len() != h) {
        return Err(Error::dim("forecast targets must share a positive length"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = DenseHead::init(&[x[0].len(), h], &mut rng)?;
    fit(&mut head, x, Objective::Regression(targets), cfg, &mut rng)?;
    Ok(head)
}
