use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsjoint::model::{init_params, ModelConfig, ModelParams, SequenceLayout};
use tsjoint::tensor::Tensor;

/// Initial weights plus uniform noise, so zero-initialized matrices
/// carry signal too.
pub fn noisy_params(cfg: &ModelConfig, seed: u64, amp: f32) -> ModelParams<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    init_params(cfg, seed).unwrap().map(|_, t| {
        let data = t.data().iter().map(|&x| x + rng.random_range(-amp..amp)).collect();
        Tensor::new(t.shape().to_vec(), data).unwrap()
    })
}

/// Text tokens with a patch at every third position.
pub fn mixed_layout(cfg: &ModelConfig, rng: &mut ChaCha8Rng, n: usize) -> SequenceLayout {
    let mut s = SequenceLayout::default();
    for i in 0..n {
        if i % 3 == 2 {
            let f: Vec<f32> = (0..cfg.feature_width()).map(|_| rng.random_range(-1.0..1.0)).collect();
            s.push_patch(&f);
        } else {
            s.push_text(rng.random_range(0..cfg.vocab_size as u32));
        }
    }
    s
}
