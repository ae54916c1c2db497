//! TS-block repetition for embeddings.

use tsjoint::codec::{encode_series, PadSide, RawSeries};
use tsjoint::inference::{embedding_layout, extract_embedding, ts_fraction};
use tsjoint::model::{forward, ModelConfig, Slot};
use tsjoint::tensor::Graph;
use tsjoint::tokenizer::BpeVocab;

use crate::common::noisy_params;
use crate::Outcome;

pub fn run() -> Outcome {
    let cfg = ModelConfig {
        vocab_size: 300,
        ..ModelConfig::default()
    };
    let params = noisy_params(&cfg, 9, 0.05);
    let text = "A short electrocardiogram segment.";
    let tok = BpeVocab::train([text], 290).unwrap();
    let series = RawSeries::univariate((0..12).map(|i| (i as f64 * 0.4).sin() * 3.0 + 1.0).collect());
    let snapshot: Vec<u64> = series.values[0].iter().map(|v| v.to_bits()).collect();
    let enc = encode_series(&series, cfg.patch_size, PadSide::Right).unwrap();
    let t = enc.num_patches();
    let w = cfg.feature_width();
    let mut lines = Vec::new();
    let mut ok = true;
    for r in [1usize, 2, 64] {
        let layout = embedding_layout(&series, cfg.patch_size, r, Some(&tok), Some(text)).unwrap();
        let patch_pos: Vec<usize> = layout.patch_positions();
        let l_text = layout.len() - patch_pos.len();
        // One contiguous block of r·T patches, each copy equal to the
        // encoded rows.
        let contiguous = patch_pos.windows(2).all(|p| p[1] == p[0] + 1);
        let copies = patch_pos.len() == r * t
            && patch_pos.iter().enumerate().all(|(k, &pos)| {
                let Slot::Patch(row) = layout.slots[pos] else { return false };
                layout.features[row * w..(row + 1) * w] == *enc.feature_row(k % t)
            });
        let share = ts_fraction(&layout);
        let expected = (r * t) as f64 / (r * t + l_text) as f64;
        // Pooling covers every position.
        let e = extract_embedding(&params, &cfg, &layout).unwrap();
        let mut g = Graph::<f32>::new();
        let pv = params.register(&mut g, false);
        let h = forward(&mut g, &pv, &cfg, std::slice::from_ref(&layout)).unwrap();
        let hd = g.value(h).data();
        let n = layout.len();
        let pooled = (0..cfg.d_model).all(|j| {
            let m = (0..n).map(|i| hd[i * cfg.d_model + j] as f64).sum::<f64>() / n as f64;
            (m - e[j] as f64).abs() < 1e-5
        });
        let unchanged = series.values[0].iter().map(|v| v.to_bits()).collect::<Vec<_>>() == snapshot;
        let good = contiguous && copies && share == expected && pooled && unchanged;
        ok &= good;
        lines.push(format!(
            "r={r}: {} patch positions (T={t}), L_text={l_text}, share {share:.6} vs {expected:.6}{}",
            patch_pos.len(),
            if good { "" } else { " MISMATCH" }
        ));
    }
    Outcome::new(ok, lines.join("; "))
}
