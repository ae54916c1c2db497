use crate::codec::{encode_series, PadSide, RawSeries};
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ModelParams, SequenceLayout, Slot};
use crate::tensor::{Graph, Tensor};
use crate::tokenizer::BpeVocab;

use super::forecast::text_prefix;

/// Sequence for embedding a series: optional text prefix, the patch block
/// repeated `repeat` times back to back, then TS_END after a prefix.
pub fn embedding_layout(
    series: &RawSeries,
    p: usize,
    repeat: usize,
    tok: Option<&BpeVocab>,
    text: Option<&str>,
) -> Result<SequenceLayout> {
    if repeat == 0 {
        return Err(Error::config("repeat must be at least 1"));
    }
    let prefix = text_prefix(tok, text)?;
    let enc = encode_series(series, p, PadSide::Right)?;
    let mut layout = SequenceLayout::from_tokens(&prefix);
    for _ in 0..repeat {
        for t in 0..enc.num_patches() {
            layout.push_patch(enc.feature_row(t));
        }
    }
    if let (false, Some(tok)) = (prefix.is_empty(), tok) {
        layout.push_text(tok.ts_end());
    }
    Ok(layout)
}

/// Mean of the final-normed hidden states over every position.
pub fn extract_embedding(params: &ModelParams<Tensor<f32>>, cfg: &ModelConfig, layout: &SequenceLayout) -> Result<Vec<f32>> {
    if layout.is_empty() {
        return Err(Error::dim("cannot embed an empty sequence"));
    }
    let mut g = Graph::<f32>::new();
    let pv = params.register(&mut g, false);
    let h = forward(&mut g, &pv, cfg, std::slice::from_ref(layout))?;
    let m = g.mean_rows(h)?;
    Ok(g.value(m).data().to_vec())
}

/// Share of pooled positions that hold a patch.
pub fn ts_fraction(layout: &SequenceLayout) -> f64 {
    let n = layout.slots.iter().filter(|s| matches!(s, Slot::Patch(_))).count();
    n as f64 / layout.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 300,
            max_seq: 128,
            ..Default::default()
        }
    }

    #[test]
    fn single_position_is_its_hidden_state() {
        let cfg = cfg();
        let params = init_params(&cfg, 1).unwrap();
        let layout = SequenceLayout::from_tokens(&[42]);
        let e = extract_embedding(&params, &cfg, &layout).unwrap();
        let mut g = Graph::<f32>::new();
        let pv = params.register(&mut g, false);
        let h = forward(&mut g, &pv, &cfg, std::slice::from_ref(&layout)).unwrap();
        assert_eq!(e, g.value(h).data());
        assert_eq!(e.len(), cfg.d_model);
    }

    #[test]
    fn repetition_duplicates_the_patch_block() {
        let cfg = cfg();
        let tok = BpeVocab::train(["an ecg trace"], 270).unwrap();
        let s = RawSeries::univariate((0..37).map(|i| (i as f64).sqrt()).collect());
        let before = s.clone();
        let one = embedding_layout(&s, cfg.patch_size, 1, Some(&tok), Some("an ecg trace")).unwrap();
        let three = embedding_layout(&s, cfg.patch_size, 3, Some(&tok), Some("an ecg trace")).unwrap();
        assert_eq!(s, before);
        let t = 5;
        let l_text = one.len() - t;
        assert_eq!(three.len(), l_text + 3 * t);
        let block: Vec<Slot> = one.slots[l_text - 1..l_text - 1 + t].to_vec();
        for c in 0..3 {
            let start = l_text - 1 + c * t;
            for (i, slot) in three.slots[start..start + t].iter().enumerate() {
                let (Slot::Patch(a), Slot::Patch(b)) = (slot, block[i]) else {
                    panic!("expected patch slots")
                };
                let w = 4 * cfg.patch_size;
                assert_eq!(three.features[a * w..(a + 1) * w], one.features[b * w..(b + 1) * w]);
            }
        }
        let expect = (3 * t) as f64 / (3 * t + l_text) as f64;
        assert!((ts_fraction(&three) - expect).abs() < 1e-15);
        assert!(extract_embedding(&init_params(&cfg, 0).unwrap(), &cfg, &three).is_ok());
        assert!(embedding_layout(&s, cfg.patch_size, 0, None, None).is_err());
    }
}
