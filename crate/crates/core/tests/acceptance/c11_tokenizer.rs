//! Byte-level BPE round trip and first-merge behavior.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsjoint::tokenizer::BpeVocab;

use crate::Outcome;

pub fn run() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let corpus: Vec<Vec<u8>> = (0..200)
        .map(|_| {
            let n = rng.random_range(1..200);
            // Skewed bytes so plenty of pairs repeat and merges form.
            (0..n).map(|_| if rng.random_bool(0.7) { b"etaoin "[rng.random_range(0..7)] } else { rng.random() }).collect()
        })
        .collect();
    let tok = BpeVocab::train(&corpus, 600).unwrap();
    let mut ok_rt = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(0..128);
        let bytes: Vec<u8> = (0..n).map(|_| rng.random()).collect();
        if tok.decode(&tok.encode(&bytes)).unwrap() == bytes {
            ok_rt += 1;
        }
    }
    let aaa = BpeVocab::train(["a".repeat(64)], 260).unwrap();
    let first = aaa.merges().first().copied();
    let ok = ok_rt == 10_000 && first == Some((b'a' as u32, b'a' as u32)) && !tok.merges().is_empty();
    Outcome::new(
        ok,
        format!(
            "round trip {ok_rt}/10000 with {} merges; first merge on \"aaaa…\" is {first:?}",
            tok.merges().len()
        ),
    )
}
