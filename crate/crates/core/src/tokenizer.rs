//! Byte-level BPE: trainer, encoder, decoder and the JSON vocabulary file.
//!
//! Ids `0..256` are raw bytes, merge tokens follow in training order, and
//! the four sentinel tokens are appended last.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: &str = "<|bos|>";
pub const EOS: &str = "<|eos|>";
pub const TS_BEGIN: &str = "<|ts_begin|>";
pub const TS_END: &str = "<|ts_end|>";
pub const SPECIALS: [&str; 4] = [BOS, EOS, TS_BEGIN, TS_END];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeVocab {
    merges: Vec<(u32, u32)>,
    tokens: Vec<Vec<u8>>,
    specials: BTreeMap<String, u32>,
    ranks: HashMap<(u32, u32), u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    vocab_size: usize,
    tokens: Vec<String>,
    merges: Vec<[u32; 2]>,
    specials: BTreeMap<String, u32>,
}

const DEAD: u32 = u32::MAX;

impl BpeVocab {
    /// Greedy most-frequent-pair merging over the concatenated documents.
    ///
    /// `vocab_size` bounds the byte + merge tokens; sentinels come on top.
    /// Pairs never span document boundaries. Ties go to the smallest
    /// `(left, right)` id pair. Training stops early once no pair occurs
    /// at least twice.
    pub fn train<I, D>(docs: I, vocab_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = D>,
        D: AsRef<[u8]>,
    {
        if vocab_size < 257 {
            return Err(Error::config(format!(
                "vocab_size must be at least 257, got {vocab_size}"
            )));
        }
        let mut toks: Vec<u32> = Vec::new();
        let mut next: Vec<usize> = Vec::new();
        let mut prev: Vec<usize> = Vec::new();
        const NONE: usize = usize::MAX;
        for doc in docs {
            let d = doc.as_ref();
            let start = toks.len();
            for (i, &b) in d.iter().enumerate() {
                toks.push(b as u32);
                prev.push(if i == 0 { NONE } else { start + i - 1 });
                next.push(if i + 1 == d.len() { NONE } else { start + i + 1 });
            }
        }
        if toks.is_empty() {
            return Err(Error::config("cannot train a tokenizer on an empty corpus"));
        }

        let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
        let mut where_: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
        for i in 0..toks.len() {
            if next[i] != NONE {
                let p = (toks[i], toks[next[i]]);
                *counts.entry(p).or_default() += 1;
                where_.entry(p).or_default().push(i);
            }
        }
        let mut heap: BinaryHeap<(i64, Reverse<(u32, u32)>)> =
            counts.iter().map(|(&p, &c)| (c, Reverse(p))).collect();

        let mut vocab = Self::bytes_only();
        while vocab.tokens.len() < vocab_size {
            let Some((c, Reverse(pair))) = heap.pop() else { break };
            if counts.get(&pair).copied().unwrap_or(0) != c {
                continue;
            }
            if c < 2 {
                break;
            }
            let new_id = vocab.tokens.len() as u32;
            let mut bytes = vocab.tokens[pair.0 as usize].clone();
            bytes.extend_from_slice(&vocab.tokens[pair.1 as usize]);
            vocab.tokens.push(bytes);
            vocab.ranks.insert(pair, vocab.merges.len() as u32);
            vocab.merges.push(pair);

            let mut touched: Vec<(u32, u32)> = vec![pair];
            let mut positions = where_.remove(&pair).unwrap_or_default();
            positions.sort_unstable();
            positions.dedup();
            for pos in positions {
                if toks[pos] != pair.0 {
                    continue;
                }
                let nx = next[pos];
                if nx == NONE || toks[nx] != pair.1 {
                    continue;
                }
                let pv = prev[pos];
                let nn = next[nx];
                let mut bump = |p: (u32, u32), d: i64, at: Option<usize>| {
                    *counts.entry(p).or_default() += d;
                    if let Some(a) = at {
                        where_.entry(p).or_default().push(a);
                    }
                    touched.push(p);
                };
                bump(pair, -1, None);
                if pv != NONE {
                    bump((toks[pv], pair.0), -1, None);
                    bump((toks[pv], new_id), 1, Some(pv));
                }
                if nn != NONE {
                    bump((pair.1, toks[nn]), -1, None);
                    bump((new_id, toks[nn]), 1, Some(pos));
                }
                toks[pos] = new_id;
                toks[nx] = DEAD;
                next[pos] = nn;
                if nn != NONE {
                    prev[nn] = pos;
                }
            }
            touched.sort_unstable();
            touched.dedup();
            for p in touched {
                let c = counts.get(&p).copied().unwrap_or(0);
                if c > 0 {
                    heap.push((c, Reverse(p)));
                } else {
                    counts.remove(&p);
                }
            }
        }
        vocab.push_specials();
        Ok(vocab)
    }

    fn bytes_only() -> Self {
        Self {
            merges: Vec::new(),
            tokens: (0..=255u8).map(|b| vec![b]).collect(),
            specials: BTreeMap::new(),
            ranks: HashMap::new(),
        }
    }

    fn push_specials(&mut self) {
        for name in SPECIALS {
            let id = self.tokens.len() as u32;
            self.tokens.push(name.as_bytes().to_vec());
            self.specials.insert(name.to_string(), id);
        }
    }

    /// Total number of ids, sentinels included.
    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn special(&self, name: &str) -> Option<u32> {
        self.specials.get(name).copied()
    }

    pub fn bos(&self) -> u32 {
        self.specials[BOS]
    }

    pub fn eos(&self) -> u32 {
        self.specials[EOS]
    }

    pub fn ts_begin(&self) -> u32 {
        self.specials[TS_BEGIN]
    }

    pub fn ts_end(&self) -> u32 {
        self.specials[TS_END]
    }

    /// Applies merges in training order. Never emits sentinel ids.
    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        let mut ids: Vec<u32> = text.iter().map(|&b| b as u32).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let (l, r) = self.merges[rank as usize];
            let new_id = 256 + rank;
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            ids = out;
        }
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self.tokens.get(id as usize).ok_or(Error::UnknownToken {
                id,
                vocab_size: self.tokens.len(),
            })?;
            out.extend_from_slice(tok);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            vocab_size: self.tokens.len(),
            tokens: self.tokens.iter().map(|t| to_hex(t)).collect(),
            merges: self.merges.iter().map(|&(l, r)| [l, r]).collect(),
            specials: self.specials.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(s)?;
        let mut v = Self::bytes_only();
        for (i, &[l, r]) in file.merges.iter().enumerate() {
            let id = v.tokens.len() as u32;
            if l >= id || r >= id {
                return Err(Error::Data(format!(
                    "merge {i} references undefined ids ({l}, {r})"
                )));
            }
            let mut bytes = v.tokens[l as usize].clone();
            bytes.extend_from_slice(&v.tokens[r as usize]);
            v.tokens.push(bytes);
            v.ranks.insert((l, r), i as u32);
            v.merges.push((l, r));
        }
        v.push_specials();
        if v.specials != file.specials || v.tokens.len() != file.vocab_size {
            return Err(Error::Data("vocabulary file is inconsistent".into()));
        }
        for (i, hex) in file.tokens.iter().enumerate() {
            if from_hex(hex)? != v.tokens[i] {
                return Err(Error::Data(format!("token {i} does not match its merge")));
            }
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn from_hex(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(Error::Data(format!("odd-length hex token {s:?}")));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&s[i..i + 2], 16)
                .map_err(|e| Error::Data(format!("bad hex token {s:?}: {e}")))
        })
        .collect()
}
