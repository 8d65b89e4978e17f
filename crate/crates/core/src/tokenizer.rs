//! Byte-level BPE with four reserved protocol tokens.
//!
//! Ids `0..4` are the specials `[SEP] [DST] [EOS] [PAD]`, ids `4..260` are the
//! 256 raw bytes, and every learned merge appends one id after that. Raw text
//! is only ever mapped through the byte alphabet, so user text that happens to
//! spell `[DST]` can never produce the special id.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const SEP: TokenId = 0;
pub const DST: TokenId = 1;
pub const EOS: TokenId = 2;
pub const PAD: TokenId = 3;
pub const NUM_SPECIALS: usize = 4;
pub const ALPHABET_SIZE: usize = 256;
pub const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["[SEP]", "[DST]", "[EOS]", "[PAD]"];

/// Default vocabulary size for desk-scale models.
pub const DEFAULT_VOCAB_SIZE: usize = 512;

const BYTE_OFFSET: TokenId = NUM_SPECIALS as TokenId;
const VOCAB_FILE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    merges: Vec<(TokenId, TokenId)>,
    ranks: HashMap<(TokenId, TokenId), usize>,
    /// Byte expansion of every non-special id.
    pieces: Vec<Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    specials: Vec<String>,
    alphabet_size: usize,
    merges: Vec<[TokenId; 2]>,
}

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIALS
}

impl Vocab {
    /// A vocabulary with no merges: specials plus raw bytes.
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new()).expect("empty merge list is valid")
    }

    fn from_merges(merges: Vec<(TokenId, TokenId)>) -> Result<Self> {
        let mut pieces: Vec<Vec<u8>> = SPECIAL_NAMES.iter().map(|_| Vec::new()).collect();
        pieces.extend((0..=255u8).map(|b| vec![b]));
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let next = pieces.len() as TokenId;
            for id in [a, b] {
                if is_special(id) || id >= next {
                    return Err(Error::TokenOutOfRange {
                        id,
                        size: next as usize,
                    });
                }
            }
            let mut piece = pieces[a as usize].clone();
            piece.extend_from_slice(&pieces[b as usize]);
            pieces.push(piece);
            ranks.insert((a, b), rank);
        }
        Ok(Self {
            merges,
            ranks,
            pieces,
        })
    }

    /// Greedy pair-merge training. Stops at `target_size` or when no pair
    /// occurs at least twice; ties go to the smallest `(left, right)` id pair.
    pub fn train<I, S>(corpus: I, target_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let minimum = ALPHABET_SIZE + NUM_SPECIALS;
        if target_size < minimum {
            return Err(Error::VocabTooSmall {
                target: target_size,
                minimum,
            });
        }
        // Identical lines are counted once with a multiplicity.
        let mut lines: HashMap<Vec<TokenId>, usize> = HashMap::new();
        let mut any = false;
        for line in corpus {
            any = true;
            let ids: Vec<TokenId> = line
                .as_ref()
                .bytes()
                .map(|b| b as TokenId + BYTE_OFFSET)
                .collect();
            if ids.len() > 1 {
                *lines.entry(ids).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::EmptyCorpus);
        }
        let mut words: Vec<(Vec<TokenId>, usize)> = lines.into_iter().collect();
        words.sort();

        let mut merges = Vec::new();
        let mut next_id = minimum as TokenId;
        while (next_id as usize) < target_size {
            let mut counts: HashMap<(TokenId, TokenId), usize> = HashMap::new();
            for (ids, mult) in &words {
                for pair in ids.windows(2) {
                    *counts.entry((pair[0], pair[1])).or_default() += mult;
                }
            }
            let best = counts
                .into_iter()
                .filter(|&(_, c)| c >= 2)
                .min_by(|(pa, ca), (pb, cb)| cb.cmp(ca).then(pa.cmp(pb)));
            let Some((pair, _)) = best else { break };
            for (ids, _) in &mut words {
                merge_in_place(ids, pair, next_id);
            }
            merges.push(pair);
            next_id += 1;
        }
        Self::from_merges(merges)
    }

    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    /// String form of every id, specials as their bracketed names.
    pub fn entries(&self) -> Vec<String> {
        (0..self.size() as TokenId)
            .map(|id| match id as usize {
                i if i < NUM_SPECIALS => SPECIAL_NAMES[i].to_string(),
                i => String::from_utf8_lossy(&self.pieces[i]).into_owned(),
            })
            .collect()
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = text.bytes().map(|b| b as TokenId + BYTE_OFFSET).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            let new_id = (ALPHABET_SIZE + NUM_SPECIALS + rank) as TokenId;
            merge_in_place(&mut ids, pair, new_id);
        }
        ids
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut bytes = Vec::new();
        let mut out = String::new();
        for &id in ids {
            let idx = id as usize;
            if idx >= self.size() {
                return Err(Error::TokenOutOfRange {
                    id,
                    size: self.size(),
                });
            }
            if idx < NUM_SPECIALS {
                out.push_str(&String::from_utf8_lossy(&bytes));
                bytes.clear();
                if id != PAD {
                    out.push_str(SPECIAL_NAMES[idx]);
                }
            } else {
                bytes.extend_from_slice(&self.pieces[idx]);
            }
        }
        out.push_str(&String::from_utf8_lossy(&bytes));
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: VOCAB_FILE_VERSION,
            specials: SPECIAL_NAMES.iter().map(|s| s.to_string()).collect(),
            alphabet_size: ALPHABET_SIZE,
            merges: self.merges.iter().map(|&(a, b)| [a, b]).collect(),
        };
        serde_json::to_string(&file).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        if file.version != VOCAB_FILE_VERSION {
            return Err(Error::Config(format!("unsupported vocab version {}", file.version)));
        }
        if file.alphabet_size != ALPHABET_SIZE || file.specials != SPECIAL_NAMES {
            return Err(Error::Config("vocab file uses a different alphabet or specials".into()));
        }
        Self::from_merges(file.merges.into_iter().map(|[a, b]| (a, b)).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn merge_in_place(ids: &mut Vec<TokenId>, pair: (TokenId, TokenId), new_id: TokenId) {
    let mut out = 0;
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == pair.0 && ids[i + 1] == pair.1 {
            ids[out] = new_id;
            i += 2;
        } else {
            ids[out] = ids[i];
            i += 1;
        }
        out += 1;
    }
    ids.truncate(out);
}
