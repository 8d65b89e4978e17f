//! Text-to-image translator: one causal stream over description tokens and
//! offset image tokens.
//!
//! Stream: `c [SEP] (s + V_text)`. The model sees `[BOS]` in front and
//! scores every stream position.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{ImageTokenSeq, VqModel};
use crate::error::{Error, Result};
use crate::generator::BOS;
use crate::image::ImageTensor;
use crate::scorer::MatchScorer;
use crate::seq::{SeqExample, SeqParams};
use crate::tensor::Scalar;
use crate::tokenizer::{is_special, TokenId, SEP};

pub const DEFAULT_MAX_DESCRIPTION: usize = 32;
pub const DEFAULT_N_SAMPLES: usize = 8;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// Id layout of the combined vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamLayout {
    pub text_vocab: usize,
    pub codebook_size: usize,
    pub image_len: usize,
    pub max_description: usize,
}

impl StreamLayout {
    pub fn vocab_size(&self) -> usize {
        self.text_vocab + self.codebook_size
    }

    pub fn image_range(&self) -> Range<TokenId> {
        self.text_vocab as TokenId..self.vocab_size() as TokenId
    }

    /// Longest model input: `[BOS] c [SEP] s`.
    pub fn max_len(&self) -> usize {
        self.max_description + self.image_len + 2
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointStream {
    pub tokens: Vec<TokenId>,
    /// Index of the `[SEP]` between text and image regions.
    pub boundary: usize,
}

impl JointStream {
    pub fn build(layout: &StreamLayout, c: &[TokenId], s: &[usize]) -> Result<Self> {
        if c.len() > layout.max_description {
            return Err(Error::Overlength {
                len: c.len(),
                max_len: layout.max_description,
            });
        }
        if s.len() != layout.image_len {
            return Err(Error::Shape {
                expected: format!("{} image tokens", layout.image_len),
                got: format!("{}", s.len()),
            });
        }
        if let Some(&bad) = c.iter().find(|&&t| is_special(t) || t as usize >= layout.text_vocab) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                size: layout.text_vocab,
            });
        }
        if let Some(&bad) = s.iter().find(|&&k| k >= layout.codebook_size) {
            return Err(Error::CodeOutOfRange {
                index: bad,
                size: layout.codebook_size,
            });
        }
        let mut tokens = Vec::with_capacity(c.len() + 1 + s.len());
        tokens.extend_from_slice(c);
        tokens.push(SEP);
        tokens.extend(s.iter().map(|&k| (k + layout.text_vocab) as TokenId));
        Ok(Self {
            tokens,
            boundary: c.len(),
        })
    }

    pub fn unbuild(&self, layout: &StreamLayout) -> (Vec<TokenId>, ImageTokenSeq) {
        let c = self.tokens[..self.boundary].to_vec();
        let s = self.tokens[self.boundary + 1..]
            .iter()
            .map(|&t| t as usize - layout.text_vocab)
            .collect();
        (c, s)
    }

    /// `[BOS]` plus the stream, every stream position scored.
    pub fn example(&self) -> SeqExample {
        let mut tokens = Vec::with_capacity(self.tokens.len() + 1);
        tokens.push(BOS);
        tokens.extend_from_slice(&self.tokens);
        let mut mask = vec![true; tokens.len()];
        mask[0] = false;
        SeqExample { tokens, mask }
    }
}

/// Mean NLL over all stream positions, text and image alike.
pub fn loss_f<T: Scalar>(params: &SeqParams<T>, stream: &JointStream) -> Result<f64> {
    let ex = stream.example();
    params.nll_loss(&ex.tokens, &ex.mask)
}

/// Truncates a description to the layout's limit and strips special ids.
pub fn description_tokens(layout: &StreamLayout, ids: &[TokenId]) -> Vec<TokenId> {
    ids.iter()
        .copied()
        .filter(|&t| !is_special(t) && (t as usize) < layout.text_vocab)
        .take(layout.max_description)
        .collect()
}

/// Samples `n_samples` image token sequences for description `c`. Sample
/// `i` draws from stream `i` of a generator seeded with `seed`, so results
/// do not depend on evaluation order.
pub fn generate_image_tokens<T: Scalar>(
    params: &SeqParams<T>,
    layout: &StreamLayout,
    c: &[TokenId],
    n_samples: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<ImageTokenSeq>> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    let c = description_tokens(layout, c);
    let mut prefix = Vec::with_capacity(c.len() + 2);
    prefix.push(BOS);
    prefix.extend_from_slice(&c);
    prefix.push(SEP);
    let offset = layout.text_vocab;
    (0..n_samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let ids = params.sample(&prefix, layout.image_len, layout.image_range(), temperature, &mut rng)?;
            Ok(ids.into_iter().map(|t| t as usize - offset).collect())
        })
        .collect()
}

/// Codebook lookup followed by the codec decoder.
pub fn tokens_to_image<T: Scalar>(codec: &VqModel<T>, s: &[usize]) -> Result<ImageTensor> {
    codec.tokens_to_image(s)
}

/// Candidate indices sorted by descending score; ties keep input order.
pub fn rerank<S: MatchScorer + ?Sized>(
    scorer: &S,
    description: &str,
    candidates: &[ImageTensor],
) -> Result<Vec<(usize, f64)>> {
    if candidates.is_empty() {
        return Err(Error::Config("rerank needs at least one candidate".into()));
    }
    let mut scored: Vec<(usize, f64)> = candidates
        .iter()
        .enumerate()
        .map(|(i, img)| Ok((i, scorer.score(description, img)?)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::PrototypeScorer;
    use crate::seq::SeqModelConfig;
    use crate::tokenizer::{EOS, NUM_SPECIALS};

    fn layout() -> StreamLayout {
        StreamLayout {
            text_vocab: 20,
            codebook_size: 8,
            image_len: 16,
            max_description: 32,
        }
    }

    #[test]
    fn empty_description_stream() {
        let st = JointStream::build(&layout(), &[], &[0; 16]).unwrap();
        assert_eq!(st.tokens[0], SEP);
        assert_eq!(&st.tokens[1..], &[20; 16]);
        assert_eq!(st.boundary, 0);
    }

    #[test]
    fn stream_round_trip_and_errors() {
        let l = layout();
        let c = vec![5, 6, 19];
        let s: Vec<usize> = (0..16).map(|i| i % 8).collect();
        let st = JointStream::build(&l, &c, &s).unwrap();
        assert_eq!(st.unbuild(&l), (c.clone(), s.clone()));
        assert!(JointStream::build(&l, &c, &s[..15]).is_err());
        assert!(JointStream::build(&l, &[EOS], &s).is_err());
        assert!(JointStream::build(&l, &[20], &s).is_err());
        assert!(JointStream::build(&l, &vec![5; 33], &s).is_err());
        assert_eq!(l.max_description, DEFAULT_MAX_DESCRIPTION);
    }

    #[test]
    fn loss_decomposes_over_positions() {
        let l = layout();
        let cfg = SeqModelConfig {
            vocab_size: l.vocab_size(),
            layers: 1,
            heads: 2,
            hidden: 8,
            max_len: l.max_len(),
        };
        let p = SeqParams::<f64>::init(cfg, 1).unwrap();
        let c = vec![4, 9, 11];
        let s: Vec<usize> = (0..16).map(|i| (i * 3) % 8).collect();
        let st = JointStream::build(&l, &c, &s).unwrap();
        let ex = st.example();
        let nll = p.position_nlls(&ex.tokens).unwrap();
        let t = c.len();
        let text = nll[1..=t].iter().sum::<f64>() / t as f64;
        let sep = nll[t + 1];
        let image = nll[t + 2..].iter().sum::<f64>() / 16.0;
        let want = (t as f64 * text + 16.0 * image + sep) / (t + 16 + 1) as f64;
        assert!((loss_f(&p, &st).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn samples_stay_in_image_region() {
        let l = layout();
        let cfg = SeqModelConfig {
            vocab_size: l.vocab_size(),
            layers: 1,
            heads: 2,
            hidden: 8,
            max_len: l.max_len(),
        };
        let p = SeqParams::<f32>::init(cfg, 2).unwrap();
        let c = vec![NUM_SPECIALS as TokenId + 1];
        let samples = generate_image_tokens(&p, &l, &c, 4, 1.0, 9).unwrap();
        assert_eq!(samples.len(), 4);
        assert!(samples.iter().all(|s| s.len() == 16 && s.iter().all(|&k| k < 8)));
        assert_eq!(samples, generate_image_tokens(&p, &l, &c, 4, 1.0, 9).unwrap());
        let greedy = generate_image_tokens(&p, &l, &c, 3, 0.0, 1).unwrap();
        assert!(greedy.iter().all(|s| *s == greedy[0]));
        assert!(generate_image_tokens(&p, &l, &c, 0, 1.0, 1).is_err());
    }

    #[test]
    fn rerank_orders_by_score() {
        let proto = ImageTensor::filled(4, 4, [1.0, 0.0, 0.0]);
        let scorer = PrototypeScorer::new([("red".to_string(), proto.clone())]);
        let far = ImageTensor::filled(4, 4, [0.0, 0.0, 1.0]);
        let near = ImageTensor::filled(4, 4, [0.8, 0.0, 0.0]);
        let ranked = rerank(&scorer, "red", &[far.clone(), near, proto, far]).unwrap();
        let order: Vec<usize> = ranked.iter().map(|r| r.0).collect();
        assert_eq!(order, vec![2, 1, 0, 3]);
        assert_eq!(rerank(&scorer, "red", &[ImageTensor::filled(4, 4, [0.0; 3])]).unwrap()[0].0, 0);
        assert!(rerank(&scorer, "red", &[]).is_err());
    }
}
