//! Description/image match scoring used to rerank translator samples.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DescriptionImagePair, ShapeSpec};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::optim::Adam;
use crate::tensor::{ParamSet, Tensor};
use crate::tokenizer::{is_special, Vocab};

/// Higher means a better match.
pub trait MatchScorer: Send + Sync {
    fn score(&self, description: &str, image: &ImageTensor) -> Result<f64>;

    fn backend(&self) -> &'static str;
}

/// Negative mean squared error to a prototype image per description.
/// Unknown descriptions score `-inf`.
#[derive(Clone, Debug, Default)]
pub struct PrototypeScorer {
    prototypes: BTreeMap<String, ImageTensor>,
    /// Render synthetic shape descriptions on demand at this size.
    render_size: Option<usize>,
}

impl PrototypeScorer {
    pub fn new(prototypes: impl IntoIterator<Item = (String, ImageTensor)>) -> Self {
        Self {
            prototypes: prototypes.into_iter().collect(),
            render_size: None,
        }
    }

    /// Prototypes rendered from parsed shape descriptions.
    pub fn synthetic(image_size: usize) -> Self {
        Self {
            prototypes: BTreeMap::new(),
            render_size: Some(image_size),
        }
    }
}

impl MatchScorer for PrototypeScorer {
    fn score(&self, description: &str, image: &ImageTensor) -> Result<f64> {
        let rendered;
        let proto = match self.prototypes.get(description) {
            Some(p) => p,
            None => match (self.render_size, ShapeSpec::parse(description)) {
                (Some(n), Some(spec)) => {
                    rendered = spec.render(n);
                    &rendered
                }
                _ => return Ok(f64::NEG_INFINITY),
            },
        };
        if proto.height() != image.height() || proto.width() != image.width() {
            return Err(Error::Shape {
                expected: format!("{}x{}", proto.height(), proto.width()),
                got: format!("{}x{}", image.height(), image.width()),
            });
        }
        Ok(-proto.mse(image))
    }

    fn backend(&self) -> &'static str {
        "prototype-mse"
    }
}

/// Side length of the pooled pixel grid fed to the image tower.
const POOL: usize = 8;

/// Average-pools an image to `POOL x POOL x 3`, centered around zero.
pub fn pooled_pixels(img: &ImageTensor) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let mut out = vec![0.0; POOL * POOL * 3];
    let mut counts = vec![0usize; POOL * POOL];
    for y in 0..h {
        for x in 0..w {
            let cell = (y * POOL / h) * POOL + x * POOL / w;
            let px = img.pixel(y, x);
            for c in 0..3 {
                out[cell * 3 + c] += px[c] as f64;
            }
            counts[cell] += 1;
        }
    }
    for (cell, &n) in counts.iter().enumerate() {
        for c in 0..3 {
            out[cell * 3 + c] = out[cell * 3 + c] / n.max(1) as f64 - 0.5;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoderParams {
    /// `[text_vocab, dim]`
    pub emb: Tensor<f64>,
    /// `[POOL*POOL*3, dim]`
    pub img_w: Tensor<f64>,
    pub img_b: Tensor<f64>,
}

impl ParamSet<f64> for DualEncoderParams {
    fn named(&self) -> Vec<(String, &Tensor<f64>)> {
        vec![
            ("emb".into(), &self.emb),
            ("img_b".into(), &self.img_b),
            ("img_w".into(), &self.img_w),
        ]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
        vec![
            ("emb".into(), &mut self.emb),
            ("img_b".into(), &mut self.img_b),
            ("img_w".into(), &mut self.img_w),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualEncoderConfig {
    pub dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DualEncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            steps: 300,
            batch_size: 16,
            lr: 1e-2,
            temperature: 0.1,
            seed: 0,
        }
    }
}

/// Contrastive text/image encoder: mean token embedding versus a linear map
/// of pooled pixels, compared by cosine similarity.
#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub vocab: Vocab,
    pub params: DualEncoderParams,
}

fn normalize(v: &[f64]) -> (Vec<f64>, f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    (v.iter().map(|x| x / n).collect(), n)
}

/// Gradient through `v / |v|` given the gradient at the normalized vector.
fn normalize_backward(unit: &[f64], norm: f64, d_unit: &[f64]) -> Vec<f64> {
    let dot: f64 = unit.iter().zip(d_unit).map(|(a, b)| a * b).sum();
    unit.iter().zip(d_unit).map(|(u, d)| (d - u * dot) / norm).collect()
}

impl DualEncoder {
    pub fn init(vocab: Vocab, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feat = POOL * POOL * 3;
        let params = DualEncoderParams {
            emb: Tensor::randn(&[vocab.size(), dim], 0.1, &mut rng),
            img_w: Tensor::randn(&[feat, dim], 1.0 / (feat as f64).sqrt(), &mut rng),
            img_b: Tensor::zeros(&[dim]),
        };
        Self { vocab, params }
    }

    pub fn dim(&self) -> usize {
        self.params.img_b.numel()
    }

    fn text_ids(&self, description: &str) -> Vec<usize> {
        self.vocab
            .encode(description)
            .into_iter()
            .filter(|&t| !is_special(t))
            .map(|t| t as usize)
            .collect()
    }

    fn text_raw(&self, ids: &[usize]) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        for &id in ids {
            for (o, e) in out.iter_mut().zip(&self.params.emb.data[id * d..(id + 1) * d]) {
                *o += e;
            }
        }
        let n = ids.len().max(1) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    fn image_raw(&self, feats: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = self.params.img_b.data.clone();
        for (k, &x) in feats.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.params.img_w.data[k * d..(k + 1) * d]) {
                *o += x * w;
            }
        }
        out
    }

    pub fn embed_text(&self, description: &str) -> Vec<f64> {
        normalize(&self.text_raw(&self.text_ids(description))).0
    }

    pub fn embed_image(&self, img: &ImageTensor) -> Vec<f64> {
        normalize(&self.image_raw(&pooled_pixels(img))).0
    }

    /// Symmetric InfoNCE loss over a batch of matched pairs and its gradient.
    pub fn loss_and_grad(
        &self,
        descriptions: &[&str],
        images: &[&ImageTensor],
        temperature: f64,
    ) -> (f64, DualEncoderParams) {
        let b = descriptions.len();
        let d = self.dim();
        let ids: Vec<Vec<usize>> = descriptions.iter().map(|s| self.text_ids(s)).collect();
        let feats: Vec<Vec<f64>> = images.iter().map(|i| pooled_pixels(i)).collect();
        let t: Vec<(Vec<f64>, f64)> = ids.iter().map(|i| normalize(&self.text_raw(i))).collect();
        let u: Vec<(Vec<f64>, f64)> = feats.iter().map(|f| normalize(&self.image_raw(f))).collect();
        let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
        let s: Vec<Vec<f64>> = (0..b)
            .map(|i| (0..b).map(|j| dot(&t[i].0, &u[j].0) / temperature).collect())
            .collect();
        // dL/dS from both the row (text->image) and column (image->text) terms
        let mut g = vec![vec![0.0; b]; b];
        let mut loss = 0.0;
        for i in 0..b {
            let row = crate::tensor::log_softmax_f64(&s[i]);
            loss -= row[i];
            for j in 0..b {
                g[i][j] += (row[j].exp() - f64::from(i == j)) / (2.0 * b as f64);
            }
        }
        for j in 0..b {
            let col: Vec<f64> = (0..b).map(|i| s[i][j]).collect();
            let col = crate::tensor::log_softmax_f64(&col);
            loss -= col[j];
            for i in 0..b {
                g[i][j] += (col[i].exp() - f64::from(i == j)) / (2.0 * b as f64);
            }
        }
        loss /= 2.0 * b as f64;

        let mut grads = self.params.zeros_like();
        for i in 0..b {
            let mut dt = vec![0.0; d];
            for j in 0..b {
                for k in 0..d {
                    dt[k] += g[i][j] * u[j].0[k] / temperature;
                }
            }
            let dt = normalize_backward(&t[i].0, t[i].1, &dt);
            let n = ids[i].len().max(1) as f64;
            for &id in &ids[i] {
                for k in 0..d {
                    grads.emb.data[id * d + k] += dt[k] / n;
                }
            }
        }
        for j in 0..b {
            let mut du = vec![0.0; d];
            for i in 0..b {
                for k in 0..d {
                    du[k] += g[i][j] * t[i].0[k] / temperature;
                }
            }
            let du = normalize_backward(&u[j].0, u[j].1, &du);
            for (x, f) in feats[j].iter().enumerate() {
                for k in 0..d {
                    grads.img_w.data[x * d + k] += f * du[k];
                }
            }
            for k in 0..d {
                grads.img_b.data[k] += du[k];
            }
        }
        (loss, grads)
    }

    /// Trains on pairs, drawing batches of distinct descriptions so no
    /// in-batch negative is a duplicate of its positive.
    pub fn train(vocab: Vocab, pairs: &[DescriptionImagePair], cfg: &DualEncoderConfig) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::MissingCorpus("description-image pairs".into()));
        }
        let mut model = Self::init(vocab, cfg.dim, cfg.seed);
        let mut opt = Adam::new(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd0a1);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        for _ in 0..cfg.steps {
            order.shuffle(&mut rng);
            let mut seen = std::collections::BTreeSet::new();
            let batch: Vec<&DescriptionImagePair> = order
                .iter()
                .map(|&i| &pairs[i])
                .filter(|p| seen.insert(p.description.as_str()))
                .take(cfg.batch_size.max(2))
                .collect();
            if batch.len() < 2 {
                break;
            }
            let descs: Vec<&str> = batch.iter().map(|p| p.description.as_str()).collect();
            let imgs: Vec<&ImageTensor> = batch.iter().map(|p| &p.image).collect();
            let (_, grads) = model.loss_and_grad(&descs, &imgs, cfg.temperature);
            opt.update(&mut model.params, &grads, cfg.lr)?;
        }
        Ok(model)
    }

    /// Fraction of images whose own description scores highest among all
    /// candidate descriptions (pairs with duplicate descriptions collapse).
    pub fn retrieval_accuracy(&self, pairs: &[DescriptionImagePair]) -> f64 {
        let mut by_desc: BTreeMap<&str, &ImageTensor> = BTreeMap::new();
        for p in pairs {
            by_desc.entry(p.description.as_str()).or_insert(&p.image);
        }
        let descs: Vec<&str> = by_desc.keys().copied().collect();
        let texts: Vec<Vec<f64>> = descs.iter().map(|d| self.embed_text(d)).collect();
        let mut hits = 0;
        for (i, img) in by_desc.values().enumerate() {
            let u = self.embed_image(img);
            let scores: Vec<f64> = texts
                .iter()
                .map(|t| t.iter().zip(&u).map(|(a, b)| a * b).sum())
                .collect();
            let best = (0..scores.len())
                .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
                .unwrap();
            hits += usize::from(best == i);
        }
        hits as f64 / descs.len().max(1) as f64
    }
}

impl MatchScorer for DualEncoder {
    fn score(&self, description: &str, image: &ImageTensor) -> Result<f64> {
        let t = self.embed_text(description);
        let u = self.embed_image(image);
        Ok(t.iter().zip(&u).map(|(a, b)| a * b).sum())
    }

    fn backend(&self) -> &'static str {
        "dual-encoder"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticWorldConfig};

    #[test]
    fn prototype_ranks_its_own_image_first() {
        let s = PrototypeScorer::synthetic(16);
        let spec = ShapeSpec::parse("Objects in the photo: big red circle").unwrap();
        let own = spec.render(16);
        assert_eq!(s.score(&spec.description(), &own).unwrap(), 0.0);
        assert!(s.score("no such thing", &own).unwrap().is_infinite());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let vocab = Vocab::bytes_only();
        let model = DualEncoder::init(vocab, 4, 3);
        let specs = ShapeSpec::all();
        let descs: Vec<String> = specs[..3].iter().map(|s| s.description()).collect();
        let imgs: Vec<ImageTensor> = specs[..3].iter().map(|s| s.render(8)).collect();
        let d: Vec<&str> = descs.iter().map(String::as_str).collect();
        let im: Vec<&ImageTensor> = imgs.iter().collect();
        let (_, grads) = model.loss_and_grad(&d, &im, 0.5);
        let eps = 1e-6;
        for (name, idx) in [("emb", b'O' as usize + 4), ("img_w", 7), ("img_b", 2)] {
            let probe = |delta: f64| {
                let mut m = model.clone();
                for (n, t) in m.params.named_mut() {
                    if n == name {
                        t.data[idx * if name == "emb" { 4 } else { 1 }] += delta;
                    }
                }
                m.loss_and_grad(&d, &im, 0.5).0
            };
            let fd = (probe(eps) - probe(-eps)) / (2.0 * eps);
            let an = grads
                .named()
                .into_iter()
                .find(|(n, _)| n == name)
                .unwrap()
                .1
                .data[idx * if name == "emb" { 4 } else { 1 }];
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "{name}: {fd} vs {an}");
        }
    }

    #[test]
    fn trained_encoder_retrieves_synthetic_pairs() {
        let corpus = generate_synthetic(&SyntheticWorldConfig {
            n_pairs: 96,
            n_dialogues: 10,
            n_text_dialogues: 10,
            image_size: 16,
            ..SyntheticWorldConfig::default()
        })
        .unwrap();
        let texts: Vec<&str> = corpus.pairs.all().map(|p| p.description.as_str()).collect();
        let vocab = Vocab::train(texts, 300).unwrap();
        let model = DualEncoder::train(vocab, &corpus.pairs.train, &DualEncoderConfig::default()).unwrap();
        let acc = model.retrieval_accuracy(&corpus.pairs.train);
        assert!(acc > 0.9, "retrieval accuracy {acc}");
    }
}
