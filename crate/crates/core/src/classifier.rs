//! Small shape classifier: the class-probability backend for the
//! inception score and the description/image agreement check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Shape, ShapeSpec, BACKGROUND};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::optim::Adam;
use crate::tensor::{gaussian, log_softmax_f64, ParamSet, Tensor};

/// Side of the pooled silhouette grid.
const GRID: usize = 16;
const FEATURES: usize = GRID * GRID;
pub const NUM_CLASSES: usize = Shape::ALL.len();

/// Color-independent silhouette: per-pixel max channel above the
/// background, average-pooled to `GRID x GRID`.
pub fn silhouette(img: &ImageTensor) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let bg = BACKGROUND[0] as f64;
    let mut out = vec![0.0; FEATURES];
    let mut counts = vec![0usize; FEATURES];
    for y in 0..h {
        for x in 0..w {
            let cell = (y * GRID / h) * GRID + x * GRID / w;
            let px = img.pixel(y, x);
            let m = px.iter().fold(0.0f32, |a, &b| a.max(b)) as f64;
            out[cell] += (m - bg).max(0.0);
            counts[cell] += 1;
        }
    }
    for (o, &n) in out.iter_mut().zip(&counts) {
        *o /= n.max(1) as f64;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub w1: Tensor<f64>,
    pub b1: Tensor<f64>,
    pub w2: Tensor<f64>,
    pub b2: Tensor<f64>,
}

impl ParamSet<f64> for ClassifierParams {
    fn named(&self) -> Vec<(String, &Tensor<f64>)> {
        vec![
            ("b1".into(), &self.b1),
            ("b2".into(), &self.b2),
            ("w1".into(), &self.w1),
            ("w2".into(), &self.w2),
        ]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
        vec![
            ("b1".into(), &mut self.b1),
            ("b2".into(), &mut self.b2),
            ("w1".into(), &mut self.w1),
            ("w2".into(), &mut self.w2),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            steps: 400,
            batch_size: 32,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// One-hidden-layer tanh MLP over silhouettes.
#[derive(Clone, Debug)]
pub struct ShapeClassifier {
    pub params: ClassifierParams,
}

/// Shifts by `(dy, dx)`, blurs optionally, and adds pixel noise.
fn augment(img: &ImageTensor, rng: &mut ChaCha8Rng) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let dy = rng.random_range(-2i64..=2);
    let dx = rng.random_range(-2i64..=2);
    let blur = rng.random_bool(0.5);
    let noise = 0.05;
    let mut data = Vec::with_capacity(h * w * 3);
    let at = |y: i64, x: i64| -> [f32; 3] {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            BACKGROUND
        } else {
            img.pixel(y as usize, x as usize)
        }
    };
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let (sy, sx) = (y - dy, x - dx);
            let px = if blur {
                let mut acc = [0.0f32; 3];
                for oy in -1..=1 {
                    for ox in -1..=1 {
                        let p = at(sy + oy, sx + ox);
                        for c in 0..3 {
                            acc[c] += p[c] / 9.0;
                        }
                    }
                }
                acc
            } else {
                at(sy, sx)
            };
            for v in px {
                data.push((v as f64 + noise * gaussian(rng)).clamp(0.0, 1.0) as f32);
            }
        }
    }
    ImageTensor::new(h, w, data).expect("values clamped")
}

impl ShapeClassifier {
    pub fn init(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            params: ClassifierParams {
                w1: Tensor::randn(&[FEATURES, hidden], 1.0 / (FEATURES as f64).sqrt(), &mut rng),
                b1: Tensor::zeros(&[hidden]),
                w2: Tensor::randn(&[hidden, NUM_CLASSES], 1.0 / (hidden as f64).sqrt(), &mut rng),
                b2: Tensor::zeros(&[NUM_CLASSES]),
            },
        }
    }

    fn hidden(&self) -> usize {
        self.params.b1.numel()
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hd = self.hidden();
        let p = &self.params;
        let mut h = p.b1.data.clone();
        for (k, &xk) in x.iter().enumerate() {
            if xk != 0.0 {
                for (hj, w) in h.iter_mut().zip(&p.w1.data[k * hd..(k + 1) * hd]) {
                    *hj += xk * w;
                }
            }
        }
        h.iter_mut().for_each(|v| *v = v.tanh());
        let mut logits = p.b2.data.clone();
        for (j, &hj) in h.iter().enumerate() {
            for (c, l) in logits.iter_mut().enumerate() {
                *l += hj * p.w2.data[j * NUM_CLASSES + c];
            }
        }
        (h, logits)
    }

    /// Class probabilities in `Shape::ALL` order.
    pub fn probabilities(&self, img: &ImageTensor) -> Vec<f64> {
        let (_, logits) = self.forward(&silhouette(img));
        log_softmax_f64(&logits).into_iter().map(f64::exp).collect()
    }

    pub fn predict(&self, img: &ImageTensor) -> Shape {
        let p = self.probabilities(img);
        let best = (0..NUM_CLASSES)
            .max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a)))
            .unwrap();
        Shape::ALL[best]
    }

    fn loss_and_grad(&self, batch: &[(Vec<f64>, usize)]) -> (f64, ClassifierParams) {
        let hd = self.hidden();
        let mut g = self.params.zeros_like();
        let mut loss = 0.0;
        let n = batch.len() as f64;
        for (x, label) in batch {
            let (h, logits) = self.forward(x);
            let lp = log_softmax_f64(&logits);
            loss -= lp[*label] / n;
            let dlogits: Vec<f64> = lp
                .iter()
                .enumerate()
                .map(|(c, l)| (l.exp() - f64::from(c == *label)) / n)
                .collect();
            let mut dh = vec![0.0; hd];
            for j in 0..hd {
                for c in 0..NUM_CLASSES {
                    g.w2.data[j * NUM_CLASSES + c] += h[j] * dlogits[c];
                    dh[j] += self.params.w2.data[j * NUM_CLASSES + c] * dlogits[c];
                }
            }
            for c in 0..NUM_CLASSES {
                g.b2.data[c] += dlogits[c];
            }
            for j in 0..hd {
                dh[j] *= 1.0 - h[j] * h[j];
                g.b1.data[j] += dh[j];
            }
            for (k, &xk) in x.iter().enumerate() {
                if xk != 0.0 {
                    for j in 0..hd {
                        g.w1.data[k * hd + j] += xk * dh[j];
                    }
                }
            }
        }
        (loss, g)
    }

    /// Trains on labelled images with shift/blur/noise augmentation.
    pub fn train(examples: &[(ImageTensor, Shape)], cfg: &ClassifierConfig) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::MissingCorpus("classifier images".into()));
        }
        let mut model = Self::init(cfg.hidden, cfg.seed);
        let mut opt = Adam::new(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc1a5);
        for _ in 0..cfg.steps {
            let batch: Vec<(Vec<f64>, usize)> = (0..cfg.batch_size)
                .map(|_| {
                    let (img, shape) = &examples[rng.random_range(0..examples.len())];
                    (silhouette(&augment(img, &mut rng)), shape.index())
                })
                .collect();
            let (_, grads) = model.loss_and_grad(&batch);
            opt.update(&mut model.params, &grads, cfg.lr)?;
        }
        Ok(model)
    }

    /// Trains on every renderable object at `image_size`.
    pub fn train_synthetic(image_size: usize, cfg: &ClassifierConfig) -> Result<Self> {
        let examples: Vec<(ImageTensor, Shape)> = ShapeSpec::all()
            .into_iter()
            .map(|s| (s.render(image_size), s.shape))
            .collect();
        Self::train(&examples, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_matches_finite_differences() {
        let m = ShapeClassifier::init(5, 1);
        let specs = ShapeSpec::all();
        let batch: Vec<(Vec<f64>, usize)> = specs[..4]
            .iter()
            .map(|s| (silhouette(&s.render(16)), s.shape.index()))
            .collect();
        let (_, g) = m.loss_and_grad(&batch);
        let eps = 1e-6;
        // a w1 row that sees the object, and the output layer
        let probes = [("w1", 8 * GRID * 5 + 8 * 5 + 2), ("w2", 7), ("b1", 3), ("b2", 1)];
        for (name, idx) in probes {
            let probe = |delta: f64| {
                let mut mm = m.clone();
                for (n, t) in mm.params.named_mut() {
                    if n == name {
                        t.data[idx] += delta;
                    }
                }
                mm.loss_and_grad(&batch).0
            };
            let fd = (probe(eps) - probe(-eps)) / (2.0 * eps);
            let an = g.named().into_iter().find(|(n, _)| n == name).unwrap().1.data[idx];
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "{name}: {fd} vs {an}");
        }
    }

    #[test]
    fn classifies_clean_renders() {
        let m = ShapeClassifier::train_synthetic(32, &ClassifierConfig::default()).unwrap();
        for s in ShapeSpec::all() {
            assert_eq!(m.predict(&s.render(32)), s.shape, "{s}");
            let p = m.probabilities(&s.render(32));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
