//! Discrete image auto-encoder: patch encoder, nearest-code quantizer and
//! patch decoder.
//!
//! Each latent cell sees exactly one `P x P` patch (`P = H / h`), so the
//! encoder's receptive field is that patch. Both encoder and decoder add a
//! learned per-cell position embedding to their hidden layer, which lets a
//! small codebook serve different image regions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::optim::Adam;
use crate::tensor::{gaussian, gelu, gelu_grad, linear_backward, linear_row, ParamSet, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub height: usize,
    pub width: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub hidden: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            grid_h: 4,
            grid_w: 4,
            codebook_size: 64,
            latent_dim: 16,
            hidden: 128,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.height,
            self.width,
            self.grid_h,
            self.grid_w,
            self.codebook_size,
            self.latent_dim,
            self.hidden,
        ];
        if fields.contains(&0) {
            return Err(Error::Config("codec dimensions must be positive".into()));
        }
        if self.height % self.grid_h != 0 || self.width % self.grid_w != 0 {
            return Err(Error::Config("image size must be a multiple of the latent grid".into()));
        }
        let (fy, fx) = (self.height / self.grid_h, self.width / self.grid_w);
        if fy != fx || !fy.is_power_of_two() {
            return Err(Error::Config(format!(
                "downsample factor must be a square power of two, got {fy}x{fx}"
            )));
        }
        Ok(())
    }

    pub fn patch(&self) -> usize {
        self.height / self.grid_h
    }

    pub fn patch_len(&self) -> usize {
        self.patch() * self.patch() * 3
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// `h x w x d_z` latent grid, row-major over cells.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid<T> {
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> LatentGrid<T> {
    pub fn new(h: usize, w: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w * dim {
            return Err(Error::Shape {
                expected: format!("{h}x{w}x{dim}"),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { h, w, dim, data })
    }

    pub fn cell(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }
}

/// Row-major codebook indices, one per latent cell.
pub type ImageTokenSeq = Vec<usize>;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    /// `[K, d_z]`
    pub entries: Tensor<T>,
}

impl<T: Scalar> Codebook<T> {
    pub fn new(entries: Vec<Vec<T>>) -> Result<Self> {
        let k = entries.len();
        let d = entries.first().map_or(0, Vec::len);
        if entries.iter().any(|e| e.len() != d) {
            return Err(Error::Shape {
                expected: format!("codebook rows of length {d}"),
                got: "ragged rows".into(),
            });
        }
        Ok(Self {
            entries: Tensor {
                shape: vec![k, d],
                data: entries.into_iter().flatten().collect(),
            },
        })
    }

    /// Uniform init in `[-1/K, 1/K]`.
    pub fn init(size: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let r = 1.0 / size as f64;
        Self {
            entries: Tensor::uniform(&[size, dim], -r, r, rng),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.shape.get(1).copied().unwrap_or(0)
    }

    pub fn entry(&self, k: usize) -> &[T] {
        let d = self.dim();
        &self.entries.data[k * d..(k + 1) * d]
    }

    /// Index of the entry closest to `v` in squared L2; ties go to the smallest index.
    pub fn nearest(&self, v: &[T]) -> usize {
        let mut best = 0;
        let mut best_d = T::infinity();
        for k in 0..self.len() {
            let d = self
                .entry(k)
                .iter()
                .zip(v)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Smallest pairwise squared distance between distinct entries.
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.len() {
            for b in a + 1..self.len() {
                let d = self
                    .entry(a)
                    .iter()
                    .zip(self.entry(b))
                    .map(|(&x, &y)| {
                        let d = (x - y).to_f64_lossy();
                        d * d
                    })
                    .sum::<f64>();
                best = best.min(d);
            }
        }
        best
    }

    /// Nearest-entry quantization of every cell.
    pub fn quantize(&self, z: &LatentGrid<T>) -> Result<(LatentGrid<T>, ImageTokenSeq)> {
        if self.is_empty() {
            return Err(Error::EmptyCodebook);
        }
        if z.dim != self.dim() {
            return Err(Error::Shape {
                expected: format!("latent dim {}", self.dim()),
                got: format!("{}", z.dim),
            });
        }
        let indices: ImageTokenSeq = (0..z.cells()).map(|i| self.nearest(z.cell(i))).collect();
        let zq = self.indices_to_codes(&indices, z.h, z.w)?;
        Ok((zq, indices))
    }

    /// Exact lookup of codebook rows for an index sequence.
    pub fn indices_to_codes(&self, s: &[usize], h: usize, w: usize) -> Result<LatentGrid<T>> {
        if s.len() != h * w {
            return Err(Error::Shape {
                expected: format!("{} indices", h * w),
                got: format!("{}", s.len()),
            });
        }
        let mut data = Vec::with_capacity(s.len() * self.dim());
        for &k in s {
            if k >= self.len() {
                return Err(Error::CodeOutOfRange {
                    index: k,
                    size: self.len(),
                });
            }
            data.extend_from_slice(self.entry(k));
        }
        LatentGrid::new(h, w, self.dim(), data)
    }
}

impl<T: Scalar> ParamSet<T> for Codebook<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("codebook".into(), &self.entries)]
    }
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("codebook".into(), &mut self.entries)]
    }
}

/// Encoder and decoder weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecParams<T> {
    pub enc_w1: Tensor<T>,
    pub enc_b1: Tensor<T>,
    pub enc_pos: Tensor<T>,
    pub enc_w2: Tensor<T>,
    pub enc_b2: Tensor<T>,
    pub dec_w1: Tensor<T>,
    pub dec_b1: Tensor<T>,
    pub dec_pos: Tensor<T>,
    pub dec_w2: Tensor<T>,
    pub dec_b2: Tensor<T>,
}

impl<T: Scalar> ParamSet<T> for CodecParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("dec_b1".into(), &self.dec_b1),
            ("dec_b2".into(), &self.dec_b2),
            ("dec_pos".into(), &self.dec_pos),
            ("dec_w1".into(), &self.dec_w1),
            ("dec_w2".into(), &self.dec_w2),
            ("enc_b1".into(), &self.enc_b1),
            ("enc_b2".into(), &self.enc_b2),
            ("enc_pos".into(), &self.enc_pos),
            ("enc_w1".into(), &self.enc_w1),
            ("enc_w2".into(), &self.enc_w2),
        ]
    }
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("dec_b1".into(), &mut self.dec_b1),
            ("dec_b2".into(), &mut self.dec_b2),
            ("dec_pos".into(), &mut self.dec_pos),
            ("dec_w1".into(), &mut self.dec_w1),
            ("dec_w2".into(), &mut self.dec_w2),
            ("enc_b1".into(), &mut self.enc_b1),
            ("enc_b2".into(), &mut self.enc_b2),
            ("enc_pos".into(), &mut self.enc_pos),
            ("enc_w1".into(), &mut self.enc_w1),
            ("enc_w2".into(), &mut self.enc_w2),
        ]
    }
}

impl<T: Scalar> CodecParams<T> {
    pub fn init(cfg: &CodecConfig, rng: &mut ChaCha8Rng) -> Self {
        let (p, hid, d, cells) = (cfg.patch_len(), cfg.hidden, cfg.latent_dim, cfg.cells());
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        Self {
            enc_w1: Tensor::randn(&[p, hid], fan(p), rng),
            enc_b1: Tensor::zeros(&[hid]),
            enc_pos: Tensor::randn(&[cells, hid], 0.02, rng),
            enc_w2: Tensor::randn(&[hid, d], fan(hid), rng),
            enc_b2: Tensor::zeros(&[d]),
            dec_w1: Tensor::randn(&[d, hid], fan(d), rng),
            dec_b1: Tensor::zeros(&[hid]),
            dec_pos: Tensor::randn(&[cells, hid], 0.02, rng),
            dec_w2: Tensor::randn(&[hid, p], fan(hid), rng),
            dec_b2: Tensor::zeros(&[p]),
        }
    }

    pub fn check_config(&self, cfg: &CodecConfig) -> Result<()> {
        crate::tensor::check_shape("enc_w1", &[cfg.patch_len(), cfg.hidden], &self.enc_w1.shape)?;
        crate::tensor::check_shape("enc_pos", &[cfg.cells(), cfg.hidden], &self.enc_pos.shape)?;
        crate::tensor::check_shape("enc_w2", &[cfg.hidden, cfg.latent_dim], &self.enc_w2.shape)?;
        crate::tensor::check_shape("dec_w2", &[cfg.hidden, cfg.patch_len()], &self.dec_w2.shape)
    }
}

/// Encoder, decoder and codebook together: the trainable unit of the codec.
#[derive(Clone, Debug, PartialEq)]
pub struct VqModel<T> {
    pub config: CodecConfig,
    pub params: CodecParams<T>,
    pub codebook: Codebook<T>,
}

impl<T: Scalar> ParamSet<T> for VqModel<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = self.codebook.named();
        v.extend(self.params.named());
        v
    }
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = self.codebook.named_mut();
        v.extend(self.params.named_mut());
        v
    }
}

/// Pixels of one cell's patch in `(y, x, c)` order, mapped to `[-1, 1]`.
fn extract_patch<T: Scalar>(cfg: &CodecConfig, img: &ImageTensor, cell: usize, out: &mut Vec<T>) {
    let p = cfg.patch();
    let (ci, cj) = (cell / cfg.grid_w, cell % cfg.grid_w);
    out.clear();
    for dy in 0..p {
        let row = (ci * p + dy) * img.width();
        let start = (row + cj * p) * 3;
        for &v in &img.data()[start..start + p * 3] {
            out.push(T::lit(2.0 * v as f64 - 1.0));
        }
    }
}

fn check_image(cfg: &CodecConfig, img: &ImageTensor) -> Result<()> {
    if img.height() != cfg.height || img.width() != cfg.width {
        return Err(Error::Shape {
            expected: format!("{}x{} image", cfg.height, cfg.width),
            got: format!("{}x{}", img.height(), img.width()),
        });
    }
    Ok(())
}

struct EncoderCache<T> {
    patches: Vec<T>,
    pre: Vec<T>,
    hidden: Vec<T>,
}

struct DecoderCache<T> {
    pre: Vec<T>,
    hidden: Vec<T>,
    /// Decoder output in the `[-1, 1]` domain, patch-major.
    out: Vec<T>,
}

impl<T: Scalar> VqModel<T> {
    pub fn init(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = CodecParams::init(&config, &mut rng);
        let codebook = Codebook::init(config.codebook_size, config.latent_dim, &mut rng);
        Ok(Self {
            config,
            params,
            codebook,
        })
    }

    fn encode_cached(&self, img: &ImageTensor) -> Result<(LatentGrid<T>, EncoderCache<T>)> {
        let cfg = &self.config;
        check_image(cfg, img)?;
        let (pl, hid, d, cells) = (cfg.patch_len(), cfg.hidden, cfg.latent_dim, cfg.cells());
        let p = &self.params;
        let mut patches = Vec::with_capacity(cells * pl);
        let mut pre = vec![T::zero(); cells * hid];
        let mut hidden = vec![T::zero(); cells * hid];
        let mut z = vec![T::zero(); cells * d];
        let mut patch = Vec::with_capacity(pl);
        for c in 0..cells {
            extract_patch(cfg, img, c, &mut patch);
            let a = &mut pre[c * hid..(c + 1) * hid];
            linear_row(&patch, &p.enc_w1.data, Some(&p.enc_b1.data), a);
            for (x, &pos) in a.iter_mut().zip(&p.enc_pos.data[c * hid..(c + 1) * hid]) {
                *x += pos;
            }
            let hrow = &mut hidden[c * hid..(c + 1) * hid];
            for (h, &x) in hrow.iter_mut().zip(a.iter()) {
                *h = gelu(x);
            }
            linear_row(hrow, &p.enc_w2.data, Some(&p.enc_b2.data), &mut z[c * d..(c + 1) * d]);
            patches.extend_from_slice(&patch);
        }
        let grid = LatentGrid::new(cfg.grid_h, cfg.grid_w, d, z)?;
        Ok((
            grid,
            EncoderCache {
                patches,
                pre,
                hidden,
            },
        ))
    }

    /// Deterministic encoder pass: image to `h x w x d_z` latents.
    pub fn encode(&self, img: &ImageTensor) -> Result<LatentGrid<T>> {
        Ok(self.encode_cached(img)?.0)
    }

    /// Mean over cells of the encoder's hidden activations; used as an
    /// image feature vector for distribution distances.
    pub fn pooled_features(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        let (_, cache) = self.encode_cached(img)?;
        let hid = self.config.hidden;
        let cells = self.config.cells() as f64;
        let mut out = vec![0.0; hid];
        for row in cache.hidden.chunks(hid) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v.to_f64_lossy() / cells;
            }
        }
        Ok(out)
    }

    fn check_grid(&self, z: &LatentGrid<T>) -> Result<()> {
        let cfg = &self.config;
        if z.h != cfg.grid_h || z.w != cfg.grid_w || z.dim != cfg.latent_dim {
            return Err(Error::Shape {
                expected: format!("{}x{}x{}", cfg.grid_h, cfg.grid_w, cfg.latent_dim),
                got: format!("{}x{}x{}", z.h, z.w, z.dim),
            });
        }
        Ok(())
    }

    fn decode_cached(&self, zq: &LatentGrid<T>) -> Result<DecoderCache<T>> {
        self.check_grid(zq)?;
        let cfg = &self.config;
        let (pl, hid, cells) = (cfg.patch_len(), cfg.hidden, cfg.cells());
        let p = &self.params;
        let mut pre = vec![T::zero(); cells * hid];
        let mut hidden = vec![T::zero(); cells * hid];
        let mut out = vec![T::zero(); cells * pl];
        for c in 0..cells {
            let a = &mut pre[c * hid..(c + 1) * hid];
            linear_row(zq.cell(c), &p.dec_w1.data, Some(&p.dec_b1.data), a);
            for (x, &pos) in a.iter_mut().zip(&p.dec_pos.data[c * hid..(c + 1) * hid]) {
                *x += pos;
            }
            let hrow = &mut hidden[c * hid..(c + 1) * hid];
            for (h, &x) in hrow.iter_mut().zip(a.iter()) {
                *h = gelu(x);
            }
            linear_row(hrow, &p.dec_w2.data, Some(&p.dec_b2.data), &mut out[c * pl..(c + 1) * pl]);
        }
        Ok(DecoderCache { pre, hidden, out })
    }

    /// Unclamped reconstruction in the `[0, 1]` pixel domain, `(y, x, c)` order.
    fn assemble(&self, patch_out: &[T]) -> Vec<f64> {
        let cfg = &self.config;
        let p = cfg.patch();
        let pl = cfg.patch_len();
        let mut img = vec![0.0; cfg.height * cfg.width * 3];
        for c in 0..cfg.cells() {
            let (ci, cj) = (c / cfg.grid_w, c % cfg.grid_w);
            for dy in 0..p {
                for k in 0..p * 3 {
                    let v = patch_out[c * pl + dy * p * 3 + k].to_f64_lossy();
                    let idx = ((ci * p + dy) * cfg.width + cj * p) * 3 + k;
                    img[idx] = (v + 1.0) / 2.0;
                }
            }
        }
        img
    }

    /// Deterministic decoder pass; output clamped to `[0, 1]`.
    pub fn decode(&self, zq: &LatentGrid<T>) -> Result<ImageTensor> {
        let cache = self.decode_cached(zq)?;
        let pixels = self
            .assemble(&cache.out)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0) as f32)
            .collect();
        ImageTensor::new(self.config.height, self.config.width, pixels)
    }

    pub fn quantize(&self, z: &LatentGrid<T>) -> Result<(LatentGrid<T>, ImageTokenSeq)> {
        self.codebook.quantize(z)
    }

    /// Image to its codebook index sequence.
    pub fn tokenize(&self, img: &ImageTensor) -> Result<ImageTokenSeq> {
        Ok(self.quantize(&self.encode(img)?)?.1)
    }

    /// Index sequence to image: lookup then decode.
    pub fn tokens_to_image(&self, s: &[usize]) -> Result<ImageTensor> {
        let zq = self
            .codebook
            .indices_to_codes(s, self.config.grid_h, self.config.grid_w)?;
        self.decode(&zq)
    }

    pub fn reconstruct(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let (zq, _) = self.quantize(&self.encode(img)?)?;
        self.decode(&zq)
    }

    /// Loss of one image and, when `grads` is given, accumulation of
    /// `scale * d loss` into it using the straight-through estimator.
    pub fn loss_and_grad(
        &self,
        img: &ImageTensor,
        beta: f64,
        grads: Option<(&mut VqModel<T>, T)>,
    ) -> Result<CodecLoss> {
        let cfg = &self.config;
        let (pl, hid, d, cells) = (cfg.patch_len(), cfg.hidden, cfg.latent_dim, cfg.cells());
        let (z, enc) = self.encode_cached(img)?;
        let (zq, s) = self.quantize(&z)?;
        let dec = self.decode_cached(&zq)?;

        let n_pix = (cfg.height * cfg.width * 3) as f64;
        let n_lat = (cells * d) as f64;
        let mut targets = Vec::with_capacity(cells * pl);
        let mut patch = Vec::with_capacity(pl);
        for c in 0..cells {
            extract_patch::<T>(cfg, img, c, &mut patch);
            targets.extend_from_slice(&patch);
        }
        // Reconstruction error measured in the [0, 1] domain.
        let mut recon = 0.0;
        for (&y, &t) in dec.out.iter().zip(&targets) {
            let diff = (y - t).to_f64_lossy() / 2.0;
            recon += diff * diff;
        }
        recon /= n_pix;
        let vq: f64 = z
            .data
            .iter()
            .zip(&zq.data)
            .map(|(&a, &b)| {
                let diff = (a - b).to_f64_lossy();
                diff * diff
            })
            .sum::<f64>()
            / n_lat;
        let loss = CodecLoss {
            total: recon + vq + beta * vq,
            reconstruction: recon,
            codebook: vq,
            commitment: vq,
        };

        let Some((g, scale)) = grads else {
            return Ok(loss);
        };
        let p = &self.params;
        let gp = &mut g.params;

        // d recon / d out, out in [-1, 1]: ((y - t) / 2)^2 / n -> (y - t) / (2 n)
        let dout: Vec<T> = dec
            .out
            .iter()
            .zip(&targets)
            .map(|(&y, &t)| scale * (y - t) / T::lit(2.0 * n_pix))
            .collect();
        let dhid = linear_backward(
            &dec.hidden,
            &dout,
            &p.dec_w2.data,
            &mut gp.dec_w2.data,
            Some(&mut gp.dec_b2.data),
            hid,
            pl,
        );
        let dpre: Vec<T> = dhid
            .iter()
            .zip(&dec.pre)
            .map(|(&g, &a)| g * gelu_grad(a))
            .collect();
        for (gpos, &gv) in gp.dec_pos.data.iter_mut().zip(&dpre) {
            *gpos += gv;
        }
        let dzq = linear_backward(
            &zq.data,
            &dpre,
            &p.dec_w1.data,
            &mut gp.dec_w1.data,
            Some(&mut gp.dec_b1.data),
            d,
            hid,
        );

        // Straight-through: the decoder's input gradient flows to the encoder
        // output unchanged; the codebook term moves entries toward sg(z) and
        // the commitment term moves z toward sg(z_q).
        let mut dz = dzq;
        let two = T::lit(2.0);
        let inv = T::lit(1.0 / n_lat);
        let beta_t = T::lit(beta);
        for c in 0..cells {
            let k = s[c];
            for j in 0..d {
                let diff = z.data[c * d + j] - zq.data[c * d + j];
                dz[c * d + j] += scale * beta_t * two * diff * inv;
                g.codebook.entries.data[k * d + j] -= scale * two * diff * inv;
            }
        }

        let dhid = linear_backward(
            &enc.hidden,
            &dz,
            &p.enc_w2.data,
            &mut gp.enc_w2.data,
            Some(&mut gp.enc_b2.data),
            hid,
            d,
        );
        let dpre: Vec<T> = dhid
            .iter()
            .zip(&enc.pre)
            .map(|(&g, &a)| g * gelu_grad(a))
            .collect();
        for (gpos, &gv) in gp.enc_pos.data.iter_mut().zip(&dpre) {
            *gpos += gv;
        }
        linear_backward(
            &enc.patches,
            &dpre,
            &p.enc_w1.data,
            &mut gp.enc_w1.data,
            Some(&mut gp.enc_b1.data),
            pl,
            hid,
        );
        Ok(loss)
    }

    /// Mean loss over a batch, with gradients.
    pub fn batch_loss_and_grad(
        &self,
        images: &[&ImageTensor],
        beta: f64,
    ) -> Result<(CodecLoss, VqModel<T>)> {
        let mut grads = self.zeros_like();
        let mut acc = CodecLoss::default();
        let scale = T::lit(1.0 / images.len() as f64);
        for img in images {
            let l = self.loss_and_grad(img, beta, Some((&mut grads, scale)))?;
            acc.add_scaled(&l, 1.0 / images.len() as f64);
        }
        Ok((acc, grads))
    }

    /// Value of the straight-through surrogate objective, with every
    /// stop-gradient quantity pinned to its value under `anchor`.
    ///
    /// At `self == anchor` this equals the codec loss, and its exact
    /// gradient is what [`VqModel::loss_and_grad`] computes, which makes it
    /// the reference function for finite-difference checks.
    pub fn surrogate_loss(&self, anchor: &VqModel<T>, img: &ImageTensor, beta: f64) -> Result<f64> {
        let (z_anchor, _) = anchor.encode_cached(img)?;
        let (zq_anchor, s_anchor) = anchor.quantize(&z_anchor)?;
        let (z, _) = self.encode_cached(img)?;
        // decoder sees z + sg(z_q - z), evaluated at the anchor
        let mut input = z.clone();
        for i in 0..input.data.len() {
            input.data[i] = z.data[i] + (zq_anchor.data[i] - z_anchor.data[i]);
        }
        let dec = self.decode_cached(&input)?;
        let recon_img = self.assemble(&dec.out);
        let recon = recon_img
            .iter()
            .zip(img.data())
            .map(|(&a, &b)| (a - b as f64).powi(2))
            .sum::<f64>()
            / recon_img.len() as f64;
        let d = self.config.latent_dim;
        let n_lat = z.data.len() as f64;
        let mut codebook_term = 0.0;
        let mut commit_term = 0.0;
        for (c, &k) in s_anchor.iter().enumerate() {
            for j in 0..d {
                let live_code = self.codebook.entry(k)[j].to_f64_lossy();
                codebook_term += (z_anchor.data[c * d + j].to_f64_lossy() - live_code).powi(2);
                commit_term +=
                    (z.data[c * d + j].to_f64_lossy() - zq_anchor.data[c * d + j].to_f64_lossy()).powi(2);
            }
        }
        Ok(recon + codebook_term / n_lat + beta * commit_term / n_lat)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CodecLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

impl CodecLoss {
    fn add_scaled(&mut self, other: &CodecLoss, s: f64) {
        self.total += s * other.total;
        self.reconstruction += s * other.reconstruction;
        self.codebook += s * other.codebook;
        self.commitment += s * other.commitment;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta: f64,
    pub seed: u64,
    /// Every this many steps, codes no batch selected since the last check
    /// are moved onto random encoder outputs. 0 disables. Restarts stop
    /// after 80% of the steps so the codebook can settle.
    pub restart_every: usize,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            lr: 4e-3,
            beta: 0.25,
            seed: 0,
            restart_every: 100,
        }
    }
}

/// Trains encoder, decoder and codebook jointly with Adam on the
/// reconstruction + codebook + commitment objective.
pub fn train_codec(
    images: &[ImageTensor],
    config: CodecConfig,
    hp: &CodecTrainConfig,
    mut on_step: impl FnMut(usize, &CodecLoss),
) -> Result<VqModel<f32>> {
    if images.is_empty() {
        return Err(Error::MissingCorpus("codec".into()));
    }
    let mut model = VqModel::<f32>::init(config, hp.seed)?;
    let mut opt = Adam::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed ^ 0x5eed_c0dec);
    let mut order: Vec<usize> = Vec::new();
    let k = model.config.codebook_size;
    let d = model.config.latent_dim;
    let mut usage = vec![0usize; k];
    let restart_until = hp.steps * 4 / 5;
    for step in 0..hp.steps {
        let batch: Vec<&ImageTensor> = (0..hp.batch_size.max(1))
            .map(|_| {
                if order.is_empty() {
                    order = (0..images.len()).collect();
                    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                }
                &images[order.pop().unwrap()]
            })
            .collect();
        let (loss, grads) = model.batch_loss_and_grad(&batch, hp.beta)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: loss.total,
            });
        }
        on_step(step, &loss);
        opt.update(&mut model, &grads, hp.lr).map_err(|_| Error::Diverged {
            step,
            loss: loss.total,
        })?;
        if hp.restart_every == 0 {
            continue;
        }
        let mut latents = Vec::new();
        for img in &batch {
            let z = model.encode(img)?;
            for c in 0..z.cells() {
                usage[model.codebook.nearest(z.cell(c))] += 1;
                latents.push(z.cell(c).to_vec());
            }
        }
        if (step + 1) % hp.restart_every == 0 && step + 1 < restart_until {
            for code in (0..k).filter(|&c| usage[c] == 0) {
                let src = &latents[rng.random_range(0..latents.len())];
                let row = code * d..(code + 1) * d;
                for (x, &z) in model.codebook.entries.data[row.clone()].iter_mut().zip(src) {
                    *x = z + 0.01 * gaussian(&mut rng) as f32;
                }
                opt.m.codebook.entries.data[row.clone()].fill(0.0);
                opt.v.codebook.entries.data[row].fill(0.0);
            }
            usage.fill(0);
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb(rows: &[&[f64]]) -> Codebook<f64> {
        Codebook::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    fn grid(cells: &[&[f64]]) -> LatentGrid<f64> {
        LatentGrid::new(1, cells.len(), cells[0].len(), cells.concat()).unwrap()
    }

    #[test]
    fn nearest_code_and_tie_break() {
        let book = cb(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let (_, s) = book.quantize(&grid(&[&[0.2, 0.1], &[0.5, 0.5], &[0.9, 0.7]])).unwrap();
        assert_eq!(s, vec![0, 0, 1]);
    }

    #[test]
    fn exact_entry_maps_to_itself() {
        let book = cb(&[&[0.0, 0.0], &[1.0, 1.0], &[2.0, -1.0], &[0.3, 0.7]]);
        let (zq, s) = book.quantize(&grid(&[&[0.3, 0.7]])).unwrap();
        assert_eq!(s, vec![3]);
        assert_eq!(zq.cell(0), book.entry(3));
    }

    #[test]
    fn empty_codebook_and_bad_indices_error() {
        let empty = Codebook::<f64> {
            entries: Tensor::zeros(&[0, 2]),
        };
        assert!(matches!(
            empty.quantize(&grid(&[&[0.0, 0.0]])),
            Err(Error::EmptyCodebook)
        ));
        let book = cb(&[&[0.0, 0.0]]);
        assert!(matches!(
            book.indices_to_codes(&[1], 1, 1),
            Err(Error::CodeOutOfRange { index: 1, size: 1 })
        ));
        let zeros = book.indices_to_codes(&[0, 0, 0, 0], 2, 2).unwrap();
        assert!(zeros.data.iter().all(|&v| v == 0.0));
    }

    fn micro() -> CodecConfig {
        CodecConfig {
            height: 8,
            width: 8,
            grid_h: 2,
            grid_w: 2,
            codebook_size: 8,
            latent_dim: 4,
            hidden: 6,
        }
    }

    fn test_image(h: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * h * 3).map(|_| rand::Rng::random::<f32>(&mut rng)).collect();
        ImageTensor::new(h, h, data).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(CodecConfig::default().validate().is_ok());
        let bad = CodecConfig {
            grid_h: 3,
            ..CodecConfig::default()
        };
        assert!(bad.validate().is_err());
        let paper_scale = CodecConfig {
            height: 256,
            width: 256,
            grid_h: 16,
            grid_w: 16,
            codebook_size: 16384,
            latent_dim: 256,
            hidden: 512,
        };
        assert!(paper_scale.validate().is_ok());
    }

    #[test]
    fn encode_shape_determinism_and_mismatch() {
        let m = VqModel::<f64>::init(micro(), 3).unwrap();
        let img = ImageTensor::filled(8, 8, [0.0; 3]);
        let a = m.encode(&img).unwrap();
        assert_eq!((a.h, a.w, a.dim), (2, 2, 4));
        assert!(a.data.iter().all(|v| v.is_finite()));
        assert_eq!(a, m.encode(&img).unwrap());
        assert!(m.encode(&ImageTensor::filled(4, 8, [0.0; 3])).is_err());
    }

    #[test]
    fn single_pixel_change_touches_only_its_cell() {
        let m = VqModel::<f64>::init(micro(), 5).unwrap();
        let img = test_image(8, 1);
        let mut other = img.clone();
        other.set_pixel(5, 2, [0.9, 0.1, 0.4]); // patch 4, cell (1, 0) = 2
        let (a, b) = (m.encode(&img).unwrap(), m.encode(&other).unwrap());
        for c in 0..4 {
            assert_eq!(a.cell(c) == b.cell(c), c != 2, "cell {c}");
        }
    }

    #[test]
    fn decode_output_is_clamped_and_deterministic() {
        let mut m = VqModel::<f64>::init(micro(), 7).unwrap();
        m.params.dec_b2.fill(5.0);
        let z = m.codebook.indices_to_codes(&[0, 1, 2, 3], 2, 2).unwrap();
        let img = m.decode(&z).unwrap();
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(img, m.decode(&z).unwrap());
        assert!(m.decode(&LatentGrid::new(1, 1, 4, vec![0.0; 4]).unwrap()).is_err());
    }

    #[test]
    fn loss_matches_surrogate_at_anchor() {
        let m = VqModel::<f64>::init(micro(), 9).unwrap();
        let img = test_image(8, 2);
        let l = m.loss_and_grad(&img, 0.25, None).unwrap();
        let s = m.surrogate_loss(&m, &img, 0.25).unwrap();
        assert!((l.total - s).abs() < 1e-12);
    }

    #[test]
    fn zero_beta_leaves_only_straight_through_gradient_on_encoder() {
        // With beta = 0 the encoder receives exactly the decoder's input
        // gradient; doubling beta's commitment share must change it.
        let m = VqModel::<f64>::init(micro(), 11).unwrap();
        let img = test_image(8, 4);
        let mut g0 = m.zeros_like();
        m.loss_and_grad(&img, 0.0, Some((&mut g0, 1.0))).unwrap();
        let h = 1e-6;
        for idx in [0usize, 3, 7] {
            let mut plus = m.clone();
            plus.params.enc_b2.data[idx % 4] += h;
            let mut minus = m.clone();
            minus.params.enc_b2.data[idx % 4] -= h;
            let fd = (plus.surrogate_loss(&m, &img, 0.0).unwrap()
                - minus.surrogate_loss(&m, &img, 0.0).unwrap())
                / (2.0 * h);
            let an = g0.params.enc_b2.data[idx % 4];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "{fd} vs {an}");
        }
        let mut g1 = m.zeros_like();
        m.loss_and_grad(&img, 1.0, Some((&mut g1, 1.0))).unwrap();
        assert_ne!(g0.params.enc_b2, g1.params.enc_b2);
        // the codebook gradient does not depend on beta
        assert_eq!(g0.codebook, g1.codebook);
    }

    #[test]
    fn overfits_a_single_image() {
        let cfg = CodecConfig {
            height: 16,
            width: 16,
            grid_h: 2,
            grid_w: 2,
            codebook_size: 16,
            latent_dim: 8,
            hidden: 64,
        };
        let img = test_image(16, 3);
        let img = ImageTensor::from_rgb8(16, 16, &img.to_rgb8()).unwrap();
        let hp = CodecTrainConfig {
            steps: 400,
            batch_size: 1,
            lr: 3e-3,
            ..Default::default()
        };
        let model = train_codec(std::slice::from_ref(&img), cfg, &hp, |_, _| {}).unwrap();
        let mse = model.reconstruct(&img).unwrap().mse(&img);
        assert!(mse < 1e-3, "mse {mse}");
    }
}
