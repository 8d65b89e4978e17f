//! Decoder-only transformer shared by the dialogue generator and the
//! text-to-image translator.
//!
//! Pre-norm GPT blocks with learned absolute positions. Training uses a
//! full-sequence forward that caches activations for the hand-written
//! backward pass; inference uses a key/value cache. Both paths run the same
//! per-row kernels in the same order, so their logits agree bit for bit.
//!
//! Row `t` of the logits predicts token `t + 1`. Callers put a start token at
//! position 0; a loss mask marks which positions (always `>= 1`) are scored.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    gelu, gelu_grad, layer_norm_row, layer_norm_row_backward, linear_backward, linear_row,
    log_softmax_f64, ParamSet, Scalar, Tensor,
};
use crate::tokenizer::TokenId;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqModelConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub max_len: usize,
}

impl SeqModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.layers == 0 || self.heads == 0 || self.max_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.hidden == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    fn mlp(&self) -> usize {
        4 * self.hidden
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub w_qkv: Tensor<T>,
    pub b_qkv: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w_fc: Tensor<T>,
    pub b_fc: Tensor<T>,
    pub w_proj: Tensor<T>,
    pub b_proj: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqParams<T> {
    pub config: SeqModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub lnf_g: Tensor<T>,
    pub lnf_b: Tensor<T>,
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
}

macro_rules! block_fields {
    (ref $b:ident, $i:expr, $($f:ident),*) => {
        vec![$((format!("blocks.{}.{}", $i, stringify!($f)), &$b.$f)),*]
    };
    (mut $b:ident, $i:expr, $($f:ident),*) => {
        vec![$((format!("blocks.{}.{}", $i, stringify!($f)), &mut $b.$f)),*]
    };
}

impl<T: Scalar> ParamSet<T> for SeqParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(block_fields!(
                ref b, i, ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj
            ));
        }
        v.push(("lnf_g".into(), &self.lnf_g));
        v.push(("lnf_b".into(), &self.lnf_b));
        v.push(("w_out".into(), &self.w_out));
        v.push(("b_out".into(), &self.b_out));
        v
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(block_fields!(
                mut b, i, ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj,
                b_proj
            ));
        }
        v.push(("lnf_g".into(), &mut self.lnf_g));
        v.push(("lnf_b".into(), &mut self.lnf_b));
        v.push(("w_out".into(), &mut self.w_out));
        v.push(("b_out".into(), &mut self.b_out));
        v
    }
}

/// Next-token probabilities at one position.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDistribution {
    pub probs: Vec<f64>,
}

impl StepDistribution {
    pub fn sum(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// One scored sequence: tokens plus the positions whose NLL counts.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqExample {
    pub tokens: Vec<TokenId>,
    pub mask: Vec<bool>,
}

impl SeqExample {
    pub fn scored(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

struct LayerCache<T> {
    x_in: Vec<T>,
    ln1: Vec<T>,
    ln1_stats: Vec<(T, T)>,
    qkv: Vec<T>,
    /// Per head, row-major `n x n` lower-triangular attention weights.
    probs: Vec<Vec<T>>,
    att: Vec<T>,
    x_mid: Vec<T>,
    ln2: Vec<T>,
    ln2_stats: Vec<(T, T)>,
    fc: Vec<T>,
    act: Vec<T>,
}

struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
    x_final: Vec<T>,
    lnf: Vec<T>,
    lnf_stats: Vec<(T, T)>,
    logits: Vec<T>,
}

/// Attention weights and output for query row `t` of one head.
///
/// `qkv` rows are laid out `[q | k | v]` with width `3 * hidden`.
#[inline]
fn attend_row<T: Scalar>(
    q: &[T],
    keys: &[T],
    values: &[T],
    stride: usize,
    key_off: usize,
    val_off: usize,
    rows: usize,
    dh: usize,
    probs: &mut [T],
    out: &mut [T],
) {
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut max = T::neg_infinity();
    for s in 0..rows {
        let k = &keys[s * stride + key_off..s * stride + key_off + dh];
        let mut dot = T::zero();
        for (&a, &b) in q.iter().zip(k) {
            dot += a * b;
        }
        probs[s] = dot * scale;
        max = max.max(probs[s]);
    }
    let mut sum = T::zero();
    for p in probs[..rows].iter_mut() {
        *p = (*p - max).exp();
        sum += *p;
    }
    out.iter_mut().for_each(|o| *o = T::zero());
    for s in 0..rows {
        probs[s] /= sum;
        let v = &values[s * stride + val_off..s * stride + val_off + dh];
        for (o, &vv) in out.iter_mut().zip(v) {
            *o += probs[s] * vv;
        }
    }
}

/// Key/value rows for incremental decoding.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    /// Per layer, `len x 3*hidden` rows of `[q | k | v]` (q is unused).
    qkv: Vec<Vec<T>>,
    len: usize,
}

impl<T> KvCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeOptions {
    pub beam: usize,
    pub stop_id: TokenId,
    pub max_new: usize,
    pub blocked: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Generated tokens, including the stop token when it was produced.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    /// Length-normalized log-probability.
    pub score: f64,
}

impl<T: Scalar> SeqParams<T> {
    pub fn init(config: SeqModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, v, l, m) = (config.hidden, config.vocab_size, config.max_len, config.mlp());
        let std = 0.02;
        let resid_std = 0.02 / ((2 * config.layers) as f64).sqrt();
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1_g: Tensor::filled(&[d], T::one()),
                ln1_b: Tensor::zeros(&[d]),
                w_qkv: Tensor::randn(&[d, 3 * d], std, &mut rng),
                b_qkv: Tensor::zeros(&[3 * d]),
                w_o: Tensor::randn(&[d, d], resid_std, &mut rng),
                b_o: Tensor::zeros(&[d]),
                ln2_g: Tensor::filled(&[d], T::one()),
                ln2_b: Tensor::zeros(&[d]),
                w_fc: Tensor::randn(&[d, m], std, &mut rng),
                b_fc: Tensor::zeros(&[m]),
                w_proj: Tensor::randn(&[m, d], resid_std, &mut rng),
                b_proj: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            tok_emb: Tensor::randn(&[v, d], std, &mut rng),
            pos_emb: Tensor::randn(&[l, d], std * 0.5, &mut rng),
            blocks,
            lnf_g: Tensor::filled(&[d], T::one()),
            lnf_b: Tensor::zeros(&[d]),
            w_out: Tensor::randn(&[d, v], std, &mut rng),
            b_out: Tensor::zeros(&[v]),
            config,
        })
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() > self.config.max_len {
            return Err(Error::Overlength {
                len: tokens.len(),
                max_len: self.config.max_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn embed_row(&self, token: TokenId, pos: usize, out: &mut [T]) {
        let d = self.config.hidden;
        let e = &self.tok_emb.data[token as usize * d..(token as usize + 1) * d];
        let p = &self.pos_emb.data[pos * d..(pos + 1) * d];
        for i in 0..d {
            out[i] = e[i] + p[i];
        }
    }

    /// Everything after attention for one row: output projection, residual,
    /// MLP, residual. Returns `x_mid` and writes the block output into `x`.
    #[allow(clippy::too_many_arguments)]
    fn block_tail_row(
        &self,
        b: &Block<T>,
        att: &[T],
        x: &mut [T],
        x_mid: &mut [T],
        ln2: &mut [T],
        fc: &mut [T],
        act: &mut [T],
        tmp: &mut [T],
    ) -> (T, T) {
        linear_row(att, &b.w_o.data, Some(&b.b_o.data), tmp);
        for i in 0..x.len() {
            x_mid[i] = x[i] + tmp[i];
        }
        let stats = layer_norm_row(x_mid, &b.ln2_g.data, &b.ln2_b.data, ln2);
        linear_row(ln2, &b.w_fc.data, Some(&b.b_fc.data), fc);
        for (a, &f) in act.iter_mut().zip(fc.iter()) {
            *a = gelu(f);
        }
        linear_row(act, &b.w_proj.data, Some(&b.b_proj.data), tmp);
        for i in 0..x.len() {
            x[i] = x_mid[i] + tmp[i];
        }
        stats
    }

    fn forward_cached(&self, tokens: &[TokenId]) -> Result<ForwardCache<T>> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let (n, d, m, h, dh, v) = (
            tokens.len(),
            cfg.hidden,
            cfg.mlp(),
            cfg.heads,
            cfg.head_dim(),
            cfg.vocab_size,
        );
        let mut x = vec![T::zero(); n * d];
        for (t, &tok) in tokens.iter().enumerate() {
            self.embed_row(tok, t, &mut x[t * d..(t + 1) * d]);
        }
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut tmp = vec![T::zero(); d];
        for b in &self.blocks {
            let x_in = x.clone();
            let mut ln1 = vec![T::zero(); n * d];
            let mut ln1_stats = Vec::with_capacity(n);
            let mut qkv = vec![T::zero(); n * 3 * d];
            for t in 0..n {
                ln1_stats.push(layer_norm_row(
                    &x[t * d..(t + 1) * d],
                    &b.ln1_g.data,
                    &b.ln1_b.data,
                    &mut ln1[t * d..(t + 1) * d],
                ));
                linear_row(
                    &ln1[t * d..(t + 1) * d],
                    &b.w_qkv.data,
                    Some(&b.b_qkv.data),
                    &mut qkv[t * 3 * d..(t + 1) * 3 * d],
                );
            }
            let mut probs = vec![vec![T::zero(); n * n]; h];
            let mut att = vec![T::zero(); n * d];
            for (head, hp) in probs.iter_mut().enumerate() {
                for t in 0..n {
                    let q = &qkv[t * 3 * d + head * dh..t * 3 * d + head * dh + dh];
                    attend_row(
                        q,
                        &qkv,
                        &qkv,
                        3 * d,
                        d + head * dh,
                        2 * d + head * dh,
                        t + 1,
                        dh,
                        &mut hp[t * n..t * n + t + 1],
                        &mut att[t * d + head * dh..t * d + head * dh + dh],
                    );
                }
            }
            let mut x_mid = vec![T::zero(); n * d];
            let mut ln2 = vec![T::zero(); n * d];
            let mut ln2_stats = Vec::with_capacity(n);
            let mut fc = vec![T::zero(); n * m];
            let mut act = vec![T::zero(); n * m];
            for t in 0..n {
                ln2_stats.push(self.block_tail_row(
                    b,
                    &att[t * d..(t + 1) * d],
                    &mut x[t * d..(t + 1) * d],
                    &mut x_mid[t * d..(t + 1) * d],
                    &mut ln2[t * d..(t + 1) * d],
                    &mut fc[t * m..(t + 1) * m],
                    &mut act[t * m..(t + 1) * m],
                    &mut tmp,
                ));
            }
            layers.push(LayerCache {
                x_in,
                ln1,
                ln1_stats,
                qkv,
                probs,
                att,
                x_mid,
                ln2,
                ln2_stats,
                fc,
                act,
            });
        }
        let mut lnf = vec![T::zero(); n * d];
        let mut lnf_stats = Vec::with_capacity(n);
        let mut logits = vec![T::zero(); n * v];
        for t in 0..n {
            lnf_stats.push(layer_norm_row(
                &x[t * d..(t + 1) * d],
                &self.lnf_g.data,
                &self.lnf_b.data,
                &mut lnf[t * d..(t + 1) * d],
            ));
            linear_row(
                &lnf[t * d..(t + 1) * d],
                &self.w_out.data,
                Some(&self.b_out.data),
                &mut logits[t * v..(t + 1) * v],
            );
        }
        Ok(ForwardCache {
            layers,
            x_final: x,
            lnf,
            lnf_stats,
            logits,
        })
    }

    /// Raw logits, one row per input position.
    pub fn logits(&self, tokens: &[TokenId]) -> Result<Vec<Vec<T>>> {
        let v = self.config.vocab_size;
        let cache = self.forward_cached(tokens)?;
        Ok(cache.logits.chunks(v).map(<[T]>::to_vec).collect())
    }

    /// Next-token distributions; entry `t` conditions on `tokens[..=t]`.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Vec<StepDistribution>> {
        Ok(self
            .logits(tokens)?
            .iter()
            .map(|row| StepDistribution {
                probs: log_softmax_f64(row).into_iter().map(f64::exp).collect(),
            })
            .collect())
    }

    /// `-log p(tokens[t] | tokens[..t])` for `t = 1..n`; entry 0 is NaN.
    pub fn position_nlls(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let logits = self.logits(tokens)?;
        let mut out = vec![f64::NAN; tokens.len()];
        for t in 1..tokens.len() {
            out[t] = -log_softmax_f64(&logits[t - 1])[tokens[t] as usize];
        }
        Ok(out)
    }

    fn check_mask(tokens: &[TokenId], mask: &[bool]) -> Result<usize> {
        if mask.len() != tokens.len() {
            return Err(Error::Shape {
                expected: format!("mask of length {}", tokens.len()),
                got: format!("{}", mask.len()),
            });
        }
        if mask.first() == Some(&true) {
            return Err(Error::Config("position 0 has no context and cannot be scored".into()));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(count)
    }

    /// Mean NLL over masked positions.
    pub fn nll_loss(&self, tokens: &[TokenId], mask: &[bool]) -> Result<f64> {
        let count = Self::check_mask(tokens, mask)?;
        let nll = self.position_nlls(tokens)?;
        Ok(nll
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(l, _)| l)
            .sum::<f64>()
            / count as f64)
    }

    /// Token-mean NLL pooled over every masked position of the batch. For a
    /// single example this equals [`SeqParams::nll_loss`] exactly.
    pub fn batch_nll(&self, batch: &[SeqExample]) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0;
        for ex in batch {
            if ex.scored() == 0 {
                continue;
            }
            count += Self::check_mask(&ex.tokens, &ex.mask)?;
            let nll = self.position_nlls(&ex.tokens)?;
            sum += nll
                .iter()
                .zip(&ex.mask)
                .filter(|(_, &m)| m)
                .map(|(l, _)| l)
                .sum::<f64>();
        }
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(sum / count as f64)
    }

    /// Gradient of [`SeqParams::nll_loss`].
    pub fn backward(&self, tokens: &[TokenId], mask: &[bool]) -> Result<SeqParams<T>> {
        let count = Self::check_mask(tokens, mask)?;
        let mut grads = self.zeros_like();
        self.accumulate_grad(tokens, mask, T::lit(1.0 / count as f64), &mut grads)?;
        Ok(grads)
    }

    /// Token-mean NLL over every masked position in the batch, and its gradient.
    pub fn batch_loss_and_grad(&self, batch: &[SeqExample]) -> Result<(f64, SeqParams<T>)> {
        let mut grads = self.zeros_like();
        let (sum, count) = self.accumulate_batch(batch, T::one(), &mut grads)?;
        Ok((sum / count as f64, grads))
    }

    /// Adds `weight / total_count * d(sum NLL)` into `grads`; returns
    /// `(sum NLL, total scored positions)`.
    pub fn accumulate_batch(
        &self,
        batch: &[SeqExample],
        weight: T,
        grads: &mut SeqParams<T>,
    ) -> Result<(f64, usize)> {
        let mut total = 0;
        for ex in batch {
            if ex.mask.len() != ex.tokens.len() || ex.mask.first() == Some(&true) {
                Self::check_mask(&ex.tokens, &ex.mask)?;
            }
            total += ex.scored();
        }
        if total == 0 {
            return Err(Error::EmptyMask);
        }
        let scale = weight / T::lit(total as f64);
        let mut sum = 0.0;
        for ex in batch {
            if ex.scored() > 0 {
                sum += self.accumulate_grad(&ex.tokens, &ex.mask, scale, grads)?;
            }
        }
        Ok((sum, total))
    }

    /// Adds `scale * d(sum of masked NLL)` into `grads` and returns the sum.
    fn accumulate_grad(
        &self,
        tokens: &[TokenId],
        mask: &[bool],
        scale: T,
        grads: &mut SeqParams<T>,
    ) -> Result<f64> {
        let cache = self.forward_cached(tokens)?;
        let cfg = &self.config;
        let (n, d, m, h, dh, v) = (
            tokens.len(),
            cfg.hidden,
            cfg.mlp(),
            cfg.heads,
            cfg.head_dim(),
            cfg.vocab_size,
        );

        let mut dlogits = vec![T::zero(); n * v];
        let mut nll_sum = 0.0;
        for t in 1..n {
            if !mask[t] {
                continue;
            }
            let row = &cache.logits[(t - 1) * v..t * v];
            let logp = log_softmax_f64(row);
            let target = tokens[t] as usize;
            nll_sum -= logp[target];
            let drow = &mut dlogits[(t - 1) * v..t * v];
            for (j, dl) in drow.iter_mut().enumerate() {
                let p = T::lit(logp[j].exp());
                *dl = scale * if j == target { p - T::one() } else { p };
            }
        }

        let dlnf = linear_backward(
            &cache.lnf,
            &dlogits,
            &self.w_out.data,
            &mut grads.w_out.data,
            Some(&mut grads.b_out.data),
            d,
            v,
        );
        let mut dx = vec![T::zero(); n * d];
        for t in 0..n {
            let (mean, rstd) = cache.lnf_stats[t];
            layer_norm_row_backward(
                &cache.x_final[t * d..(t + 1) * d],
                mean,
                rstd,
                &self.lnf_g.data,
                &dlnf[t * d..(t + 1) * d],
                &mut grads.lnf_g.data,
                &mut grads.lnf_b.data,
                &mut dx[t * d..(t + 1) * d],
            );
        }

        let inv_sqrt = T::lit(1.0 / (dh as f64).sqrt());
        for (li, b) in self.blocks.iter().enumerate().rev() {
            let c = &cache.layers[li];
            let gb = &mut grads.blocks[li];

            // MLP branch: x_out = x_mid + proj(gelu(fc(ln2(x_mid))))
            let dact = linear_backward(
                &c.act,
                &dx,
                &b.w_proj.data,
                &mut gb.w_proj.data,
                Some(&mut gb.b_proj.data),
                m,
                d,
            );
            let dfc: Vec<T> = dact
                .iter()
                .zip(&c.fc)
                .map(|(&g, &f)| g * gelu_grad(f))
                .collect();
            let dln2 = linear_backward(
                &c.ln2,
                &dfc,
                &b.w_fc.data,
                &mut gb.w_fc.data,
                Some(&mut gb.b_fc.data),
                d,
                m,
            );
            let mut dx_mid = dx.clone();
            let mut tmp = vec![T::zero(); d];
            for t in 0..n {
                let (mean, rstd) = c.ln2_stats[t];
                layer_norm_row_backward(
                    &c.x_mid[t * d..(t + 1) * d],
                    mean,
                    rstd,
                    &b.ln2_g.data,
                    &dln2[t * d..(t + 1) * d],
                    &mut gb.ln2_g.data,
                    &mut gb.ln2_b.data,
                    &mut tmp,
                );
                for (a, &g) in dx_mid[t * d..(t + 1) * d].iter_mut().zip(&tmp) {
                    *a += g;
                }
            }

            // Attention branch: x_mid = x_in + o(attn(qkv(ln1(x_in))))
            let datt = linear_backward(
                &c.att,
                &dx_mid,
                &b.w_o.data,
                &mut gb.w_o.data,
                Some(&mut gb.b_o.data),
                d,
                d,
            );
            let mut dqkv = vec![T::zero(); n * 3 * d];
            let mut dp = vec![T::zero(); n];
            for head in 0..h {
                let probs = &c.probs[head];
                let (qo, ko, vo) = (head * dh, d + head * dh, 2 * d + head * dh);
                for t in 0..n {
                    let dout = &datt[t * d + qo..t * d + qo + dh];
                    let prow = &probs[t * n..t * n + t + 1];
                    let mut dot_sum = T::zero();
                    for s in 0..=t {
                        let vrow = &c.qkv[s * 3 * d + vo..s * 3 * d + vo + dh];
                        let mut acc = T::zero();
                        for (&g, &vv) in dout.iter().zip(vrow) {
                            acc += g * vv;
                        }
                        dp[s] = acc;
                        dot_sum += acc * prow[s];
                        let dv = &mut dqkv[s * 3 * d + vo..s * 3 * d + vo + dh];
                        for (dvv, &g) in dv.iter_mut().zip(dout) {
                            *dvv += prow[s] * g;
                        }
                    }
                    for s in 0..=t {
                        let ds = prow[s] * (dp[s] - dot_sum) * inv_sqrt;
                        if ds == T::zero() {
                            continue;
                        }
                        for j in 0..dh {
                            let kv = c.qkv[s * 3 * d + ko + j];
                            let qv = c.qkv[t * 3 * d + qo + j];
                            dqkv[t * 3 * d + qo + j] += ds * kv;
                            dqkv[s * 3 * d + ko + j] += ds * qv;
                        }
                    }
                }
            }
            let dln1 = linear_backward(
                &c.ln1,
                &dqkv,
                &b.w_qkv.data,
                &mut gb.w_qkv.data,
                Some(&mut gb.b_qkv.data),
                d,
                3 * d,
            );
            for t in 0..n {
                let (mean, rstd) = c.ln1_stats[t];
                layer_norm_row_backward(
                    &c.x_in[t * d..(t + 1) * d],
                    mean,
                    rstd,
                    &b.ln1_g.data,
                    &dln1[t * d..(t + 1) * d],
                    &mut gb.ln1_g.data,
                    &mut gb.ln1_b.data,
                    &mut tmp,
                );
                for (a, &g) in dx_mid[t * d..(t + 1) * d].iter_mut().zip(&tmp) {
                    *a += g;
                }
            }
            dx = dx_mid;
        }

        for (t, &tok) in tokens.iter().enumerate() {
            let g = &dx[t * d..(t + 1) * d];
            let e = &mut grads.tok_emb.data[tok as usize * d..(tok as usize + 1) * d];
            for (a, &b) in e.iter_mut().zip(g) {
                *a += b;
            }
            let p = &mut grads.pos_emb.data[t * d..(t + 1) * d];
            for (a, &b) in p.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok(nll_sum)
    }

    pub fn new_cache(&self) -> KvCache<T> {
        KvCache {
            qkv: vec![Vec::new(); self.config.layers],
            len: 0,
        }
    }

    /// Feeds one token and returns the logits for the next position.
    pub fn step(&self, cache: &mut KvCache<T>, token: TokenId) -> Result<Vec<T>> {
        let cfg = &self.config;
        let t = cache.len;
        if t >= cfg.max_len {
            return Err(Error::Overlength {
                len: t + 1,
                max_len: cfg.max_len,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: token,
                size: cfg.vocab_size,
            });
        }
        let (d, m, h, dh) = (cfg.hidden, cfg.mlp(), cfg.heads, cfg.head_dim());
        let mut x = vec![T::zero(); d];
        self.embed_row(token, t, &mut x);
        let mut ln = vec![T::zero(); d];
        let mut att = vec![T::zero(); d];
        let mut probs = vec![T::zero(); t + 1];
        let mut x_mid = vec![T::zero(); d];
        let mut fc = vec![T::zero(); m];
        let mut act = vec![T::zero(); m];
        let mut tmp = vec![T::zero(); d];
        for (li, b) in self.blocks.iter().enumerate() {
            layer_norm_row(&x, &b.ln1_g.data, &b.ln1_b.data, &mut ln);
            let rows = &mut cache.qkv[li];
            let start = rows.len();
            rows.resize(start + 3 * d, T::zero());
            linear_row(&ln, &b.w_qkv.data, Some(&b.b_qkv.data), &mut rows[start..]);
            for head in 0..h {
                let q = rows[t * 3 * d + head * dh..t * 3 * d + head * dh + dh].to_vec();
                attend_row(
                    &q,
                    rows,
                    rows,
                    3 * d,
                    d + head * dh,
                    2 * d + head * dh,
                    t + 1,
                    dh,
                    &mut probs,
                    &mut att[head * dh..head * dh + dh],
                );
            }
            self.block_tail_row(b, &att, &mut x, &mut x_mid, &mut ln, &mut fc, &mut act, &mut tmp);
        }
        cache.len += 1;
        layer_norm_row(&x, &self.lnf_g.data, &self.lnf_b.data, &mut ln);
        let mut logits = vec![T::zero(); cfg.vocab_size];
        linear_row(&ln, &self.w_out.data, Some(&self.b_out.data), &mut logits);
        Ok(logits)
    }

    /// Runs a prefix through a fresh cache; returns the cache and the
    /// logits after the last prefix token.
    pub fn prime(&self, prefix: &[TokenId]) -> Result<(KvCache<T>, Vec<T>)> {
        if prefix.is_empty() {
            return Err(Error::Config("decoding needs a non-empty prefix".into()));
        }
        self.check_tokens(prefix)?;
        let mut cache = self.new_cache();
        let mut logits = Vec::new();
        for &tok in prefix {
            logits = self.step(&mut cache, tok)?;
        }
        Ok((cache, logits))
    }

    /// Length-normalized beam search. Blocked ids get `-inf` before selection.
    ///
    /// The greedy hypothesis is always part of the final pool, so a wider
    /// beam never scores below `beam = 1`.
    pub fn decode(&self, prefix: &[TokenId], opts: &DecodeOptions) -> Result<Decoded> {
        if opts.beam == 0 {
            return Err(Error::ZeroBeam);
        }
        let greedy = self.beam_search(prefix, opts, 1)?;
        if opts.beam == 1 {
            return Ok(greedy);
        }
        let wide = self.beam_search(prefix, opts, opts.beam)?;
        Ok(if wide.score >= greedy.score { wide } else { greedy })
    }

    fn masked_log_probs(&self, logits: &[T], blocked: &[TokenId]) -> Vec<f64> {
        let mut row = logits.to_vec();
        for &b in blocked {
            if let Some(x) = row.get_mut(b as usize) {
                *x = T::neg_infinity();
            }
        }
        log_softmax_f64(&row)
    }

    fn beam_search(&self, prefix: &[TokenId], opts: &DecodeOptions, width: usize) -> Result<Decoded> {
        struct Hyp<T> {
            tokens: Vec<TokenId>,
            log_prob: f64,
            cache: KvCache<T>,
            logits: Vec<T>,
        }
        let budget = opts.max_new.min(self.config.max_len.saturating_sub(prefix.len()));
        let (cache, logits) = self.prime(prefix)?;
        let mut alive = vec![Hyp {
            tokens: Vec::new(),
            log_prob: 0.0,
            cache,
            logits,
        }];
        let mut finished: Vec<Decoded> = Vec::new();
        let norm = |tokens: &[TokenId], lp: f64| lp / tokens.len().max(1) as f64;

        for step in 0..budget {
            // (parent, token, cumulative log prob)
            let mut cands: Vec<(usize, TokenId, f64)> = Vec::new();
            for (pi, hyp) in alive.iter().enumerate() {
                let lp = self.masked_log_probs(&hyp.logits, &opts.blocked);
                let mut order: Vec<usize> = (0..lp.len()).filter(|&j| lp[j].is_finite()).collect();
                order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
                for &j in order.iter().take(width) {
                    cands.push((pi, j as TokenId, hyp.log_prob + lp[j]));
                }
            }
            cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
            let mut next = Vec::with_capacity(width);
            for (pi, tok, lp) in cands {
                if next.len() >= width {
                    break;
                }
                let parent = &alive[pi];
                let mut tokens = parent.tokens.clone();
                tokens.push(tok);
                if tok == opts.stop_id || step + 1 == budget {
                    finished.push(Decoded {
                        score: norm(&tokens, lp),
                        tokens: tokens.clone(),
                        log_prob: lp,
                    });
                    if tok == opts.stop_id {
                        continue;
                    }
                }
                if step + 1 < budget {
                    let mut cache = parent.cache.clone();
                    let logits = self.step(&mut cache, tok)?;
                    next.push(Hyp {
                        tokens,
                        log_prob: lp,
                        cache,
                        logits,
                    });
                }
            }
            alive = next;
            if alive.is_empty() || finished.len() >= width {
                break;
            }
        }
        for hyp in alive {
            if !hyp.tokens.is_empty() && !finished.iter().any(|f| f.tokens == hyp.tokens) {
                finished.push(Decoded {
                    score: norm(&hyp.tokens, hyp.log_prob),
                    tokens: hyp.tokens,
                    log_prob: hyp.log_prob,
                });
            }
        }
        Ok(finished
            .into_iter()
            .max_by(|a, b| a.score.total_cmp(&b.score))
            .unwrap_or(Decoded {
                tokens: Vec::new(),
                log_prob: 0.0,
                score: 0.0,
            }))
    }

    /// Ancestral sampling of `n_new` tokens restricted to `allowed`.
    /// A temperature of zero (or below) takes the argmax.
    pub fn sample(
        &self,
        prefix: &[TokenId],
        n_new: usize,
        allowed: Range<TokenId>,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<TokenId>> {
        if allowed.is_empty() || allowed.end as usize > self.config.vocab_size {
            return Err(Error::Config(format!("invalid sampling range {allowed:?}")));
        }
        if prefix.len() + n_new > self.config.max_len + 1 {
            return Err(Error::Overlength {
                len: prefix.len() + n_new,
                max_len: self.config.max_len,
            });
        }
        let (mut cache, mut logits) = self.prime(prefix)?;
        let mut out = Vec::with_capacity(n_new);
        for i in 0..n_new {
            let row: Vec<f64> = logits[allowed.start as usize..allowed.end as usize]
                .iter()
                .map(|x| x.to_f64_lossy())
                .collect();
            let pick = if temperature <= 0.0 {
                argmax(&row)
            } else {
                let scaled: Vec<T> = row.iter().map(|&x| T::lit(x / temperature)).collect();
                let p: Vec<f64> = log_softmax_f64(&scaled).into_iter().map(f64::exp).collect();
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut choice = p.len() - 1;
                for (j, &pj) in p.iter().enumerate() {
                    acc += pj;
                    if u < acc {
                        choice = j;
                        break;
                    }
                }
                choice
            };
            let tok = allowed.start + pick as TokenId;
            out.push(tok);
            if i + 1 < n_new {
                logits = self.step(&mut cache, tok)?;
            }
        }
        Ok(out)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = j;
        }
    }
    best
}
