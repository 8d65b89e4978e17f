use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Scalar};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for one parameter set, stored with the same layout.
#[derive(Clone, Debug)]
pub struct Adam<P> {
    pub m: P,
    pub v: P,
    pub step: u64,
}

impl<P> Adam<P> {
    pub fn new<T: Scalar>(params: &P) -> Self
    where
        P: ParamSet<T>,
    {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// Bias-corrected Adam update. Rejects non-finite gradients before
    /// touching any state.
    pub fn update<T: Scalar>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()>
    where
        P: ParamSet<T>,
    {
        for (name, g) in grads.named() {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::lit(ADAM_BETA1);
        let b2 = T::lit(ADAM_BETA2);
        let one = T::one();
        let c1 = T::lit(1.0 - ADAM_BETA1.powi(t));
        let c2 = T::lit(1.0 - ADAM_BETA2.powi(t));
        let eps = T::lit(ADAM_EPS);
        let lr = T::lit(lr);
        let params = params.named_mut();
        let grads = grads.named();
        let ms = self.m.named_mut();
        let vs = self.v.named_mut();
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(ms).zip(vs) {
            let (p, g, m, v) = (&mut p.1.data, &g.1.data, &mut m.1.data, &mut v.1.data);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar, P: ParamSet<T>>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads
        .named()
        .iter()
        .flat_map(|(_, t)| t.data.iter())
        .map(|x| {
            let x = x.to_f64_lossy();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        grads.scale(T::lit(max_norm / norm));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[derive(Clone, Debug, PartialEq)]
    struct Pair {
        a: Tensor<f64>,
    }

    impl ParamSet<f64> for Pair {
        fn named(&self) -> Vec<(String, &Tensor<f64>)> {
            vec![("a".into(), &self.a)]
        }
        fn named_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
            vec![("a".into(), &mut self.a)]
        }
    }

    fn pair(values: &[f64]) -> Pair {
        Pair {
            a: Tensor {
                shape: vec![values.len()],
                data: values.to_vec(),
            },
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = pair(&[1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut opt = Adam::new(&p);
        opt.update(&mut p, &pair(&[0.0, 0.0, 0.0]), 1e-3).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // After one step m_hat = g and v_hat = g^2, so the move is lr * g / (|g| + eps).
        let g = [0.5, -2.0, 1e-3];
        let lr = 1e-5;
        let mut p = pair(&[0.0, 0.0, 0.0]);
        let mut opt = Adam::new(&p);
        opt.update(&mut p, &pair(&g), lr).unwrap();
        for (i, &gi) in g.iter().enumerate() {
            let expected = -lr * gi / (gi.abs() + ADAM_EPS);
            assert!((p.a.data[i] - expected).abs() < 1e-15, "{} vs {expected}", p.a.data[i]);
        }
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut p = pair(&[1.0]);
        let mut opt = Adam::new(&p);
        assert!(opt.update(&mut p, &pair(&[f64::NAN]), 1e-3).is_err());
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = pair(&[3.0, 4.0]);
        let before = clip_grad_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g.a.data[0] - 0.6).abs() < 1e-12);
    }
}
