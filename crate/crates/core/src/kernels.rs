//! Shared array primitives.
//!
//! Both the plain executor and the gradient tape compute forward values
//! through these functions, so a recorded forward pass reproduces the
//! untaped one bit for bit.

use serde::{Deserialize, Serialize};

/// Elementwise activation. All variants are non-decreasing and 1-Lipschitz.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// max(x, 0.01 x)
    LeakyRelu,
    Relu,
    Identity,
}

impl Activation {
    pub fn lipschitz(&self) -> f64 {
        1.0
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => x.max(0.01 * x),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Subgradient; kinks take the positive-branch slope 1.
    #[inline]
    pub fn deriv(&self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.01
                }
            }
            Activation::Relu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    /// Antiderivative with value 0 at 0; the convex potential whose gradient
    /// the activation is. Used by finite-difference oracles.
    pub fn antideriv(&self, t: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if t >= 0.0 {
                    0.5 * t * t
                } else {
                    0.005 * t * t
                }
            }
            Activation::Relu => {
                if t >= 0.0 {
                    0.5 * t * t
                } else {
                    0.0
                }
            }
            Activation::Identity => 0.5 * t * t,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::LeakyRelu => "leaky_relu",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

pub fn act_eval(a: Activation, x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| a.eval(v)).collect()
}

/// x + bias, with the bias broadcast over `pixels` positions per channel.
/// Dense vectors use pixels = 1 (one bias per coordinate).
pub fn add_bias(x: &[f64], bias: &[f64], channels: usize, pixels: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), channels * pixels);
    debug_assert_eq!(bias.len(), channels);
    let mut out = vec![0.0; x.len()];
    for c in 0..channels {
        let b = bias[c];
        let base = c * pixels;
        for p in 0..pixels {
            out[base + p] = x[base + p] + b;
        }
    }
    out
}

/// y + c * x.
pub fn axpy(y: &[f64], c: f64, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(y.len(), x.len());
    y.iter().zip(x.iter()).map(|(a, b)| a + c * b).collect()
}

pub fn scale(c: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| c * v).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
}

pub fn inner(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn sum(x: &[f64]) -> f64 {
    x.iter().sum()
}

pub fn norm2(x: &[f64]) -> f64 {
    inner(x, x).sqrt()
}

pub fn max_const(c: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(c)).collect()
}

/// Mean pooling over disjoint 2x2 blocks, stride 2; operator norm 1/2.
pub fn avg_pool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    debug_assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even dimensions");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let ib = ch * h * w;
        let ob = ch * oh * ow;
        for y in 0..oh {
            for x_ in 0..ow {
                let i = ib + 2 * y * w + 2 * x_;
                out[ob + y * ow + x_] = 0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_back(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let ib = ch * h * w;
        let ob = ch * oh * ow;
        for y in 0..oh {
            for x_ in 0..ow {
                let v = 0.25 * g[ob + y * ow + x_];
                let i = ib + 2 * y * w + 2 * x_;
                out[i] += v;
                out[i + 1] += v;
                out[i + w] += v;
                out[i + w + 1] += v;
            }
        }
    }
    out
}

/// Mean over all pixels per channel; operator norm 1/sqrt(h*w).
pub fn global_pool(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let px = h * w;
    let mut out = vec![0.0; c];
    for ch in 0..c {
        let s: f64 = x[ch * px..(ch + 1) * px].iter().sum();
        out[ch] = s / px as f64;
    }
    out
}

pub fn global_pool_back(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let px = h * w;
    let mut out = vec![0.0; c * px];
    for ch in 0..c {
        let v = g[ch] / px as f64;
        for p in 0..px {
            out[ch * px + p] = v;
        }
    }
    out
}

/// Zero-pads channels `from` -> `to` (to >= from), `px` positions each.
pub fn chan_pad(x: &[f64], from: usize, to: usize, px: usize) -> Vec<f64> {
    debug_assert!(to >= from);
    debug_assert_eq!(x.len(), from * px);
    let mut out = vec![0.0; to * px];
    out[..from * px].copy_from_slice(x);
    out
}

/// Keeps the first `to` channels of `from` (to <= from).
pub fn chan_drop(x: &[f64], from: usize, to: usize, px: usize) -> Vec<f64> {
    debug_assert!(to <= from);
    debug_assert_eq!(x.len(), from * px);
    x[..to * px].to_vec()
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Numerically stable -log softmax(scores)[label].
pub fn softmax_ce(scores: &[f64], label: usize) -> f64 {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|&s| (s - m).exp()).sum();
    m + z.ln() - scores[label]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_branches() {
        let a = Activation::LeakyRelu;
        assert_eq!(a.eval(2.0), 2.0);
        assert_eq!(a.eval(-2.0), -0.02);
        assert_eq!(a.deriv(2.0), 1.0);
        assert_eq!(a.deriv(-2.0), 0.01);
        assert_eq!(a.deriv(0.0), 1.0);
    }

    #[test]
    fn pool_norm_is_half_on_constant_blocks() {
        // A constant image maps to the same constant; norm ratio 1/2 is
        // attained on block-constant inputs since ||out|| = ||in||/2.
        let x = vec![1.0; 16];
        let y = avg_pool2(&x, 1, 4, 4);
        assert_eq!(y, vec![1.0; 4]);
        assert!((norm2(&y) / norm2(&x) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pool_adjoint_identity() {
        let mut rng = crate::rng::stream(2, "pool-adj", &[]);
        let x = crate::rng::gaussian_vec_new(&mut rng, 2 * 6 * 4);
        let g = crate::rng::gaussian_vec_new(&mut rng, 2 * 3 * 2);
        let px = avg_pool2(&x, 2, 6, 4);
        let bg = avg_pool2_back(&g, 2, 6, 4);
        assert!((inner(&px, &g) - inner(&x, &bg)).abs() < 1e-12);
        let gp = global_pool(&x, 2, 6, 4);
        let gg = vec![0.3, -0.7];
        let gb = global_pool_back(&gg, 2, 6, 4);
        assert!((inner(&gp, &gg) - inner(&x, &gb)).abs() < 1e-12);
    }

    #[test]
    fn pad_then_drop_is_identity() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let p = chan_pad(&x, 2, 5, 2);
        assert_eq!(p.len(), 10);
        assert_eq!(chan_drop(&p, 5, 2, 2), x);
    }

    #[test]
    fn softmax_ce_uniform_is_log_c() {
        let s = vec![0.5; 10];
        assert!((softmax_ce(&s, 3) - (10.0f64).ln()).abs() < 1e-12);
    }
}
