//! Stability property suite.
//!
//! Empirical checks here are falsification certificates: a violation is a
//! proof of failure, a pass is sampled evidence. Non-expansiveness and
//! averagedness are checked on random pairs, layer Jacobian spectra against
//! the exact symmetric eigenvalue oracle, and Lipschitz lower bounds by
//! gradient ascent on the difference-quotient.

use crate::eig::{sym_eigenvalues, SymMatrix};
use crate::error::{NxnError, Result};
use crate::kernels::{self, Activation};
use crate::linop::{spectral_norm_exact, DenseOp, LinearOperator};
use crate::rng;

/// Pair distributions for stability sampling.
#[derive(Clone, Copy, Debug)]
pub enum PairDistribution {
    Gaussian,
    /// Uniform on [-1, 1]^n.
    UniformBox,
    /// x gaussian, y = x + radius * random unit direction.
    DataPerturbation { radius: f64 },
}

/// Deterministic pair stream; identical pairs are resampled.
#[derive(Clone, Debug)]
pub struct PairSampler {
    pub seed: u64,
    pub distribution: PairDistribution,
    pub count: usize,
}

impl PairSampler {
    pub fn gaussian(seed: u64, count: usize) -> Self {
        Self { seed, distribution: PairDistribution::Gaussian, count }
    }

    fn pair(&self, rng: &mut rand_chacha::ChaCha8Rng, dim: usize) -> (Vec<f64>, Vec<f64>) {
        loop {
            let (x, y) = match self.distribution {
                PairDistribution::Gaussian => (
                    rng::gaussian_vec_new(rng, dim),
                    rng::gaussian_vec_new(rng, dim),
                ),
                PairDistribution::UniformBox => {
                    let mut x = vec![0.0; dim];
                    let mut y = vec![0.0; dim];
                    for v in x.iter_mut() {
                        *v = rng::uniform_in(rng, -1.0, 1.0);
                    }
                    for v in y.iter_mut() {
                        *v = rng::uniform_in(rng, -1.0, 1.0);
                    }
                    (x, y)
                }
                PairDistribution::DataPerturbation { radius } => {
                    let x = rng::gaussian_vec_new(rng, dim);
                    let mut d = rng::gaussian_vec_new(rng, dim);
                    let n = kernels::norm2(&d).max(1e-300);
                    for v in d.iter_mut() {
                        *v *= radius / n;
                    }
                    let y = kernels::axpy(&x, 1.0, &d);
                    (x, y)
                }
            };
            if kernels::norm2(&kernels::sub(&x, &y)) >= 1e-12 {
                return (x, y);
            }
        }
    }
}

/// Result of a sampled stability check.
#[derive(Clone, Debug)]
pub struct StabilityReport {
    pub max_ratio: f64,
    pub argmax_fingerprint: u64,
    pub violations: usize,
    pub samples: usize,
}

/// Max over sampled pairs of |map(x)-map(y)| / |x-y|; a ratio above
/// 1 + tol counts as a violation.
pub fn check_nonexpansive<F>(map: F, dim: usize, sampler: &PairSampler, tol: f64) -> Result<StabilityReport>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut rng = rng::stream(sampler.seed, "stability-pairs", &[]);
    let mut max_ratio = 0.0f64;
    let mut fp = 0u64;
    let mut violations = 0usize;
    for _ in 0..sampler.count {
        let (x, y) = sampler.pair(&mut rng, dim);
        let fx = map(&x)?;
        let fy = map(&y)?;
        let num = kernels::norm2(&kernels::sub(&fx, &fy));
        let den = kernels::norm2(&kernels::sub(&x, &y));
        let ratio = num / den;
        if ratio > max_ratio {
            max_ratio = ratio;
            let mut both = x.clone();
            both.extend_from_slice(&y);
            fp = rng::fingerprint(&both);
        }
        if ratio > 1.0 + tol {
            violations += 1;
        }
    }
    Ok(StabilityReport { max_ratio, argmax_fingerprint: fp, violations, samples: sampler.count })
}

/// Checks alpha-averagedness by unfolding T = (map - id)/alpha + id and
/// running the non-expansiveness check on T.
pub fn check_averaged<F>(map: F, alpha: f64, dim: usize, sampler: &PairSampler, tol: f64) -> Result<StabilityReport>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(NxnError::RejectedInput(format!("alpha {alpha} outside (0,1)")));
    }
    let unfolded = |x: &[f64]| -> Result<Vec<f64>> {
        let fx = map(x)?;
        Ok(x.iter()
            .zip(fx.iter())
            .map(|(xi, fi)| (1.0 - 1.0 / alpha) * xi + fi / alpha)
            .collect())
    };
    check_nonexpansive(unfolded, dim, sampler, tol)
}

/// Eigenvalue interval of one Euler layer Jacobian at x.
#[derive(Clone, Debug)]
pub struct SpectrumReport {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// 1 - h sigma^2 L with the exact dense norm.
    pub certified_lower: f64,
    pub nudged: bool,
}

/// Spectrum of I - h A^T diag(sigma'(Ax+b)) A for a dense layer, via the
/// Jacobi oracle. Inputs on activation kinks (|component| < 1e-9) are
/// nudged off and flagged. Errors if the spectrum escapes
/// [1 - h |A|^2 L - 1e-10, 1 + 1e-10].
pub fn jacobian_spectrum_layer(
    a: &DenseOp,
    bias: &[f64],
    act: Activation,
    h: f64,
    x: &[f64],
) -> Result<SpectrumReport> {
    if x.len() != a.cols {
        return Err(NxnError::dim(a.cols, x.len(), "jacobian point"));
    }
    let mut x = x.to_vec();
    let mut nudged = false;
    for _ in 0..8 {
        let t = a.apply(&x)?;
        let pre = kernels::add_bias(&t, bias, a.rows, 1);
        if pre.iter().all(|v| v.abs() >= 1e-9) {
            break;
        }
        nudged = true;
        for v in x.iter_mut() {
            *v += 1e-6;
        }
    }
    let t = a.apply(&x)?;
    let pre = kernels::add_bias(&t, bias, a.rows, 1);
    let d: Vec<f64> = pre.iter().map(|&v| act.deriv(v)).collect();
    let n = a.cols;
    let mut m = SymMatrix::zeros(n);
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for k in 0..a.rows {
                acc += a.get(k, i) * d[k] * a.get(k, j);
            }
            let v = if i == j { 1.0 - h * acc } else { -h * acc };
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    let eigs = sym_eigenvalues(&m)?;
    let lambda_min = eigs[0];
    let lambda_max = *eigs.last().unwrap();
    let sigma = spectral_norm_exact(a)?;
    let certified_lower = 1.0 - h * sigma * sigma * act.lipschitz();
    let eps = 1e-10;
    if lambda_min < certified_lower - eps || lambda_max > 1.0 + eps {
        return Err(NxnError::RejectedInput(format!(
            "layer spectrum [{lambda_min}, {lambda_max}] escapes [{}, 1]",
            certified_lower
        )));
    }
    Ok(SpectrumReport { lambda_min, lambda_max, certified_lower, nudged })
}

/// Outcome of repeated application x_{k+1} = map(x_k).
#[derive(Clone, Debug)]
pub struct FixedPointSummary {
    pub iters: usize,
    pub final_residual: f64,
    pub converged: bool,
    pub diverged_at: Option<usize>,
}

/// Iterates until |x_{k+1} - x_k| < tol or max_iter; non-finite iterates
/// yield a divergence verdict instead of an error.
pub fn fixed_point_iterate<F>(map: F, x0: &[f64], max_iter: usize, tol: f64) -> Result<FixedPointSummary>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut x = x0.to_vec();
    let mut residual = f64::INFINITY;
    for k in 1..=max_iter {
        let next = match map(&x) {
            Ok(v) => v,
            Err(NxnError::Divergence { .. }) => {
                return Ok(FixedPointSummary {
                    iters: k,
                    final_residual: residual,
                    converged: false,
                    diverged_at: Some(k),
                })
            }
            Err(e) => return Err(e),
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Ok(FixedPointSummary {
                iters: k,
                final_residual: residual,
                converged: false,
                diverged_at: Some(k),
            });
        }
        residual = kernels::norm2(&kernels::sub(&next, &x));
        x = next;
        if residual < tol {
            return Ok(FixedPointSummary {
                iters: k,
                final_residual: residual,
                converged: true,
                diverged_at: None,
            });
        }
    }
    Ok(FixedPointSummary {
        iters: max_iter,
        final_residual: residual,
        converged: false,
        diverged_at: None,
    })
}

/// A map with vector-Jacobian products, for ascent-based lower bounds.
pub trait DiffMap {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// d/dx <cot, map(x)>.
    fn vjp(&self, x: &[f64], cot: &[f64]) -> Result<Vec<f64>>;
}

impl DiffMap for crate::arch::SeqNet {
    fn dim(&self) -> usize {
        self.input.len()
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x)
    }

    fn vjp(&self, x: &[f64], cot: &[f64]) -> Result<Vec<f64>> {
        let mut tape = crate::grad::Tape::new(&self.params);
        let xi = tape.input(x.to_vec());
        let out = self.record(&mut tape, xi)?;
        let grads = tape.backward(out, cot)?;
        Ok(grads.wrt(xi).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.len()]))
    }
}

/// A dense linear map as a DiffMap, mostly for oracles.
pub struct LinearMap(pub DenseOp);

impl DiffMap for LinearMap {
    fn dim(&self) -> usize {
        self.0.cols
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.0.apply(x)
    }

    fn vjp(&self, _x: &[f64], cot: &[f64]) -> Result<Vec<f64>> {
        self.0.apply_adjoint(cot)
    }
}

/// Empirical Lipschitz lower bound: ascent on |map(x)-map(y)|/|x-y| with y
/// anchored at x0 and the separation renormalized each step. The returned
/// ratio never certifies anything above it; for constrained networks it must
/// stay below every certified upper bound.
pub fn lipschitz_lower_bound(map: &dyn DiffMap, x0: &[f64], ascent_steps: usize, step_size: f64) -> Result<f64> {
    let dim = map.dim();
    if x0.len() != dim {
        return Err(NxnError::dim(dim, x0.len(), "ascent start"));
    }
    let eps = 1e-3;
    let mut rng = rng::stream(rng::fingerprint(x0), "lipschitz-ascent", &[]);
    let mut u = rng::gaussian_vec_new(&mut rng, dim);
    let un = kernels::norm2(&u).max(1e-300);
    for v in u.iter_mut() {
        *v *= eps / un;
    }
    let fy = map.eval(x0)?;
    let mut best = 0.0f64;
    for _ in 0..ascent_steps {
        let x = kernels::axpy(x0, 1.0, &u);
        let fx = map.eval(&x)?;
        let df = kernels::sub(&fx, &fy);
        let num = kernels::norm2(&df);
        best = best.max(num / eps);
        if num < 1e-300 {
            // Flat spot: restart in a fresh direction.
            u = rng::gaussian_vec_new(&mut rng, dim);
            let n = kernels::norm2(&u).max(1e-300);
            for v in u.iter_mut() {
                *v *= eps / n;
            }
            continue;
        }
        let g = map.vjp(&x, &df)?;
        let mut step = kernels::axpy(&u, step_size / num, &g);
        let n = kernels::norm2(&step).max(1e-300);
        for v in step.iter_mut() {
            *v *= eps / n;
        }
        u = step;
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_map_max_ratio_one() {
        let sampler = PairSampler::gaussian(1, 500);
        let rep = check_nonexpansive(|x| Ok(x.to_vec()), 8, &sampler, 1e-9).unwrap();
        assert!((rep.max_ratio - 1.0).abs() < 1e-12);
        assert_eq!(rep.violations, 0);
        assert_eq!(rep.samples, 500);
    }

    #[test]
    fn doubling_map_flagged() {
        let sampler = PairSampler::gaussian(2, 200);
        let rep = check_nonexpansive(|x| Ok(kernels::scale(2.0, x)), 4, &sampler, 1e-9).unwrap();
        assert!(rep.violations > 0);
        assert!((rep.max_ratio - 2.0).abs() < 1e-12);
    }

    #[test]
    fn averaged_identity_passes_and_negation_fails() {
        let sampler = PairSampler::gaussian(3, 200);
        let ok = check_averaged(|x| Ok(x.to_vec()), 0.5, 4, &sampler, 1e-9).unwrap();
        assert_eq!(ok.violations, 0);
        // -id unfolds to T(x) = -3x at alpha = 1/2.
        let bad = check_averaged(|x| Ok(kernels::scale(-1.0, x)), 0.5, 4, &sampler, 1e-9).unwrap();
        assert!(bad.violations > 0);
        assert!((bad.max_ratio - 3.0).abs() < 1e-12, "{}", bad.max_ratio);
    }

    #[test]
    fn averaged_pass_implies_nonexpansive_pass() {
        // Any 0.4-averaged map: 0.6 id + 0.4 (rotation-ish contraction).
        let sampler = PairSampler::gaussian(4, 300);
        let map = |x: &[f64]| -> Result<Vec<f64>> {
            Ok(x.iter().map(|v| 0.6 * v + 0.4 * (0.5 * v)).collect())
        };
        let avg = check_averaged(map, 0.4, 5, &sampler, 1e-9).unwrap();
        let non = check_nonexpansive(map, 5, &sampler, 1e-9).unwrap();
        assert_eq!(avg.violations, 0);
        assert_eq!(non.violations, 0);
        assert!(non.max_ratio <= 1.0 + 1e-9);
    }

    #[test]
    fn jacobian_spectrum_scalar_cases() {
        let a = DenseOp::new(1, 1, vec![1.0]).unwrap();
        let r = jacobian_spectrum_layer(&a, &[0.0], Activation::LeakyRelu, 1.0, &[1.0]).unwrap();
        assert!(r.lambda_min.abs() < 1e-12 && r.lambda_max.abs() < 1e-12);
        let r = jacobian_spectrum_layer(&a, &[0.0], Activation::LeakyRelu, 1.0, &[-1.0]).unwrap();
        assert!((r.lambda_min - 0.99).abs() < 1e-12);
        let r = jacobian_spectrum_layer(&a, &[0.0], Activation::LeakyRelu, 0.0, &[2.0]).unwrap();
        assert!((r.lambda_min - 1.0).abs() < 1e-15 && (r.lambda_max - 1.0).abs() < 1e-15);
    }

    #[test]
    fn jacobian_kink_inputs_get_nudged() {
        let a = DenseOp::new(1, 1, vec![1.0]).unwrap();
        let r = jacobian_spectrum_layer(&a, &[0.0], Activation::LeakyRelu, 0.5, &[0.0]).unwrap();
        assert!(r.nudged);
    }

    #[test]
    fn fixed_point_geometric_decay() {
        let half = |x: &[f64]| -> Result<Vec<f64>> { Ok(kernels::scale(0.5, x)) };
        let s = fixed_point_iterate(half, &[1.0], 1000, 1e-8).unwrap();
        assert!(s.converged);
        assert_eq!(s.iters, 27, "residual 2^-k first dips below 1e-8 at k=27");
        let id = |x: &[f64]| -> Result<Vec<f64>> { Ok(x.to_vec()) };
        let s = fixed_point_iterate(id, &[3.0], 10, 1e-8).unwrap();
        assert!(s.converged);
        assert_eq!(s.iters, 1);
        assert_eq!(s.final_residual, 0.0);
    }

    #[test]
    fn fixed_point_divergence_verdict() {
        let blow = |x: &[f64]| -> Result<Vec<f64>> { Ok(kernels::scale(1e200, x)) };
        let s = fixed_point_iterate(blow, &[1.0], 10, 1e-8).unwrap();
        assert!(!s.converged);
        assert!(s.diverged_at.is_some());
    }

    #[test]
    fn lipschitz_lower_bound_recovers_matrix_norm() {
        let m = LinearMap(DenseOp::new(2, 2, vec![2.0, 0.0, 0.0, 1.0]).unwrap());
        let got = lipschitz_lower_bound(&m, &[0.1, 0.3], 300, 0.5).unwrap();
        assert!(got >= 2.0 - 1e-6, "{got}");
        assert!(got <= 2.0 + 1e-9);
        let id = LinearMap(DenseOp::identity(3));
        let got = lipschitz_lower_bound(&id, &[0.0, 0.0, 0.0], 50, 0.5).unwrap();
        assert!((got - 1.0).abs() < 1e-9);
    }
}
