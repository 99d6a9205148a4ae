//! Gradient-flow fields and constrained ODE blocks.
//!
//! A block integrates the field f(x) = -A^T sigma(A x + b) for time h with
//! an explicit RK method. The field is the negative gradient of the convex
//! potential x -> phi(Ax + b), so it satisfies the monotonicity condition
//! with nu = 1/(|A|^2 L); splitting the interval into
//! N = ceil(h |A|^2 L / beta) substeps keeps every substep inside the
//! contractive regime for any step-bound target beta <= 2r.

use crate::error::{NxnError, Result};
use crate::kernels::{self, Activation};
use crate::linop::{power_iterate, LinearOperator, OpKind, SpectralState};
use crate::rng;
use crate::tableau::{contractivity_radius, RKTableau, Radius};

/// Shape of the signal a network operates on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    Dense { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl Space {
    pub fn len(&self) -> usize {
        match self {
            Space::Dense { dim } => *dim,
            Space::Image { channels, height, width } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Broadcast positions per channel for a bias on this space.
    pub fn pixels(&self) -> usize {
        match self {
            Space::Dense { .. } => 1,
            Space::Image { height, width, .. } => height * width,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Space::Dense { dim } => *dim,
            Space::Image { channels, .. } => *channels,
        }
    }
}

/// A learnable operator with its warm-started power-method state.
#[derive(Clone, Debug)]
pub struct OpParam {
    pub op: OpKind,
    pub spectral: SpectralState,
}

/// One named parameter tensor.
#[derive(Clone, Debug)]
pub enum ParamTensor {
    Op(OpParam),
    Vec(Vec<f64>),
}

pub type ParamId = usize;

/// Flat, named parameter store shared by a network and its tapes.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    pub tensors: Vec<(String, ParamTensor)>,
}

impl ParamSet {
    pub fn add_op(&mut self, name: impl Into<String>, op: OpKind, spectral: SpectralState) -> ParamId {
        self.tensors.push((name.into(), ParamTensor::Op(OpParam { op, spectral })));
        self.tensors.len() - 1
    }

    pub fn add_vec(&mut self, name: impl Into<String>, v: Vec<f64>) -> ParamId {
        self.tensors.push((name.into(), ParamTensor::Vec(v)));
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn op(&self, id: ParamId) -> &OpKind {
        match &self.tensors[id].1 {
            ParamTensor::Op(p) => &p.op,
            ParamTensor::Vec(_) => panic!("parameter {id} is not an operator"),
        }
    }

    pub fn op_param(&self, id: ParamId) -> &OpParam {
        match &self.tensors[id].1 {
            ParamTensor::Op(p) => p,
            ParamTensor::Vec(_) => panic!("parameter {id} is not an operator"),
        }
    }

    pub fn op_param_mut(&mut self, id: ParamId) -> &mut OpParam {
        match &mut self.tensors[id].1 {
            ParamTensor::Op(p) => p,
            ParamTensor::Vec(_) => panic!("parameter {id} is not an operator"),
        }
    }

    pub fn vec(&self, id: ParamId) -> &[f64] {
        match &self.tensors[id].1 {
            ParamTensor::Vec(v) => v,
            ParamTensor::Op(_) => panic!("parameter {id} is not a vector"),
        }
    }

    pub fn sigma(&self, id: ParamId) -> f64 {
        self.op_param(id).spectral.sigma
    }

    /// Raw learnable entries of a tensor.
    pub fn data(&self, id: ParamId) -> &[f64] {
        match &self.tensors[id].1 {
            ParamTensor::Op(p) => p.op.entries(),
            ParamTensor::Vec(v) => v,
        }
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        match &mut self.tensors[id].1 {
            ParamTensor::Op(p) => p.op.entries_mut(),
            ParamTensor::Vec(v) => v,
        }
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.tensors[id].0
    }

    /// One warm-started power iteration on every operator tensor.
    pub fn power_refresh(&mut self, iters: usize) -> Result<()> {
        for (_, t) in self.tensors.iter_mut() {
            if let ParamTensor::Op(p) = t {
                p.spectral = power_iterate(&p.op, &p.spectral, iters)?;
            }
        }
        Ok(())
    }

    /// Total parameter vector norm (operators and biases alike).
    pub fn theta_norm(&self) -> f64 {
        let mut s = 0.0;
        for id in 0..self.len() {
            for &v in self.data(id) {
                s += v * v;
            }
        }
        s.sqrt()
    }
}

/// Borrowed view of a gradient-flow field f(x) = -A^T sigma(Ax + b).
#[derive(Clone, Copy)]
pub struct FieldRef<'a> {
    pub op: &'a OpKind,
    pub bias: &'a [f64],
    pub act: Activation,
    /// Current spectral-norm estimate of the operator.
    pub sigma: f64,
}

/// Bias broadcast geometry for an operator's codomain.
pub fn bias_geometry(op: &OpKind) -> (usize, usize) {
    match op {
        OpKind::Dense(d) => (d.rows, 1),
        OpKind::Conv(c) => (c.out_channels, c.height * c.width),
    }
}

/// Evaluates -A^T sigma(Ax + b).
pub fn field_eval(f: &FieldRef, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != f.op.in_dim() {
        return Err(NxnError::dim(f.op.in_dim(), x.len(), "field input"));
    }
    let (channels, pixels) = bias_geometry(f.op);
    if f.bias.len() != channels {
        return Err(NxnError::dim(channels, f.bias.len(), "field bias"));
    }
    let t = f.op.apply(x)?;
    let t = kernels::add_bias(&t, f.bias, channels, pixels);
    let s = kernels::act_eval(f.act, &t);
    let u = f.op.apply_adjoint(&s)?;
    Ok(kernels::scale(-1.0, &u))
}

/// nu = 1/(sigma^2 L); infinite for the zero field.
pub fn monotonicity_nu(f: &FieldRef) -> f64 {
    let l = f.act.lipschitz();
    if f.sigma == 0.0 {
        return f64::INFINITY;
    }
    1.0 / (f.sigma * f.sigma * l)
}

/// Substeps needed so (h/N) sigma^2 L <= budget.
pub fn substep_count(h: f64, sigma: f64, lipschitz: f64, budget: f64) -> usize {
    let raw = h * sigma * sigma * lipschitz / budget;
    if !raw.is_finite() {
        return 1;
    }
    (raw.ceil() as usize).max(1)
}

/// A standalone constrained block: one RK integration step of the
/// gradient-flow field, split into enough equal substeps to certify
/// non-expansiveness. Networks store the same data in a shared `ParamSet`;
/// this owning form backs unit-level checks and the verification suite.
#[derive(Clone, Debug)]
pub struct OdeBlock {
    pub op: OpKind,
    pub bias: Vec<f64>,
    pub act: Activation,
    pub spectral: SpectralState,
    pub h: f64,
    pub tableau: RKTableau,
    pub radius: f64,
    /// Target for (h/N) sigma^2 L, in (0, 2r]. Defaults to 2r, the widest
    /// bound the contractivity theorem permits.
    pub budget: f64,
}

impl OdeBlock {
    pub fn new(op: OpKind, bias: Vec<f64>, act: Activation, h: f64, tableau: RKTableau) -> Result<Self> {
        if h <= 0.0 {
            return Err(NxnError::RejectedConfig("block step size must be positive".into()));
        }
        let (channels, _) = bias_geometry(&op);
        if bias.len() != channels {
            return Err(NxnError::dim(channels, bias.len(), "block bias"));
        }
        if op.in_dim() != op.out_dim() && matches!(op, OpKind::Dense(_)) {
            // Dense A in R^{n x k} is fine: the block state lives in the
            // domain; nothing to check here beyond bias geometry.
        }
        let radius = match contractivity_radius(&tableau)? {
            Radius::Finite(r) if r > 0.0 => r,
            Radius::Finite(r) => {
                return Err(NxnError::UnsupportedTableau(format!(
                    "nonpositive contractivity radius {r}"
                )))
            }
            Radius::Infinite => {
                return Err(NxnError::UnsupportedTableau(
                    "infinite-radius tableaus are not usable here".into(),
                ))
            }
        };
        let mut srng = rng::stream(0x0b10c, "block-spectral", &[op.in_dim() as u64, op.out_dim() as u64]);
        let spectral = power_iterate(&op, &SpectralState::random(&op, &mut srng), 1000)?;
        Ok(Self {
            op,
            bias,
            act,
            spectral,
            h,
            tableau,
            radius,
            budget: 2.0 * radius,
        })
    }

    pub fn with_budget(mut self, budget: f64) -> Result<Self> {
        if !(budget > 0.0 && budget <= 2.0 * self.radius) {
            return Err(NxnError::RejectedConfig(format!(
                "budget {budget} outside (0, {}]",
                2.0 * self.radius
            )));
        }
        self.budget = budget;
        Ok(self)
    }

    pub fn field(&self) -> FieldRef<'_> {
        FieldRef {
            op: &self.op,
            bias: &self.bias,
            act: self.act,
            sigma: self.spectral.sigma,
        }
    }

    pub fn substep_count(&self) -> usize {
        substep_count(self.h, self.spectral.sigma, self.act.lipschitz(), self.budget)
    }

    /// Replaces the operator and recertifies the spectral estimate.
    pub fn set_op(&mut self, op: OpKind) -> Result<()> {
        let mut srng = rng::stream(0x0b10c, "block-spectral", &[op.in_dim() as u64, op.out_dim() as u64]);
        self.spectral = power_iterate(&op, &SpectralState::random(&op, &mut srng), 1000)?;
        self.op = op;
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_fixed_substeps(x, self.substep_count())
    }

    /// Forward pass with an explicit substep count; `n = 1` disables the
    /// adaptive splitting (used to witness constraint violations).
    pub fn forward_fixed_substeps(&self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        let n = n.max(1);
        let h_sub = self.h / n as f64;
        let field = self.field();
        let mut z = x.to_vec();
        for _ in 0..n {
            z = crate::tableau::rk_step(&self.tableau, h_sub, &z, |y| field_eval(&field, y))?;
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(NxnError::Divergence {
                context: "ode block output".into(),
            });
        }
        Ok(z)
    }
}

/// Per-layer averagedness target so an m-layer composition stays
/// alpha-averaged: alpha / (m (1 - alpha) + alpha).
pub fn per_layer_alpha(target_alpha: f64, m: usize) -> Result<f64> {
    if !(target_alpha > 0.0 && target_alpha < 1.0) {
        return Err(NxnError::RejectedInput(format!(
            "target alpha {target_alpha} outside (0,1)"
        )));
    }
    if m == 0 {
        return Err(NxnError::RejectedInput("need at least one layer".into()));
    }
    let m = m as f64;
    Ok(target_alpha / (m * (1.0 - target_alpha) + target_alpha))
}

/// Averagedness constant of a composition: m / (m - 1 + min(1/alpha_i)).
pub fn compose_alpha(alphas: &[f64]) -> Result<f64> {
    if alphas.is_empty() {
        return Err(NxnError::RejectedInput("empty composition".into()));
    }
    let mut min_inv = f64::INFINITY;
    for &a in alphas {
        if !(a > 0.0 && a < 1.0) {
            return Err(NxnError::RejectedInput(format!("alpha {a} outside (0,1)")));
        }
        min_inv = min_inv.min(1.0 / a);
    }
    let m = alphas.len() as f64;
    Ok(m / (m - 1.0 + min_inv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linop::DenseOp;
    use crate::tableau::{builtin, TableauName};

    fn scalar_block(a: f64, h: f64) -> OdeBlock {
        let op = OpKind::Dense(DenseOp::new(1, 1, vec![a]).unwrap());
        OdeBlock::new(op, vec![0.0], Activation::LeakyRelu, h, builtin(TableauName::Euler)).unwrap()
    }

    #[test]
    fn field_scalar_branches() {
        let op = OpKind::Dense(DenseOp::new(1, 1, vec![1.0]).unwrap());
        let f = FieldRef { op: &op, bias: &[0.0], act: Activation::LeakyRelu, sigma: 1.0 };
        assert_eq!(field_eval(&f, &[1.0]).unwrap(), vec![-1.0]);
        assert_eq!(field_eval(&f, &[-1.0]).unwrap(), vec![0.01]);
    }

    #[test]
    fn field_matches_finite_difference_gradient_of_potential() {
        // f = -grad of x -> sum_i psi((Ax+b)_i) with psi the activation
        // antiderivative; central differences at step 1e-6.
        let mut rng = rng::stream(31, "field-fd", &[]);
        let a = DenseOp::random(4, 4, &mut rng);
        let bias = rng::gaussian_vec_new(&mut rng, 4);
        let x = rng::gaussian_vec_new(&mut rng, 4);
        let act = Activation::LeakyRelu;
        let op = OpKind::Dense(a.clone());
        let fref = FieldRef { op: &op, bias: &bias, act, sigma: 0.0 };
        let f = field_eval(&fref, &x).unwrap();
        let potential = |x: &[f64]| -> f64 {
            let t = a.apply(x).unwrap();
            t.iter().zip(bias.iter()).map(|(v, b)| act.antideriv(v + b)).sum()
        };
        let step = 1e-6;
        for i in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += step;
            xm[i] -= step;
            let fd = -(potential(&xp) - potential(&xm)) / (2.0 * step);
            let rel = (f[i] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-6, "coord {i}: {} vs fd {fd}", f[i]);
        }
    }

    #[test]
    fn monotonicity_nu_values() {
        let op = OpKind::Dense(DenseOp::identity(2));
        let f = FieldRef { op: &op, bias: &[0.0, 0.0], act: Activation::LeakyRelu, sigma: 1.0 };
        assert_eq!(monotonicity_nu(&f), 1.0);
        let f2 = FieldRef { sigma: 2.0, ..f };
        assert_eq!(monotonicity_nu(&f2), 0.25);
        let f0 = FieldRef { sigma: 0.0, ..f };
        assert!(monotonicity_nu(&f0).is_infinite());
    }

    #[test]
    fn monotonicity_inequality_sampled() {
        // <f(x)-f(y), x-y> <= -nu |f(x)-f(y)|^2 with nu from the exact
        // dense spectral norm.
        let mut rng = rng::stream(33, "mono", &[]);
        let a = DenseOp::random(6, 6, &mut rng);
        let sigma = crate::linop::spectral_norm_exact(&a).unwrap();
        let bias = rng::gaussian_vec_new(&mut rng, 6);
        let op = OpKind::Dense(a);
        let f = FieldRef { op: &op, bias: &bias, act: Activation::LeakyRelu, sigma };
        let nu = monotonicity_nu(&f);
        for _ in 0..200 {
            let x = rng::gaussian_vec_new(&mut rng, 6);
            let y = rng::gaussian_vec_new(&mut rng, 6);
            let fx = field_eval(&f, &x).unwrap();
            let fy = field_eval(&f, &y).unwrap();
            let df = kernels::sub(&fx, &fy);
            let dx = kernels::sub(&x, &y);
            let lhs = kernels::inner(&df, &dx);
            let rhs = -nu * kernels::inner(&df, &df);
            assert!(lhs <= rhs + 1e-10, "lhs {lhs} rhs {rhs}");
        }
    }

    #[test]
    fn substep_count_examples() {
        assert_eq!(substep_count(1.0, 2.0, 1.0, 2.0), 2);
        assert_eq!(substep_count(1.0, 1.0, 1.0, 2.0), 1);
        assert_eq!(substep_count(0.5, 3.0, 1.0, 2.0), 3);
        assert_eq!(substep_count(1.0, 0.0, 1.0, 2.0), 1);
    }

    #[test]
    fn block_forward_scalar_hand_values() {
        // a=1, h=1: N=1 and 1 - sigma(1) = 0.
        let b = scalar_block(1.0, 1.0);
        assert_eq!(b.substep_count(), 1);
        let out = b.forward(&[1.0]).unwrap();
        assert!(out[0].abs() < 1e-12, "{}", out[0]);
        // a=2, h=1: N=2; 1 -> -1 -> -0.98 through the negative branch.
        let b = scalar_block(2.0, 1.0);
        assert_eq!(b.substep_count(), 2);
        let out = b.forward(&[1.0]).unwrap();
        assert!((out[0] + 0.98).abs() < 1e-9, "{}", out[0]);
    }

    #[test]
    fn block_forward_deterministic() {
        let b = scalar_block(1.5, 1.0);
        let x = vec![0.7];
        assert_eq!(b.forward(&x).unwrap(), b.forward(&x).unwrap());
    }

    #[test]
    fn expansion_witness_without_substepping() {
        // h a^2 L = 4 with substepping disabled: positive inputs stay on the
        // slope-1 branch, the step factor is |1 - 4| = 3.
        let b = scalar_block(2.0, 1.0);
        let x = b.forward_fixed_substeps(&[1.0], 1).unwrap();
        let y = b.forward_fixed_substeps(&[2.0], 1).unwrap();
        let ratio = (x[0] - y[0]).abs() / 1.0;
        assert!((ratio - 3.0).abs() < 1e-12, "ratio {ratio}");
        // With the adaptive split the same pair contracts.
        let x = b.forward(&[1.0]).unwrap();
        let y = b.forward(&[2.0]).unwrap();
        assert!((x[0] - y[0]).abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn per_layer_alpha_values() {
        assert!((per_layer_alpha(0.5, 10).unwrap() - 1.0 / 11.0).abs() < 1e-15);
        assert!((per_layer_alpha(0.5, 1).unwrap() - 0.5).abs() < 1e-15);
        assert!(per_layer_alpha(1.0, 3).is_err());
    }

    #[test]
    fn compose_alpha_values() {
        assert!((compose_alpha(&[0.5, 0.5]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((compose_alpha(&[0.25]).unwrap() - 0.25).abs() < 1e-15);
        // min(1/alpha_i) = 1/max(alpha_i) = 2, so 3/(3 - 1 + 2) = 3/4.
        let got = compose_alpha(&[1.0 / 3.0, 0.5, 0.25]).unwrap();
        assert!((got - 0.75).abs() < 1e-15, "{got}");
        assert!(compose_alpha(&[0.5, 1.2]).is_err());
        assert!(compose_alpha(&[]).is_err());
    }

    #[test]
    fn per_layer_alpha_round_trip() {
        for &alpha in &[0.25, 0.5, 0.9] {
            for m in [1usize, 3, 10] {
                let ai = per_layer_alpha(alpha, m).unwrap();
                let composed = compose_alpha(&vec![ai; m]).unwrap();
                assert!(composed <= alpha + 1e-12, "alpha {alpha} m {m}: {composed}");
            }
        }
    }
}
