//! Reverse-mode differentiation over a fixed operation vocabulary.
//!
//! A `Tape` records primitive array operations (operator apply/adjoint,
//! bias add, activation, axpy, pooling, channel pad/drop, inner products,
//! hinge terms, softmax cross-entropy) while computing the forward values
//! through the exact same kernel functions the plain executor uses, so the
//! recorded output is bit-identical to the untaped one. The reverse pass
//! visits nodes once in reverse order and accumulates adjoints for every
//! variable and parameter tensor.

use crate::error::{NxnError, Result};
use crate::kernels::{self, Activation};
use crate::linop::{conv_kernel_grad, dense_kernel_grad, LinearOperator, OpKind};
use crate::net::{ParamId, ParamSet};
use crate::rng;

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(pub usize);

#[derive(Clone, Debug)]
enum Node {
    Leaf,
    Apply { op: ParamId, x: usize },
    ApplyAdjoint { op: ParamId, x: usize },
    AddBias { bias: ParamId, x: usize, channels: usize, pixels: usize },
    Act { a: Activation, x: usize },
    Axpy { y: usize, c: f64, x: usize },
    Scale { c: f64, x: usize },
    Sub { a: usize, b: usize },
    AvgPool2 { x: usize, c: usize, h: usize, w: usize },
    GlobalPool { x: usize, c: usize, h: usize, w: usize },
    ChanPad { x: usize, from: usize, px: usize },
    ChanDrop { x: usize, from: usize, to: usize, px: usize },
    InnerConst { x: usize, w: Vec<f64> },
    Inner { a: usize, b: usize },
    Sum { x: usize },
    MaxConst { c: f64, x: usize },
    AddConst { x: usize },
    SoftmaxCe { x: usize, label: usize },
}

/// Append-only record of one forward computation.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    vals: Vec<Vec<f64>>,
}

/// Gradients of a seeded output with respect to every variable and
/// parameter touched by the tape.
pub struct Gradients {
    pub adjoints: Vec<Option<Vec<f64>>>,
    pub params: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: VarId) -> Option<&[f64]> {
        self.adjoints[v.0].as_deref()
    }

    pub fn wrt_param(&self, id: ParamId) -> Option<&[f64]> {
        self.params[id].as_deref()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn value(&self, v: VarId) -> &[f64] {
        &self.vals[v.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node, val: Vec<f64>) -> VarId {
        self.nodes.push(node);
        self.vals.push(val);
        VarId(self.vals.len() - 1)
    }

    /// Registers an input (or constant) value.
    pub fn input(&mut self, x: Vec<f64>) -> VarId {
        self.push(Node::Leaf, x)
    }

    pub fn apply(&mut self, op: ParamId, x: VarId) -> Result<VarId> {
        let v = self.params.op(op).apply(&self.vals[x.0])?;
        Ok(self.push(Node::Apply { op, x: x.0 }, v))
    }

    pub fn apply_adjoint(&mut self, op: ParamId, x: VarId) -> Result<VarId> {
        let v = self.params.op(op).apply_adjoint(&self.vals[x.0])?;
        Ok(self.push(Node::ApplyAdjoint { op, x: x.0 }, v))
    }

    pub fn add_bias(&mut self, x: VarId, bias: ParamId, channels: usize, pixels: usize) -> Result<VarId> {
        let b = self.params.vec(bias);
        if b.len() != channels {
            return Err(NxnError::dim(channels, b.len(), "bias length"));
        }
        if self.vals[x.0].len() != channels * pixels {
            return Err(NxnError::dim(channels * pixels, self.vals[x.0].len(), "bias input"));
        }
        let v = kernels::add_bias(&self.vals[x.0], b, channels, pixels);
        Ok(self.push(Node::AddBias { bias, x: x.0, channels, pixels }, v))
    }

    pub fn act(&mut self, a: Activation, x: VarId) -> VarId {
        let v = kernels::act_eval(a, &self.vals[x.0]);
        self.push(Node::Act { a, x: x.0 }, v)
    }

    pub fn axpy(&mut self, y: VarId, c: f64, x: VarId) -> VarId {
        let v = kernels::axpy(&self.vals[y.0], c, &self.vals[x.0]);
        self.push(Node::Axpy { y: y.0, c, x: x.0 }, v)
    }

    pub fn scale(&mut self, c: f64, x: VarId) -> VarId {
        let v = kernels::scale(c, &self.vals[x.0]);
        self.push(Node::Scale { c, x: x.0 }, v)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let v = kernels::sub(&self.vals[a.0], &self.vals[b.0]);
        self.push(Node::Sub { a: a.0, b: b.0 }, v)
    }

    pub fn avg_pool2(&mut self, x: VarId, c: usize, h: usize, w: usize) -> VarId {
        let v = kernels::avg_pool2(&self.vals[x.0], c, h, w);
        self.push(Node::AvgPool2 { x: x.0, c, h, w }, v)
    }

    pub fn global_pool(&mut self, x: VarId, c: usize, h: usize, w: usize) -> VarId {
        let v = kernels::global_pool(&self.vals[x.0], c, h, w);
        self.push(Node::GlobalPool { x: x.0, c, h, w }, v)
    }

    pub fn chan_pad(&mut self, x: VarId, from: usize, to: usize, px: usize) -> VarId {
        let v = kernels::chan_pad(&self.vals[x.0], from, to, px);
        self.push(Node::ChanPad { x: x.0, from, px }, v)
    }

    pub fn chan_drop(&mut self, x: VarId, from: usize, to: usize, px: usize) -> VarId {
        let v = kernels::chan_drop(&self.vals[x.0], from, to, px);
        self.push(Node::ChanDrop { x: x.0, from, to, px }, v)
    }

    pub fn inner_const(&mut self, x: VarId, w: Vec<f64>) -> VarId {
        let v = vec![kernels::inner(&self.vals[x.0], &w)];
        self.push(Node::InnerConst { x: x.0, w }, v)
    }

    pub fn inner(&mut self, a: VarId, b: VarId) -> VarId {
        let v = vec![kernels::inner(&self.vals[a.0], &self.vals[b.0])];
        self.push(Node::Inner { a: a.0, b: b.0 }, v)
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let v = vec![kernels::sum(&self.vals[x.0])];
        self.push(Node::Sum { x: x.0 }, v)
    }

    pub fn max_const(&mut self, c: f64, x: VarId) -> VarId {
        let v = kernels::max_const(c, &self.vals[x.0]);
        self.push(Node::MaxConst { c, x: x.0 }, v)
    }

    pub fn add_const(&mut self, c: f64, x: VarId) -> VarId {
        let v: Vec<f64> = self.vals[x.0].iter().map(|&t| c + t).collect();
        self.push(Node::AddConst { x: x.0 }, v)
    }

    pub fn softmax_ce(&mut self, scores: VarId, label: usize) -> Result<VarId> {
        if label >= self.vals[scores.0].len() {
            return Err(NxnError::RejectedInput(format!("label {label} out of range")));
        }
        let v = vec![kernels::softmax_ce(&self.vals[scores.0], label)];
        Ok(self.push(Node::SoftmaxCe { x: scores.0, label }, v))
    }

    /// Reverse pass from `out` seeded with `seed` (shape must match).
    pub fn backward(&self, out: VarId, seed: &[f64]) -> Result<Gradients> {
        if seed.len() != self.vals[out.0].len() {
            return Err(NxnError::dim(self.vals[out.0].len(), seed.len(), "backward seed"));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[out.0] = Some(seed.to_vec());
        let mut pgrads: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];

        let add_into = |slot: &mut Option<Vec<f64>>, inc: &[f64]| match slot {
            Some(v) => {
                for (d, s) in v.iter_mut().zip(inc.iter()) {
                    *d += s;
                }
            }
            None => *slot = Some(inc.to_vec()),
        };

        for id in (0..n).rev() {
            let g = match adj[id].clone() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id] {
                Node::Leaf => {}
                Node::Apply { op, x } => {
                    let o = self.params.op(*op);
                    let gx = o.apply_adjoint(&g)?;
                    add_into(&mut adj[*x], &gx);
                    let pg = pgrads[*op].get_or_insert_with(|| vec![0.0; o.entries().len()]);
                    match o {
                        OpKind::Dense(d) => dense_kernel_grad(d, &self.vals[*x], &g, pg),
                        OpKind::Conv(c) => conv_kernel_grad(c, &self.vals[*x], &g, pg),
                    }
                }
                Node::ApplyAdjoint { op, x } => {
                    let o = self.params.op(*op);
                    let gx = o.apply(&g)?;
                    add_into(&mut adj[*x], &gx);
                    let pg = pgrads[*op].get_or_insert_with(|| vec![0.0; o.entries().len()]);
                    match o {
                        OpKind::Dense(d) => dense_kernel_grad(d, &g, &self.vals[*x], pg),
                        OpKind::Conv(c) => conv_kernel_grad(c, &g, &self.vals[*x], pg),
                    }
                }
                Node::AddBias { bias, x, channels, pixels } => {
                    add_into(&mut adj[*x], &g);
                    let pg = pgrads[*bias].get_or_insert_with(|| vec![0.0; *channels]);
                    for c in 0..*channels {
                        let mut s = 0.0;
                        for p in 0..*pixels {
                            s += g[c * pixels + p];
                        }
                        pg[c] += s;
                    }
                }
                Node::Act { a, x } => {
                    let gx: Vec<f64> = self.vals[*x]
                        .iter()
                        .zip(g.iter())
                        .map(|(&v, &gg)| a.deriv(v) * gg)
                        .collect();
                    add_into(&mut adj[*x], &gx);
                }
                Node::Axpy { y, c, x } => {
                    add_into(&mut adj[*y], &g);
                    let gx = kernels::scale(*c, &g);
                    add_into(&mut adj[*x], &gx);
                }
                Node::Scale { c, x } => {
                    let gx = kernels::scale(*c, &g);
                    add_into(&mut adj[*x], &gx);
                }
                Node::Sub { a, b } => {
                    add_into(&mut adj[*a], &g);
                    let gb = kernels::scale(-1.0, &g);
                    add_into(&mut adj[*b], &gb);
                }
                Node::AvgPool2 { x, c, h, w } => {
                    let gx = kernels::avg_pool2_back(&g, *c, *h, *w);
                    add_into(&mut adj[*x], &gx);
                }
                Node::GlobalPool { x, c, h, w } => {
                    let gx = kernels::global_pool_back(&g, *c, *h, *w);
                    add_into(&mut adj[*x], &gx);
                }
                Node::ChanPad { x, from, px } => {
                    let gx = g[..from * px].to_vec();
                    add_into(&mut adj[*x], &gx);
                }
                Node::ChanDrop { x, from, to, px } => {
                    let mut gx = vec![0.0; from * px];
                    gx[..to * px].copy_from_slice(&g);
                    add_into(&mut adj[*x], &gx);
                }
                Node::InnerConst { x, w } => {
                    let gx = kernels::scale(g[0], w);
                    add_into(&mut adj[*x], &gx);
                }
                Node::Inner { a, b } => {
                    let ga = kernels::scale(g[0], &self.vals[*b]);
                    add_into(&mut adj[*a], &ga);
                    let gb = kernels::scale(g[0], &self.vals[*a]);
                    add_into(&mut adj[*b], &gb);
                }
                Node::Sum { x } => {
                    let gx = vec![g[0]; self.vals[*x].len()];
                    add_into(&mut adj[*x], &gx);
                }
                Node::MaxConst { c, x } => {
                    let gx: Vec<f64> = self.vals[*x]
                        .iter()
                        .zip(g.iter())
                        .map(|(&v, &gg)| if v >= *c { gg } else { 0.0 })
                        .collect();
                    add_into(&mut adj[*x], &gx);
                }
                Node::AddConst { x } => {
                    add_into(&mut adj[*x], &g);
                }
                Node::SoftmaxCe { x, label } => {
                    let p = kernels::softmax(&self.vals[*x]);
                    let mut gx = kernels::scale(g[0], &p);
                    gx[*label] -= g[0];
                    add_into(&mut adj[*x], &gx);
                }
            }
        }
        Ok(Gradients { adjoints: adj, params: pgrads })
    }

    /// Backward from a scalar output with seed 1.
    pub fn backward_scalar(&self, out: VarId) -> Result<Gradients> {
        if self.vals[out.0].len() != 1 {
            return Err(NxnError::RejectedInput("backward_scalar needs a scalar output".into()));
        }
        self.backward(out, &[1.0])
    }
}

/// Forward-evaluation vocabulary, implemented by the plain executor and by
/// the tape recorder. Model code written against this trait runs both ways
/// with identical arithmetic.
pub trait Exec {
    type V: Clone;
    /// The parameter set values are resolved against; geometry and spectral
    /// estimates must come from here so taped and plain runs agree.
    fn params(&self) -> &ParamSet;
    fn apply(&mut self, op: ParamId, x: &Self::V) -> Result<Self::V>;
    fn apply_adjoint(&mut self, op: ParamId, x: &Self::V) -> Result<Self::V>;
    fn add_bias(&mut self, x: &Self::V, bias: ParamId, channels: usize, pixels: usize) -> Result<Self::V>;
    fn act(&mut self, a: Activation, x: &Self::V) -> Self::V;
    fn axpy(&mut self, y: &Self::V, c: f64, x: &Self::V) -> Self::V;
    fn scale(&mut self, c: f64, x: &Self::V) -> Self::V;
    fn avg_pool2(&mut self, x: &Self::V, c: usize, h: usize, w: usize) -> Self::V;
    fn global_pool(&mut self, x: &Self::V, c: usize, h: usize, w: usize) -> Self::V;
    fn chan_pad(&mut self, x: &Self::V, from: usize, to: usize, px: usize) -> Self::V;
    fn chan_drop(&mut self, x: &Self::V, from: usize, to: usize, px: usize) -> Self::V;
    /// Spectral estimate of an operator parameter; substep counts must be
    /// identical under both executors.
    fn sigma(&self, op: ParamId) -> f64;
}

/// Runs the vocabulary directly on `Vec<f64>` values.
pub struct PlainExec<'p> {
    pub params: &'p ParamSet,
}

impl<'p> Exec for PlainExec<'p> {
    type V = Vec<f64>;

    fn params(&self) -> &ParamSet {
        self.params
    }

    fn apply(&mut self, op: ParamId, x: &Vec<f64>) -> Result<Vec<f64>> {
        self.params.op(op).apply(x)
    }

    fn apply_adjoint(&mut self, op: ParamId, x: &Vec<f64>) -> Result<Vec<f64>> {
        self.params.op(op).apply_adjoint(x)
    }

    fn add_bias(&mut self, x: &Vec<f64>, bias: ParamId, channels: usize, pixels: usize) -> Result<Vec<f64>> {
        let b = self.params.vec(bias);
        if b.len() != channels {
            return Err(NxnError::dim(channels, b.len(), "bias length"));
        }
        Ok(kernels::add_bias(x, b, channels, pixels))
    }

    fn act(&mut self, a: Activation, x: &Vec<f64>) -> Vec<f64> {
        kernels::act_eval(a, x)
    }

    fn axpy(&mut self, y: &Vec<f64>, c: f64, x: &Vec<f64>) -> Vec<f64> {
        kernels::axpy(y, c, x)
    }

    fn scale(&mut self, c: f64, x: &Vec<f64>) -> Vec<f64> {
        kernels::scale(c, x)
    }

    fn avg_pool2(&mut self, x: &Vec<f64>, c: usize, h: usize, w: usize) -> Vec<f64> {
        kernels::avg_pool2(x, c, h, w)
    }

    fn global_pool(&mut self, x: &Vec<f64>, c: usize, h: usize, w: usize) -> Vec<f64> {
        kernels::global_pool(x, c, h, w)
    }

    fn chan_pad(&mut self, x: &Vec<f64>, from: usize, to: usize, px: usize) -> Vec<f64> {
        kernels::chan_pad(x, from, to, px)
    }

    fn chan_drop(&mut self, x: &Vec<f64>, from: usize, to: usize, px: usize) -> Vec<f64> {
        kernels::chan_drop(x, from, to, px)
    }

    fn sigma(&self, op: ParamId) -> f64 {
        self.params.sigma(op)
    }
}

/// Records the vocabulary on a tape.
pub struct TapeExec<'t, 'p> {
    pub tape: &'t mut Tape<'p>,
}

impl<'t, 'p> Exec for TapeExec<'t, 'p> {
    type V = VarId;

    fn params(&self) -> &ParamSet {
        self.tape.params
    }

    fn apply(&mut self, op: ParamId, x: &VarId) -> Result<VarId> {
        self.tape.apply(op, *x)
    }

    fn apply_adjoint(&mut self, op: ParamId, x: &VarId) -> Result<VarId> {
        self.tape.apply_adjoint(op, *x)
    }

    fn add_bias(&mut self, x: &VarId, bias: ParamId, channels: usize, pixels: usize) -> Result<VarId> {
        self.tape.add_bias(*x, bias, channels, pixels)
    }

    fn act(&mut self, a: Activation, x: &VarId) -> VarId {
        self.tape.act(a, *x)
    }

    fn axpy(&mut self, y: &VarId, c: f64, x: &VarId) -> VarId {
        self.tape.axpy(*y, c, *x)
    }

    fn scale(&mut self, c: f64, x: &VarId) -> VarId {
        self.tape.scale(c, *x)
    }

    fn avg_pool2(&mut self, x: &VarId, c: usize, h: usize, w: usize) -> VarId {
        self.tape.avg_pool2(*x, c, h, w)
    }

    fn global_pool(&mut self, x: &VarId, c: usize, h: usize, w: usize) -> VarId {
        self.tape.global_pool(*x, c, h, w)
    }

    fn chan_pad(&mut self, x: &VarId, from: usize, to: usize, px: usize) -> VarId {
        self.tape.chan_pad(*x, from, to, px)
    }

    fn chan_drop(&mut self, x: &VarId, from: usize, to: usize, px: usize) -> VarId {
        self.tape.chan_drop(*x, from, to, px)
    }

    fn sigma(&self, op: ParamId) -> f64 {
        self.tape.params.sigma(op)
    }
}

/// Finite-difference comparison report.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Checks the tape gradient of a scalar program against central differences
/// on a random subset of at least `min_coords` coordinates (all parameter
/// tensors and all inputs are eligible).
pub fn grad_check<F>(
    params: &mut ParamSet,
    inputs: &[Vec<f64>],
    program: F,
    fd_step: f64,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let eval = |params: &ParamSet, inputs: &[Vec<f64>]| -> Result<f64> {
        let mut tape = Tape::new(params);
        let vars: Vec<VarId> = inputs.iter().map(|x| tape.input(x.clone())).collect();
        let out = program(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(NxnError::RejectedInput("grad_check needs a scalar program".into()));
        }
        Ok(tape.value(out)[0])
    };

    // Analytic gradients at the base point.
    let mut tape = Tape::new(params);
    let vars: Vec<VarId> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let out = program(&mut tape, &vars)?;
    let grads = tape.backward_scalar(out)?;
    let analytic_params: Vec<Option<Vec<f64>>> = grads.params.clone();
    let analytic_inputs: Vec<Option<Vec<f64>>> =
        vars.iter().map(|v| grads.wrt(*v).map(|g| g.to_vec())).collect();
    drop(tape);

    // Candidate coordinates: (space, tensor, index).
    let mut coords: Vec<(usize, usize, usize)> = Vec::new();
    for id in 0..params.len() {
        for i in 0..params.data(id).len() {
            coords.push((0, id, i));
        }
    }
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.len() {
            coords.push((1, k, i));
        }
    }
    let mut rng = rng::stream(seed, "grad-check", &[]);
    let take = min_coords.min(coords.len());
    // Partial Fisher-Yates for a random subset.
    let mut idx: Vec<usize> = (0..coords.len()).collect();
    for i in 0..take {
        let j = i + (rng::uniform(&mut rng) * (idx.len() - i) as f64) as usize;
        let j = j.min(idx.len() - 1);
        idx.swap(i, j);
    }

    let mut inputs_mut = inputs.to_vec();
    let mut max_rel = 0.0f64;
    for &ci in idx.iter().take(take) {
        let (space, tensor, i) = coords[ci];
        let base = if space == 0 {
            params.data(tensor)[i]
        } else {
            inputs_mut[tensor][i]
        };
        let set = |params: &mut ParamSet, inputs_mut: &mut [Vec<f64>], v: f64| {
            if space == 0 {
                params.data_mut(tensor)[i] = v;
            } else {
                inputs_mut[tensor][i] = v;
            }
        };
        set(params, &mut inputs_mut, base + fd_step);
        let fp = eval(params, &inputs_mut)?;
        set(params, &mut inputs_mut, base - fd_step);
        let fm = eval(params, &inputs_mut)?;
        set(params, &mut inputs_mut, base);
        let fd = (fp - fm) / (2.0 * fd_step);
        let an = if space == 0 {
            analytic_params[tensor].as_ref().map_or(0.0, |g| g[i])
        } else {
            analytic_inputs[tensor].as_ref().map_or(0.0, |g| g[i])
        };
        // The floor keeps finite-difference rounding noise on near-zero
        // coordinates from dominating the relative error.
        let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-4);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, checked: take })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linop::DenseOp;

    #[test]
    fn gradient_of_half_squared_norm_is_x() {
        let params = ParamSet::default();
        let mut tape = Tape::new(&params);
        let x = tape.input(vec![1.0, -2.0, 3.0]);
        let n2 = tape.inner(x, x);
        let half = tape.scale(0.5, n2);
        let g = tape.backward_scalar(half).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn identity_program_has_empty_param_gradients() {
        let params = ParamSet::default();
        let mut tape = Tape::new(&params);
        let x = tape.input(vec![4.0, 5.0]);
        assert_eq!(tape.value(x), &[4.0, 5.0]);
        let s = tape.sum(x);
        let g = tape.backward_scalar(s).unwrap();
        assert!(g.params.is_empty());
        assert_eq!(g.wrt(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn linear_program_gradient_is_exact() {
        let mut params = ParamSet::default();
        let mut rng = rng::stream(41, "lin", &[]);
        let a = DenseOp::random(5, 4, &mut rng);
        let sp = crate::linop::SpectralState::random(&a, &mut rng);
        let op = params.add_op("a", OpKind::Dense(a), sp);
        let x0 = crate::rng::gaussian_vec_new(&mut rng, 4);
        let report = grad_check(
            &mut params,
            &[x0],
            |tape, vars| {
                let y = tape.apply(op, vars[0])?;
                Ok(tape.inner(y, y))
            },
            1e-6,
            60,
            7,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-10 + 1e-7, "rel {}", report.max_rel_err);
    }

    #[test]
    fn backward_is_linear_in_seed() {
        let mut params = ParamSet::default();
        let mut rng = rng::stream(42, "seed-lin", &[]);
        let a = DenseOp::random(3, 3, &mut rng);
        let sp = crate::linop::SpectralState::random(&a, &mut rng);
        let op = params.add_op("a", OpKind::Dense(a), sp);
        let mut tape = Tape::new(&params);
        let x = tape.input(vec![0.3, -0.8, 1.2]);
        let y = tape.apply(op, x).unwrap();
        let z = tape.act(Activation::LeakyRelu, y);
        let s1 = [1.0, 0.0, 2.0];
        let s2 = [0.0, -1.0, 0.5];
        let (a_, b_) = (0.7, -1.3);
        let mixed: Vec<f64> = s1.iter().zip(s2.iter()).map(|(p, q)| a_ * p + b_ * q).collect();
        let g1 = tape.backward(z, &s1).unwrap();
        let g2 = tape.backward(z, &s2).unwrap();
        let gm = tape.backward(z, &mixed).unwrap();
        let want: Vec<f64> = g1
            .wrt(x)
            .unwrap()
            .iter()
            .zip(g2.wrt(x).unwrap().iter())
            .map(|(p, q)| a_ * p + b_ * q)
            .collect();
        for (u, v) in gm.wrt(x).unwrap().iter().zip(want.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut params = ParamSet::default();
        let mut rng = rng::stream(44, "conv-fd", &[]);
        let c = crate::linop::Conv2dOp::random(2, 2, 3, crate::linop::Padding::Zero, 5, 5, &mut rng);
        let sp = crate::linop::SpectralState::random(&c, &mut rng);
        let op = params.add_op("k", OpKind::Conv(c), sp);
        let bias = params.add_vec("b", vec![0.1, -0.2]);
        let x0 = crate::rng::gaussian_vec_new(&mut rng, 2 * 25);
        let report = grad_check(
            &mut params,
            &[x0],
            |tape, vars| {
                let y = tape.apply(op, vars[0])?;
                let y = tape.add_bias(y, bias, 2, 25)?;
                let s = tape.act(Activation::LeakyRelu, y);
                let u = tape.apply_adjoint(op, s)?;
                Ok(tape.inner(u, u))
            },
            1e-6,
            80,
            11,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel {}", report.max_rel_err);
    }

    #[test]
    fn softmax_ce_gradient_is_softmax_minus_onehot() {
        let params = ParamSet::default();
        let mut tape = Tape::new(&params);
        let s = tape.input(vec![0.2, -0.4, 1.1]);
        let l = tape.softmax_ce(s, 1).unwrap();
        let g = tape.backward_scalar(l).unwrap();
        let p = kernels::softmax(&[0.2, -0.4, 1.1]);
        let got = g.wrt(s).unwrap();
        for k in 0..3 {
            let want = p[k] - if k == 1 { 1.0 } else { 0.0 };
            assert!((got[k] - want).abs() < 1e-14);
        }
    }
}
