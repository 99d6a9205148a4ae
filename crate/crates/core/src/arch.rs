//! Full network architectures.
//!
//! `SeqNet` is the lift -> blocks -> project shape used for denoising and
//! generic non-expansiveness checks; `ClassifierNet` stacks lift/pool/block
//! stages with a global pool and a final linear map. Both run through the
//! `Exec` vocabulary, so the plain forward pass and the recorded (taped)
//! forward pass share every arithmetic operation.

use crate::error::{NxnError, Result};
use crate::grad::{Exec, PlainExec, Tape, TapeExec, VarId};
use crate::kernels::Activation;
use crate::linop::{power_iterate, Conv2dOp, DenseOp, OpKind, Padding, SpectralState};
use crate::net::{bias_geometry, substep_count, ParamId, ParamSet, Space};
use crate::rng;
use crate::tableau::{builtin, RKTableau, TableauName};

/// Constrained gradient-flow block referencing shared parameters.
#[derive(Clone, Debug)]
pub struct OdeDef {
    pub op: ParamId,
    pub bias: ParamId,
    pub h: f64,
    /// Target for (h/N) sigma^2 L; at most 2r.
    pub budget: f64,
}

/// Unconstrained residual block x + B sigma(A x + b).
#[derive(Clone, Debug)]
pub struct ResDef {
    pub a: ParamId,
    pub b: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub enum BlockDef {
    Ode(OdeDef),
    Res(ResDef),
}

/// Which family a builder produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    NonExpansive,
    Baseline,
}

fn assert_finite_plain(x: &[f64], context: &str) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(NxnError::Divergence { context: context.to_string() });
    }
    Ok(())
}

/// f(x) = -A^T sigma(A x + b) through an executor.
fn run_field<E: Exec>(
    e: &mut E,
    op: ParamId,
    bias: ParamId,
    act: Activation,
    x: &E::V,
) -> Result<E::V> {
    let (channels, pixels) = bias_geometry(e.params().op(op));
    let t = e.apply(op, x)?;
    let t = e.add_bias(&t, bias, channels, pixels)?;
    let s = e.act(act, &t);
    let u = e.apply_adjoint(op, &s)?;
    Ok(e.scale(-1.0, &u))
}

/// One explicit RK substep of size h along the block field.
fn run_rk_substep<E: Exec>(
    e: &mut E,
    tableau: &RKTableau,
    h: f64,
    act: Activation,
    op: ParamId,
    bias: ParamId,
    y: &E::V,
) -> Result<E::V> {
    let m = tableau.m;
    let mut ks: Vec<E::V> = Vec::with_capacity(m);
    for i in 0..m {
        let mut yi = y.clone();
        for (j, k) in ks.iter().enumerate().take(i) {
            let a = tableau.a_at(i, j);
            if a != 0.0 {
                yi = e.axpy(&yi, h * a, k);
            }
        }
        ks.push(run_field(e, op, bias, act, &yi)?);
    }
    let mut out = y.clone();
    for (i, k) in ks.iter().enumerate() {
        out = e.axpy(&out, h * tableau.b[i], k);
    }
    Ok(out)
}

/// Runs one block. ODE blocks split into N = ceil(h sigma^2 L / budget)
/// substeps using the current spectral estimate; an override of Some(n)
/// forces the substep count (test hook for disabling the constraint).
pub fn run_block<E: Exec>(
    e: &mut E,
    def: &BlockDef,
    tableau: &RKTableau,
    act: Activation,
    substep_override: Option<usize>,
    x: &E::V,
) -> Result<E::V> {
    match def {
        BlockDef::Ode(d) => {
            let n = substep_override.unwrap_or_else(|| {
                substep_count(d.h, e.params().sigma(d.op), act.lipschitz(), d.budget)
            });
            let n = n.max(1);
            let h_sub = d.h / n as f64;
            let mut z = x.clone();
            for _ in 0..n {
                z = run_rk_substep(e, tableau, h_sub, act, d.op, d.bias, &z)?;
            }
            Ok(z)
        }
        BlockDef::Res(d) => {
            let (channels, pixels) = bias_geometry(e.params().op(d.a));
            let t = e.apply(d.a, x)?;
            let t = e.add_bias(&t, d.bias, channels, pixels)?;
            let s = e.act(act, &t);
            let u = e.apply(d.b, &s)?;
            Ok(e.axpy(x, 1.0, &u))
        }
    }
}

/// Lift (zero-pad channels) -> blocks -> project (drop channels).
#[derive(Clone, Debug)]
pub struct SeqNet {
    pub input: Space,
    pub lifted: Space,
    pub tableau: RKTableau,
    pub radius: f64,
    pub act: Activation,
    pub blocks: Vec<BlockDef>,
    pub params: ParamSet,
}

fn run_seq<E: Exec>(net: &SeqNet, e: &mut E, x: &E::V) -> Result<E::V> {
    let px = net.input.pixels();
    let (c_in, c_lift) = (net.input.channels(), net.lifted.channels());
    let mut z = e.chan_pad(x, c_in, c_lift, px);
    for def in &net.blocks {
        z = run_block(e, def, &net.tableau, net.act, None, &z)?;
    }
    Ok(e.chan_drop(&z, c_lift, c_in, px))
}

impl SeqNet {
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input.len() {
            return Err(NxnError::dim(self.input.len(), x.len(), "net input"));
        }
        let mut e = PlainExec { params: &self.params };
        let out = run_seq(self, &mut e, &x.to_vec())?;
        assert_finite_plain(&out, "seq net output")?;
        Ok(out)
    }

    /// Records the forward pass on a tape built over `self.params`.
    pub fn record(&self, tape: &mut Tape<'_>, x: VarId) -> Result<VarId> {
        let mut e = TapeExec { tape };
        run_seq(self, &mut e, &x)
    }

    pub fn substep_counts(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .map(|d| match d {
                BlockDef::Ode(d) => {
                    substep_count(d.h, self.params.sigma(d.op), self.act.lipschitz(), d.budget)
                }
                BlockDef::Res(_) => 1,
            })
            .collect()
    }

    pub fn total_substeps(&self) -> usize {
        self.substep_counts().iter().sum()
    }

    /// Largest per-block (h/N) sigma^2 L under the current estimates.
    pub fn max_block_product(&self) -> f64 {
        let l = self.act.lipschitz();
        let mut worst: f64 = 0.0;
        for def in &self.blocks {
            if let BlockDef::Ode(d) = def {
                let sigma = self.params.sigma(d.op);
                let n = substep_count(d.h, sigma, l, d.budget) as f64;
                worst = worst.max(d.h / n * sigma * sigma * l);
            }
        }
        worst
    }

    pub fn power_refresh(&mut self, iters: usize) -> Result<()> {
        self.params.power_refresh(iters)
    }

    /// Post-hoc audit: 1000 power iterations per operator, then check every
    /// block satisfies (h/N) sigma^2 L <= budget.
    pub fn recertify(&mut self) -> Result<Vec<RecertRow>> {
        recertify_blocks(&mut self.params, &self.blocks, self.act)
    }
}

/// One row of the constraint audit.
#[derive(Clone, Debug)]
pub struct RecertRow {
    pub name: String,
    pub sigma: f64,
    pub substeps: usize,
    pub product: f64,
    pub budget: f64,
    pub margin: f64,
    pub pass: bool,
}

pub fn recertify_blocks(
    params: &mut ParamSet,
    blocks: &[BlockDef],
    act: Activation,
) -> Result<Vec<RecertRow>> {
    params.power_refresh(1000)?;
    let l = act.lipschitz();
    let mut rows = Vec::new();
    for def in blocks {
        if let BlockDef::Ode(d) = def {
            let sigma = params.sigma(d.op);
            let n = substep_count(d.h, sigma, l, d.budget);
            let product = d.h / n as f64 * sigma * sigma * l;
            let margin = d.budget - product;
            rows.push(RecertRow {
                name: params.name(d.op).to_string(),
                sigma,
                substeps: n,
                product,
                budget: d.budget,
                margin,
                pass: margin > 0.0,
            });
        }
    }
    Ok(rows)
}

/// (1 - alpha) id + alpha inner.
#[derive(Clone, Debug)]
pub struct AveragedWrapper {
    pub alpha: f64,
    pub inner: SeqNet,
}

impl AveragedWrapper {
    pub fn new(alpha: f64, inner: SeqNet) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(NxnError::RejectedConfig(format!("alpha {alpha} outside (0,1)")));
        }
        Ok(Self { alpha, inner })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let y = self.inner.forward(x)?;
        Ok(x.iter()
            .zip(y.iter())
            .map(|(a, b)| (1.0 - self.alpha) * a + self.alpha * b)
            .collect())
    }
}

/// One classifier stage: 1x1 channel lift, 2x2 mean pool, block group.
#[derive(Clone, Debug)]
pub struct Stage {
    pub lift: ParamId,
    pub blocks: Vec<BlockDef>,
}

#[derive(Clone, Debug)]
pub struct ClassifierNet {
    pub input: (usize, usize, usize),
    pub stages: Vec<Stage>,
    pub final_w: ParamId,
    pub final_b: ParamId,
    pub n_classes: usize,
    pub tableau: RKTableau,
    pub radius: f64,
    pub act: Activation,
    pub params: ParamSet,
}

fn run_classifier<E: Exec>(net: &ClassifierNet, e: &mut E, x: &E::V) -> Result<E::V> {
    let (mut c, mut h, mut w) = net.input;
    let mut z = x.clone();
    for stage in &net.stages {
        let lift_op = e.params().op(stage.lift);
        let out_c = match lift_op {
            OpKind::Conv(cv) => cv.out_channels,
            OpKind::Dense(_) => {
                return Err(NxnError::RejectedConfig("stage lift must be a 1x1 conv".into()))
            }
        };
        z = e.apply(stage.lift, &z)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(NxnError::RejectedConfig(format!(
                "pooling needs even dimensions, got {h}x{w}"
            )));
        }
        z = e.avg_pool2(&z, out_c, h, w);
        c = out_c;
        h /= 2;
        w /= 2;
        for def in &stage.blocks {
            z = run_block(e, def, &net.tableau, net.act, None, &z)?;
        }
    }
    let pooled = e.global_pool(&z, c, h, w);
    let scores = e.apply(net.final_w, &pooled)?;
    e.add_bias(&scores, net.final_b, net.n_classes, 1)
}

impl ClassifierNet {
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (c, h, w) = self.input;
        if x.len() != c * h * w {
            return Err(NxnError::dim(c * h * w, x.len(), "classifier input"));
        }
        let mut e = PlainExec { params: &self.params };
        let out = run_classifier(self, &mut e, &x.to_vec())?;
        assert_finite_plain(&out, "classifier scores")?;
        Ok(out)
    }

    pub fn record(&self, tape: &mut Tape<'_>, x: VarId) -> Result<VarId> {
        let mut e = TapeExec { tape };
        run_classifier(self, &mut e, &x)
    }

    /// Argmax with ties broken toward the smallest index.
    pub fn classify(scores: &[f64]) -> usize {
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate().skip(1) {
            if s > scores[best] {
                best = i;
            }
        }
        best
    }

    /// Certified Lipschitz bound of the score map: the product of exact
    /// norms of the final linear map and the 1x1 lifts, the 1/2 factors of
    /// the mean pools, and 1/sqrt(pixels) of the global pool. Blocks count
    /// as 1 (their certificates are audited separately).
    pub fn certified_lipschitz(&self) -> Result<f64> {
        let (_, mut h, mut w) = self.input;
        let mut bound = 1.0;
        for stage in &self.stages {
            let lift = self.params.op(stage.lift);
            let norm = lift.exact_norm().ok_or_else(|| {
                NxnError::RejectedConfig("lift norm not exactly computable".into())
            })?;
            bound *= norm * 0.5;
            h /= 2;
            w /= 2;
        }
        bound /= ((h * w) as f64).sqrt();
        let fin = self.params.op(self.final_w).exact_norm().ok_or_else(|| {
            NxnError::RejectedConfig("final layer norm not exactly computable".into())
        })?;
        Ok(bound * fin)
    }

    pub fn power_refresh(&mut self, iters: usize) -> Result<()> {
        self.params.power_refresh(iters)
    }

    pub fn all_blocks(&self) -> Vec<BlockDef> {
        self.stages.iter().flat_map(|s| s.blocks.iter().cloned()).collect()
    }

    pub fn recertify(&mut self) -> Result<Vec<RecertRow>> {
        let blocks = self.all_blocks();
        recertify_blocks(&mut self.params, &blocks, self.act)
    }

    pub fn total_substeps(&self) -> usize {
        let l = self.act.lipschitz();
        self.stages
            .iter()
            .flat_map(|s| s.blocks.iter())
            .map(|d| match d {
                BlockDef::Ode(d) => substep_count(d.h, self.params.sigma(d.op), l, d.budget),
                BlockDef::Res(_) => 1,
            })
            .sum()
    }

    pub fn max_block_product(&self) -> f64 {
        let l = self.act.lipschitz();
        let mut worst: f64 = 0.0;
        for d in self.stages.iter().flat_map(|s| s.blocks.iter()) {
            if let BlockDef::Ode(d) = d {
                let sigma = self.params.sigma(d.op);
                let n = substep_count(d.h, sigma, l, d.budget) as f64;
                worst = worst.max(d.h / n * sigma * sigma * l);
            }
        }
        worst
    }
}

/// Adds a random operator, normalizes it to unit norm with 1000 power
/// iterations, and stores the certified state.
fn add_normalized_op(
    params: &mut ParamSet,
    name: String,
    op: OpKind,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<ParamId> {
    let state = power_iterate(&op, &SpectralState::random(&op, rng), 1000)?;
    let (op, state) = if state.sigma > 0.0 {
        let scaled = op.scaled(1.0 / state.sigma);
        (
            scaled,
            SpectralState {
                u: state.u,
                v: state.v,
                sigma: 1.0,
            },
        )
    } else {
        (op, state)
    };
    Ok(params.add_op(name, op, state))
}

fn add_raw_op(
    params: &mut ParamSet,
    name: String,
    op: OpKind,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<ParamId> {
    let state = power_iterate(&op, &SpectralState::random(&op, rng), 1000)?;
    Ok(params.add_op(name, op, state))
}

fn random_dense(rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng) -> DenseOp {
    let bound = 1.0 / (cols as f64).sqrt();
    let entries = (0..rows * cols)
        .map(|_| rng::uniform_in(rng, -bound, bound))
        .collect();
    DenseOp { rows, cols, entries }
}

fn random_bias(n: usize, fan_in: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng::uniform_in(rng, -bound, bound)).collect()
}

/// Configuration for a lift -> blocks -> project network.
#[derive(Clone, Debug)]
pub struct SeqSpec {
    pub input: Space,
    /// Lifted channel count (image) or lifted dimension (dense).
    pub width: usize,
    pub n_blocks: usize,
    pub tableau: TableauName,
    /// Block step size; defaults to the contractivity radius.
    pub h: Option<f64>,
    pub budget: f64,
    pub act: Activation,
    pub kernel: usize,
    pub padding: Padding,
    pub family: Family,
}

impl SeqSpec {
    pub fn denoiser(height: usize, width: usize, channels: usize, lifted: usize, n_blocks: usize, tableau: TableauName) -> Self {
        Self {
            input: Space::Image { channels, height, width },
            width: lifted,
            n_blocks,
            tableau,
            h: None,
            budget: 1.0,
            act: Activation::LeakyRelu,
            kernel: 3,
            padding: Padding::Zero,
            family: Family::NonExpansive,
        }
    }
}

pub fn build_seq(spec: &SeqSpec, seed: u64) -> Result<SeqNet> {
    if spec.width < spec.input.channels() {
        return Err(NxnError::RejectedConfig(
            "lifted width must be at least the input channel count".into(),
        ));
    }
    let mut tableau = builtin(spec.tableau);
    let radius = tableau.radius_or_compute()?.finite().ok_or_else(|| {
        NxnError::UnsupportedTableau("builder needs a finite radius".into())
    })?;
    if !(spec.budget > 0.0 && spec.budget <= 2.0 * radius) {
        return Err(NxnError::RejectedConfig(format!(
            "budget {} outside (0, {}]",
            spec.budget,
            2.0 * radius
        )));
    }
    let h = spec.h.unwrap_or(radius);
    if h <= 0.0 {
        return Err(NxnError::RejectedConfig("h must be positive".into()));
    }
    let mut rng = rng::stream(seed, "net-init", &[]);
    let mut params = ParamSet::default();
    let lifted = match spec.input {
        Space::Dense { .. } => Space::Dense { dim: spec.width },
        Space::Image { height, width, .. } => Space::Image {
            channels: spec.width,
            height,
            width,
        },
    };
    let mut blocks = Vec::with_capacity(spec.n_blocks);
    for i in 0..spec.n_blocks {
        let (op, fan_in) = match lifted {
            Space::Dense { dim } => (OpKind::Dense(random_dense(dim, dim, &mut rng)), dim),
            Space::Image { channels, height, width } => (
                OpKind::Conv(Conv2dOp::random(
                    channels,
                    channels,
                    spec.kernel,
                    spec.padding,
                    height,
                    width,
                    &mut rng,
                )),
                channels * spec.kernel * spec.kernel,
            ),
        };
        let (bias_ch, _) = bias_geometry(&op);
        let bias = random_bias(bias_ch, fan_in, &mut rng);
        match spec.family {
            Family::NonExpansive => {
                let op_id = add_normalized_op(&mut params, format!("block{i}.weight"), op, &mut rng)?;
                let bias_id = params.add_vec(format!("block{i}.bias"), bias);
                blocks.push(BlockDef::Ode(OdeDef {
                    op: op_id,
                    bias: bias_id,
                    h,
                    budget: spec.budget,
                }));
            }
            Family::Baseline => {
                let b_op = match lifted {
                    Space::Dense { dim } => OpKind::Dense(random_dense(dim, dim, &mut rng)),
                    Space::Image { channels, height, width } => OpKind::Conv(Conv2dOp::random(
                        channels,
                        channels,
                        spec.kernel,
                        spec.padding,
                        height,
                        width,
                        &mut rng,
                    )),
                };
                let a_id = add_raw_op(&mut params, format!("block{i}.weight"), op, &mut rng)?;
                let b_id = add_raw_op(&mut params, format!("block{i}.bweight"), b_op, &mut rng)?;
                let bias_id = params.add_vec(format!("block{i}.bias"), bias);
                blocks.push(BlockDef::Res(ResDef { a: a_id, b: b_id, bias: bias_id }));
            }
        }
    }
    Ok(SeqNet {
        input: spec.input,
        lifted,
        tableau,
        radius,
        act: spec.act,
        blocks,
        params,
    })
}

/// Ties a baseline copy to a non-expansive net: every ODE block becomes a
/// residual block with B = -h A^T. For power-of-two h the residual forward
/// reproduces the Euler block (N = 1) exactly, since scaling by -h commutes
/// with rounding and the summation orders coincide.
pub fn tie_baseline(net: &SeqNet) -> Result<SeqNet> {
    let mut params = ParamSet::default();
    let mut blocks = Vec::new();
    let mut rng = rng::stream(0x7e1d, "tie", &[]);
    for (i, def) in net.blocks.iter().enumerate() {
        let BlockDef::Ode(d) = def else {
            return Err(NxnError::RejectedConfig("tie_baseline expects ODE blocks".into()));
        };
        let a = net.params.op(d.op).clone();
        let b = match &a {
            OpKind::Dense(m) => OpKind::Dense(m.transposed().scaled(-d.h)),
            OpKind::Conv(c) => OpKind::Conv(c.adjoint_op().scaled(-d.h)),
        };
        let bias = net.params.vec(d.bias).to_vec();
        let a_id = add_raw_op(&mut params, format!("block{i}.weight"), a, &mut rng)?;
        let b_id = add_raw_op(&mut params, format!("block{i}.bweight"), b, &mut rng)?;
        let bias_id = params.add_vec(format!("block{i}.bias"), bias);
        blocks.push(BlockDef::Res(ResDef { a: a_id, b: b_id, bias: bias_id }));
    }
    Ok(SeqNet {
        input: net.input,
        lifted: net.lifted,
        tableau: net.tableau.clone(),
        radius: net.radius,
        act: net.act,
        blocks,
        params,
    })
}

/// The same kernels on a different spatial grid. Convolutional weights are
/// resolution-free; the spectral states are recertified at the new shape
/// with 1000 power iterations since operator norms depend on the grid.
pub fn seq_with_spatial_shape(net: &SeqNet, height: usize, width: usize) -> Result<SeqNet> {
    let map_space = |s: Space| -> Result<Space> {
        match s {
            Space::Image { channels, .. } => Ok(Space::Image { channels, height, width }),
            Space::Dense { .. } => Err(NxnError::RejectedConfig(
                "spatial reshape applies to image networks".into(),
            )),
        }
    };
    let mut out = net.clone();
    out.input = map_space(net.input)?;
    out.lifted = map_space(net.lifted)?;
    for (name, t) in out.params.tensors.iter_mut() {
        if let crate::net::ParamTensor::Op(p) = t {
            if let OpKind::Conv(c) = &p.op {
                let resized = OpKind::Conv(c.with_shape(height, width));
                let mut srng = rng::stream(
                    rng::fingerprint(resized.entries()),
                    "reshape-spectral",
                    &[height as u64, width as u64],
                );
                let state = power_iterate(&resized, &SpectralState::random(&resized, &mut srng), 1000)?;
                p.op = resized;
                p.spectral = state;
            } else {
                return Err(NxnError::RejectedConfig(format!(
                    "{name} is not convolutional; cannot reshape"
                )));
            }
        }
    }
    Ok(out)
}

/// Configuration for the staged classifier.
#[derive(Clone, Debug)]
pub struct ClassifierSpec {
    pub input: (usize, usize, usize),
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub n_classes: usize,
    pub tableau: TableauName,
    pub h: Option<f64>,
    pub budget: f64,
    pub act: Activation,
    pub family: Family,
}

pub fn build_classifier(spec: &ClassifierSpec, seed: u64) -> Result<ClassifierNet> {
    if spec.stage_channels.is_empty() {
        return Err(NxnError::RejectedConfig("need at least one stage".into()));
    }
    if spec.n_classes < 2 {
        return Err(NxnError::RejectedConfig("need at least two classes".into()));
    }
    let mut tableau = builtin(spec.tableau);
    let radius = tableau.radius_or_compute()?.finite().ok_or_else(|| {
        NxnError::UnsupportedTableau("builder needs a finite radius".into())
    })?;
    let h = spec.h.unwrap_or(radius);
    let mut rng = rng::stream(seed, "classifier-init", &[]);
    let mut params = ParamSet::default();
    let (mut c, mut ih, mut iw) = spec.input;
    let mut stages = Vec::new();
    for (si, &ch) in spec.stage_channels.iter().enumerate() {
        if ih % 2 != 0 || iw % 2 != 0 {
            return Err(NxnError::RejectedConfig(format!(
                "stage {si} needs even spatial dims, got {ih}x{iw}"
            )));
        }
        let lift = Conv2dOp::random(c, ch, 1, Padding::Zero, ih, iw, &mut rng);
        let lift_id = add_normalized_op(&mut params, format!("stage{si}.lift.weight"), OpKind::Conv(lift), &mut rng)?;
        ih /= 2;
        iw /= 2;
        c = ch;
        let mut blocks = Vec::new();
        for bi in 0..spec.blocks_per_stage {
            let op = OpKind::Conv(Conv2dOp::random(ch, ch, 3, Padding::Zero, ih, iw, &mut rng));
            let bias = random_bias(ch, ch * 9, &mut rng);
            match spec.family {
                Family::NonExpansive => {
                    let op_id = add_normalized_op(
                        &mut params,
                        format!("stage{si}.block{bi}.weight"),
                        op,
                        &mut rng,
                    )?;
                    let bias_id = params.add_vec(format!("stage{si}.block{bi}.bias"), bias);
                    blocks.push(BlockDef::Ode(OdeDef {
                        op: op_id,
                        bias: bias_id,
                        h,
                        budget: spec.budget,
                    }));
                }
                Family::Baseline => {
                    let b_op = OpKind::Conv(Conv2dOp::random(ch, ch, 3, Padding::Zero, ih, iw, &mut rng));
                    let a_id = add_raw_op(&mut params, format!("stage{si}.block{bi}.weight"), op, &mut rng)?;
                    let b_id = add_raw_op(&mut params, format!("stage{si}.block{bi}.bweight"), b_op, &mut rng)?;
                    let bias_id = params.add_vec(format!("stage{si}.block{bi}.bias"), bias);
                    blocks.push(BlockDef::Res(ResDef { a: a_id, b: b_id, bias: bias_id }));
                }
            }
        }
        stages.push(Stage { lift: lift_id, blocks });
    }
    let final_w = add_normalized_op(
        &mut params,
        "final.weight".into(),
        OpKind::Dense(random_dense(spec.n_classes, c, &mut rng)),
        &mut rng,
    )?;
    let final_b = params.add_vec("final.bias", vec![0.0; spec.n_classes]);
    Ok(ClassifierNet {
        input: spec.input,
        stages,
        final_w,
        final_b,
        n_classes: spec.n_classes,
        tableau,
        radius,
        act: spec.act,
        params,
    })
}
