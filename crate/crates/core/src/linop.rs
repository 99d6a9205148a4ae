//! Linear operators with adjoints and spectral-norm machinery.
//!
//! Two concrete forms cover the whole artifact: dense matrices and 2D
//! multichannel convolutions (direct summation, zero or circular padding).
//! The operator norm is tracked two ways: an exact Jacobi-based oracle for
//! dense matrices, and warm-started power iteration for everything else.

use crate::eig::{sym_eigenvalues, SymMatrix};
use crate::error::{NxnError, Result};
use crate::rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Anything that maps R^in_dim -> R^out_dim linearly and exposes its adjoint.
pub trait LinearOperator {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn apply_adjoint(&self, y: &[f64]) -> Result<Vec<f64>>;
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseOp {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<f64>,
}

impl DenseOp {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(NxnError::dim(rows * cols, entries.len(), "dense entries"));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(NxnError::RejectedInput("non-finite dense entry".into()));
        }
        Ok(Self { rows, cols, entries })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.entries[i * n + i] = 1.0;
        }
        m
    }

    pub fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let entries = rng::gaussian_vec_new(rng, rows * cols);
        Self { rows, cols, entries }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    /// A scaled copy: apply(scaled(c), x) = c * apply(x).
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for v in out.entries.iter_mut() {
            *v *= c;
        }
        out
    }

    pub fn transposed(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.entries[j * self.rows + i] = self.get(i, j);
            }
        }
        out
    }
}

impl LinearOperator for DenseOp {
    fn in_dim(&self) -> usize {
        self.cols
    }

    fn out_dim(&self) -> usize {
        self.rows
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(NxnError::dim(self.cols, x.len(), "dense apply"));
        }
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = &self.entries[i * self.cols..(i + 1) * self.cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x.iter()) {
                acc += a * b;
            }
            out[i] = acc;
        }
        Ok(out)
    }

    fn apply_adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(NxnError::dim(self.rows, y.len(), "dense adjoint"));
        }
        let mut out = vec![0.0; self.cols];
        for j in 0..self.cols {
            let mut acc = 0.0;
            for i in 0..self.rows {
                acc += self.entries[i * self.cols + j] * y[i];
            }
            out[j] = acc;
        }
        Ok(out)
    }
}

/// Boundary handling for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Zero,
    Circular,
}

/// Same-size 2D convolution with an odd kernel, direct summation.
///
/// Kernel layout is [out_channels][in_channels][kh][kw], inputs and outputs
/// are [channels][height][width] flattened row-major. The adjoint is the
/// convolution with the spatially flipped, channel-transposed kernel under
/// the same padding, and is computed exactly that way.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dOp {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub kernel: Vec<f64>,
    pub padding: Padding,
    pub height: usize,
    pub width: usize,
}

impl Conv2dOp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kh: usize,
        kw: usize,
        kernel: Vec<f64>,
        padding: Padding,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(NxnError::RejectedInput("kernel sides must be odd".into()));
        }
        if kernel.len() != out_channels * in_channels * kh * kw {
            return Err(NxnError::dim(
                out_channels * in_channels * kh * kw,
                kernel.len(),
                "conv kernel",
            ));
        }
        if kernel.iter().any(|v| !v.is_finite()) {
            return Err(NxnError::RejectedInput("non-finite kernel entry".into()));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kh,
            kw,
            kernel,
            padding,
            height,
            width,
        })
    }

    pub fn random(
        in_channels: usize,
        out_channels: usize,
        k: usize,
        padding: Padding,
        height: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // Uniform in +-1/sqrt(fan_in), the usual conv default.
        let fan_in = (in_channels * k * k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let kernel = (0..out_channels * in_channels * k * k)
            .map(|_| rng::uniform_in(rng, -bound, bound))
            .collect();
        Self {
            in_channels,
            out_channels,
            kh: k,
            kw: k,
            kernel,
            padding,
            height,
            width,
        }
    }

    #[inline]
    fn kidx(&self, oc: usize, ic: usize, dy: usize, dx: usize) -> usize {
        ((oc * self.in_channels + ic) * self.kh + dy) * self.kw + dx
    }

    /// Kernel with spatial flip and channel transpose; convolving with it
    /// (same padding) is the exact adjoint.
    pub fn adjoint_kernel(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.kernel.len()];
        for oc in 0..self.out_channels {
            for ic in 0..self.in_channels {
                for dy in 0..self.kh {
                    for dx in 0..self.kw {
                        let src = self.kidx(oc, ic, dy, dx);
                        let dst = ((ic * self.out_channels + oc) * self.kh
                            + (self.kh - 1 - dy))
                            * self.kw
                            + (self.kw - 1 - dx);
                        out[dst] = self.kernel[src];
                    }
                }
            }
        }
        out
    }

    /// The adjoint as a first-class operator (swapped channel counts).
    pub fn adjoint_op(&self) -> Conv2dOp {
        Conv2dOp {
            in_channels: self.out_channels,
            out_channels: self.in_channels,
            kh: self.kh,
            kw: self.kw,
            kernel: self.adjoint_kernel(),
            padding: self.padding,
            height: self.height,
            width: self.width,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for v in out.kernel.iter_mut() {
            *v *= c;
        }
        out
    }

    /// Same kernel on a different spatial grid.
    pub fn with_shape(&self, height: usize, width: usize) -> Self {
        let mut out = self.clone();
        out.height = height;
        out.width = width;
        out
    }

    /// Exact operator norm for circular padding: the convolution
    /// diagonalizes over spatial frequencies, leaving one small
    /// channel-mixing matrix per frequency whose largest singular value is
    /// computed by the Jacobi oracle.
    pub fn circular_norm_exact(&self) -> Result<f64> {
        if self.padding != Padding::Circular {
            return Err(NxnError::RejectedInput(
                "exact frequency-response norm requires circular padding".into(),
            ));
        }
        let (h, w) = (self.height as isize, self.width as isize);
        let py = (self.kh / 2) as isize;
        let px = (self.kw / 2) as isize;
        let mut best = 0.0f64;
        for fy in 0..self.height {
            for fx in 0..self.width {
                let wy = 2.0 * std::f64::consts::PI * fy as f64 / h as f64;
                let wx = 2.0 * std::f64::consts::PI * fx as f64 / w as f64;
                // Frequency response matrix G in C^{oc x ic}.
                let oc_n = self.out_channels;
                let ic_n = self.in_channels;
                let mut re = vec![0.0; oc_n * ic_n];
                let mut im = vec![0.0; oc_n * ic_n];
                for oc in 0..oc_n {
                    for ic in 0..ic_n {
                        let mut ar = 0.0;
                        let mut ai = 0.0;
                        for dy in 0..self.kh {
                            for dx in 0..self.kw {
                                let k = self.kernel[self.kidx(oc, ic, dy, dx)];
                                let sy = dy as isize - py;
                                let sx = dx as isize - px;
                                let phase = -(wy * sy as f64 + wx * sx as f64);
                                ar += k * phase.cos();
                                ai += k * phase.sin();
                            }
                        }
                        re[oc * ic_n + ic] = ar;
                        im[oc * ic_n + ic] = ai;
                    }
                }
                // Largest singular value of G = sqrt(lambda_max(G^H G));
                // G^H G is Hermitian, embed into a real symmetric matrix
                // [[Re, -Im],[Im, Re]] of twice the size.
                let n = ic_n;
                let mut hr = vec![0.0; n * n];
                let mut hi = vec![0.0; n * n];
                for a in 0..n {
                    for b in 0..n {
                        let mut sr = 0.0;
                        let mut si = 0.0;
                        for o in 0..oc_n {
                            let (gra, gia) = (re[o * n + a], im[o * n + a]);
                            let (grb, gib) = (re[o * n + b], im[o * n + b]);
                            // conj(G[o,a]) * G[o,b]
                            sr += gra * grb + gia * gib;
                            si += gra * gib - gia * grb;
                        }
                        hr[a * n + b] = sr;
                        hi[a * n + b] = si;
                    }
                }
                let mut emb = SymMatrix::zeros(2 * n);
                for a in 0..n {
                    for b in 0..n {
                        emb.set(a, b, hr[a * n + b]);
                        emb.set(a, b + n, -hi[a * n + b]);
                        emb.set(a + n, b, hi[a * n + b]);
                        emb.set(a + n, b + n, hr[a * n + b]);
                    }
                }
                let eigs = sym_eigenvalues(&emb)?;
                let lmax = eigs.last().copied().unwrap_or(0.0).max(0.0);
                best = best.max(lmax.sqrt());
            }
        }
        Ok(best)
    }
}

fn conv_forward(
    kernel: &[f64],
    in_c: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    padding: Padding,
    h: usize,
    w: usize,
    x: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; out_c * h * w];
    let py = (kh / 2) as isize;
    let px = (kw / 2) as isize;
    let (hi, wi) = (h as isize, w as isize);
    for oc in 0..out_c {
        let obase = oc * h * w;
        for ic in 0..in_c {
            let ibase = ic * h * w;
            for dy in 0..kh {
                for dx in 0..kw {
                    let k = kernel[((oc * in_c + ic) * kh + dy) * kw + dx];
                    if k == 0.0 {
                        continue;
                    }
                    let sy = dy as isize - py;
                    let sx = dx as isize - px;
                    match padding {
                        Padding::Zero => {
                            let y0 = (-sy).max(0);
                            let y1 = (hi - sy).min(hi);
                            let x0 = ((-sx).max(0)) as usize;
                            let x1 = ((wi - sx).min(wi)) as usize;
                            if x0 >= x1 {
                                continue;
                            }
                            for y in y0..y1 {
                                let orow = obase + (y as usize) * w;
                                let irow = ibase + ((y + sy) as usize) * w;
                                let src0 = (irow as isize + sx) as usize;
                                let dst = &mut out[orow + x0..orow + x1];
                                let src = &x[src0 + x0..src0 + x1];
                                for (d, s) in dst.iter_mut().zip(src.iter()) {
                                    *d += k * s;
                                }
                            }
                        }
                        Padding::Circular => {
                            for y in 0..hi {
                                let yy = (y + sy).rem_euclid(hi) as usize;
                                let orow = obase + (y as usize) * w;
                                let irow = ibase + yy * w;
                                for x_ in 0..wi {
                                    let xx = (x_ + sx).rem_euclid(wi) as usize;
                                    out[orow + x_ as usize] += k * x[irow + xx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

impl LinearOperator for Conv2dOp {
    fn in_dim(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_dim(&self) -> usize {
        self.out_channels * self.height * self.width
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(NxnError::dim(self.in_dim(), x.len(), "conv apply"));
        }
        Ok(conv_forward(
            &self.kernel,
            self.in_channels,
            self.out_channels,
            self.kh,
            self.kw,
            self.padding,
            self.height,
            self.width,
            x,
        ))
    }

    fn apply_adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.out_dim() {
            return Err(NxnError::dim(self.out_dim(), y.len(), "conv adjoint"));
        }
        Ok(conv_forward(
            &self.adjoint_kernel(),
            self.out_channels,
            self.in_channels,
            self.kh,
            self.kw,
            self.padding,
            self.height,
            self.width,
            y,
        ))
    }
}

/// Gradient of <g, K x> with respect to the kernel of K, given the domain
/// side value x and the codomain side cotangent g. Shares index conventions
/// with `conv_forward`.
#[allow(clippy::too_many_arguments)]
pub fn conv_kernel_grad(
    op: &Conv2dOp,
    x: &[f64],
    g: &[f64],
    grad: &mut [f64],
) {
    let (h, w) = (op.height, op.width);
    let py = (op.kh / 2) as isize;
    let px = (op.kw / 2) as isize;
    let (hi, wi) = (h as isize, w as isize);
    for oc in 0..op.out_channels {
        let obase = oc * h * w;
        for ic in 0..op.in_channels {
            let ibase = ic * h * w;
            for dy in 0..op.kh {
                for dx in 0..op.kw {
                    let sy = dy as isize - py;
                    let sx = dx as isize - px;
                    let mut acc = 0.0;
                    match op.padding {
                        Padding::Zero => {
                            let y0 = (-sy).max(0);
                            let y1 = (hi - sy).min(hi);
                            let x0 = ((-sx).max(0)) as usize;
                            let x1 = ((wi - sx).min(wi)) as usize;
                            if x0 >= x1 {
                                continue;
                            }
                            for y in y0..y1 {
                                let orow = obase + (y as usize) * w;
                                let irow = ibase + ((y + sy) as usize) * w;
                                let src0 = (irow as isize + sx) as usize;
                                let gs = &g[orow + x0..orow + x1];
                                let xs = &x[src0 + x0..src0 + x1];
                                for (a, b) in gs.iter().zip(xs.iter()) {
                                    acc += a * b;
                                }
                            }
                        }
                        Padding::Circular => {
                            for y in 0..hi {
                                let yy = (y + sy).rem_euclid(hi) as usize;
                                let orow = obase + (y as usize) * w;
                                let irow = ibase + yy * w;
                                for x_ in 0..wi {
                                    let xx = (x_ + sx).rem_euclid(wi) as usize;
                                    acc += g[orow + x_ as usize] * x[irow + xx];
                                }
                            }
                        }
                    }
                    grad[op.kidx(oc, ic, dy, dx)] += acc;
                }
            }
        }
    }
}

/// Gradient of <g, A x> with respect to the entries of A.
pub fn dense_kernel_grad(op: &DenseOp, x: &[f64], g: &[f64], grad: &mut [f64]) {
    for i in 0..op.rows {
        let gi = g[i];
        if gi == 0.0 {
            continue;
        }
        let row = &mut grad[i * op.cols..(i + 1) * op.cols];
        for (dst, &xj) in row.iter_mut().zip(x.iter()) {
            *dst += gi * xj;
        }
    }
}

/// Either concrete operator form, so parameter stores stay uniform.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Dense(DenseOp),
    Conv(Conv2dOp),
}

impl OpKind {
    pub fn entries(&self) -> &[f64] {
        match self {
            OpKind::Dense(d) => &d.entries,
            OpKind::Conv(c) => &c.kernel,
        }
    }

    pub fn entries_mut(&mut self) -> &mut [f64] {
        match self {
            OpKind::Dense(d) => &mut d.entries,
            OpKind::Conv(c) => &mut c.kernel,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            OpKind::Dense(d) => vec![d.rows, d.cols],
            OpKind::Conv(c) => vec![c.out_channels, c.in_channels, c.kh, c.kw],
        }
    }

    pub fn scaled(&self, c: f64) -> OpKind {
        match self {
            OpKind::Dense(d) => OpKind::Dense(d.scaled(c)),
            OpKind::Conv(k) => OpKind::Conv(k.scaled(c)),
        }
    }

    /// Exact norm where the structure allows it: dense via the Jacobi
    /// oracle, 1x1 convolutions via their channel matrix, circular
    /// convolutions via the frequency response.
    pub fn exact_norm(&self) -> Option<f64> {
        match self {
            OpKind::Dense(d) => spectral_norm_exact(d).ok(),
            OpKind::Conv(c) => {
                if c.kh == 1 && c.kw == 1 {
                    let m = DenseOp::new(
                        c.out_channels,
                        c.in_channels,
                        c.kernel.clone(),
                    )
                    .ok()?;
                    spectral_norm_exact(&m).ok()
                } else if c.padding == Padding::Circular {
                    c.circular_norm_exact().ok()
                } else {
                    None
                }
            }
        }
    }
}

impl LinearOperator for OpKind {
    fn in_dim(&self) -> usize {
        match self {
            OpKind::Dense(d) => d.in_dim(),
            OpKind::Conv(c) => c.in_dim(),
        }
    }

    fn out_dim(&self) -> usize {
        match self {
            OpKind::Dense(d) => d.out_dim(),
            OpKind::Conv(c) => c.out_dim(),
        }
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            OpKind::Dense(d) => d.apply(x),
            OpKind::Conv(c) => c.apply(x),
        }
    }

    fn apply_adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        match self {
            OpKind::Dense(d) => d.apply_adjoint(y),
            OpKind::Conv(c) => c.apply_adjoint(y),
        }
    }
}

/// Power-method state: u in the domain, v in the codomain, sigma the
/// current Rayleigh estimate <v, A u> of the operator norm.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub sigma: f64,
}

impl SpectralState {
    /// Random unit start vectors.
    pub fn random(op: &impl LinearOperator, rng: &mut ChaCha8Rng) -> Self {
        let mut u = rng::gaussian_vec_new(rng, op.in_dim());
        let mut v = rng::gaussian_vec_new(rng, op.out_dim());
        normalize(&mut u);
        normalize(&mut v);
        Self { u, v, sigma: 0.0 }
    }
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        for a in x.iter_mut() {
            *a /= n;
        }
    }
    n
}

/// Alternating power iteration u <- A^T v / |A^T v|, v <- A u / |A u|.
/// If an intermediate image has norm below 1e-30 (zero operator), the state
/// is returned unchanged with sigma = 0.
pub fn power_iterate(
    op: &impl LinearOperator,
    state: &SpectralState,
    iters: usize,
) -> Result<SpectralState> {
    if state.u.len() != op.in_dim() {
        return Err(NxnError::dim(op.in_dim(), state.u.len(), "power u"));
    }
    if state.v.len() != op.out_dim() {
        return Err(NxnError::dim(op.out_dim(), state.v.len(), "power v"));
    }
    if iters == 0 {
        return Err(NxnError::RejectedInput("power iteration needs iters >= 1".into()));
    }
    let mut u = state.u.clone();
    let mut v = state.v.clone();
    for _ in 0..iters {
        let mut nu = op.apply_adjoint(&v)?;
        if normalize(&mut nu) < 1e-30 {
            return Ok(SpectralState {
                u: state.u.clone(),
                v: state.v.clone(),
                sigma: 0.0,
            });
        }
        let mut nv = op.apply(&nu)?;
        if normalize(&mut nv) < 1e-30 {
            return Ok(SpectralState {
                u: state.u.clone(),
                v: state.v.clone(),
                sigma: 0.0,
            });
        }
        u = nu;
        v = nv;
    }
    let au = op.apply(&u)?;
    let sigma = v.iter().zip(au.iter()).map(|(a, b)| a * b).sum();
    Ok(SpectralState { u, v, sigma })
}

/// Largest singular value of a dense matrix: sqrt of the top eigenvalue of
/// A^T A (or A A^T, whichever is smaller), by cyclic Jacobi.
pub fn spectral_norm_exact(op: &DenseOp) -> Result<f64> {
    if op.rows > 256 || op.cols > 256 {
        return Err(NxnError::RejectedInput(
            "exact spectral norm limited to 256x256".into(),
        ));
    }
    if op.entries.iter().any(|v| !v.is_finite()) {
        return Err(NxnError::RejectedInput("non-finite dense entry".into()));
    }
    let (gram, n) = if op.cols <= op.rows {
        // A^T A
        let n = op.cols;
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0;
                for k in 0..op.rows {
                    acc += op.entries[k * n + i] * op.entries[k * n + j];
                }
                g[i * n + j] = acc;
                g[j * n + i] = acc;
            }
        }
        (g, n)
    } else {
        // A A^T
        let n = op.rows;
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let ri = &op.entries[i * op.cols..(i + 1) * op.cols];
                let rj = &op.entries[j * op.cols..(j + 1) * op.cols];
                let acc: f64 = ri.iter().zip(rj.iter()).map(|(a, b)| a * b).sum();
                g[i * n + j] = acc;
                g[j * n + i] = acc;
            }
        }
        (g, n)
    };
    let eigs = sym_eigenvalues(&SymMatrix::new(n, gram))?;
    Ok(eigs.last().copied().unwrap_or(0.0).max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
    }

    fn norm(a: &[f64]) -> f64 {
        dot(a, a).sqrt()
    }

    #[test]
    fn identity_apply() {
        let id = DenseOp::identity(3);
        assert_eq!(id.apply(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn permutation_apply() {
        let p = DenseOp::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(p.apply(&[5.0, 7.0]).unwrap(), vec![7.0, 5.0]);
    }

    #[test]
    fn dense_apply_matches_direct_summation_oracle() {
        let mut rng = stream(21, "dense-oracle", &[]);
        let a = DenseOp::random(8, 8, &mut rng);
        let x = rng::gaussian_vec_new(&mut rng, 8);
        let y = a.apply(&x).unwrap();
        // Independent direct summation in transposed order.
        let mut want = vec![0.0; 8];
        for j in 0..8 {
            for i in 0..8 {
                want[i] += a.get(i, j) * x[j];
            }
        }
        for i in 0..8 {
            let rel = (y[i] - want[i]).abs() / want[i].abs().max(1e-30);
            assert!(rel < 1e-14, "row {i}: {} vs {}", y[i], want[i]);
        }
    }

    #[test]
    fn adjoint_row_extraction() {
        let a = DenseOp::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(a.apply_adjoint(&[1.0, 0.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = DenseOp::identity(3);
        assert!(a.apply(&[1.0, 2.0]).is_err());
        assert!(a.apply_adjoint(&[1.0]).is_err());
    }

    #[test]
    fn identity_kernel_conv_adjoint_is_identity() {
        // 3x3 kernel with a single centered 1: conv is the identity, and so
        // is its adjoint.
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let c = Conv2dOp::new(1, 1, 3, 3, k, Padding::Zero, 4, 4).unwrap();
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        assert_eq!(c.apply(&x).unwrap(), x);
        assert_eq!(c.apply_adjoint(&x).unwrap(), x);
    }

    #[test]
    fn conv_adjoint_inner_product_identity() {
        let mut rng = stream(3, "conv-adj", &[]);
        for padding in [Padding::Zero, Padding::Circular] {
            let c = Conv2dOp::random(2, 3, 3, padding, 8, 8, &mut rng);
            let mut worst = 0.0f64;
            for _ in 0..100 {
                let x = rng::gaussian_vec_new(&mut rng, c.in_dim());
                let y = rng::gaussian_vec_new(&mut rng, c.out_dim());
                let ax = c.apply(&x).unwrap();
                let aty = c.apply_adjoint(&y).unwrap();
                let lhs = dot(&ax, &y);
                let rhs = dot(&x, &aty);
                let denom = (norm(&ax) * norm(&y)).max(1e-300);
                worst = worst.max((lhs - rhs).abs() / denom);
            }
            assert!(worst < 1e-12, "padding {padding:?}: worst {worst}");
        }
    }

    #[test]
    fn circular_adjoint_is_flipped_transposed_kernel_by_construction() {
        let mut rng = stream(4, "flip", &[]);
        let c = Conv2dOp::random(2, 2, 3, Padding::Circular, 6, 6, &mut rng);
        let adj = c.adjoint_op();
        let y = rng::gaussian_vec_new(&mut rng, c.out_dim());
        assert_eq!(c.apply_adjoint(&y).unwrap(), adj.apply(&y).unwrap());
    }

    #[test]
    fn power_diag_converges_to_top_singular_value() {
        let a = DenseOp::new(3, 3, vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0]).unwrap();
        let mut rng = stream(9, "power", &[]);
        let s0 = SpectralState::random(&a, &mut rng);
        let s = power_iterate(&a, &s0, 1000).unwrap();
        assert!((s.sigma - 3.0).abs() < 1e-9, "sigma {}", s.sigma);
    }

    #[test]
    fn power_identity_one_iteration() {
        let a = DenseOp::identity(5);
        let mut rng = stream(10, "power-id", &[]);
        let s0 = SpectralState::random(&a, &mut rng);
        let s = power_iterate(&a, &s0, 1).unwrap();
        assert!((s.sigma - 1.0).abs() < 1e-12);
    }

    #[test]
    fn power_zero_operator_returns_zero_sigma() {
        let a = DenseOp::zeros(4, 4);
        let mut rng = stream(11, "power-zero", &[]);
        let s0 = SpectralState::random(&a, &mut rng);
        let s = power_iterate(&a, &s0, 10).unwrap();
        assert_eq!(s.sigma, 0.0);
        assert_eq!(s.u, s0.u);
        assert_eq!(s.v, s0.v);
    }

    #[test]
    fn power_matches_exact_oracle_on_random_dense() {
        let mut rng = stream(12, "power-exact", &[]);
        let a = DenseOp::random(16, 16, &mut rng);
        let s0 = SpectralState::random(&a, &mut rng);
        let s = power_iterate(&a, &s0, 1000).unwrap();
        let exact = spectral_norm_exact(&a).unwrap();
        assert!((s.sigma - exact).abs() / exact < 1e-6, "{} vs {exact}", s.sigma);
    }

    #[test]
    fn power_rayleigh_is_monotone() {
        let mut rng = stream(13, "power-mono", &[]);
        let a = DenseOp::random(12, 12, &mut rng);
        let mut state = SpectralState::random(&a, &mut rng);
        state = power_iterate(&a, &state, 1).unwrap();
        let mut prev = state.sigma;
        for _ in 0..30 {
            state = power_iterate(&a, &state, 1).unwrap();
            assert!(state.sigma >= prev - 1e-12, "{} < {prev}", state.sigma);
            prev = state.sigma;
        }
    }

    #[test]
    fn exact_norm_diagonal() {
        let a = DenseOp::new(2, 2, vec![3.0, 0.0, 0.0, 4.0]).unwrap();
        assert!((spectral_norm_exact(&a).unwrap() - 4.0).abs() < 1e-13);
    }

    #[test]
    fn exact_norm_nilpotent_shift() {
        let a = DenseOp::new(2, 2, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((spectral_norm_exact(&a).unwrap() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn exact_norm_golden_value() {
        // A = [[1,1],[0,1]]: A^T A has characteristic polynomial
        // l^2 - 3 l + 1, so the top eigenvalue is (3 + sqrt 5)/2 and the
        // norm is its square root (the golden ratio).
        let a = DenseOp::new(2, 2, vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let got = spectral_norm_exact(&a).unwrap();
        let want = ((3.0 + 5.0f64.sqrt()) / 2.0).sqrt();
        assert!((got - want).abs() < 1e-13, "{got} vs {want}");
        assert!((want - (1.0 + 5.0f64.sqrt()) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn exact_norm_rejects_non_finite() {
        let a = DenseOp {
            rows: 1,
            cols: 1,
            entries: vec![f64::NAN],
        };
        assert!(spectral_norm_exact(&a).is_err());
    }

    #[test]
    fn scale_by_half_and_zero() {
        let id = DenseOp::identity(2);
        let h = id.scaled(0.5);
        assert_eq!(h.apply(&[2.0, 2.0]).unwrap(), vec![1.0, 1.0]);
        let z = id.scaled(0.0);
        assert_eq!(z.apply(&[2.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn scale_to_unit_norm() {
        let mut rng = stream(14, "scale-unit", &[]);
        let a = DenseOp::random(10, 6, &mut rng);
        let sigma = spectral_norm_exact(&a).unwrap();
        let unit = a.scaled(1.0 / sigma);
        let got = spectral_norm_exact(&unit).unwrap();
        assert!((got - 1.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn circular_norm_matches_power_method() {
        let mut rng = stream(15, "circ-norm", &[]);
        let c = Conv2dOp::random(2, 2, 3, Padding::Circular, 8, 8, &mut rng);
        let exact = c.circular_norm_exact().unwrap();
        let s0 = SpectralState::random(&c, &mut rng);
        let s = power_iterate(&c, &s0, 2000).unwrap();
        assert!(
            (s.sigma - exact).abs() / exact < 1e-6,
            "power {} vs frequency response {exact}",
            s.sigma
        );
    }

    #[test]
    fn one_by_one_conv_exact_norm_is_channel_matrix_norm() {
        let k = vec![1.0, 2.0, 3.0, 4.0]; // 2x2 channel matrix
        let c = Conv2dOp::new(2, 2, 1, 1, k.clone(), Padding::Zero, 4, 4).unwrap();
        let want = spectral_norm_exact(&DenseOp::new(2, 2, k).unwrap()).unwrap();
        let got = OpKind::Conv(c).exact_norm().unwrap();
        assert!((got - want).abs() < 1e-12);
    }
}
