//! Explicit Runge-Kutta tableaus and circle contractivity.
//!
//! The tableau (A, b, c) defines the integrator; the contractivity radius r
//! is the largest disk radius for which the stability function K stays in
//! the closed unit disk, obtained from the generalized eigenproblem on
//! Q = diag(b) A + A^T diag(b) - b b^T.

use crate::eig::{generalized_eigenvalues, SymMatrix};
use crate::error::{NxnError, Result};
use crate::rng;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableauName {
    Euler,
    Heun,
    Rk4,
}

impl TableauName {
    pub fn as_str(&self) -> &'static str {
        match self {
            TableauName::Euler => "euler",
            TableauName::Heun => "heun",
            TableauName::Rk4 => "rk4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(TableauName::Euler),
            "heun" => Ok(TableauName::Heun),
            "rk4" => Ok(TableauName::Rk4),
            other => Err(NxnError::UnsupportedTableau(other.into())),
        }
    }

    pub const ALL: [TableauName; 3] = [TableauName::Euler, TableauName::Heun, TableauName::Rk4];
}

/// An m-stage Runge-Kutta tableau. `a` is row-major m x m.
#[derive(Clone, Debug, PartialEq)]
pub struct RKTableau {
    pub m: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub radius: Option<f64>,
}

/// Contractivity radius: finite positive, or the infinite flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Radius {
    Finite(f64),
    Infinite,
}

impl Radius {
    pub fn finite(&self) -> Option<f64> {
        match self {
            Radius::Finite(r) => Some(*r),
            Radius::Infinite => None,
        }
    }
}

/// Generalized disk D(r) from the circle-contractivity definition.
#[derive(Clone, Copy, Debug)]
pub struct GeneralizedDisk {
    pub r: Radius,
}

impl GeneralizedDisk {
    pub fn contains(&self, z: Complex64) -> bool {
        match self.r {
            Radius::Infinite => z.re <= 0.0,
            Radius::Finite(r) => {
                if r >= 0.0 {
                    (z + Complex64::new(r, 0.0)).norm() <= r
                } else {
                    (z + Complex64::new(r, 0.0)).norm() >= -r
                }
            }
        }
    }
}

impl RKTableau {
    pub fn new(m: usize, a: Vec<f64>, b: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        if a.len() != m * m || b.len() != m || c.len() != m {
            return Err(NxnError::RejectedInput("tableau shape mismatch".into()));
        }
        let bsum: f64 = b.iter().sum();
        if (bsum - 1.0).abs() > 1e-12 {
            return Err(NxnError::UnsupportedTableau(format!(
                "weights must sum to 1, got {bsum}"
            )));
        }
        for (i, &ci) in c.iter().enumerate() {
            let row_sum: f64 = (0..m).map(|j| a[i * m + j]).sum();
            if (ci - row_sum).abs() > 1e-12 {
                return Err(NxnError::UnsupportedTableau(format!(
                    "abscissa c[{i}]={ci} does not match row sum {row_sum}"
                )));
            }
        }
        Ok(Self {
            m,
            a,
            b,
            c,
            radius: None,
        })
    }

    #[inline]
    pub fn a_at(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.m + j]
    }

    /// True when A is strictly lower triangular.
    pub fn is_explicit(&self) -> bool {
        for i in 0..self.m {
            for j in i..self.m {
                if self.a_at(i, j) != 0.0 {
                    return false;
                }
            }
        }
        true
    }

    /// Q = diag(b) A + A^T diag(b) - b b^T.
    pub fn q_matrix(&self) -> SymMatrix {
        let m = self.m;
        let mut q = SymMatrix::zeros(m);
        for i in 0..m {
            for j in 0..m {
                let v = self.b[i] * self.a_at(i, j) + self.a_at(j, i) * self.b[j]
                    - self.b[i] * self.b[j];
                q.set(i, j, v);
            }
        }
        q
    }

    /// The cached radius, computing it on first use.
    pub fn radius_or_compute(&mut self) -> Result<Radius> {
        if let Some(r) = self.radius {
            return Ok(Radius::Finite(r));
        }
        let r = contractivity_radius(self)?;
        if let Radius::Finite(v) = r {
            self.radius = Some(v);
        }
        Ok(r)
    }
}

/// The builtin tableaus used throughout: forward Euler, Heun, classical RK4.
pub fn builtin(name: TableauName) -> RKTableau {
    let mut t = match name {
        TableauName::Euler => RKTableau::new(1, vec![0.0], vec![1.0], vec![0.0]).unwrap(),
        TableauName::Heun => RKTableau::new(
            2,
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.5, 0.5],
            vec![0.0, 1.0],
        )
        .unwrap(),
        TableauName::Rk4 => RKTableau::new(
            4,
            vec![
                0.0, 0.0, 0.0, 0.0, //
                0.5, 0.0, 0.0, 0.0, //
                0.0, 0.5, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0,
            ],
            vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
            vec![0.0, 0.5, 0.5, 1.0],
        )
        .unwrap(),
    };
    t.radius = contractivity_radius(&t).ok().and_then(|r| r.finite());
    t
}

/// Optimal circle-contractivity radius r = -1/rho, where rho is the minimal
/// generalized eigenvalue of Q v = lambda diag(b) v. Requires positive
/// weights. rho = 0 (within 1e-12) maps to the infinite radius, which no
/// usable explicit method attains.
pub fn contractivity_radius(t: &RKTableau) -> Result<Radius> {
    if t.b.iter().any(|&bi| bi <= 0.0) {
        return Err(NxnError::UnsupportedTableau(
            "contractivity radius requires positive weights".into(),
        ));
    }
    let q = t.q_matrix();
    let eigs = generalized_eigenvalues(&q, &t.b)?;
    let rho = eigs[0];
    if rho.abs() <= 1e-12 {
        return Ok(Radius::Infinite);
    }
    Ok(Radius::Finite(-1.0 / rho))
}

/// Stability function K(zeta) = 1 + b^T diag(zeta) (I - A diag(zeta))^{-1} 1,
/// by forward substitution (explicit tableaus have unit lower-triangular
/// systems).
pub fn stability_k(t: &RKTableau, zeta: &[Complex64]) -> Result<Complex64> {
    if zeta.len() != t.m {
        return Err(NxnError::dim(t.m, zeta.len(), "stability multipliers"));
    }
    if !t.is_explicit() {
        return Err(NxnError::Singular(
            "stability function implemented for explicit tableaus".into(),
        ));
    }
    let m = t.m;
    // Solve (I - A diag(zeta)) w = 1.
    let mut w = vec![Complex64::new(0.0, 0.0); m];
    for i in 0..m {
        let mut acc = Complex64::new(1.0, 0.0);
        for j in 0..i {
            acc += Complex64::new(t.a_at(i, j), 0.0) * zeta[j] * w[j];
        }
        w[i] = acc;
    }
    let mut k = Complex64::new(1.0, 0.0);
    for i in 0..m {
        k += Complex64::new(t.b[i], 0.0) * zeta[i] * w[i];
    }
    Ok(k)
}

/// Monte-Carlo verification report for |K| <= 1 over D(r)^m.
#[derive(Clone, Debug)]
pub struct ContractivityReport {
    pub max_abs_k: f64,
    pub violations: usize,
    pub samples: usize,
}

/// Samples zeta uniformly (by area) on each disk |z + r| <= r and reports
/// the maximum |K| and the count of samples with |K| > 1 + 1e-12.
pub fn verify_contractive(
    t: &RKTableau,
    r: f64,
    samples: usize,
    seed: u64,
) -> Result<ContractivityReport> {
    if !(r.is_finite() && r > 0.0) {
        return Err(NxnError::RejectedInput("radius must be finite positive".into()));
    }
    if samples == 0 {
        return Err(NxnError::RejectedInput("need at least one sample".into()));
    }
    let mut rng = rng::stream(seed, "disk-samples", &[]);
    let mut max_abs_k = 0.0f64;
    let mut violations = 0usize;
    let mut zeta = vec![Complex64::new(0.0, 0.0); t.m];
    for _ in 0..samples {
        for z in zeta.iter_mut() {
            let rho = r * rng::uniform(&mut rng).sqrt();
            let ang = 2.0 * std::f64::consts::PI * rng::uniform(&mut rng);
            *z = Complex64::new(-r + rho * ang.cos(), rho * ang.sin());
        }
        let k = stability_k(t, &zeta)?.norm();
        if k > max_abs_k {
            max_abs_k = k;
        }
        if k > 1.0 + 1e-12 {
            violations += 1;
        }
    }
    Ok(ContractivityReport {
        max_abs_k,
        violations,
        samples,
    })
}

/// One explicit RK step of size h along an autonomous field.
pub fn rk_step<F>(t: &RKTableau, h: f64, y: &[f64], mut field: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if !t.is_explicit() {
        return Err(NxnError::UnsupportedTableau(
            "rk_step requires an explicit tableau".into(),
        ));
    }
    if h <= 0.0 {
        return Err(NxnError::RejectedInput("step size must be positive".into()));
    }
    let m = t.m;
    let mut ks: Vec<Vec<f64>> = Vec::with_capacity(m);
    for i in 0..m {
        let mut yi = y.to_vec();
        for j in 0..i {
            let w = h * t.a_at(i, j);
            if w != 0.0 {
                for (dst, &kv) in yi.iter_mut().zip(ks[j].iter()) {
                    *dst += w * kv;
                }
            }
        }
        let k = field(&yi)?;
        if k.iter().any(|v| !v.is_finite()) {
            return Err(NxnError::Divergence {
                context: format!("rk stage {i}"),
            });
        }
        ks.push(k);
    }
    let mut out = y.to_vec();
    for i in 0..m {
        let w = h * t.b[i];
        for (dst, &kv) in out.iter_mut().zip(ks[i].iter()) {
            *dst += w * kv;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_shapes_and_weights() {
        let e = builtin(TableauName::Euler);
        assert_eq!(e.m, 1);
        assert_eq!(e.b, vec![1.0]);
        let h = builtin(TableauName::Heun);
        assert_eq!(h.b, vec![0.5, 0.5]);
        assert_eq!(h.a_at(1, 0), 1.0);
        let r = builtin(TableauName::Rk4);
        assert_eq!(r.b, vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0]);
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert!(RKTableau::new(1, vec![0.0], vec![0.5], vec![0.0]).is_err());
    }

    #[test]
    fn euler_q_and_radius() {
        let e = builtin(TableauName::Euler);
        let q = e.q_matrix();
        assert_eq!(q.get(0, 0), -1.0);
        assert_eq!(contractivity_radius(&e).unwrap(), Radius::Finite(1.0));
    }

    #[test]
    fn heun_q_from_definition_and_radius() {
        // diag(b)A + A^T diag(b) - bb^T = (1/4) [[-1, 1], [1, -1]]; the
        // generalized eigenvalues against diag(b) are {-1, 0}, so r = 1.
        let h = builtin(TableauName::Heun);
        let q = h.q_matrix();
        assert!((q.get(0, 0) + 0.25).abs() < 1e-15);
        assert!((q.get(0, 1) - 0.25).abs() < 1e-15);
        assert!((q.get(1, 0) - 0.25).abs() < 1e-15);
        assert!((q.get(1, 1) + 0.25).abs() < 1e-15);
        let r = contractivity_radius(&h).unwrap().finite().unwrap();
        assert!((r - 1.0).abs() < 1e-12, "heun radius {r}");
    }

    #[test]
    fn rk4_radius_is_one() {
        let t = builtin(TableauName::Rk4);
        let r = contractivity_radius(&t).unwrap().finite().unwrap();
        assert!((r - 1.0).abs() < 1e-9, "rk4 radius {r}");
    }

    #[test]
    fn nonpositive_weights_rejected_for_radius() {
        let t = RKTableau {
            m: 2,
            a: vec![0.0, 0.0, 1.0, 0.0],
            b: vec![1.5, -0.5],
            c: vec![0.0, 1.0],
            radius: None,
        };
        assert!(contractivity_radius(&t).is_err());
    }

    #[test]
    fn stability_euler_is_one_plus_z() {
        let e = builtin(TableauName::Euler);
        let z = Complex64::new(-0.3, 0.7);
        let k = stability_k(&e, &[z]).unwrap();
        assert!((k - (Complex64::new(1.0, 0.0) + z)).norm() < 1e-15);
    }

    #[test]
    fn stability_at_zero_is_one() {
        for name in TableauName::ALL {
            let t = builtin(name);
            let zeros = vec![Complex64::new(0.0, 0.0); t.m];
            let k = stability_k(&t, &zeros).unwrap();
            assert_eq!(k, Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn heun_stability_polynomial_on_diagonal() {
        // Equal multipliers collapse K to the classical stability polynomial
        // 1 + z + z^2/2; checked at z = -1 (value 1/2) and 10 samples.
        let h = builtin(TableauName::Heun);
        let at = |z: Complex64| stability_k(&h, &[z, z]).unwrap();
        let k = at(Complex64::new(-1.0, 0.0));
        assert!((k - Complex64::new(0.5, 0.0)).norm() < 1e-15);
        for i in 0..10 {
            let z = Complex64::new(-0.2 * i as f64, 0.13 * i as f64);
            let want = Complex64::new(1.0, 0.0) + z + z * z * 0.5;
            assert!((at(z) - want).norm() < 1e-13);
        }
    }

    #[test]
    fn rk4_stability_polynomial_on_diagonal() {
        let t = builtin(TableauName::Rk4);
        for i in 0..10 {
            let z = Complex64::new(0.1 * i as f64 - 0.5, 0.07 * i as f64);
            let zeta = vec![z; 4];
            let got = stability_k(&t, &zeta).unwrap();
            let want = Complex64::new(1.0, 0.0)
                + z
                + z * z / 2.0
                + z * z * z / 6.0
                + z * z * z * z / 24.0;
            assert!((got - want).norm() < 1e-13, "z={z}: {got} vs {want}");
        }
    }

    #[test]
    fn euler_verified_contractive_at_one_not_beyond() {
        let e = builtin(TableauName::Euler);
        let ok = verify_contractive(&e, 1.0, 20_000, 7).unwrap();
        assert_eq!(ok.violations, 0);
        assert!(ok.max_abs_k <= 1.0 + 1e-12);
        let bad = verify_contractive(&e, 1.5, 20_000, 7).unwrap();
        assert!(bad.violations > 0, "expected violations at r=1.5");
    }

    #[test]
    fn disk_membership_cases() {
        let d = GeneralizedDisk { r: Radius::Finite(1.0) };
        assert!(d.contains(Complex64::new(-1.0, 0.0)));
        assert!(d.contains(Complex64::new(0.0, 0.0)));
        assert!(!d.contains(Complex64::new(0.1, 0.0)));
        let inf = GeneralizedDisk { r: Radius::Infinite };
        assert!(inf.contains(Complex64::new(-5.0, 100.0)));
        assert!(!inf.contains(Complex64::new(0.5, 0.0)));
    }

    #[test]
    fn rk_step_scalar_decay() {
        let decay = |y: &[f64]| -> crate::error::Result<Vec<f64>> {
            Ok(y.iter().map(|v| -v).collect())
        };
        let e = builtin(TableauName::Euler);
        let y = rk_step(&e, 0.5, &[1.0], decay).unwrap();
        assert!((y[0] - 0.5).abs() < 1e-15);
        let h = builtin(TableauName::Heun);
        let y = rk_step(&h, 1.0, &[1.0], decay).unwrap();
        assert!((y[0] - 0.5).abs() < 1e-15);
        let r = builtin(TableauName::Rk4);
        let y = rk_step(&r, 1.0, &[1.0], decay).unwrap();
        assert!((y[0] - 0.375).abs() < 1e-15);
    }

    #[test]
    fn rk_step_order_sanity_against_exponential() {
        let growth = |y: &[f64]| -> crate::error::Result<Vec<f64>> { Ok(y.to_vec()) };
        let h = 0.01f64;
        let want = h.exp();
        let tols = [
            (TableauName::Euler, 1e-4),
            (TableauName::Heun, 1e-6),
            (TableauName::Rk4, 1e-10),
        ];
        for (name, tol) in tols {
            let t = builtin(name);
            let y = rk_step(&t, h, &[1.0], growth).unwrap();
            let rel = (y[0] - want).abs() / want;
            assert!(rel < tol, "{name:?}: rel err {rel}");
        }
    }

    #[test]
    fn rk_step_reports_divergent_stage() {
        let blow = |_: &[f64]| -> crate::error::Result<Vec<f64>> { Ok(vec![f64::INFINITY]) };
        let e = builtin(TableauName::Euler);
        match rk_step(&e, 1.0, &[1.0], blow) {
            Err(NxnError::Divergence { context }) => assert!(context.contains("stage 0")),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
