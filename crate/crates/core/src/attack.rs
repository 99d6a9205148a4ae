//! l2-PGD adversarial attacks, robust-accuracy curves, and certified radii.
//!
//! The attack alternates normalized gradient ascent on the loss with
//! projection onto the epsilon-ball around the clean input. Evaluation uses
//! cross-entropy on the scores, as is standard; the certificate combines a
//! margin with a certified Lipschitz bound of the score map.

use crate::error::{NxnError, Result};
use crate::grad::Tape;
use crate::kernels;
use crate::par;
use crate::rng;
use crate::train::margin;

/// Loss driving the attack gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttackLoss {
    CrossEntropy,
    Hinge { mu: f64 },
}

#[derive(Clone, Debug)]
pub struct AttackConfig {
    pub eps: f64,
    pub n_iter: usize,
    /// Step size; None uses the 2.5 eps / n_iter schedule.
    pub tau: Option<f64>,
    pub loss: AttackLoss,
    pub seed: u64,
}

impl AttackConfig {
    pub fn step_size(&self) -> f64 {
        self.tau.unwrap_or(2.5 * self.eps / self.n_iter.max(1) as f64)
    }
}

/// Differentiable score model: the attack needs scores and the gradient of
/// a scalar loss with respect to the input.
pub trait ScoreModel: Sync {
    fn n_classes(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn scores(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// Returns (loss value, d loss / d input) at x for the given label.
    fn loss_input_grad(&self, x: &[f64], label: usize, loss: AttackLoss) -> Result<(f64, Vec<f64>)>;
}

impl ScoreModel for crate::arch::ClassifierNet {
    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn input_dim(&self) -> usize {
        let (c, h, w) = self.input;
        c * h * w
    }

    fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x)
    }

    fn loss_input_grad(&self, x: &[f64], label: usize, loss: AttackLoss) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new(&self.params);
        let xi = tape.input(x.to_vec());
        let scores = self.record(&mut tape, xi)?;
        let loss_var = match loss {
            AttackLoss::CrossEntropy => tape.softmax_ce(scores, label)?,
            AttackLoss::Hinge { mu } => {
                let n = self.n_classes;
                let mut acc = None;
                for k in 0..n {
                    if k == label {
                        continue;
                    }
                    let mut w = vec![0.0; n];
                    w[label] = 1.0;
                    w[k] = -1.0;
                    let t = tape.inner_const(scores, w);
                    let neg = tape.scale(-1.0, t);
                    let shifted = tape.add_const(mu, neg);
                    let term = tape.max_const(0.0, shifted);
                    acc = Some(match acc {
                        None => term,
                        Some(a) => tape.axpy(a, 1.0, term),
                    });
                }
                acc.expect("at least two classes")
            }
        };
        let value = tape.value(loss_var)[0];
        let grads = tape.backward_scalar(loss_var)?;
        let gx = grads
            .wrt(xi)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; x.len()]);
        Ok((value, gx))
    }
}

/// Projection onto the closed l2 ball of radius eps.
pub fn project_l2_ball(delta: &[f64], eps: f64) -> Vec<f64> {
    let n = kernels::norm2(delta);
    if n <= eps {
        return delta.to_vec();
    }
    kernels::scale(eps / n, delta)
}

/// Softmax cross-entropy on raw scores (max-subtraction stabilized).
pub fn cross_entropy(scores: &[f64], label: usize) -> f64 {
    kernels::softmax_ce(scores, label)
}

/// The l2-PGD attack: uniform initialization in the ball, then n_iter
/// normalized gradient steps, each followed by projection. A vanishing
/// gradient keeps the current perturbation and continues.
pub fn l2_pgd(model: &dyn ScoreModel, x: &[f64], label: usize, cfg: &AttackConfig) -> Result<Vec<f64>> {
    if cfg.eps < 0.0 {
        return Err(NxnError::RejectedConfig("attack radius must be nonnegative".into()));
    }
    if cfg.eps == 0.0 {
        return Ok(vec![0.0; x.len()]);
    }
    let tau = cfg.step_size();
    let mut init_rng = rng::stream(cfg.seed, "pgd-init", &[label as u64]);
    let mut delta = rng::uniform_in_ball(&mut init_rng, x.len(), cfg.eps);
    for _ in 0..cfg.n_iter {
        let xp = kernels::axpy(x, 1.0, &delta);
        let (_, g) = model.loss_input_grad(&xp, label, cfg.loss)?;
        let gn = kernels::norm2(&g);
        if gn < 1e-30 {
            continue;
        }
        delta = kernels::axpy(&delta, tau / gn, &g);
        delta = project_l2_ball(&delta, cfg.eps);
    }
    Ok(delta)
}

/// Robust accuracy over an epsilon grid plus its normalized AUC.
#[derive(Clone, Debug)]
pub struct RobustCurve {
    pub eps: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub auc: f64,
}

/// Per epsilon, the fraction of points still classified correctly under
/// l2-PGD; the AUC is the trapezoid integral divided by the grid span, i.e.
/// the average robust accuracy over the range.
pub fn robust_accuracy_curve(
    model: &dyn ScoreModel,
    dataset: &[(Vec<f64>, usize)],
    eps_grid: &[f64],
    cfg: &AttackConfig,
) -> Result<RobustCurve> {
    if eps_grid.is_empty() || eps_grid[0] != 0.0 {
        return Err(NxnError::RejectedInput("epsilon grid must start at 0".into()));
    }
    if eps_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(NxnError::RejectedInput("epsilon grid must be ascending".into()));
    }
    if dataset.is_empty() {
        return Err(NxnError::RejectedInput("empty evaluation set".into()));
    }
    let mut accuracy = Vec::with_capacity(eps_grid.len());
    for (ei, &eps) in eps_grid.iter().enumerate() {
        let correct: usize = if eps == 0.0 {
            let flags = par::map_indexed(dataset.len(), |i| {
                let (x, y) = &dataset[i];
                match model.scores(x) {
                    Ok(s) => usize::from(crate::arch::ClassifierNet::classify(&s) == *y),
                    Err(_) => 0,
                }
            });
            flags.iter().sum()
        } else {
            let flags = par::map_indexed(dataset.len(), |i| {
                let (x, y) = &dataset[i];
                let cfg_i = AttackConfig {
                    eps,
                    seed: cfg
                        .seed
                        .wrapping_mul(0x9e3779b97f4a7c15)
                        .wrapping_add((ei as u64) << 32 | i as u64),
                    ..cfg.clone()
                };
                match l2_pgd(model, x, *y, &cfg_i) {
                    Ok(delta) => {
                        let xp = kernels::axpy(x, 1.0, &delta);
                        match model.scores(&xp) {
                            Ok(s) => usize::from(crate::arch::ClassifierNet::classify(&s) == *y),
                            Err(_) => 0,
                        }
                    }
                    Err(_) => 0,
                }
            });
            flags.iter().sum()
        };
        accuracy.push(correct as f64 / dataset.len() as f64);
    }
    let auc = if eps_grid.len() == 1 {
        accuracy[0]
    } else {
        let span = eps_grid[eps_grid.len() - 1] - eps_grid[0];
        let mut area = 0.0;
        for i in 0..eps_grid.len() - 1 {
            area += 0.5 * (accuracy[i] + accuracy[i + 1]) * (eps_grid[i + 1] - eps_grid[i]);
        }
        area / span
    };
    Ok(RobustCurve { eps: eps_grid.to_vec(), accuracy, auc })
}

/// Certified radius from a margin and a certified Lipschitz bound L of the
/// score map: the pairwise score difference s_y - s_k is sqrt(2) L-Lipschitz
/// (|<e_y - e_k, ds>| <= sqrt(2) |ds|), so the prediction cannot change
/// within margin / (sqrt(2) L).
pub fn certified_radius(lipschitz_bound: f64, scores: &[f64], label: usize) -> f64 {
    let m = margin(scores, label);
    (m / (std::f64::consts::SQRT_2 * lipschitz_bound)).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct LinearBinary {
        w: Vec<f64>,
    }

    impl ScoreModel for LinearBinary {
        fn n_classes(&self) -> usize {
            2
        }

        fn input_dim(&self) -> usize {
            self.w.len()
        }

        fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
            let t = kernels::inner(&self.w, x);
            Ok(vec![t, -t])
        }

        fn loss_input_grad(&self, x: &[f64], label: usize, loss: AttackLoss) -> Result<(f64, Vec<f64>)> {
            let s = self.scores(x)?;
            match loss {
                AttackLoss::CrossEntropy => {
                    let p = kernels::softmax(&s);
                    let val = kernels::softmax_ce(&s, label);
                    // d/dx = sum_k (p_k - 1{k=y}) ds_k/dx; ds_0 = w, ds_1 = -w.
                    let coeff = (p[0] - if label == 0 { 1.0 } else { 0.0 })
                        - (p[1] - if label == 1 { 1.0 } else { 0.0 });
                    Ok((val, kernels::scale(coeff, &self.w)))
                }
                AttackLoss::Hinge { .. } => unreachable!("not used in tests"),
            }
        }
    }

    #[test]
    fn projection_cases() {
        assert_eq!(project_l2_ball(&[0.3, 0.4], 1.0), vec![0.3, 0.4]);
        let p = project_l2_ball(&[3.0, 4.0], 1.0);
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
        let pp = project_l2_ball(&p, 1.0);
        assert_eq!(p, pp);
    }

    #[test]
    fn cross_entropy_values() {
        let c = 7usize;
        let s = vec![1.3; c];
        assert!((cross_entropy(&s, 2) - (c as f64).ln()).abs() < 1e-12);
        let s = vec![1.0, 0.0];
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((cross_entropy(&s, 0) - want).abs() < 1e-12);
        let s = vec![1e4, 0.0];
        assert!(cross_entropy(&s, 0) < 1e-12);
    }

    #[test]
    fn pgd_zero_eps_is_noop() {
        let model = LinearBinary { w: vec![1.0, -2.0] };
        let cfg = AttackConfig { eps: 0.0, n_iter: 10, tau: None, loss: AttackLoss::CrossEntropy, seed: 1 };
        let d = l2_pgd(&model, &[0.5, 0.5], 0, &cfg).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
    }

    #[test]
    fn pgd_matches_linear_closed_form() {
        // For scores (w.x, -w.x) and label 0, the worst-case perturbation is
        // -eps w/|w|; with tau = eps the tangential error halves each step.
        let model = LinearBinary { w: vec![2.0, -1.0, 0.5] };
        let x = vec![0.4, 0.1, -0.2];
        let eps = 0.7;
        let cfg = AttackConfig { eps, n_iter: 100, tau: Some(eps), loss: AttackLoss::CrossEntropy, seed: 3 };
        let delta = l2_pgd(&model, &x, 0, &cfg).unwrap();
        assert!(kernels::norm2(&delta) <= eps + 1e-12);
        let wn = kernels::norm2(&model.w);
        let opt: Vec<f64> = kernels::scale(-eps / wn, &model.w);
        let xw = kernels::axpy(&x, 1.0, &delta);
        let xo = kernels::axpy(&x, 1.0, &opt);
        let got = cross_entropy(&model.scores(&xw).unwrap(), 0);
        let best = cross_entropy(&model.scores(&xo).unwrap(), 0);
        assert!(best - got < 1e-6, "pgd loss {got} vs optimal {best}");
    }

    #[test]
    fn pgd_perturbations_stay_feasible() {
        let model = LinearBinary { w: vec![1.0, 1.0] };
        for seed in 0..20 {
            let cfg = AttackConfig { eps: 0.5, n_iter: 7, tau: None, loss: AttackLoss::CrossEntropy, seed };
            let d = l2_pgd(&model, &[1.0, -1.0], 1, &cfg).unwrap();
            assert!(kernels::norm2(&d) <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn curve_boundary_and_auc() {
        let model = LinearBinary { w: vec![1.0, 0.0] };
        // Points at +-2 along the first axis, labelled by sign.
        let data: Vec<(Vec<f64>, usize)> = vec![
            (vec![2.0, 0.0], 0),
            (vec![-2.0, 0.0], 1),
            (vec![3.0, 1.0], 0),
            (vec![-3.0, -1.0], 1),
        ];
        let cfg = AttackConfig { eps: 0.0, n_iter: 30, tau: None, loss: AttackLoss::CrossEntropy, seed: 11 };
        let grid = vec![0.0, 1.0, 4.0];
        let curve = robust_accuracy_curve(&model, &data, &grid, &cfg).unwrap();
        assert_eq!(curve.accuracy[0], 1.0, "clean accuracy at eps 0");
        // eps 1 cannot cross the margin of 2; eps 4 flips everything.
        assert_eq!(curve.accuracy[1], 1.0);
        assert_eq!(curve.accuracy[2], 0.0);
        let want = (0.5 * (1.0 + 1.0) * 1.0 + 0.5 * (1.0 + 0.0) * 3.0) / 4.0;
        assert!((curve.auc - want).abs() < 1e-12);
        // Single-point grid reads as clean accuracy.
        let single = robust_accuracy_curve(&model, &data, &[0.0], &cfg).unwrap();
        assert_eq!(single.auc, 1.0);
    }

    #[test]
    fn constant_curve_auc_is_the_constant() {
        // Directly exercise the trapezoid: a model nobody can attack.
        let model = LinearBinary { w: vec![0.0, 0.0] };
        // Scores are always (0,0) -> argmax 0; label 0 everywhere gives
        // accuracy 1 at every eps... use labels half 0: accuracy 0.5.
        let data: Vec<(Vec<f64>, usize)> = vec![
            (vec![1.0, 0.0], 0),
            (vec![0.0, 1.0], 1),
            (vec![0.5, 0.5], 0),
            (vec![-0.5, 0.5], 1),
        ];
        let cfg = AttackConfig { eps: 0.0, n_iter: 5, tau: None, loss: AttackLoss::CrossEntropy, seed: 2 };
        let grid = vec![0.0, 0.5, 1.0, 2.0];
        let curve = robust_accuracy_curve(&model, &data, &grid, &cfg).unwrap();
        for a in &curve.accuracy {
            assert_eq!(*a, 0.5);
        }
        assert!((curve.auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn certified_radius_values() {
        assert_eq!(certified_radius(1.0, &[0.5, 0.5], 0), 0.0);
        let r = certified_radius(1.0, &[1.0, 0.0], 0);
        assert!((r - 1.0 / std::f64::consts::SQRT_2).abs() < 1e-15);
        assert_eq!(certified_radius(2.0, &[0.0, 1.0], 0), 0.0);
    }
}
