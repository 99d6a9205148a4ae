//! Losses, SGD with momentum, the triangular learning-rate schedule, and
//! the constrained training loops.
//!
//! Every optimizer step is followed by one warm-started power iteration per
//! operator, so the adaptive substep counts track the moving weights; after
//! training a 1000-iteration power run recertifies every block bound.

use crate::arch::{ClassifierNet, RecertRow, SeqNet};
use crate::attack::{l2_pgd, AttackConfig, AttackLoss};
use crate::data::{ClassifyData, DenoiseData};
use crate::error::{NxnError, Result};
use crate::grad::Tape;
use crate::kernels;
use crate::net::{ParamSet, ParamTensor};
use crate::rng;

/// Mean over the batch of squared Euclidean distances.
pub fn mse_loss(pred: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(NxnError::dim(target.len(), pred.len(), "mse batch"));
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target.iter()) {
        if p.len() != t.len() {
            return Err(NxnError::dim(t.len(), p.len(), "mse sample"));
        }
        let d = kernels::sub(p, t);
        total += kernels::inner(&d, &d);
    }
    Ok(total / pred.len() as f64)
}

/// Multi-class hinge: sum over k != y of max(0, mu - (s_y - s_k)),
/// averaged over the batch.
pub fn hinge_loss(scores: &[Vec<f64>], labels: &[usize], mu: f64) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(NxnError::dim(labels.len(), scores.len(), "hinge batch"));
    }
    if mu <= 0.0 {
        return Err(NxnError::RejectedInput("hinge margin must be positive".into()));
    }
    let mut total = 0.0;
    for (s, &y) in scores.iter().zip(labels.iter()) {
        if y >= s.len() {
            return Err(NxnError::RejectedInput(format!("label {y} out of range")));
        }
        for k in 0..s.len() {
            if k != y {
                total += (mu - (s[y] - s[k])).max(0.0);
            }
        }
    }
    Ok(total / scores.len() as f64)
}

/// Score of the true class minus the best rival; ties give 0.
pub fn margin(scores: &[f64], label: usize) -> f64 {
    let best_rival = scores
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != label)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    scores[label] - best_rival
}

/// Peak signal-to-noise ratio in dB; infinite when the estimate is exact.
pub fn psnr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(NxnError::dim(reference.len(), estimate.len(), "psnr"));
    }
    let peak = reference.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(NxnError::RejectedInput("psnr needs a nonzero reference".into()));
    }
    let mse: f64 = estimate
        .iter()
        .zip(reference.iter())
        .map(|(e, r)| (e - r) * (e - r))
        .sum::<f64>()
        / estimate.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// SGD hyperparameters; the run seed drives all stochastic choices.
#[derive(Clone, Debug)]
pub struct SgdConfig {
    pub iters: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NxnError::RejectedConfig("momentum must be in [0,1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(NxnError::RejectedConfig("weight decay must be nonnegative".into()));
        }
        if self.lr_min > self.lr_max {
            return Err(NxnError::RejectedConfig("lr_min must not exceed lr_max".into()));
        }
        if self.batch_size == 0 {
            return Err(NxnError::RejectedConfig("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Triangular schedule: lr_min -> lr_max over the first half, lr_max -> 0
/// over the second half.
pub fn lr_at(cfg: &SgdConfig, iter: usize) -> f64 {
    let t = iter as f64;
    let total = cfg.iters as f64;
    let half = total / 2.0;
    if t < half {
        cfg.lr_min + (cfg.lr_max - cfg.lr_min) * t / half
    } else {
        cfg.lr_max * (total - t) / (total - half)
    }
}

/// Momentum buffers aligned with the parameter tensors.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            velocity: (0..params.len()).map(|i| vec![0.0; params.data(i).len()]).collect(),
        }
    }
}

/// v <- momentum v + g + 2 lambda theta; theta <- theta - lr v; then one
/// warm-started power iteration per operator.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &[Option<Vec<f64>>],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for id in 0..params.len() {
        if let Some(g) = &grads[id] {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NxnError::Divergence {
                    context: format!("gradient of {}", params.name(id)),
                });
            }
        }
        let data = params.data_mut(id);
        let vel = &mut state.velocity[id];
        for (j, p) in data.iter_mut().enumerate() {
            let g = grads[id].as_ref().map_or(0.0, |g| g[j]);
            vel[j] = momentum * vel[j] + g + 2.0 * weight_decay * *p;
            *p -= lr * vel[j];
        }
    }
    params.power_refresh(1)
}

/// One metrics row; wall_ms is the only non-deterministic column.
#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub iter: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
    pub max_block_product: f64,
    pub total_substeps: usize,
    pub wall_ms: u128,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub metrics: Vec<MetricsRow>,
    pub recert: Vec<RecertRow>,
    pub best_val_loss: f64,
    pub diverged_at: Option<usize>,
}

const EVAL_EVERY: usize = 25;

fn accumulate_grads(acc: &mut [Option<Vec<f64>>], grads: &crate::grad::Gradients) {
    for (id, slot) in acc.iter_mut().enumerate() {
        if let Some(g) = grads.wrt_param(id) {
            match slot {
                Some(v) => {
                    for (d, s) in v.iter_mut().zip(g.iter()) {
                        *d += s;
                    }
                }
                None => *slot = Some(g.to_vec()),
            }
        }
    }
}

fn scale_grads(acc: &mut [Option<Vec<f64>>], c: f64) {
    for slot in acc.iter_mut().flatten() {
        for v in slot.iter_mut() {
            *v *= c;
        }
    }
}

fn snapshot(params: &ParamSet) -> Vec<(String, ParamTensor)> {
    params.tensors.clone()
}

/// Trains a denoiser on the synthetic set: minibatch, record, MSE,
/// backward, SGD step, warm power iteration; best-validation parameters are
/// restored at the end and every block bound is recertified.
pub fn train_denoiser(net: &mut SeqNet, data: &DenoiseData, cfg: &SgdConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let n_train = data.train.len();
    if n_train == 0 {
        return Err(NxnError::RejectedConfig("empty training set".into()));
    }
    let mut state = SgdState::new(&net.params);
    let mut metrics = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best = snapshot(&net.params);
    let mut diverged_at = None;
    let t0 = std::time::Instant::now();

    let eval_val = |net: &SeqNet| -> Result<(f64, f64)> {
        let mut loss = 0.0;
        let mut p = 0.0;
        for (i, clean) in data.val.iter().enumerate() {
            let noisy = data.noisy_val(i);
            let den = net.forward(&noisy)?;
            let d = kernels::sub(&den, clean);
            loss += kernels::inner(&d, &d);
            p += psnr(&den, clean)?;
        }
        let n = data.val.len().max(1) as f64;
        Ok((loss / n, p / n))
    };

    if cfg.iters == 0 {
        let (vl, vp) = eval_val(net)?;
        metrics.push(MetricsRow {
            iter: 0,
            lr: 0.0,
            train_loss: f64::NAN,
            val_loss: vl,
            val_metric: vp,
            max_block_product: net.max_block_product(),
            total_substeps: net.total_substeps(),
            wall_ms: t0.elapsed().as_millis(),
        });
        let recert = net.recertify()?;
        return Ok(TrainSummary { metrics, recert, best_val_loss: vl, diverged_at: None });
    }

    for iter in 0..cfg.iters {
        let lr = lr_at(cfg, iter);
        let mut batch_rng = rng::stream(cfg.seed, "minibatch", &[iter as u64]);
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; net.params.len()];
        let mut train_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let idx = (rng::uniform(&mut batch_rng) * n_train as f64) as usize;
            let idx = idx.min(n_train - 1);
            let noisy = data.noisy_train(iter as u64, idx);
            let clean = &data.train[idx];
            let mut tape = Tape::new(&net.params);
            let x = tape.input(noisy);
            let out = net.record(&mut tape, x)?;
            let target = tape.input(clean.clone());
            let d = tape.sub(out, target);
            let loss = tape.inner(d, d);
            train_loss += tape.value(loss)[0];
            let grads = tape.backward_scalar(loss)?;
            accumulate_grads(&mut acc, &grads);
        }
        train_loss /= cfg.batch_size as f64;
        scale_grads(&mut acc, 1.0 / cfg.batch_size as f64);
        if !train_loss.is_finite() {
            diverged_at = Some(iter);
            break;
        }
        sgd_step(&mut net.params, &acc, &mut state, lr, cfg.momentum, cfg.weight_decay)?;

        if iter % EVAL_EVERY == 0 || iter + 1 == cfg.iters {
            let (vl, vp) = eval_val(net)?;
            if vl < best_val {
                best_val = vl;
                best = snapshot(&net.params);
            }
            metrics.push(MetricsRow {
                iter,
                lr,
                train_loss,
                val_loss: vl,
                val_metric: vp,
                max_block_product: net.max_block_product(),
                total_substeps: net.total_substeps(),
                wall_ms: t0.elapsed().as_millis(),
            });
        }
    }

    net.params.tensors = best;
    let recert = net.recertify()?;
    Ok(TrainSummary { metrics, recert, best_val_loss: best_val, diverged_at })
}

/// Optional adversarial-training settings (perturbed minibatches).
#[derive(Clone, Copy, Debug)]
pub struct AdversarialCfg {
    pub eps: f64,
    pub pgd_iters: usize,
}

/// Trains the classifier with the multi-class hinge loss; with
/// `adversarial` set, each minibatch is replaced by l2-PGD perturbations
/// regenerated from the current weights.
pub fn train_classifier(
    net: &mut ClassifierNet,
    data: &ClassifyData,
    cfg: &SgdConfig,
    mu: f64,
    adversarial: Option<AdversarialCfg>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let n_train = data.train.len();
    if n_train == 0 {
        return Err(NxnError::RejectedConfig("empty training set".into()));
    }
    let n_classes = net.n_classes;
    let mut state = SgdState::new(&net.params);
    let mut metrics = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best = snapshot(&net.params);
    let mut diverged_at = None;
    let t0 = std::time::Instant::now();

    let eval_val = |net: &ClassifierNet| -> Result<(f64, f64)> {
        let mut scores = Vec::with_capacity(data.val.len());
        let mut labels = Vec::with_capacity(data.val.len());
        let mut correct = 0usize;
        for (x, y) in &data.val {
            let s = net.forward(x)?;
            if ClassifierNet::classify(&s) == *y {
                correct += 1;
            }
            scores.push(s);
            labels.push(*y);
        }
        let loss = hinge_loss(&scores, &labels, mu)?;
        Ok((loss, correct as f64 / data.val.len().max(1) as f64))
    };

    if cfg.iters == 0 {
        let (vl, va) = eval_val(net)?;
        let recert = net.recertify()?;
        return Ok(TrainSummary {
            metrics: vec![MetricsRow {
                iter: 0,
                lr: 0.0,
                train_loss: f64::NAN,
                val_loss: vl,
                val_metric: va,
                max_block_product: net.max_block_product(),
                total_substeps: net.total_substeps(),
                wall_ms: t0.elapsed().as_millis(),
            }],
            recert,
            best_val_loss: vl,
            diverged_at: None,
        });
    }

    for iter in 0..cfg.iters {
        let lr = lr_at(cfg, iter);
        let mut batch_rng = rng::stream(cfg.seed, "minibatch", &[iter as u64]);
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; net.params.len()];
        let mut train_loss = 0.0;
        for slot in 0..cfg.batch_size {
            let idx = (rng::uniform(&mut batch_rng) * n_train as f64) as usize;
            let idx = idx.min(n_train - 1);
            let (x0, y) = &data.train[idx];
            let x = match adversarial {
                Some(adv) => {
                    let atk = AttackConfig {
                        eps: adv.eps,
                        n_iter: adv.pgd_iters,
                        tau: None,
                        loss: AttackLoss::CrossEntropy,
                        seed: rng::fingerprint(&[
                            cfg.seed as f64,
                            iter as f64,
                            slot as f64,
                        ]),
                    };
                    let delta = l2_pgd(net, x0, *y, &atk)?;
                    kernels::axpy(x0, 1.0, &delta)
                }
                None => x0.clone(),
            };
            let mut tape = Tape::new(&net.params);
            let xi = tape.input(x);
            let scores = net.record(&mut tape, xi)?;
            // Hinge terms composed from inner products with e_y - e_k and
            // max-with-constant.
            let mut loss = None;
            for k in 0..n_classes {
                if k == *y {
                    continue;
                }
                let mut w = vec![0.0; n_classes];
                w[*y] = 1.0;
                w[k] = -1.0;
                let t = tape.inner_const(scores, w);
                let neg = tape.scale(-1.0, t);
                let shifted = tape.add_const(mu, neg);
                let term = tape.max_const(0.0, shifted);
                loss = Some(match loss {
                    None => term,
                    Some(acc_var) => tape.axpy(acc_var, 1.0, term),
                });
            }
            let loss = loss.expect("at least two classes");
            train_loss += tape.value(loss)[0];
            let grads = tape.backward_scalar(loss)?;
            accumulate_grads(&mut acc, &grads);
        }
        train_loss /= cfg.batch_size as f64;
        scale_grads(&mut acc, 1.0 / cfg.batch_size as f64);
        if !train_loss.is_finite() {
            diverged_at = Some(iter);
            break;
        }
        sgd_step(&mut net.params, &acc, &mut state, lr, cfg.momentum, cfg.weight_decay)?;

        if iter % EVAL_EVERY == 0 || iter + 1 == cfg.iters {
            let (vl, va) = eval_val(net)?;
            if vl < best_val {
                best_val = vl;
                best = snapshot(&net.params);
            }
            metrics.push(MetricsRow {
                iter,
                lr,
                train_loss,
                val_loss: vl,
                val_metric: va,
                max_block_product: net.max_block_product(),
                total_substeps: net.total_substeps(),
                wall_ms: t0.elapsed().as_millis(),
            });
        }
    }

    net.params.tensors = best;
    let recert = net.recertify()?;
    Ok(TrainSummary { metrics, recert, best_val_loss: best_val, diverged_at })
}

/// Mean test PSNR of the denoiser against the clean references, plus the
/// PSNR of the noisy inputs themselves.
pub fn denoiser_test_psnr(net: &SeqNet, data: &DenoiseData) -> Result<(f64, f64)> {
    let mut p_den = 0.0;
    let mut p_noisy = 0.0;
    for (i, clean) in data.test.iter().enumerate() {
        let noisy = data.noisy_test(i);
        let den = net.forward(&noisy)?;
        p_den += psnr(&den, clean)?;
        p_noisy += psnr(&noisy, clean)?;
    }
    let n = data.test.len().max(1) as f64;
    Ok((p_den / n, p_noisy / n))
}

/// Test accuracy of a classifier.
pub fn classifier_accuracy(net: &ClassifierNet, set: &[(Vec<f64>, usize)]) -> Result<f64> {
    let mut correct = 0usize;
    for (x, y) in set {
        if ClassifierNet::classify(&net.forward(x)?) == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        let a = vec![vec![1.0, 2.0, 3.0]];
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let b = vec![vec![0.0, 1.0, 2.0]];
        assert_eq!(mse_loss(&a, &b).unwrap(), 3.0);
        let bad = vec![vec![0.0; 2]];
        assert!(mse_loss(&a, &bad).is_err());
    }

    #[test]
    fn mse_matches_direct_summation() {
        let mut r = rng::stream(3, "mse", &[]);
        let pred: Vec<Vec<f64>> = (0..4).map(|_| rng::gaussian_vec_new(&mut r, 7)).collect();
        let target: Vec<Vec<f64>> = (0..4).map(|_| rng::gaussian_vec_new(&mut r, 7)).collect();
        let got = mse_loss(&pred, &target).unwrap();
        let mut want = 0.0;
        for (p, t) in pred.iter().zip(target.iter()) {
            for (a, b) in p.iter().zip(t.iter()) {
                want += (a - b) * (a - b);
            }
        }
        want /= 4.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn hinge_examples() {
        // All scores equal with ten classes: nine active hinges at mu.
        let s = vec![vec![0.0; 10]];
        assert!((hinge_loss(&s, &[0], 0.1).unwrap() - 0.9).abs() < 1e-12);
        // True class clears every rival by more than mu.
        let s = vec![vec![2.0, 0.0, 0.1]];
        assert_eq!(hinge_loss(&s, &[0], 0.1).unwrap(), 0.0);
        // Hand evaluation.
        let s = vec![vec![0.5, 0.3, 0.45]];
        assert!((hinge_loss(&s, &[0], 0.1).unwrap() - 0.05).abs() < 1e-12);
        assert!(hinge_loss(&s, &[7], 0.1).is_err());
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin(&[2.0, 1.0, 0.0], 0), 1.0);
        assert_eq!(margin(&[1.0, 1.0], 0), 0.0);
        assert!((margin(&[0.2, 0.9, 0.1], 0) + 0.7).abs() < 1e-12);
    }

    #[test]
    fn psnr_examples() {
        let r = vec![1.0, 0.5];
        assert!(psnr(&r, &r).unwrap().is_infinite());
        // max |ref| = 1, mse = 0.01 -> 20 dB.
        let est = vec![1.1, 0.6];
        let got = psnr(&est, &r).unwrap();
        assert!((got - 20.0).abs() < 1e-9, "{got}");
        assert!(psnr(&[0.0], &[0.0]).is_err());
    }

    #[test]
    fn psnr_scale_invariance() {
        let mut rr = rng::stream(4, "psnr", &[]);
        let a = rng::gaussian_vec_new(&mut rr, 32);
        let b = rng::gaussian_vec_new(&mut rr, 32);
        let p1 = psnr(&a, &b).unwrap();
        let a3: Vec<f64> = a.iter().map(|v| 3.0 * v).collect();
        let b3: Vec<f64> = b.iter().map(|v| 3.0 * v).collect();
        let p2 = psnr(&a3, &b3).unwrap();
        assert!((p1 - p2).abs() < 1e-12);
    }

    fn sched(iters: usize) -> SgdConfig {
        SgdConfig {
            iters,
            lr_min: 0.01,
            lr_max: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 1,
            seed: 0,
        }
    }

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = sched(100);
        assert_eq!(lr_at(&cfg, 0), 0.01);
        assert_eq!(lr_at(&cfg, 50), 0.1);
        let last = lr_at(&cfg, 99);
        assert!((last - 2.0 * 0.1 / 100.0).abs() < 1e-12, "{last}");
    }

    #[test]
    fn lr_schedule_integral() {
        let cfg = sched(2000);
        let total: f64 = (0..cfg.iters).map(|i| lr_at(&cfg, i)).sum();
        let want = (cfg.lr_min + cfg.lr_max) / 2.0 * cfg.iters as f64 / 2.0
            + cfg.lr_max * cfg.iters as f64 / 4.0;
        let rel = (total - want).abs() / want;
        assert!(rel < 0.01, "sum {total} want {want}");
    }

    #[test]
    fn sgd_zero_gradient_keeps_params() {
        let mut params = ParamSet::default();
        params.add_vec("w", vec![1.0, -2.0]);
        let mut state = SgdState::new(&params);
        let grads = vec![None];
        sgd_step(&mut params, &grads, &mut state, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(params.data(0), &[1.0, -2.0]);
    }

    #[test]
    fn sgd_plain_descent_step() {
        let mut params = ParamSet::default();
        params.add_vec("w", vec![1.0]);
        let mut state = SgdState::new(&params);
        let grads = vec![Some(vec![0.5])];
        sgd_step(&mut params, &grads, &mut state, 0.1, 0.0, 0.0).unwrap();
        assert!((params.data(0)[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_converges_on_quadratic() {
        // Minimize theta^2/2 (gradient = theta) with lr 0.1, momentum 0.9;
        // an independent scalar recurrence is the oracle. The iteration
        // matrix has spectral radius sqrt(0.9), so 200 steps put |theta|
        // well below 1e-3.
        let mut params = ParamSet::default();
        params.add_vec("w", vec![1.0]);
        let mut state = SgdState::new(&params);
        let mut theta_oracle = 1.0f64;
        let mut v_oracle = 0.0f64;
        for _ in 0..200 {
            let g = params.data(0)[0];
            sgd_step(&mut params, &[Some(vec![g])], &mut state, 0.1, 0.9, 0.0).unwrap();
            v_oracle = 0.9 * v_oracle + theta_oracle;
            theta_oracle -= 0.1 * v_oracle;
        }
        let got = params.data(0)[0];
        assert!((got - theta_oracle).abs() < 1e-12);
        assert!(got.abs() < 1e-3, "theta {got}");
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut params = ParamSet::default();
        params.add_vec("w", vec![1.0]);
        let mut state = SgdState::new(&params);
        let res = sgd_step(&mut params, &[Some(vec![f64::NAN])], &mut state, 0.1, 0.0, 0.0);
        assert!(res.is_err());
    }
}
