//! Soft locking: fine-tune so the model keeps its accuracy under the
//! authorized configuration and loses it under the unauthorized one.
//!
//! Loss: `L(f_auth(x), y) + λ (ε − L(f_unauth(x), y))²`, with masks or
//! quantizers recomputed from the current weights each step and gradients
//! passed straight through (pruned weights get no gradient from a branch).

use crate::dtype::Dtype;
use crate::tinynet::{apply_mask, fit, l1_mask, Dataset, Grads, NetError, Params, TinyNet, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// One deployment configuration of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Branch {
    /// Global L1-unstructured pruning of this fraction of weights.
    Prune { p: f64 },
    /// Fake quantization of every tensor.
    Quant { scheme: Dtype },
}

impl Branch {
    /// Effective parameters and the keep-mask for the gradient, if any.
    pub fn view(&self, net: &TinyNet) -> (Params, Option<crate::tinynet::Mask>) {
        match *self {
            Branch::Prune { p } => {
                let mask = l1_mask(&net.params.w, p);
                let mut eff = net.params.clone();
                apply_mask(&mut eff, &mask);
                (eff, Some(mask))
            }
            Branch::Quant { scheme } => (net.quantized(scheme), None),
        }
    }

    pub fn accuracy(&self, net: &TinyNet, data: &Dataset) -> f64 {
        let (eff, _) = self.view(net);
        net.accuracy_with(&eff, &data.test_x, &data.test_y)
    }

    /// Loss and straight-through gradient with respect to the raw weights.
    pub fn loss_and_grad(&self, net: &TinyNet, xs: &[f64], ys: &[usize]) -> (f64, Grads) {
        let (eff, mask) = self.view(net);
        let (loss, mut g) = net.loss_and_grad(&eff, xs, ys);
        if let Some(m) = mask {
            apply_mask(&mut g, &m);
        }
        (loss, g)
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Branch::Prune { p } => write!(f, "prune({p})"),
            Branch::Quant { scheme } => write!(f, "quant({scheme})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftLockConfig {
    pub authorized: Branch,
    pub unauthorized: Branch,
    pub lambda: f64,
    pub epsilon: f64,
    pub train: TrainConfig,
}

impl SoftLockConfig {
    pub const DEFAULT_LAMBDA: f64 = 1.0;
    pub const DEFAULT_EPSILON: f64 = 5.0;

    /// Fine-tuning schedule starting from a trained model.
    pub fn default_train(seed: u64) -> TrainConfig {
        TrainConfig { epochs: 10, lr: 0.001, ..TrainConfig::new(seed) }
    }

    pub fn sparsity(p1: f64, p2: f64, seed: u64) -> Self {
        SoftLockConfig {
            authorized: Branch::Prune { p: p1 },
            unauthorized: Branch::Prune { p: p2 },
            lambda: Self::DEFAULT_LAMBDA,
            epsilon: Self::DEFAULT_EPSILON,
            train: Self::default_train(seed),
        }
    }

    pub fn quant(authorized: Dtype, unauthorized: Dtype, seed: u64) -> Self {
        SoftLockConfig {
            authorized: Branch::Quant { scheme: authorized },
            unauthorized: Branch::Quant { scheme: unauthorized },
            ..Self::sparsity(0.0, 0.5, seed)
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::InvalidArgument(m));
        match (self.authorized, self.unauthorized) {
            (Branch::Prune { p: a }, Branch::Prune { p: b }) => {
                if a == b {
                    return bad(format!("p1 and p2 are both {a}"));
                }
                if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
                    return bad("pruning fractions must lie in [0, 1]".into());
                }
            }
            (Branch::Quant { scheme: a }, Branch::Quant { scheme: b }) => {
                if a.same_kind(&b) {
                    return bad(format!("authorized and unauthorized schemes are both {a}"));
                }
            }
            _ => return bad("authorized and unauthorized branches must be the same mode".into()),
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon {} must be positive", self.epsilon));
        }
        Ok(())
    }
}

/// Per-epoch accuracies recorded while training or attacking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub acc_auth: f64,
    pub acc_unauth: f64,
}

fn point(step: usize, net: &TinyNet, data: &Dataset, auth: &Branch, unauth: &Branch) -> CurvePoint {
    CurvePoint { step, acc_auth: auth.accuracy(net, data), acc_unauth: unauth.accuracy(net, data) }
}

/// Runs the two-branch locking loss. Sparsity and quantization locking
/// differ only in their branches.
pub fn soft_lock_train(
    net: &TinyNet,
    data: &Dataset,
    cfg: &SoftLockConfig,
) -> Result<(TinyNet, Vec<CurvePoint>), NetError> {
    cfg.validate()?;
    let (auth, unauth) = (cfg.authorized, cfg.unauthorized);
    let mut curve = vec![point(0, net, data, &auth, &unauth)];
    let locked = fit(
        net,
        data,
        &cfg.train,
        |n, x, y| {
            let (l1, mut g) = auth.loss_and_grad(n, x, y);
            if cfg.lambda == 0.0 {
                return (l1, g);
            }
            let (l2, g2) = unauth.loss_and_grad(n, x, y);
            let gap = cfg.epsilon - l2;
            g.axpy(-2.0 * cfg.lambda * gap, &g2);
            (l1 + cfg.lambda * gap * gap, g)
        },
        |epoch, n| curve.push(point(epoch, n, data, &auth, &unauth)),
    )?;
    Ok((locked, curve))
}

pub fn sparsity_lock_train(net: &TinyNet, data: &Dataset, cfg: &SoftLockConfig) -> Result<TinyNet, NetError> {
    if !matches!(cfg.authorized, Branch::Prune { .. }) {
        return Err(NetError::InvalidArgument("sparsity lock needs pruning branches".into()));
    }
    soft_lock_train(net, data, cfg).map(|r| r.0)
}

pub fn quant_lock_train(net: &TinyNet, data: &Dataset, cfg: &SoftLockConfig) -> Result<TinyNet, NetError> {
    if !matches!(cfg.authorized, Branch::Quant { .. }) {
        return Err(NetError::InvalidArgument("quantization lock needs quantization branches".into()));
    }
    soft_lock_train(net, data, cfg).map(|r| r.0)
}

/// Plain fine-tuning through one branch.
pub fn finetune(net: &TinyNet, data: &Dataset, branch: Branch, train: &TrainConfig) -> Result<TinyNet, NetError> {
    fit(net, data, train, |n, x, y| branch.loss_and_grad(n, x, y), |_, _| {})
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LockReport {
    pub acc_original: f64,
    pub acc_original_unauthorized: f64,
    pub acc_locked_authorized: f64,
    pub acc_locked_unauthorized: f64,
    pub delta_orig: f64,
    pub delta_lock: f64,
    pub delta_base: f64,
}

pub fn lock_metrics(original: &TinyNet, locked: &TinyNet, data: &Dataset, cfg: &SoftLockConfig) -> LockReport {
    let acc_original = cfg.authorized.accuracy(original, data);
    let acc_original_unauthorized = cfg.unauthorized.accuracy(original, data);
    let acc_locked_authorized = cfg.authorized.accuracy(locked, data);
    let acc_locked_unauthorized = cfg.unauthorized.accuracy(locked, data);
    LockReport {
        acc_original,
        acc_original_unauthorized,
        acc_locked_authorized,
        acc_locked_unauthorized,
        delta_orig: acc_original - acc_locked_authorized,
        delta_lock: acc_locked_authorized - acc_locked_unauthorized,
        delta_base: acc_original - acc_original_unauthorized,
    }
}

/// Fine-tunes the locked model through the unauthorized branch and records
/// accuracy after every epoch; point 0 is the locked model itself.
pub fn attack_retrain(
    locked: &TinyNet,
    data: &Dataset,
    authorized: Branch,
    unauthorized: Branch,
    train: &TrainConfig,
) -> Result<Vec<CurvePoint>, NetError> {
    let mut curve = vec![point(0, locked, data, &authorized, &unauthorized)];
    fit(
        locked,
        data,
        train,
        |n, x, y| unauthorized.loss_and_grad(n, x, y),
        |epoch, n| curve.push(point(epoch, n, data, &authorized, &unauthorized)),
    )?;
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub noise: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub trials: usize,
}

/// Adds zero-mean Gaussian noise with std `noise * std(tensor)` to every
/// tensor and measures accuracy under `branch`, over `trials` seeds.
pub fn attack_noise(
    locked: &TinyNet,
    data: &Dataset,
    branch: Branch,
    noise: f64,
    trials: usize,
    seed: u64,
) -> Result<NoisePoint, NetError> {
    if !(noise >= 0.0) || trials == 0 {
        return Err(NetError::InvalidArgument(format!("noise {noise}, trials {trials}")));
    }
    let accs: Vec<f64> = (0..trials)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
            let mut net = locked.clone();
            for v in net.params.w.iter_mut().chain(net.params.b.iter_mut()) {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                if noise * std > 0.0 {
                    let d = Normal::new(0.0, noise * std).unwrap();
                    for x in v.iter_mut() {
                        *x = (*x + d.sample(&mut rng)) as f32 as f64;
                    }
                }
            }
            branch.accuracy(&net, data)
        })
        .collect();
    let m = accs.iter().sum::<f64>() / trials as f64;
    let s = (accs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / trials as f64).sqrt();
    Ok(NoisePoint { noise, mean_acc: m, std_acc: s, trials })
}

/// Accuracy at each pruning level.
pub fn sparsity_sweep(net: &TinyNet, data: &Dataset, levels: &[f64]) -> Vec<(f64, f64)> {
    levels.iter().map(|&p| (p, Branch::Prune { p }.accuracy(net, data))).collect()
}
