//! Small dense ReLU classifier with manual backprop, used as the accuracy
//! oracle for every lock and attack.
//!
//! Parameters are held in f64 but always carry f32-representable values, so
//! `from_store(to_store())` is exact and evaluating an unlocked store gives
//! bit-identical accuracy.

use crate::dtype::Dtype;
use crate::param_store::{symmetric_int8, ParamStore, ParamTensor, StoreError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::time::Instant;

pub const DEFAULT_SIZES: [usize; 4] = [2, 64, 64, 4];

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("store does not match the network: {0}")]
    Shape(String),
    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Synthetic k-class Gaussian blob task.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub classes: usize,
    pub train_x: Vec<f64>,
    pub train_y: Vec<usize>,
    pub test_x: Vec<f64>,
    pub test_y: Vec<usize>,
}

impl Dataset {
    /// Four unit-variance blobs centred at (±2, ±2); class sizes are equal
    /// in both splits (sizes are rounded down to multiples of 4).
    pub fn blobs(seed: u64, train: usize, test: usize) -> Self {
        let centres = [(-2.0, -2.0), (2.0, -2.0), (-2.0, 2.0), (2.0, 2.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut split = |n: usize| {
            let mut xs = Vec::with_capacity(n / 4 * 8);
            let mut ys = Vec::with_capacity(n / 4 * 4);
            for i in 0..n / 4 * 4 {
                let c = i % 4;
                let (cx, cy) = centres[c];
                let dx: f64 = rng.sample(StandardNormal);
                let dy: f64 = rng.sample(StandardNormal);
                xs.extend_from_slice(&[(cx + dx) as f32 as f64, (cy + dy) as f32 as f64]);
                ys.push(c);
            }
            (xs, ys)
        };
        let (train_x, train_y) = split(train);
        let (test_x, test_y) = split(test);
        Dataset { dim: 2, classes: 4, train_x, train_y, test_x, test_y }
    }

    pub fn default_blobs(seed: u64) -> Self {
        Self::blobs(seed, 2000, 1000)
    }
}

/// Weights (`[out, in]` row-major) and biases of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl Params {
    fn zeros_like(&self) -> Self {
        Params {
            w: self.w.iter().map(|v| vec![0.0; v.len()]).collect(),
            b: self.b.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }

    fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.w.iter().zip(&self.b).flat_map(|(w, b)| [w, b])
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.w.iter_mut().zip(self.b.iter_mut()).flat_map(|(w, b)| [w, b])
    }

    pub fn len(&self) -> usize {
        self.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat coordinate access in store order (w0, b0, w1, b1, ...).
    pub fn get(&self, mut i: usize) -> f64 {
        for v in self.iter() {
            if i < v.len() {
                return v[i];
            }
            i -= v.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set(&mut self, mut i: usize, x: f64) {
        for v in self.iter_mut() {
            if i < v.len() {
                v[i] = x;
                return;
            }
            i -= v.len();
        }
        panic!("parameter index out of range")
    }

    pub fn axpy(&mut self, a: f64, other: &Params) {
        for (x, y) in self.iter_mut().zip(other.iter()) {
            for (p, q) in x.iter_mut().zip(y) {
                *p += a * q;
            }
        }
    }

    pub fn has_non_finite(&self) -> bool {
        self.iter().flatten().any(|v| !v.is_finite())
    }
}

pub type Grads = Params;

#[derive(Debug, Clone, PartialEq)]
pub struct TinyNet {
    pub sizes: Vec<usize>,
    pub params: Params,
}

/// Keep-mask per weight matrix; biases are never pruned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask(pub Vec<Vec<bool>>);

impl Mask {
    pub fn pruned_fraction(&self) -> f64 {
        let total: usize = self.0.iter().map(Vec::len).sum();
        let off: usize = self.0.iter().flatten().filter(|k| !**k).count();
        off as f64 / total.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Wall-clock seconds for the whole test split.
    pub latency: f64,
    /// Multiply-accumulates per second.
    pub throughput: f64,
}

impl TinyNet {
    /// He-initialised weights, zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0), "bad layer sizes");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Vec::new();
        let mut b = Vec::new();
        for l in sizes.windows(2) {
            let n = Normal::new(0.0, (2.0 / l[0] as f64).sqrt()).unwrap();
            w.push((0..l[0] * l[1]).map(|_| n.sample(&mut rng) as f32 as f64).collect());
            b.push(vec![0.0; l[1]]);
        }
        TinyNet { sizes: sizes.to_vec(), params: Params { w, b } }
    }

    pub fn default_net(seed: u64) -> Self {
        Self::new(&DEFAULT_SIZES, seed)
    }

    pub fn classes(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn macs_per_sample(&self) -> usize {
        self.sizes.windows(2).map(|l| l[0] * l[1]).sum()
    }

    pub fn to_store(&self) -> ParamStore {
        let arch = self.sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("-");
        let mut store = ParamStore::new()
            .with_meta("arch", format!("mlp-{arch}"))
            .with_meta("task", "blobs")
            .with_meta("classes", self.classes().to_string());
        for (i, l) in self.sizes.windows(2).enumerate() {
            let w: Vec<f32> = self.params.w[i].iter().map(|&v| v as f32).collect();
            let b: Vec<f32> = self.params.b[i].iter().map(|&v| v as f32).collect();
            store.push(ParamTensor::from_values(format!("fc{i}.weight"), vec![l[1], l[0]], Dtype::Fp32, &w).unwrap()).unwrap();
            store.push(ParamTensor::from_values(format!("fc{i}.bias"), vec![l[1]], Dtype::Fp32, &b).unwrap()).unwrap();
        }
        store
    }

    /// Reads a store of any dtype; layer sizes come from the tensor shapes.
    pub fn from_store(store: &ParamStore) -> Result<Self, NetError> {
        let t = store.tensors();
        if t.is_empty() || !t.len().is_multiple_of(2) {
            return Err(NetError::Shape(format!("expected weight/bias pairs, got {} tensors", t.len())));
        }
        let mut sizes = Vec::new();
        let mut w = Vec::new();
        let mut b = Vec::new();
        for (i, pair) in t.chunks(2).enumerate() {
            let (wt, bt) = (&pair[0], &pair[1]);
            let (out, inp) = match wt.shape[..] {
                [o, n] => (o, n),
                _ => return Err(NetError::Shape(format!("'{}' is not a matrix", wt.name))),
            };
            if bt.shape != [out] {
                return Err(NetError::Shape(format!("'{}' does not match '{}'", bt.name, wt.name)));
            }
            if i == 0 {
                sizes.push(inp);
            } else if *sizes.last().unwrap() != inp {
                return Err(NetError::Shape(format!("'{}' input {inp} does not chain", wt.name)));
            }
            sizes.push(out);
            w.push(wt.values().into_iter().map(f64::from).collect());
            b.push(bt.values().into_iter().map(f64::from).collect());
        }
        Ok(TinyNet { sizes, params: Params { w, b } })
    }

    fn layer(&self, p: &Params, l: usize, x: &[f64], out: &mut Vec<f64>) {
        let (inp, n) = (self.sizes[l], self.sizes[l + 1]);
        out.clear();
        for o in 0..n {
            let row = &p.w[l][o * inp..(o + 1) * inp];
            let mut s = p.b[l][o];
            for (w, xi) in row.iter().zip(x) {
                s += w * xi;
            }
            out.push(s);
        }
    }

    /// Logits of one sample under parameters `p`.
    fn logits(&self, p: &Params, x: &[f64], a: &mut Vec<f64>, b: &mut Vec<f64>) {
        a.clear();
        a.extend_from_slice(x);
        let last = self.sizes.len() - 2;
        for l in 0..=last {
            self.layer(p, l, a, b);
            if l < last {
                b.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(a, b);
        }
    }

    fn predict_with(&self, p: &Params, xs: &[f64]) -> Vec<usize> {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        xs.chunks(self.sizes[0])
            .map(|x| {
                self.logits(p, x, &mut a, &mut b);
                argmax(&a)
            })
            .collect()
    }

    pub fn predict(&self, xs: &[f64]) -> Vec<usize> {
        self.predict_with(&self.params, xs)
    }

    pub fn accuracy_with(&self, p: &Params, xs: &[f64], ys: &[usize]) -> f64 {
        let pred = self.predict_with(p, xs);
        pred.iter().zip(ys).filter(|(a, b)| a == b).count() as f64 / ys.len().max(1) as f64
    }

    pub fn accuracy(&self, data: &Dataset) -> f64 {
        self.accuracy_with(&self.params, &data.test_x, &data.test_y)
    }

    /// Mean cross-entropy and its gradient under parameters `p`.
    pub fn loss_and_grad(&self, p: &Params, xs: &[f64], ys: &[usize]) -> (f64, Grads) {
        let mut g = p.zeros_like();
        let depth = self.sizes.len() - 1;
        let mut acts: Vec<Vec<f64>> = vec![Vec::new(); depth + 1];
        let mut loss = 0.0;
        let n = ys.len() as f64;
        for (x, &y) in xs.chunks(self.sizes[0]).zip(ys) {
            acts[0].clear();
            acts[0].extend_from_slice(x);
            for l in 0..depth {
                let (lo, hi) = acts.split_at_mut(l + 1);
                self.layer(p, l, &lo[l], &mut hi[0]);
                if l + 1 < depth {
                    hi[0].iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
            let logits = &acts[depth];
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
            loss += z.ln() + m - logits[y];
            let mut delta: Vec<f64> = logits.iter().map(|v| (v - m).exp() / z / n).collect();
            delta[y] -= 1.0 / n;
            for l in (0..depth).rev() {
                let inp = self.sizes[l];
                let a = &acts[l];
                for (o, &d) in delta.iter().enumerate() {
                    g.b[l][o] += d;
                    let row = &mut g.w[l][o * inp..(o + 1) * inp];
                    for (gw, ai) in row.iter_mut().zip(a) {
                        *gw += d * ai;
                    }
                }
                if l > 0 {
                    let mut prev = vec![0.0; inp];
                    for (o, &d) in delta.iter().enumerate() {
                        let row = &p.w[l][o * inp..(o + 1) * inp];
                        for (pv, w) in prev.iter_mut().zip(row) {
                            *pv += d * w;
                        }
                    }
                    for (pv, a) in prev.iter_mut().zip(a) {
                        if *a <= 0.0 {
                            *pv = 0.0;
                        }
                    }
                    delta = prev;
                }
            }
        }
        (loss / n, g)
    }

    pub fn loss(&self, p: &Params, xs: &[f64], ys: &[usize]) -> f64 {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        let mut loss = 0.0;
        for (x, &y) in xs.chunks(self.sizes[0]).zip(ys) {
            self.logits(p, x, &mut a, &mut b);
            let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = a.iter().map(|v| (v - m).exp()).sum();
            loss += z.ln() + m - a[y];
        }
        loss / ys.len() as f64
    }

    /// L1-unstructured mask pruning the fraction `p` of weights globally.
    pub fn prune_mask(&self, p: f64) -> Mask {
        l1_mask(&self.params.w, p)
    }

    pub fn masked(&self, mask: &Mask) -> Params {
        let mut p = self.params.clone();
        apply_mask(&mut p, mask);
        p
    }

    /// Parameters round-tripped through `scheme`, per tensor.
    pub fn quantized(&self, scheme: Dtype) -> Params {
        let mut p = self.params.clone();
        for v in p.iter_mut() {
            quantize_slice(v, scheme);
        }
        p
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        // NaN logits never win
        if x > v[best] || v[best].is_nan() && !x.is_nan() {
            best = i;
        }
    }
    best
}

pub(crate) fn apply_mask(p: &mut Params, mask: &Mask) {
    for (w, m) in p.w.iter_mut().zip(&mask.0) {
        for (v, &keep) in w.iter_mut().zip(m) {
            if !keep {
                *v = 0.0;
            }
        }
    }
}

/// Prunes the `round(p * n)` smallest-magnitude entries across all slices;
/// ties go to the earlier (slice, index).
pub fn l1_mask(weights: &[Vec<f64>], p: f64) -> Mask {
    assert!((0.0..=1.0).contains(&p), "pruning fraction {p} outside [0, 1]");
    let mut idx: Vec<(f64, u32, u32)> = weights
        .iter()
        .enumerate()
        .flat_map(|(t, w)| w.iter().enumerate().map(move |(i, v)| (v.abs(), t as u32, i as u32)))
        .collect();
    let k = (p * idx.len() as f64).round() as usize;
    let mut mask = Mask(weights.iter().map(|w| vec![true; w.len()]).collect());
    if k == 0 {
        return mask;
    }
    let cmp = |a: &(f64, u32, u32), b: &(f64, u32, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
    }
    for &(_, t, i) in &idx[..k] {
        mask.0[t as usize][i as usize] = false;
    }
    mask
}

fn is_weight(t: &ParamTensor) -> bool {
    t.shape.len() >= 2
}

/// Global L1-unstructured pruning mask over the store's weight tensors
/// (rank 2 and above), in store order.
pub fn prune_l1_unstructured(store: &ParamStore, p: f64) -> Mask {
    let weights: Vec<Vec<f64>> = store
        .tensors()
        .iter()
        .filter(|t| is_weight(t))
        .map(|t| t.values().into_iter().map(f64::from).collect())
        .collect();
    l1_mask(&weights, p)
}

pub fn apply_store_mask(store: &ParamStore, mask: &Mask) -> ParamStore {
    let mut k = 0;
    store.map_values(|_, t, mut v| {
        if is_weight(t) {
            for (x, &keep) in v.iter_mut().zip(&mask.0[k]) {
                if !keep {
                    *x = 0.0;
                }
            }
            k += 1;
        }
        v
    })
}

fn quantize_slice(v: &mut [f64], scheme: Dtype) {
    let dtype = match scheme {
        Dtype::Int8Affine { .. } => {
            let f: Vec<f32> = v.iter().map(|&x| x as f32).collect();
            symmetric_int8(&f)
        }
        d => d,
    };
    for x in v.iter_mut() {
        *x = dtype.round(*x as f32) as f64;
    }
}

/// Quantize-dequantize every tensor through `scheme`; values stay in the
/// store's own dtype. Int8 uses a per-tensor symmetric scale.
pub fn fake_quantize(store: &ParamStore, scheme: Dtype) -> ParamStore {
    store.map_values(|_, _, v| {
        let mut d: Vec<f64> = v.into_iter().map(f64::from).collect();
        quantize_slice(&mut d, scheme);
        d.into_iter().map(|x| x as f32).collect()
    })
}

pub fn evaluate(net: &TinyNet, data: &Dataset, mask: Option<&Mask>, scheme: Option<Dtype>) -> EvalReport {
    let mut eff = net.clone();
    if let Some(m) = mask {
        apply_mask(&mut eff.params, m);
    }
    if let Some(s) = scheme {
        eff.params = eff.quantized(s);
    }
    let start = Instant::now();
    let accuracy = eff.accuracy(data);
    let latency = start.elapsed().as_secs_f64().max(1e-9);
    let macs = (net.macs_per_sample() * data.test_y.len()) as f64;
    EvalReport { accuracy, latency, throughput: macs / latency }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig { epochs: 20, lr: 0.005, batch: 32, seed }
    }
}

pub struct Adam {
    lr: f64,
    t: i32,
    m: Params,
    v: Params,
}

impl Adam {
    pub fn new(p: &Params, lr: f64) -> Self {
        Adam { lr, t: 0, m: p.zeros_like(), v: p.zeros_like() }
    }

    /// One update; parameters are rounded to f32 afterwards.
    pub fn step(&mut self, p: &mut Params, g: &Grads) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for (((x, gr), m), v) in p.iter_mut().zip(g.iter()).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            for i in 0..x.len() {
                m[i] = B1 * m[i] + (1.0 - B1) * gr[i];
                v[i] = B2 * v[i] + (1.0 - B2) * gr[i] * gr[i];
                let upd = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + 1e-8);
                x[i] = (x[i] - upd) as f32 as f64;
            }
        }
    }
}

/// Minibatch Adam over the training split with a caller-supplied loss.
/// `grad_fn` gets the current net and one batch and returns (loss, grads).
pub fn fit(
    net: &TinyNet,
    data: &Dataset,
    cfg: &TrainConfig,
    mut grad_fn: impl FnMut(&TinyNet, &[f64], &[usize]) -> (f64, Grads),
    mut on_epoch: impl FnMut(usize, &TinyNet),
) -> Result<TinyNet, NetError> {
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(NetError::InvalidArgument("batch and lr must be positive".into()));
    }
    let mut net = net.clone();
    let mut opt = Adam::new(&net.params, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train_y.len()).collect();
    let d = data.dim;
    let mut bx = Vec::with_capacity(cfg.batch * d);
    let mut by = Vec::with_capacity(cfg.batch);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.extend_from_slice(&data.train_x[i * d..(i + 1) * d]);
                by.push(data.train_y[i]);
            }
            let (loss, g) = grad_fn(&net, &bx, &by);
            if !loss.is_finite() || g.has_non_finite() {
                return Err(NetError::TrainingDiverged { step });
            }
            opt.step(&mut net.params, &g);
            step += 1;
        }
        on_epoch(epoch + 1, &net);
    }
    Ok(net)
}

/// Plain cross-entropy training.
pub fn train(net: &TinyNet, data: &Dataset, cfg: &TrainConfig) -> Result<TinyNet, NetError> {
    fit(net, data, cfg, |n, x, y| n.loss_and_grad(&n.params, x, y), |_, _| {})
}

/// Central-difference check of `loss_and_grad` on `coords` random
/// coordinates; returns the largest relative error.
pub fn gradient_check(net: &TinyNet, data: &Dataset, coords: usize, seed: u64) -> f64 {
    let xs = &data.train_x[..data.dim * 64.min(data.train_y.len())];
    let ys = &data.train_y[..64.min(data.train_y.len())];
    let (_, g) = net.loss_and_grad(&net.params, xs, ys);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut p = net.params.clone();
    for _ in 0..coords {
        let i = rng.gen_range(0..p.len());
        let x0 = p.get(i);
        let h = 1e-6 * x0.abs().max(1.0);
        p.set(i, x0 + h);
        let up = net.loss(&p, xs, ys);
        p.set(i, x0 - h);
        let down = net.loss(&p, xs, ys);
        p.set(i, x0);
        let numeric = (up - down) / (2.0 * h);
        let analytic = g.get(i);
        let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Best seconds per call.
    pub latency: f64,
    /// Multiply-accumulates per second actually performed.
    pub throughput: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub dim: usize,
    pub sparsity: f64,
    pub nnz: usize,
    pub real: Timing,
    pub emulated: Timing,
    /// Emulated over real latency.
    pub speedup: f64,
    /// Largest |real - emulated| relative to the largest |output|.
    pub max_rel_err: f64,
}

struct Csr {
    row_ptr: Vec<u32>,
    cols: Vec<u32>,
    vals: Vec<f32>,
}

impl Csr {
    fn from_dense(w: &[f32], mask: &[bool], dim: usize) -> Self {
        let mut row_ptr = vec![0u32];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for r in 0..dim {
            for c in 0..dim {
                if mask[r * dim + c] {
                    cols.push(c as u32);
                    vals.push(w[r * dim + c]);
                }
            }
            row_ptr.push(cols.len() as u32);
        }
        Csr { row_ptr, cols, vals }
    }

    fn matvec(&self, x: &[f32], y: &mut [f32]) {
        for (r, out) in y.iter_mut().enumerate() {
            let (a, b) = (self.row_ptr[r] as usize, self.row_ptr[r + 1] as usize);
            let mut s = 0f32;
            for k in a..b {
                s += self.vals[k] * x[self.cols[k] as usize];
            }
            *out = s;
        }
    }
}

/// The mask is applied to the dense weights on every call, then a dense
/// product runs over all entries.
fn emulated_matvec(w: &[f32], mask: &[bool], scratch: &mut [f32], x: &[f32], y: &mut [f32], dim: usize) {
    for ((s, &v), &m) in scratch.iter_mut().zip(w).zip(mask) {
        *s = if m { v } else { 0.0 };
    }
    for (r, out) in y.iter_mut().enumerate() {
        let row = &scratch[r * dim..(r + 1) * dim];
        let mut s = 0f32;
        for (a, b) in row.iter().zip(x) {
            s += a * b;
        }
        *out = s;
    }
}

fn time_best(mut f: impl FnMut()) -> f64 {
    f();
    let mut best = f64::INFINITY;
    let budget = Instant::now();
    let mut runs = 0;
    while runs < 5 || (budget.elapsed().as_secs_f64() < 0.2 && runs < 1000) {
        let t = Instant::now();
        f();
        best = best.min(t.elapsed().as_secs_f64());
        runs += 1;
    }
    best.max(1e-9)
}

/// Sparse (CSR) matrix-vector product against the masked-dense emulation.
pub fn bench_sparse_vs_emulated(dim: usize, sparsity: f64, seed: u64) -> Result<BenchReport, NetError> {
    if dim == 0 || !(0.0..=1.0).contains(&sparsity) {
        return Err(NetError::InvalidArgument(format!("dim {dim}, sparsity {sparsity}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f32> = (0..dim * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let x: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let mask = l1_mask(&[w.iter().map(|&v| v as f64).collect()], sparsity).0.remove(0);
    let csr = Csr::from_dense(&w, &mask, dim);
    let nnz = csr.vals.len();
    let mut y_real = vec![0f32; dim];
    let mut y_emu = vec![0f32; dim];
    let mut scratch = vec![0f32; dim * dim];
    let real = time_best(|| csr.matvec(std::hint::black_box(&x), &mut y_real));
    let emulated = time_best(|| emulated_matvec(&w, &mask, &mut scratch, std::hint::black_box(&x), &mut y_emu, dim));
    let scale = y_emu.iter().fold(0f32, |m, v| m.max(v.abs())).max(f32::MIN_POSITIVE) as f64;
    let max_rel_err = y_real.iter().zip(&y_emu).map(|(a, b)| (a - b).abs() as f64 / scale).fold(0.0, f64::max);
    Ok(BenchReport {
        dim,
        sparsity,
        nnz,
        real: Timing { latency: real, throughput: nnz as f64 / real },
        emulated: Timing { latency: emulated, throughput: (dim * dim) as f64 / emulated },
        speedup: emulated / real,
        max_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_balanced_and_seeded() {
        let d = Dataset::blobs(1, 100, 40);
        assert_eq!(d.train_y.len(), 100);
        assert_eq!(d.test_y.len(), 40);
        for c in 0..4 {
            assert_eq!(d.test_y.iter().filter(|&&y| y == c).count(), 10);
        }
        assert_eq!(d, Dataset::blobs(1, 100, 40));
        assert_ne!(d, Dataset::blobs(2, 100, 40));
    }

    #[test]
    fn store_round_trip_is_exact() {
        let net = TinyNet::default_net(3);
        let store = net.to_store();
        assert_eq!(store.tensors().len(), 6);
        assert_eq!(store.get("fc1.weight").unwrap().shape, vec![64, 64]);
        assert_eq!(store.value_count(), 4612);
        assert_eq!(TinyNet::from_store(&store).unwrap(), net);
        let half = TinyNet::from_store(&store.cast(Dtype::Fp16)).unwrap();
        assert_eq!(half.sizes, net.sizes);
    }

    #[test]
    fn from_store_rejects_bad_shapes() {
        let mut s = ParamStore::new();
        s.push(ParamTensor::from_values("w", vec![3], Dtype::Fp32, &[0.0; 3]).unwrap()).unwrap();
        s.push(ParamTensor::from_values("b", vec![3], Dtype::Fp32, &[0.0; 3]).unwrap()).unwrap();
        assert!(TinyNet::from_store(&s).is_err());
        assert!(TinyNet::from_store(&ParamStore::new()).is_err());
    }

    #[test]
    fn untrained_is_near_chance() {
        let data = Dataset::default_blobs(0);
        let net = TinyNet::default_net(1);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::new(0) };
        let acc = train(&net, &data, &cfg).unwrap().accuracy(&data);
        assert!((acc - 0.25).abs() < 0.25, "{acc}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = Dataset::blobs(0, 400, 200);
        let net = TinyNet::default_net(1);
        let cfg = TrainConfig { epochs: 2, ..TrainConfig::new(5) };
        let a = train(&net, &data, &cfg).unwrap();
        let b = train(&net, &data, &cfg).unwrap();
        assert_eq!(a.to_store().flatten(), b.to_store().flatten());
        assert_ne!(a, net);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let data = Dataset::default_blobs(4);
        for seed in 0..3 {
            let net = TinyNet::default_net(seed);
            let err = gradient_check(&net, &data, 100, seed);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn prune_examples() {
        let w = vec![vec![0.3, -0.1, 0.2, -0.4]];
        assert_eq!(l1_mask(&w, 0.5).0[0], vec![true, false, false, true]);
        assert!(l1_mask(&w, 0.0).0[0].iter().all(|&k| k));
        assert!(l1_mask(&w, 1.0).0[0].iter().all(|&k| !k));
        // ties resolved by position
        let t = vec![vec![0.5, 0.1], vec![0.1, 0.1]];
        assert_eq!(l1_mask(&t, 0.5).0, vec![vec![true, false], vec![false, true]]);
    }

    #[test]
    fn store_pruning_skips_biases_and_is_idempotent() {
        let net = TinyNet::default_net(2);
        let store = net.to_store();
        let mask = prune_l1_unstructured(&store, 0.3);
        assert_eq!(mask.0.len(), 3);
        assert!((mask.pruned_fraction() - 0.3).abs() < 1e-3);
        assert_eq!(mask, net.prune_mask(0.3));
        let once = apply_store_mask(&store, &mask);
        assert_eq!(apply_store_mask(&once, &mask), once);
        assert_eq!(once.get("fc0.bias"), store.get("fc0.bias"));
    }

    #[test]
    fn fake_quantize_examples() {
        let mut s = ParamStore::new();
        s.push(ParamTensor::from_values("w", vec![3], Dtype::Fp32, &[-1.0, 0.5, 1.27]).unwrap()).unwrap();
        let q = fake_quantize(&s, Dtype::Int8Affine { scale: 0.0, zero_point: 0 }).get("w").unwrap().values();
        for (a, b) in q.iter().zip([-1.0f32, 0.5, 1.27]) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let mut z = ParamStore::new();
        z.push(ParamTensor::from_values("z", vec![2], Dtype::Fp32, &[0.0, 0.25]).unwrap()).unwrap();
        for scheme in [Dtype::Fp16, Dtype::MiniFloat16, Dtype::MiniFloat8, Dtype::Int8Affine { scale: 1.0, zero_point: 0 }] {
            let q = fake_quantize(&z, scheme);
            assert_eq!(q.values(), vec![0.0, 0.25]);
            assert_eq!(q.tensors()[0].dtype, Dtype::Fp32);
        }
        let store = TinyNet::default_net(1).to_store();
        for scheme in [Dtype::Fp16, Dtype::MiniFloat8, Dtype::Int8Affine { scale: 1.0, zero_point: 0 }] {
            let once = fake_quantize(&store, scheme);
            assert_eq!(fake_quantize(&once, scheme), once, "{scheme}");
        }
    }

    #[test]
    fn evaluate_with_identity_mask_matches_plain() {
        let data = Dataset::blobs(1, 400, 200);
        let net = TinyNet::default_net(1);
        let full = Mask(net.params.w.iter().map(|w| vec![true; w.len()]).collect());
        let r = evaluate(&net, &data, Some(&full), None);
        assert_eq!(r.accuracy, net.accuracy(&data));
        assert!(r.latency > 0.0 && r.throughput > 0.0);
    }

    #[test]
    fn bench_degenerate_and_agreement() {
        let r = bench_sparse_vs_emulated(1, 0.0, 1).unwrap();
        assert!(r.real.latency > 0.0 && r.emulated.latency > 0.0);
        let r = bench_sparse_vs_emulated(128, 0.9, 2).unwrap();
        assert!(r.max_rel_err <= 1e-5);
        assert_eq!(r.nnz, 128 * 128 - (0.9f64 * 128.0 * 128.0).round() as usize);
        assert!(bench_sparse_vs_emulated(0, 0.5, 1).is_err());
    }
}
