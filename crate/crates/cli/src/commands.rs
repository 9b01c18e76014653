use crate::source::{measure, resolve};
use crate::*;
use mlock_core::cracker::{attacker_reference, brute_force, CrackConfig, CrackError, Strategy};
use mlock_core::distinguisher::{distinguish, DistributionStats};
use mlock_core::fingerprint::entropy_estimate;
use mlock_core::softlock::{
    attack_noise, attack_retrain, lock_metrics, soft_lock_train, Branch, CurvePoint, SoftLockConfig,
};
use mlock_core::tinynet::{
    apply_store_mask, bench_sparse_vs_emulated, evaluate, fake_quantize, prune_l1_unstructured, train, Dataset,
    NetError, TinyNet, TrainConfig,
};
use mlock_core::transform::{
    build_empirical_pretransform, lock, pretransformed_aes_lock, unlock, LockedModel, PreTransform,
    SaturationPolicy, TransformError, TransformKind,
};
use mlock_core::{Dtype, ParamStore, StoreError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use std::path::Path;

// a closed pipe (`| head`) is not an error
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

struct Ctx {
    seed: u64,
    format: Format,
}

impl Ctx {
    fn emit(&self, value: Value, text: impl FnOnce() -> String) {
        match self.format {
            Format::Json => out!("{}", serde_json::to_string_pretty(&value).unwrap()),
            _ => out!("{}", text()),
        }
    }

    fn no_csv(&self, cmd: &str) -> Result<(), CliError> {
        if self.format == Format::Csv {
            return Err(CliError::usage(format!("{cmd} has no CSV output")));
        }
        Ok(())
    }
}

fn effective_seed(flag: u64) -> Result<u64, CliError> {
    match std::env::var("MLOCK_SEED") {
        Ok(s) => s.trim().parse().map_err(|_| CliError::usage(format!("MLOCK_SEED '{s}' is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let format = if cli.json {
        Format::Json
    } else if cli.csv {
        Format::Csv
    } else {
        Format::Text
    };
    let ctx = Ctx { seed: effective_seed(cli.seed)?, format };
    log::debug!("seed {}", ctx.seed);
    match cli.command {
        Command::Fingerprint(a) => fingerprint(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Lock(a) => lock_cmd(&ctx, a),
        Command::Unlock(a) => unlock_cmd(&ctx, a),
        Command::Softlock(a) => softlock(&ctx, a),
        Command::Attack(a) => attack(&ctx, a),
        Command::Crack(a) => crack(&ctx, a),
        Command::Stats(a) => stats(&ctx, a),
        Command::Bench(a) => bench(&ctx, a),
    }
}

fn store_error(path: &Path, e: StoreError) -> CliError {
    CliError::domain("store", format!("{}: {e}", path.display()))
}

fn transform_error(e: TransformError) -> CliError {
    match e {
        TransformError::OutlierSaturation { .. } => CliError::domain("outlier-saturation", e),
        TransformError::Capacity(_) => CliError::domain("capacity", e),
        TransformError::Io(_) => CliError::domain("io", e),
        e => CliError::domain("transform", e),
    }
}

fn net_error(e: NetError) -> CliError {
    match e {
        NetError::InvalidArgument(m) => CliError::usage(m),
        e => CliError::domain("model", e),
    }
}

fn load_store(path: &Path) -> Result<ParamStore, CliError> {
    ParamStore::load(path).map_err(|e| store_error(path, e))
}

fn load_net(path: &Path) -> Result<TinyNet, CliError> {
    TinyNet::from_store(&load_store(path)?).map_err(net_error)
}

fn save_store(store: &ParamStore, path: &Path) -> Result<(), CliError> {
    store.save(path).map_err(|e| store_error(path, e))
}

fn dataset(d: &DataArgs) -> Result<Dataset, CliError> {
    if d.train_size == 0 || d.test_size == 0 {
        return Err(CliError::usage("dataset splits must be non-empty"));
    }
    Ok(Dataset::blobs(d.data_seed, d.train_size, d.test_size))
}

fn train_config(base: TrainConfig, o: &TrainOpts) -> Result<TrainConfig, CliError> {
    let cfg = TrainConfig {
        epochs: o.epochs.unwrap_or(base.epochs),
        lr: o.lr.unwrap_or(base.lr),
        batch: o.batch.unwrap_or(base.batch),
        ..base
    };
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(CliError::usage("batch and lr must be positive"));
    }
    Ok(cfg)
}

fn dtype(s: &str) -> Result<Dtype, CliError> {
    s.parse().map_err(CliError::usage)
}

fn branches(b: &BranchArgs) -> Result<(Branch, Branch), CliError> {
    Ok(match b.mode {
        LockMode::Sparsity => (Branch::Prune { p: b.p1 }, Branch::Prune { p: b.p2 }),
        LockMode::Quant => (Branch::Quant { scheme: dtype(&b.auth)? }, Branch::Quant { scheme: dtype(&b.unauth)? }),
    })
}

fn to_value(v: impl Serialize) -> Value {
    serde_json::to_value(v).expect("plain data serializes")
}

fn fingerprint(ctx: &Ctx, a: FingerprintArgs) -> Result<(), CliError> {
    ctx.no_csv("fingerprint")?;
    let fp = measure(a.method, &a.measure, ctx.seed)?;
    let probe_ops = (a.measure.layers * a.measure.width).min(u32::MAX as usize) as u32;
    let bound = entropy_estimate(fp.method, probe_ops).bound;
    ctx.emit(
        json!({
            "method": fp.method.to_string(),
            "symbols": fp.symbols,
            "entropy_bits": fp.entropy_bits,
            "entropy_bound": to_value(bound),
            "key": fp.derive_key().to_hex(),
        }),
        || format!("{}\nentropy: {} bits ({:?})", fp.symbols, fp.entropy_bits, bound),
    );
    Ok(())
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Result<(), CliError> {
    ctx.no_csv("train")?;
    let data = dataset(&a.data)?;
    let cfg = train_config(TrainConfig::new(ctx.seed), &a.train)?;
    log::info!("training {} epochs on {} samples", cfg.epochs, a.data.train_size);
    let net = train(&TinyNet::default_net(ctx.seed), &data, &cfg).map_err(net_error)?;
    let store = net.to_store();
    save_store(&store, &a.out)?;
    let acc = net.accuracy(&data);
    ctx.emit(
        json!({
            "out": a.out.display().to_string(),
            "params": store.value_count(),
            "epochs": cfg.epochs,
            "lr": cfg.lr,
            "batch": cfg.batch,
            "accuracy": acc,
        }),
        || format!("accuracy {acc:.4} ({} parameters) -> {}", store.value_count(), a.out.display()),
    );
    Ok(())
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<(), CliError> {
    ctx.no_csv("eval")?;
    let data = dataset(&a.data)?;
    let mut store = load_store(&a.model)?;
    if let Some(p) = a.prune {
        if !(0.0..=1.0).contains(&p) {
            return Err(CliError::usage(format!("--prune {p} outside [0, 1]")));
        }
        store = apply_store_mask(&store, &prune_l1_unstructured(&store, p));
    }
    if let Some(q) = &a.quant {
        store = fake_quantize(&store, dtype(q)?);
    }
    let net = TinyNet::from_store(&store).map_err(net_error)?;
    let r = evaluate(&net, &data, None, None);
    ctx.emit(
        json!({
            "accuracy": r.accuracy,
            "params": store.value_count(),
            "latency": r.latency,
            "throughput": r.throughput,
        }),
        || format!("accuracy {:.4}\nlatency {:.3e} s, {:.3e} MAC/s", r.accuracy, r.latency, r.throughput),
    );
    Ok(())
}

fn lock_cmd(ctx: &Ctx, a: LockArgs) -> Result<(), CliError> {
    ctx.no_csv("lock")?;
    let kind: TransformKind = a.method.parse().map_err(CliError::usage)?;
    let store = load_store(&a.model)?;
    let fp = resolve(&a.source, ctx.seed)?;
    log::info!("fingerprint {fp} ({} bits)", fp.entropy_bits);
    let key = fp.derive_key();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let locked = if kind == TransformKind::PretransformedAes {
        let pre = match a.pretransform {
            PretransformArg::Gaussian => PreTransform::fit_gaussian(&store),
            PretransformArg::Empirical => {
                let bits = store.tensors().first().map(|t| t.dtype.code_bits()).unwrap_or(32);
                build_empirical_pretransform(&store, bits)
            }
        }
        .map_err(transform_error)?;
        let policy = match a.saturation {
            SaturationArg::Clamp => SaturationPolicy::Clamp,
            SaturationArg::Reject => SaturationPolicy::Reject,
        };
        pretransformed_aes_lock(&store, &key, &pre, policy, &mut rng)
    } else {
        lock(kind, &store, &key, None, &mut rng)
    }
    .map_err(transform_error)?;
    if locked.saturated > 0 {
        log::warn!("{} values clamped by the Gaussian pre-transform", locked.saturated);
    }
    locked.save(&a.out).map_err(transform_error)?;
    let pre = locked.pretransform.as_ref().map(|p| p.mode_name());
    ctx.emit(
        json!({
            "kind": kind.to_string(),
            "fingerprint": fp.to_string(),
            "out": a.out.display().to_string(),
            "payload_bytes": locked.payload.len(),
            "pretransform": pre,
            "saturated": locked.saturated,
        }),
        || format!("locked {} with {kind} -> {}", a.model.display(), a.out.display()),
    );
    Ok(())
}

fn unlock_cmd(ctx: &Ctx, a: UnlockArgs) -> Result<(), CliError> {
    ctx.no_csv("unlock")?;
    let locked = LockedModel::load(&a.locked).map_err(transform_error)?;
    let fp = resolve(&a.source, ctx.seed)?;
    let store = unlock(&locked, &fp.derive_key()).map_err(transform_error)?;
    save_store(&store, &a.out)?;
    ctx.emit(
        json!({
            "kind": locked.kind().to_string(),
            "fingerprint": fp.to_string(),
            "out": a.out.display().to_string(),
            "values": store.value_count(),
        }),
        || format!("unlocked {} values -> {}", store.value_count(), a.out.display()),
    );
    Ok(())
}

fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("step,acc_auth,acc_unauth");
    for p in curve {
        s.push_str(&format!("\n{},{},{}", p.step, p.acc_auth, p.acc_unauth));
    }
    s
}

fn softlock(ctx: &Ctx, a: SoftlockArgs) -> Result<(), CliError> {
    let data = dataset(&a.data)?;
    let net = load_net(&a.model)?;
    let (authorized, unauthorized) = branches(&a.branches)?;
    let cfg = SoftLockConfig {
        authorized,
        unauthorized,
        lambda: a.lambda,
        epsilon: a.epsilon,
        train: train_config(SoftLockConfig::default_train(ctx.seed), &a.train)?,
    };
    cfg.validate().map_err(net_error)?;
    let (locked, curve) = soft_lock_train(&net, &data, &cfg).map_err(net_error)?;
    save_store(&locked.to_store(), &a.out)?;
    let r = lock_metrics(&net, &locked, &data, &cfg);
    match ctx.format {
        Format::Csv => out!("{}", curve_csv(&curve)),
        _ => ctx.emit(
            json!({ "config": to_value(cfg), "report": to_value(r), "curve": to_value(&curve), "out": a.out.display().to_string() }),
            || {
                format!(
                    "authorized   {:.4} (was {:.4})\nunauthorized {:.4} (was {:.4})\ndelta_orig {:.4}  delta_lock {:.4}  delta_base {:.4}\n-> {}",
                    r.acc_locked_authorized,
                    r.acc_original,
                    r.acc_locked_unauthorized,
                    r.acc_original_unauthorized,
                    r.delta_orig,
                    r.delta_lock,
                    r.delta_base,
                    a.out.display()
                )
            },
        ),
    }
    Ok(())
}

fn attack(ctx: &Ctx, a: AttackArgs) -> Result<(), CliError> {
    let data = dataset(&a.data)?;
    let net = load_net(&a.model)?;
    let (auth, unauth) = branches(&a.branches)?;
    match a.kind {
        AttackKind::Retrain => {
            let cfg = train_config(TrainConfig { epochs: 10, ..TrainConfig::new(ctx.seed) }, &a.train)?;
            let curve = attack_retrain(&net, &data, auth, unauth, &cfg).map_err(net_error)?;
            match ctx.format {
                Format::Csv => out!("{}", curve_csv(&curve)),
                _ => ctx.emit(json!({ "kind": "retrain", "curve": to_value(&curve) }), || {
                    curve_csv(&curve).replace(',', "\t")
                }),
            }
        }
        AttackKind::Noise => {
            let levels = a
                .noise
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|_| CliError::usage(format!("bad noise level '{s}'"))))
                .collect::<Result<Vec<_>, _>>()?;
            let branch = match a.branch {
                Side::Auth => auth,
                Side::Unauth => unauth,
            };
            let points = levels
                .iter()
                .map(|&n| attack_noise(&net, &data, branch, n, a.trials, ctx.seed))
                .collect::<Result<Vec<_>, _>>()
                .map_err(net_error)?;
            let mut csv = String::from("noise,mean_acc,std_acc,trials");
            for p in &points {
                csv.push_str(&format!("\n{},{},{},{}", p.noise, p.mean_acc, p.std_acc, p.trials));
            }
            match ctx.format {
                Format::Csv => out!("{csv}"),
                _ => ctx.emit(json!({ "kind": "noise", "points": to_value(&points) }), || csv.replace(',', "\t")),
            }
        }
    }
    Ok(())
}

fn crack(ctx: &Ctx, a: CrackArgs) -> Result<(), CliError> {
    ctx.no_csv("crack")?;
    let strategy: Strategy = a.strategy.parse().map_err(CliError::usage)?;
    let cfg = CrackConfig { bits: a.bits, strategy, alpha: a.alpha, workers: a.workers };
    let locked = LockedModel::load(&a.locked).map_err(transform_error)?;
    let data = dataset(&a.data)?;
    let reference = match &a.reference {
        Some(p) => DistributionStats::from_store(&load_store(p)?),
        None => match attacker_reference(&locked, None, ctx.seed) {
            Some(r) => r,
            None => {
                log::info!("no reference in the locked file; training a surrogate");
                // attacker's own model of the same architecture
                let s = ctx.seed.wrapping_add(1);
                let net = train(&TinyNet::default_net(s), &data, &TrainConfig::new(s)).map_err(net_error)?;
                DistributionStats::from_store(&net.to_store())
            }
        },
    };
    log::info!("searching {} candidates with {} worker(s)", 1u64 << cfg.bits, cfg.workers);
    let (report, err) = match brute_force(&locked, &cfg, &data, &reference) {
        Ok(r) => (r, None),
        Err(CrackError::NotFound { report, best_fingerprint, best_accuracy }) => {
            let msg = format!("no candidate above chance; best {best_fingerprint} at {best_accuracy:.4}");
            (*report, Some(CliError::domain("not-found", msg)))
        }
        Err(CrackError::InvalidArgument(m)) => return Err(CliError::usage(m)),
    };
    let mut v = to_value(&report);
    v["eval_share"] = json!(report.eval_share());
    v["discard_rate"] = json!(report.discard_rate());
    ctx.emit(v, || {
        let head = match &report.found {
            Some(f) => format!("found {} (index {}) accuracy {:.4}\nkey {}", f.fingerprint, f.index, f.accuracy, f.key),
            None => "not found".to_string(),
        };
        format!(
            "{head}\ntested {}  discarded {}  evaluated {}\nwall {:.3} s  eval share {:.3}",
            report.candidates_tested,
            report.discarded,
            report.evaluated,
            report.wall_time,
            report.eval_share()
        )
    });
    err.map_or(Ok(()), Err)
}

/// Parameter files are read as-is; locked files expose their payload under
/// the public schema.
fn load_any(path: &Path) -> Result<(String, ParamStore), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::domain("io", format!("{}: {e}", path.display())))?;
    if bytes.starts_with(&mlock_core::transform::MAGIC) {
        let locked = LockedModel::from_bytes(&bytes).map_err(transform_error)?;
        let store = ParamStore::unflatten(&locked.payload, &locked.descriptor.schema).map_err(|e| store_error(path, e))?;
        Ok((format!("locked:{}", locked.kind()), store))
    } else {
        Ok(("params".into(), ParamStore::from_file_bytes(&bytes).map_err(|e| store_error(path, e))?))
    }
}

fn stats(ctx: &Ctx, a: StatsArgs) -> Result<(), CliError> {
    let (kind, store) = load_any(&a.file)?;
    let st = DistributionStats::from_store(&store);
    let distinction = match &a.reference {
        Some(r) => {
            let (_, rs) = load_any(r)?;
            let d = distinguish(&store, &DistributionStats::from_store(&rs), a.alpha)
                .map_err(|e| CliError::domain("sample", e))?;
            Some(d)
        }
        None => None,
    };
    if ctx.format == Format::Csv {
        match a.histogram {
            HistogramArg::Value => {
                out!("bin,lower,upper,count");
                for (i, c) in st.value_histogram.iter().enumerate() {
                    let lo = if i == 0 { f64::NEG_INFINITY } else { st.bin_edges[i - 1] };
                    let hi = st.bin_edges.get(i).copied().unwrap_or(f64::INFINITY);
                    out!("{i},{lo},{hi},{c}");
                }
            }
            HistogramArg::Byte => {
                let pos: Vec<String> = (0..st.position_histograms.len()).map(|p| format!("pos{p}")).collect();
                out!("byte,count{}", pos.iter().map(|p| format!(",{p}")).collect::<String>());
                for b in 0..256 {
                    let row: String = st.position_histograms.iter().map(|h| format!(",{}", h[b])).collect();
                    out!("{b},{}{row}", st.byte_histogram[b]);
                }
            }
        }
        return Ok(());
    }
    ctx.emit(
        json!({
            "file": a.file.display().to_string(),
            "kind": kind,
            "stats": to_value(&st),
            "distinction": distinction.as_ref().map(to_value),
        }),
        || {
            let m = st.moments;
            let mut s = format!(
                "{kind}: {} values, mean {:.4e}, variance {:.4e}, excess kurtosis {:.3}, NaN {}",
                st.sample_size, m.mean, m.variance, m.kurtosis, st.nan_count
            );
            if let Some(d) = &distinction {
                s.push_str(&format!(
                    "\n{:?} at alpha {}: byte p {:.3e}, {} p {:.3e}",
                    d.verdict, d.alpha, d.byte_p_value, d.value_test, d.value_p_value
                ));
            }
            s
        },
    );
    Ok(())
}

fn bench(ctx: &Ctx, a: BenchArgs) -> Result<(), CliError> {
    ctx.no_csv("bench")?;
    let r = bench_sparse_vs_emulated(a.dim, a.sparsity, ctx.seed).map_err(net_error)?;
    ctx.emit(to_value(r), || {
        format!(
            "dim {} sparsity {} nnz {}\ncsr      {:.3e} s\nemulated {:.3e} s\nspeedup {:.2}x  max rel err {:.2e}",
            r.dim, r.sparsity, r.nnz, r.real.latency, r.emulated.latency, r.speedup, r.max_rel_err
        )
    });
    Ok(())
}
