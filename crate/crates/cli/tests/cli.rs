use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 4] = ["--train-size", "400", "--test-size", "200"];

fn mlock(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlock"))
        .args(args)
        .env_remove("MLOCK_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mlock(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn check_schema(name: &str, doc: &str) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("schemas/{name}.schema.json"));
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let v: Value = serde_json::from_str(doc).unwrap_or_else(|e| panic!("{name}: {e}\n{doc}"));
    let compiled = jsonschema::JSONSchema::compile(&schema).unwrap();
    if let Err(errors) = compiled.validate(&v) {
        let msgs: Vec<String> = errors.map(|e| format!("{} at {}", e, e.instance_path)).collect();
        panic!("{name} output violates its schema: {msgs:?}\n{doc}");
    }
    v
}

fn trained(dir: &Path) -> String {
    let model = dir.join("m.mlps").display().to_string();
    let mut args = vec!["train", "-o", &model, "--epochs", "5"];
    args.extend(SMALL);
    ok(&args);
    model
}

#[test]
fn lock_help_exits_zero() {
    let out = mlock(&["lock", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("--fingerprint"));
}

#[test]
fn unknown_flag_exits_two_with_one_line() {
    let out = mlock(&["lock", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("mlock: error[usage]:"));
}

#[test]
fn missing_fingerprint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(dir.path());
    let out = mlock(&["lock", &model, "--method", "aes", "-o", "/dev/null"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn golden_pipeline_reproduces_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(dir.path());
    let locked = dir.path().join("m.mlck").display().to_string();
    let back = dir.path().join("back.mlps").display().to_string();
    let lock = ok(&["--json", "lock", &model, "--method", "pt-aes", "--fingerprint", "clock:72100", "-o", &locked]);
    check_schema("lock", &lock);
    let unlock = ok(&["--json", "unlock", &locked, "--fingerprint", "72100", "-o", &back]);
    check_schema("unlock", &unlock);
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(&back).unwrap());

    let acc = |path: &str| {
        let mut args = vec!["--json", "eval", path];
        args.extend(SMALL);
        check_schema("eval", &ok(&args))["accuracy"].as_f64().unwrap()
    };
    let before = acc(&model);
    assert!(before > 0.8, "{before}");
    assert_eq!(acc(&back), before);

    let wrong = dir.path().join("wrong.mlps").display().to_string();
    ok(&["unlock", &locked, "--fingerprint", "72101", "-o", &wrong]);
    assert!(acc(&wrong) < 0.8);
}

#[test]
fn json_outputs_match_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let d = |f: &str| dir.path().join(f).display().to_string();
    let model = d("m.mlps");
    let mut args = vec!["--json", "train", "-o", &model, "--epochs", "5"];
    args.extend(SMALL);
    check_schema("train", &ok(&args));

    check_schema("fingerprint", &ok(&["--json", "fingerprint", "--method", "fp", "--layers", "2", "--width", "16"]));
    let puf = check_schema("fingerprint", &ok(&["--json", "--seed", "4", "fingerprint", "--method", "puf"]));
    assert_eq!(puf["symbols"].as_str().unwrap().len(), 64);

    let locked = d("m.mlck");
    ok(&["lock", &model, "--method", "shuffle", "--fingerprint", "00007", "-o", &locked]);
    let stats = check_schema("stats", &ok(&["--json", "stats", &locked, "--reference", &model]));
    assert_eq!(stats["kind"], "locked:shuffle");
    assert_eq!(stats["distinction"]["verdict"], "plausible");

    let crack = ok(&["--json", "crack", &locked, "--bits", "3", "--workers", "2", "--train-size", "400", "--test-size", "200"]);
    let crack = check_schema("crack", &crack);
    assert_eq!(crack["found"]["index"], 7);
    assert_eq!(crack["candidates_tested"], 8);

    let soft = d("soft.mlps");
    let mut args = vec!["--json", "softlock", &model, "--epochs", "1", "-o", &soft];
    args.extend(SMALL);
    check_schema("softlock", &ok(&args));
    let mut args = vec!["--json", "attack", &soft, "--kind", "retrain", "--epochs", "1"];
    args.extend(SMALL);
    check_schema("attack", &ok(&args));
    let mut args = vec!["--json", "attack", &soft, "--kind", "noise", "--noise", "0,1", "--trials", "2"];
    args.extend(SMALL);
    check_schema("attack", &ok(&args));

    check_schema("bench", &ok(&["--json", "bench", "--dim", "128", "--sparsity", "0.9"]));
}

#[test]
fn curves_are_csv_with_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(dir.path());
    let soft = dir.path().join("soft.mlps").display().to_string();
    let mut args = vec!["--csv", "softlock", &model, "--epochs", "2", "-o", &soft];
    args.extend(SMALL);
    let csv = ok(&args);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,acc_auth,acc_unauth");
    assert_eq!(lines.len(), 4);
    let hist = ok(&["--csv", "stats", &model]);
    assert_eq!(hist.lines().next(), Some("bin,lower,upper,count"));
    assert_eq!(hist.lines().count(), 65);
}

#[test]
fn seed_fixes_non_timing_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = |f: &str| dir.path().join(f).display().to_string();
    let model = trained(dir.path());
    for (name, seed) in [("a", "3"), ("b", "3")] {
        ok(&["--seed", seed, "lock", &model, "--method", "aes", "--fingerprint", "00001", "-o", &d(name)]);
    }
    ok(&["--seed", "4", "lock", &model, "--method", "aes", "--fingerprint", "00001", "-o", &d("c")]);
    let read = |f: &str| std::fs::read(d(f)).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));

    // the environment wins over the flag
    let out = Command::new(env!("CARGO_BIN_EXE_mlock"))
        .args(["--seed", "4", "lock", &model, "--method", "aes", "--fingerprint", "00001", "-o", &d("e")])
        .env("MLOCK_SEED", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(read("e"), read("a"));
}

#[test]
fn crack_without_the_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(dir.path());
    let locked = dir.path().join("m.mlck").display().to_string();
    ok(&["lock", &model, "--method", "aes", "--fingerprint", "fffff", "-o", &locked]);
    let out = mlock(&["crack", &locked, "--bits", "2", "--reference", &model, "--train-size", "400", "--test-size", "200"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("mlock: error[not-found]:"), "{err}");
}

#[test]
fn corrupt_locked_file_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(dir.path());
    let locked = dir.path().join("m.mlck");
    ok(&["lock", &model, "--method", "aes", "--fingerprint", "00001", "-o", locked.to_str().unwrap()]);
    let mut bytes = std::fs::read(&locked).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 1;
    std::fs::write(&locked, bytes).unwrap();
    let out = mlock(&["unlock", locked.to_str().unwrap(), "--fingerprint", "00001", "-o", "/dev/null"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(dir.path());
    let cfg = dir.path().join("mlock.toml");
    std::fs::write(&cfg, "json = true\n[lock]\nmethod = \"shuffle\"\nfingerprint = \"clock:00003\"\n").unwrap();
    let cfg = cfg.display().to_string();
    let locked = dir.path().join("m.mlck").display().to_string();
    let out = ok(&["--config", &cfg, "lock", &model, "-o", &locked]);
    assert_eq!(check_schema("lock", &out)["kind"], "shuffle");
    // explicit flags override the file
    let out = ok(&["--config", &cfg, "lock", &model, "--method", "aes", "-o", &locked]);
    assert_eq!(check_schema("lock", &out)["kind"], "aes");

    std::fs::write(dir.path().join("bad.toml"), "[nope]\n").unwrap();
    let bad = dir.path().join("bad.toml").display().to_string();
    assert_eq!(mlock(&["--config", &bad, "lock", &model, "-o", &locked]).status.code(), Some(2));
}

#[test]
fn log_level_controls_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(dir.path());
    let locked = dir.path().join("m.mlck").display().to_string();
    let run = |level: &str| {
        let out = mlock(&["--log-level", level, "lock", &model, "--method", "aes", "--fingerprint", "00001", "-o", &locked]);
        assert!(out.status.success());
        String::from_utf8(out.stderr).unwrap()
    };
    assert_eq!(run("warn"), "");
    let info = run("info");
    assert!(info.lines().all(|l| l.starts_with("mlock: info: ")), "{info}");
    assert!(info.contains("fingerprint clock:00001") || info.contains("fingerprint 00001"), "{info}");
    assert!(run("debug").contains("mlock: debug: seed 0"));
}
