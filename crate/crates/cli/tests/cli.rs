use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"
seed = 3

[network]
image_size = [32, 32]
levels = 3
base_channels = 4
time_embed_dim = 8
shallow_tap_level = 1
deep_tap_level = 2

[train]
epochs = 1

[registration]
iters_per_level = 20
"#;

fn acmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acmt"))
        .args(args)
        .env("ACMT_LOG_LEVEL", "error")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY_CONFIG).unwrap();
    p
}

fn gen(dir: &Path, count: usize, size: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("data_{count}_{size}_{seed}"));
    ok(&acmt(&[
        "gen",
        "--out",
        s(&out),
        "--count",
        &count.to_string(),
        "--size",
        &size.to_string(),
        "--seed",
        &seed.to_string(),
    ]));
    out
}

fn sorted_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

fn report_value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{key} missing from {text}"))
        .parse()
        .unwrap()
}

#[test]
fn gen_empty_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gen(tmp.path(), 0, 32, 1);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["samples"].as_array().unwrap().len(), 0);
}

#[test]
fn gen_file_accounting_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let a = gen(tmp.path(), 5, 32, 9);
    let b_dir = tmp.path().join("again");
    fs::create_dir(&b_dir).unwrap();
    let b = gen(&b_dir, 5, 32, 9);
    let files = sorted_files(&a);
    // Six files per pair, the manifest and the config echo.
    assert_eq!(files.len(), 5 * 6 + 2, "{files:?}");
    assert!(files.contains(&"config.toml".to_string()));
    assert_eq!(files, sorted_files(&b));
    for f in files {
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{f}");
    }
}

#[test]
fn gen_into_unwritable_path_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let out = acmt(&["gen", "--out", s(&blocker.join("sub")), "--count", "1", "--size", "32"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(acmt(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(acmt(&["gen"]).status.code(), Some(2));
}

#[test]
fn train_missing_data_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = acmt(&["train", "--data", s(&tmp.path().join("nope")), "--out", s(&tmp.path().join("ck"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_rejects_unknown_config_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), 4, 32, 1);
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "sed = 1\n[train]\nepoch = 2\n").unwrap();
    let out = acmt(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&tmp.path().join("ck"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sed") && err.contains("train.epoch"), "{err}");
}

#[test]
fn train_translate_and_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = gen(tmp.path(), 8, 32, 20);
    let ck1 = tmp.path().join("ck1");
    let ck2 = tmp.path().join("ck2");
    for ck in [&ck1, &ck2] {
        ok(&acmt(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(ck)]));
    }
    for f in ["weights.bin", "optimizer.bin", "meta.json", "config.toml", "train_log.jsonl"] {
        assert!(ck1.join(f).exists(), "{f}");
    }
    let log1 = fs::read_to_string(ck1.join("train_log.jsonl")).unwrap();
    let log2 = fs::read_to_string(ck2.join("train_log.jsonl")).unwrap();
    // 8 pairs in batches of 4 for one epoch.
    assert_eq!(log1.lines().count(), 2);
    assert_eq!(log1, log2);

    let t1 = tmp.path().join("t1");
    let t2 = tmp.path().join("t2");
    for t in [&t1, &t2] {
        ok(&acmt(&["translate", "--ckpt", s(&ck1), "--data", s(&data), "--out", s(t)]));
    }
    let pngs: Vec<String> = sorted_files(&t1).into_iter().filter(|f| f.starts_with("acmt_")).collect();
    assert_eq!(pngs.len(), 16);
    for f in &pngs {
        assert_eq!(fs::read(t1.join(f)).unwrap(), fs::read(t2.join(f)).unwrap());
    }
    assert!(t1.join("config.toml").exists());

    let direct = tmp.path().join("direct");
    ok(&acmt(&["translate", "--ckpt", s(&ck1), "--data", s(&data), "--out", s(&direct), "--nfe", "1"]));
    assert_eq!(sorted_files(&direct).iter().filter(|f| f.starts_with("acmt_")).count(), 16);

    let bad_nfe = acmt(&["translate", "--ckpt", s(&ck1), "--data", s(&data), "--out", s(&direct), "--nfe", "99"]);
    assert_eq!(bad_nfe.status.code(), Some(2));
}

#[test]
fn eval_translation_on_identical_dirs_is_near_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), 6, 32, 5);
    let report = tmp.path().join("reports/tr.txt");
    ok(&acmt(&[
        "eval",
        "--mode",
        "translation",
        "--data",
        s(&data),
        "--against",
        s(&data),
        "--out",
        s(&report),
    ]));
    let text = fs::read_to_string(&report).unwrap();
    assert!(report_value(&text, "fid_proxy").abs() < 1e-6, "{text}");
    assert!(report_value(&text, "kid_proxy").abs() < 0.05, "{text}");
    assert!(tmp.path().join("reports/config.toml").exists());
}

#[test]
fn eval_registration_zero_field_identical_masks() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), 1, 32, 2);
    let zone = data.join("zone_00000.png");
    let fixed = data.join("us_00000.png");
    let field = tmp.path().join("reg/field.bin");
    // Registering an image with itself yields a (numerically) zero field.
    ok(&acmt(&["register", "--fixed", s(&fixed), "--moving", s(&fixed), "--out", s(&field)]));
    assert!(field.exists() && field.with_extension("json").exists());
    let report = tmp.path().join("reg/eval.txt");
    ok(&acmt(&[
        "eval",
        "--mode",
        "registration",
        "--field",
        s(&field),
        "--moving-mask",
        s(&zone),
        "--fixed-mask",
        s(&zone),
        "--out",
        s(&report),
    ]));
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(report_value(&text, "dsc"), 1.0);
    assert_eq!(report_value(&text, "iou"), 1.0);
    assert_eq!(report_value(&text, "asd_px"), 0.0);
}

#[test]
fn shape_mismatch_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let small = gen(tmp.path(), 1, 32, 2);
    let big = gen(tmp.path(), 1, 64, 2);
    let out = acmt(&[
        "register",
        "--fixed",
        s(&small.join("us_00000.png")),
        "--moving",
        s(&big.join("mr_00000.png")),
        "--out",
        s(&tmp.path().join("f.bin")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = acmt(&[
        "eval",
        "--mode",
        "registration",
        "--field",
        s(&big.join("field_00000.bin")),
        "--moving-mask",
        s(&small.join("zone_00000.png")),
        "--fixed-mask",
        s(&small.join("zone_00000.png")),
        "--out",
        s(&tmp.path().join("r.txt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_pipeline_on_200_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = gen(tmp.path(), 200, 32, 100);
    let ck = tmp.path().join("ck");
    ok(&acmt(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ck)]));
    let tr = tmp.path().join("translated");
    ok(&acmt(&["translate", "--ckpt", s(&ck), "--data", s(&data), "--out", s(&tr)]));
    let field = tmp.path().join("reg/field_00000.bin");
    ok(&acmt(&[
        "register",
        "--fixed",
        s(&tr.join("acmt_us_00000.png")),
        "--moving",
        s(&tr.join("acmt_mr_00000.png")),
        "--out",
        s(&field),
        "--config",
        s(&cfg),
    ]));
    let tr_report = tmp.path().join("reports/translation.txt");
    let reg_report = tmp.path().join("reports/registration.txt");
    ok(&acmt(&["eval", "--mode", "translation", "--data", s(&tr), "--out", s(&tr_report)]));
    ok(&acmt(&[
        "eval",
        "--mode",
        "registration",
        "--data",
        s(&tr),
        "--out",
        s(&reg_report),
        "--config",
        s(&cfg),
    ]));
    let t = fs::read_to_string(&tr_report).unwrap();
    assert!(report_value(&t, "fid_proxy") >= 0.0);
    let r = fs::read_to_string(&reg_report).unwrap();
    assert_eq!(report_value(&r, "n_pairs"), 200.0);
    assert!((0.0..=1.0).contains(&report_value(&r, "dsc")));
}
