use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lxfuse::fusion::{FusionConfig, FusionStack};
use lxfuse::imageio::pnm_payload;
use lxfuse::{Parameterized, Rng};
use lxfuse_cli::{cmd_annotate, cmd_bench, cmd_eval, cmd_gradcheck, cmd_train, CliError, RunConfig};
use tempfile::TempDir;

fn tiny(out: &Path) -> RunConfig {
    let text = format!(
        "seed = 3\nout = {:?}\nthreads = 1\n[train]\nsteps = 12\nbatch = 2\nwarmup = 2\n[data]\ntrain_scenes = 8\neval_scenes = 6\n",
        out.display().to_string()
    );
    RunConfig::from_toml(&text).unwrap()
}

fn lxfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lxfuse")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// 4x3 RGB ramp with a comment in the header.
fn write_ppm(path: &Path) -> Vec<u8> {
    let payload: Vec<u8> = (0..36).map(|i| (i * 7) as u8).collect();
    let mut bytes = b"P6\n# ramp\n4 3\n255\n".to_vec();
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).unwrap();
    payload
}

#[test]
fn train_is_deterministic_and_creates_out() {
    let dir = TempDir::new().unwrap();
    let a = tiny(&dir.path().join("nested/a"));
    let b = tiny(&dir.path().join("b"));
    let ta = cmd_train(&a, false).unwrap();
    let tb = cmd_train(&b, false).unwrap();
    let (la, lb) = (fs::read(&ta.loss_csv).unwrap(), fs::read(&tb.loss_csv).unwrap());
    assert_eq!(la, lb);
    let text = String::from_utf8(la).unwrap();
    assert_eq!(text.lines().count(), 13);
    assert!(ta.checkpoint.exists());
}

#[test]
fn eval_report_has_thirteen_rows_and_is_stable() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    let t = cmd_train(&cfg, false).unwrap();
    let (report, path) = cmd_eval(&cfg, &t.checkpoint).unwrap();
    assert_eq!(report.rows.len(), 13);
    assert!(report.rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy())));
    let first = fs::read(&path).unwrap();
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 14);
    cmd_eval(&cfg, &t.checkpoint).unwrap();
    assert_eq!(fs::read(&path).unwrap(), first);
}

#[test]
fn eval_rejects_incompatible_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    let t = cmd_train(&cfg, false).unwrap();
    let mut wider = cfg.clone();
    wider.model.d = 16;
    wider.model.heads = 2;
    assert!(matches!(cmd_eval(&wider, &t.checkpoint), Err(CliError::Usage(_))));
    let missing = dir.path().join("nope.ckpt");
    assert!(matches!(cmd_eval(&cfg, &missing), Err(CliError::Usage(_))));
}

#[test]
fn degrade_clean_and_darkness() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("in.ppm");
    let payload = write_ppm(&input);
    let s = |p: &Path| p.to_str().unwrap().to_string();

    let clean = dir.path().join("clean.ppm");
    let o = lxfuse(&[
        "degrade",
        &s(&input),
        "--kind",
        "darkness",
        "--severity",
        "clean",
        "-o",
        &s(&clean),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(pnm_payload(&fs::read(&clean).unwrap()).unwrap(), payload.as_slice());

    let dark = dir.path().join("sub/dark.ppm");
    let o = lxfuse(&[
        "degrade",
        &s(&input),
        "--kind",
        "darkness",
        "--severity",
        "4",
        "-o",
        &s(&dark),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = fs::read(&dark).unwrap();
    let got = pnm_payload(&bytes).unwrap();
    assert_eq!(got.len(), payload.len());
    for (&g, &p) in got.iter().zip(&payload) {
        let want = (0.1 * f64::from(p)).round();
        assert!((f64::from(g) - want).abs() <= 1.0, "{p} -> {g}");
    }
}

#[test]
fn degrade_usage_errors() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("in.ppm");
    write_ppm(&input);
    let out = dir.path().join("o.ppm");
    let (i, o) = (input.to_str().unwrap(), out.to_str().unwrap());

    let r = lxfuse(&["degrade", i, "--kind", "smoke", "--severity", "1", "-o", o]);
    assert_eq!(r.status.code(), Some(1), "{}", stderr(&r));

    let bad = dir.path().join("bad.ppm");
    fs::write(&bad, b"JFIF not a netpbm").unwrap();
    let r = lxfuse(&[
        "degrade",
        bad.to_str().unwrap(),
        "--kind",
        "fog",
        "--severity",
        "2",
        "-o",
        o,
    ]);
    assert_eq!(r.status.code(), Some(1), "{}", stderr(&r));
    assert!(!out.exists());
}

fn metric(csv: &str, key: &str) -> String {
    csv.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(',')))
        .unwrap_or_else(|| panic!("no {key} in\n{csv}"))
        .to_string()
}

#[test]
fn bench_full_scale_preset() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    let (csv, path) = cmd_bench(&cfg).unwrap();
    assert_eq!(fs::read_to_string(path).unwrap(), csv);
    assert!(csv.starts_with("metric,value\n"));
    assert_eq!(metric(&csv, "visual_ratio"), "4.0");
    let total: f64 = metric(&csv, "total_params").parse().unwrap();
    assert!((0.035e9..=0.065e9).contains(&total), "{total}");
    let overhead: f64 = metric(&csv, "overhead_percent").parse().unwrap();
    assert!(overhead > 0.0 && overhead < 1.0, "{overhead}");
}

#[test]
fn bench_run_preset_matches_module_enumeration() {
    let dir = TempDir::new().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.bench.preset = lxfuse_cli::config::BenchPreset::Run;
    let (csv, _) = cmd_bench(&cfg).unwrap();
    let stack = FusionStack::new(&cfg.model.fusion(), &mut Rng::new(0)).unwrap();
    assert_eq!(metric(&csv, "fusion_params"), stack.param_count().to_string());
    // a d -> d_dec linear with bias
    let proj = cfg.model.d * cfg.model.d_dec + cfg.model.d_dec;
    assert_eq!(metric(&csv, "projection_params"), proj.to_string());
    assert_eq!(metric(&csv, "visual_ratio"), "4.0");
}

#[test]
fn gradcheck_passes_and_names_a_fault() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    let out = cmd_gradcheck(&cfg, None).unwrap();
    assert!(out.failing.is_empty(), "{}", out.csv);
    let names: Vec<&str> = out.csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    let fusion = FusionConfig {
        radii: cfg.gradcheck.radii.clone(),
        ..FusionConfig::with_width(cfg.gradcheck.d)
    };
    let stack = FusionStack::new(&fusion, &mut Rng::new(0)).unwrap();
    let mut expected = Vec::new();
    stack.visit_params("", &mut |n, _| expected.push(n.to_string()));
    assert_eq!(names, expected);

    let o = lxfuse(&[
        "gradcheck",
        "--out",
        dir.path().to_str().unwrap(),
        "--inject-fault",
        "blocks.2.ffn.up.weight",
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("blocks.2.ffn.up.weight"), "{}", stderr(&o));
    let o = lxfuse(&[
        "gradcheck",
        "--out",
        dir.path().to_str().unwrap(),
        "--inject-fault",
        "no.such.param",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

fn manifest(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("images.jsonl");
    let lines = [
        r#"{"id": "s0", "ir_path": "ir/s0.pgm", "question": "q"}"#,
        r#"{"id": "s0", "ir_path": "ir/s0.pgm", "question": "other"}"#,
        r#"{"id": "s1", "path": "ir/s1.pgm"}"#,
        r#"{"id": "s2"}"#,
    ];
    fs::write(&path, lines.join("\n")).unwrap();
    path
}

#[test]
fn annotate_mock_counts_and_reruns() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(&dir.path().join("ann"));
    let m = manifest(dir.path());
    let out = cmd_annotate(&cfg, &m).unwrap();
    assert_eq!(out.images, 3);
    let records = fs::read_to_string(&out.records).unwrap();
    let finals = fs::read_to_string(&out.finals).unwrap();
    assert_eq!(records.lines().count(), 81);
    assert_eq!(finals.lines().count(), 3);
    for line in records.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["score"].is_number() && v["is_hard_negative"].is_boolean());
    }
    cmd_annotate(&cfg, &m).unwrap();
    assert_eq!(fs::read_to_string(&out.records).unwrap(), records);
    assert_eq!(fs::read_to_string(&out.finals).unwrap(), finals);
}

#[test]
fn annotate_remote_without_token_is_usage_error() {
    let dir = TempDir::new().unwrap();
    let m = manifest(dir.path());
    let cfg_path = dir.path().join("remote.toml");
    fs::write(
        &cfg_path,
        "[annotate]\nbackend = \"remote\"\n[annotate.chat]\nbase_url = \"http://127.0.0.1:9/v1\"\ntoken_env = \"LXFUSE_CLI_TEST_UNSET\"\n",
    )
    .unwrap();
    let o = lxfuse(&[
        "annotate",
        m.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("LXFUSE_CLI_TEST_UNSET"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nsteps = \"many\"\n").unwrap();
    let o = lxfuse(&["bench", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("steps"), "{}", stderr(&o));
    assert_eq!(lxfuse(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(lxfuse(&["--help"]).status.code(), Some(0));
}
