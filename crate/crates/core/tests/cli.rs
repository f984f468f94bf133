use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use serde_json::Value;

use irmask::attack::{run_attack, AttackConfig};
use irmask::corpus::{synthetic_face, write_victim_corpus};
use irmask::image::save_image;
use irmask::oracle::{distance, EmbeddingOracle, OracleConfig, ReferenceEmbedding};
use irmask::spot::{synthesize, PerturbationConfig, SpotParams};
use irmask::study::DEFAULT_BINS;

const BIN: &str = env!("CARGO_BIN_EXE_irmask");

fn irmask(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("run irmask")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn face(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let path = dir.join(name);
    save_image(&synthetic_face(48, 48, seed), &path).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn attack_on_self_reports_zero() {
    let dir = tempfile::tempdir().unwrap();
    let a = face(dir.path(), "a.png", 1);
    let out = irmask(&["attack", "--attacker", s(&a), "--victim", s(&a), "--iters", "5", "--refine", "0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = stdout_json(&out);
    assert_eq!(r["best_distance"], 0.0);
    assert_eq!(r["success"], true);
}

#[test]
fn attack_that_finds_nothing_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let a = face(dir.path(), "a.png", 1);
    let v = face(dir.path(), "v.png", 2);
    let out = irmask(&["attack", "--attacker", s(&a), "--victim", s(&v), "--iters", "0", "--refine", "0", "--threshold", "1e-9"]);
    assert_eq!(code(&out), 3);
    assert_eq!(stdout_json(&out)["success"], false);
}

#[test]
fn attack_writes_replayable_layout() {
    let dir = tempfile::tempdir().unwrap();
    let a = face(dir.path(), "a.png", 1);
    let v = face(dir.path(), "v.png", 2);
    let layout = dir.path().join("layout.json");
    let out = irmask(&[
        "attack", "--attacker", s(&a), "--victim", s(&v), "--iters", "20", "--refine", "0", "--seed", "4",
        "--config-out", s(&layout),
    ]);
    assert!(matches!(code(&out), 0 | 3));
    let r = stdout_json(&out);
    let cfg = PerturbationConfig::from_json(&std::fs::read_to_string(&layout).unwrap()).unwrap();
    let o = ReferenceEmbedding::new();
    let att = irmask::image::load_image(&a).unwrap();
    let vic = o.embed(&irmask::image::load_image(&v).unwrap()).unwrap();
    let d = distance(&o.embed(&synthesize(&att, &cfg).clamped()).unwrap(), &vic).unwrap();
    assert_eq!(d, r["best_distance"].as_f64().unwrap());
}

#[test]
fn radiometry_unit_case_prints_one() {
    let out = irmask(&["radiometry", "--pled", "3.141592653589793", "--eta", "1", "--r", "1"]);
    assert_eq!(code(&out), 0);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "1.0");
    let out = irmask(&["radiometry", "--pled", "1", "--eta", "1", "--r", "0"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&irmask(&["attack"])), 1);
    assert_eq!(code(&irmask(&["bogus"])), 1);
    assert_eq!(code(&irmask(&["--help"])), 0);
    let out = irmask(&["attack", "--attacker", "/nonexistent.png", "--victim", "/nonexistent.png"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn unreachable_oracle_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let a = face(dir.path(), "a.png", 1);
    let out = irmask(&[
        "attack", "--attacker", s(&a), "--victim", s(&a), "--oracle", "http://127.0.0.1:9", "--oracle-timeout", "2",
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn study_report_matches_schema() {
    let dir = tempfile::tempdir().unwrap();
    let a = face(dir.path(), "attacker_0001.png", 21);
    let victims = dir.path().join("victims");
    let o = ReferenceEmbedding::new();
    let attacker = irmask::image::load_image(&a).unwrap();
    for (k, &(lo, hi)) in DEFAULT_BINS.iter().enumerate() {
        write_victim_corpus(&victims, &attacker, 10 * k, 10, lo, hi, 7 + k as u64, &o).unwrap();
    }
    let csv = dir.path().join("summary.csv");
    let out = irmask(&[
        "study", "--attacker", s(&a), "--victims", s(&victims), "--iters", "30", "--refine", "10", "--jobs", "4",
        "--csv", s(&csv),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);

    let schema: Value =
        serde_json::from_str(include_str!("../schema/study_report.schema.json")).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&report).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");

    let bins = report["attackers"][0]["bins"].as_array().unwrap();
    assert_eq!(bins.iter().map(|b| b["n_victims"].as_u64().unwrap()).sum::<u64>(), 30);
    let pairs = report["attackers"][0]["pairs"].as_array().unwrap();
    let successes = pairs.iter().filter(|p| p["success"] == true).count() as u64;
    assert_eq!(bins.iter().map(|b| b["n_success"].as_u64().unwrap()).sum::<u64>(), successes);
    let rows = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 1 + DEFAULT_BINS.len());
}

#[test]
fn schema_rejects_malformed_reports() {
    let schema: Value = serde_json::from_str(include_str!("../schema/study_report.schema.json")).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    assert!(!validator.is_valid(&serde_json::json!({ "threshold": 1.242 })));
}

#[test]
fn calibrate_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let off_img = synthetic_face(64, 64, 5).quantized();
    let target = PerturbationConfig::new(1.2, vec![SpotParams::new(20.0, 22.0, 4.0, 1.0), SpotParams::new(44.0, 40.0, 5.0, 1.0)]);
    let on = dir.path().join("on.png");
    let off = dir.path().join("off.png");
    save_image(&synthesize(&off_img, &target).clamped(), &on).unwrap();
    save_image(&off_img, &off).unwrap();
    let t = dir.path().join("target.json");
    std::fs::write(&t, target.to_json()).unwrap();
    let v = dir.path().join("v.png");
    save_image(&synthetic_face(64, 64, 6), &v).unwrap();
    let out = irmask(&["calibrate", "--on", s(&on), "--off", s(&off), "--target", s(&t), "--victim", s(&v)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["spots"].as_array().unwrap().len(), 2);
    for spot in report["spots"].as_array().unwrap() {
        assert_eq!(spot["found"], true);
        assert_eq!(spot["brightness_verdict"], "ok");
    }
}

#[test]
fn flood_dodges_reference_landmarks() {
    let dir = tempfile::tempdir().unwrap();
    let a = face(dir.path(), "a.png", 8);
    let out = irmask(&["dodge", "--attacker", s(&a), "--flood", "20", "--landmarks", "reference"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = stdout_json(&out);
    assert_eq!(r["mode"], "flood");
    assert_eq!(r["dodged_landmarks"], true);
}

#[test]
fn stdio_oracle_matches_reference() {
    let o = ReferenceEmbedding::new();
    let cfg = OracleConfig::from_selector(&format!("cmd:{BIN} oracle"));
    let external = cfg.connect().unwrap();
    let img = synthetic_face(32, 40, 3).quantized();
    let a = external.embed(&img).unwrap();
    let b = o.embed(&img).unwrap();
    // pixels cross the wire as f32
    for (x, y) in a.values.iter().zip(&b.values) {
        assert!((x - y).abs() < 1e-6, "{x} vs {y}");
    }
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn http_oracle_drives_an_attack() {
    let mut child = Command::new(BIN)
        .args(["oracle", "--http", "127.0.0.1:0"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(child.stderr.take().unwrap());
    let mut line = String::new();
    stderr.read_line(&mut line).unwrap();
    let _server = Server(child);
    let url = line.trim().rsplit(' ').next().unwrap().to_string();
    assert!(url.starts_with("http://"), "{line}");

    let external = OracleConfig::from_selector(&url).connect().unwrap();
    let reference = ReferenceEmbedding::new();
    let a = synthetic_face(32, 32, 1).quantized();
    let v = synthetic_face(32, 32, 2).quantized();
    let cfg = AttackConfig { max_iters: 3, refine_iters: 0, ..AttackConfig::default() };
    let blackbox = AttackConfig { grad_mode: irmask::attack::GradMode::Blackbox, ..cfg.clone() };
    let over_http = run_attack(&a, &v, &blackbox, external.as_ref()).unwrap();
    let local = run_attack(&a, &v, &blackbox, &reference).unwrap();
    assert_eq!(over_http.oracle_calls, local.oracle_calls);
    assert!((over_http.initial_distance - local.initial_distance).abs() < 1e-5);
    assert!(over_http.best_distance <= over_http.initial_distance);
    assert!(run_attack(&a, &v, &cfg, external.as_ref()).is_err(), "no gradients over the wire");
    drop(stderr);
}
