use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn instmask(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_instmask"));
    cmd.args(args).env_remove("CONSIS_MASK_THREADS");
    if let Some(t) = threads {
        cmd.env("CONSIS_MASK_THREADS", t);
    }
    cmd.output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn gen_scene_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a.json"), d.path().join("b.json"));
    let o = instmask(&["gen-scene", "--seed", "7", "--out", s(&a)], None);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("T=8 H=128 W=224"));
    assert_eq!(code(&instmask(&["gen-scene", "--seed", "7", "--out", s(&b)], None)), 0);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn zero_frames_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let o = instmask(&["gen-scene", "--frames", "0", "--out", s(&d.path().join("x.json"))], None);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = instmask(&["gen-scene", "--height", "100", "--out", s(&d.path().join("x.json"))], None);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("not divisible"));
    let o = instmask(&["gen-scene", "--bogus"], None);
    assert_eq!(code(&o), 2);
}

#[test]
fn occluded_three_frame_scene_has_a_gap() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("occ.json");
    let o = instmask(&["gen-scene", "--occlusion", "--frames", "3", "--out", s(&p)], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("no pose in frames [1]"));
    let scene = instmask::scene::load_scene(&p).unwrap();
    assert!(scene.instances.iter().any(|i| !i.poses.contains_key(&1) && i.poses.contains_key(&0) && i.poses.contains_key(&2)));
}

#[test]
fn build_masks_outputs_and_subset_check() {
    let d = tempfile::tempdir().unwrap();
    let sc = d.path().join("s.json");
    instmask(&["gen-scene", "--seed", "7", "--out", s(&sc)], None);
    let (lo, hi) = (d.path().join("lo"), d.path().join("hi"));
    assert_eq!(code(&instmask(&["build-masks", "--scene", s(&sc), "--out-dir", s(&lo), "--theta", "0.1"], None)), 0);
    for f in ["manifest.json", "view0/indicator.json", "view0/attention.sparse.json", "view0/attention.dense.bin", "view0/loss_mask.json", "view0/masks", "view0/pgm", "view0/latent"] {
        assert!(lo.join(f).exists(), "{f}");
    }
    assert!(instmask::pipeline::verify_manifest(&lo).unwrap().is_empty());

    let o = instmask(&["build-masks", "--scene", s(&sc), "--out-dir", s(&hi), "--theta", "0.9", "--check-subset", s(&lo)], None);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("subset view0/indicator.json: pass"));

    // The reverse direction fails as a property, not a usage error.
    let o = instmask(&["build-masks", "--scene", s(&sc), "--out-dir", s(&lo), "--theta", "0.1", "--check-subset", s(&hi)], None);
    assert_eq!(code(&o), 1);
}

#[test]
fn build_masks_rejects_bad_inputs() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("missing.json");
    assert_eq!(code(&instmask(&["build-masks", "--scene", s(&missing), "--out-dir", s(d.path())], None)), 2);
    let sc = d.path().join("s.json");
    fs::write(&sc, "{\"dims\": 3}").unwrap();
    assert_eq!(code(&instmask(&["build-masks", "--scene", s(&sc), "--out-dir", s(d.path())], None)), 2);
    instmask(&["gen-scene", "--out", s(&sc)], None);
    assert_eq!(code(&instmask(&["build-masks", "--scene", s(&sc), "--out-dir", s(d.path()), "--theta", "1.5"], None)), 2);
    assert_eq!(code(&instmask(&["build-masks", "--scene", s(&sc), "--out-dir", s(d.path())], Some("zero"))), 2);
}

#[test]
fn zero_instance_scene() {
    let d = tempfile::tempdir().unwrap();
    let sc = d.path().join("s.json");
    instmask(&["gen-scene", "--instances", "0", "--out", s(&sc)], None);
    let out = d.path().join("o");
    assert_eq!(code(&instmask(&["build-masks", "--scene", s(&sc), "--out-dir", s(&out)], None)), 0);
    let mask = instmask::masks::AttentionMask::from_sparse_json(&fs::read_to_string(out.join("view0/attention.sparse.json")).unwrap()).unwrap();
    assert_eq!(mask.n(), 0);
    let idx = instmask::latent::IndicatorIndex::from_json(&fs::read_to_string(out.join("view0/indicator.json")).unwrap()).unwrap();
    assert!(idx.inverse().is_empty());
}

#[test]
fn check_filters_and_tamper() {
    let d = tempfile::tempdir().unwrap();
    let report = d.path().join("r.json");
    let o = instmask(&["check", "--suite", "leakage", "--json", s(&report)], None);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["passed"], true);
    let checks = v["checks"].as_array().unwrap();
    assert!(!checks.is_empty() && checks.iter().all(|c| c["suite"] == "leakage"));

    let sc = d.path().join("s.json");
    instmask(&["gen-scene", "--seed", "7", "--out", s(&sc)], None);
    let out = d.path().join("o");
    instmask(&["build-masks", "--scene", s(&sc), "--out-dir", s(&out)], None);
    let sparse = out.join("view0/attention.sparse.json");
    let o = instmask(&["check", "--suite", "tamper", "--tamper", s(&sparse)], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(code(&instmask(&["check", "--suite", "tamper", "--tamper", s(&out.join("view0/attention.dense.bin"))], None)), 0);

    let text = fs::read_to_string(&sparse).unwrap();
    let mask = instmask::masks::AttentionMask::from_sparse_json(&text).unwrap();
    // Drop one visual -> identity entry but keep its mirror.
    let (r, c) = mask.unmasked_pairs().into_iter().find(|&(r, c)| r < mask.m() && c >= mask.m()).unwrap();
    let tampered = text.replacen(&format!("[{r},{c}],"), "", 1);
    assert_ne!(tampered, text);
    let bad = d.path().join("bad.json");
    fs::write(&bad, tampered).unwrap();
    let rep = d.path().join("bad_report.json");
    let o = instmask(&["check", "--suite", "tamper", "--tamper", s(&bad), "--json", s(&rep)], None);
    assert_eq!(code(&o), 1);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&rep).unwrap()).unwrap();
    let failed: Vec<&str> = v["checks"].as_array().unwrap().iter().filter(|c| c["passed"] == false).map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(failed, vec!["identity-symmetry", "fixture-definition"]);

    fs::write(&bad, "not a mask").unwrap();
    assert_eq!(code(&instmask(&["check", "--suite", "tamper", "--tamper", s(&bad)], None)), 1);
    assert_eq!(code(&instmask(&["check", "--suite", "nope"], None)), 2);
}

#[test]
fn demo_attention_reports_no_leakage() {
    let d = tempfile::tempdir().unwrap();
    let sc = d.path().join("s.json");
    instmask(&["gen-scene", "--seed", "7", "--out", s(&sc)], None);
    let j = d.path().join("demo.json");
    let o = instmask(&["demo-attention", "--scene", s(&sc), "--heads", "2", "--d-model", "16", "--json", s(&j)], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&j).unwrap()).unwrap();
    assert_eq!(v["zero_gate_identity"], true);

    let params = d.path().join("p.json");
    fs::write(&params, instmask::check::default_demo_mlp(3, 16, 4).unwrap().to_json()).unwrap();
    let o = instmask(&["demo-attention", "--scene", s(&sc), "--d-model", "16", "--params", s(&params)], None);
    assert_eq!(code(&o), 0);
    assert_eq!(code(&instmask(&["demo-attention", "--scene", s(&sc), "--d-model", "16", "--heads", "3"], None)), 2);
}
