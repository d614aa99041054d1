//! Exit codes, flag validation, and file-level behavior of the binary.

use std::path::Path;
use std::process::Command;

fn diva() -> Command {
    Command::new(env!("CARGO_BIN_EXE_diva"))
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(
        &p,
        r#"
[data]
n_samples = 8
grid_side = 4
caption_max_len = 6

[model]
num_layers = 2
width = 8
heads = 2
ff_width = 16
grid_side = 4
caption_max_len = 6
prompt_len = 2
mid_start = 1
mid_end = 2

[factor]
d_z = 8
rank = 4

[stage1]
steps = 4
batch_size = 2
log_interval = 1

[stage2]
steps = 4
batch_size = 2
ramp_steps = 2
log_interval = 1

[eval]
n_eval = 8
"#,
    )
    .unwrap();
    p
}

#[test]
fn gen_data_is_reproducible_and_exit_codes_hold() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let d1 = dir.path().join("a.jsonl");
    let d2 = dir.path().join("b.jsonl");
    for d in [&d1, &d2] {
        let st = diva()
            .args(["gen-data", "--seed", "7", "--out"])
            .arg(d)
            .arg("--config")
            .arg(&cfg)
            .status()
            .unwrap();
        assert_eq!(st.code(), Some(0));
    }
    assert_eq!(
        std::fs::read(&d1).unwrap(),
        std::fs::read(&d2).unwrap(),
        "identical (config, seed) -> identical files"
    );
}

#[test]
fn stage2_without_from_stage1_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let data = dir.path().join("d.jsonl");
    assert_eq!(
        diva()
            .args(["gen-data", "--seed", "1", "--out"])
            .arg(&data)
            .arg("--config")
            .arg(&cfg)
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    let out = diva()
        .args(["stage2", "--seed", "1", "--data"])
        .arg(&data)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("s2"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "exit 1 on usage error");
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("--from-stage1"), "message names the flag: {msg}");
}

#[test]
fn unknown_flag_and_conflicting_flag_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = diva()
        .args(["gen-data", "--definitely-not-a-flag", "x", "--out"])
        .arg(dir.path().join("x.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("definitely-not-a-flag"), "{msg}");

    // --no-uni belongs to stage2 only; eval rejects it
    let out = diva()
        .args(["eval", "--no-uni", "--ckpt", "a", "--data", "b", "--out", "c"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "conflicting flag is a usage error");
    assert!(String::from_utf8_lossy(&out.stderr).contains("--no-uni"));
}

#[test]
fn missing_checkpoint_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let data = dir.path().join("d.jsonl");
    diva()
        .args(["gen-data", "--seed", "1", "--out"])
        .arg(&data)
        .arg("--config")
        .arg(&cfg)
        .status()
        .unwrap();
    let out = diva()
        .args(["eval", "--ckpt"])
        .arg(dir.path().join("nope.ckpt"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("ev"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "exit 2 on runtime failure");
}

#[test]
fn full_tiny_pipeline_with_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let data = dir.path().join("d.jsonl");
    let heldout = dir.path().join("h.jsonl");
    for (seed, path) in [("3", &data), ("4", &heldout)] {
        assert_eq!(
            diva()
                .args(["gen-data", "--seed", seed, "--out"])
                .arg(path)
                .arg("--config")
                .arg(&cfg)
                .status()
                .unwrap()
                .code(),
            Some(0)
        );
    }
    let s1 = dir.path().join("s1");
    assert_eq!(
        diva()
            .args(["stage1", "--seed", "3", "--strict-deterministic", "--data"])
            .arg(&data)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(&s1)
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    // run directory contents: manifest + config echo + reports + checkpoint
    for f in ["manifest.json", "config.toml", "reports.jsonl", "state.ckpt"] {
        assert!(s1.join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(s1.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["command"], "stage1");
    assert!(manifest["finished_unix"].is_u64());

    let s2 = dir.path().join("s2");
    assert_eq!(
        diva()
            .args(["stage2", "--seed", "3", "--data"])
            .arg(&data)
            .arg("--from-stage1")
            .arg(s1.join("state.ckpt"))
            .arg("--out")
            .arg(&s2)
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    let ev = dir.path().join("ev");
    let out = diva()
        .args(["eval", "--seed", "9", "--ckpt"])
        .arg(s2.join("state.ckpt"))
        .arg("--data")
        .arg(&heldout)
        .arg("--out")
        .arg(&ev)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    for k in [
        "n",
        "val_l_und",
        "val_l_gen",
        "masked_top1",
        "caption_top1",
        "retrieval_at1",
        "shared_mi_lower",
        "uni_club",
    ] {
        assert!(report.get(k).is_some(), "eval.json missing {k}");
    }

    // diagnose + export-factors
    let dg = dir.path().join("dg");
    assert_eq!(
        diva()
            .args(["diagnose", "--metrics", "residual,er,grad-conflict,freq", "--batch", "4", "--ckpt"])
            .arg(s2.join("state.ckpt"))
            .arg("--data")
            .arg(&heldout)
            .arg("--out")
            .arg(&dg)
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    for f in ["residual.csv", "er_increment.csv", "grad_conflict.csv", "freq.csv"] {
        let text = std::fs::read_to_string(dg.join(f)).unwrap();
        assert!(text.starts_with("layer,value,metric,batch_size\n"), "{f} schema");
        assert!(text.lines().count() > 1);
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            let value: f64 = cols[1].parse().unwrap();
            assert!(value.is_finite(), "{f}: {line}");
            match cols[2] {
                "grad_conflict_cosine" => assert!((-1.0..=1.0).contains(&value), "{line}"),
                "residual_g_given_u" | "residual_u_given_g" => {
                    assert!((0.0..=1.0).contains(&value), "{line}")
                }
                m if m.starts_with("high_freq_ratio") => {
                    assert!((0.0..=1.0).contains(&value), "{line}")
                }
                _ => {}
            }
        }
    }
    // unknown metric is a usage error
    let out = diva()
        .args(["diagnose", "--metrics", "nope", "--ckpt"])
        .arg(s2.join("state.ckpt"))
        .arg("--data")
        .arg(&heldout)
        .arg("--out")
        .arg(dir.path().join("dg2"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    let ex = dir.path().join("ex");
    assert_eq!(
        diva()
            .args(["export-factors", "--pca", "--ckpt"])
            .arg(s2.join("state.ckpt"))
            .arg("--data")
            .arg(&heldout)
            .arg("--out")
            .arg(&ex)
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    let csv = std::fs::read_to_string(ex.join("factors.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("sample_id,shape_class,color_class,quadrant,flow,layer,factor_kind,z0"));
    // n * flows * mid-layers * kinds rows
    assert_eq!(csv.lines().count() - 1, 8 * 2 * 2 * 2);
    assert!(ex.join("factors_pca2d.csv").exists());

    // re-export is byte-identical
    let ex2 = dir.path().join("ex2");
    diva()
        .args(["export-factors", "--ckpt"])
        .arg(s2.join("state.ckpt"))
        .arg("--data")
        .arg(&heldout)
        .arg("--out")
        .arg(&ex2)
        .status()
        .unwrap();
    assert_eq!(
        std::fs::read(ex.join("factors.csv")).unwrap(),
        std::fs::read(ex2.join("factors.csv")).unwrap()
    );
}

#[test]
fn out_root_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let st = diva()
        .env("DIVA_OUT_ROOT", dir.path())
        .args(["gen-data", "--seed", "2", "--config"])
        .arg(&cfg)
        .args(["--out", "rooted/d.jsonl"])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    assert!(dir.path().join("rooted/d.jsonl").exists());
}
