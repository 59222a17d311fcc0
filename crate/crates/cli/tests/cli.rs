use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn rev2net(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rev2net"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn write_config(path: &Path, value: Value) {
    std::fs::write(path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
}

/// Files under `dir`, relative to it.
fn tree(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().display().to_string());
            }
        }
    }
    out.sort();
    out
}

fn tiny_config(out: &str) -> Value {
    json!({
        "model": {
            "frames": 4, "height": 16, "width": 16,
            "encoder_widths": [2, 4, 4, 4], "latent_dim": 2,
            "decoder_width": 2, "frame_decoder_width": 2
        },
        "train": { "epochs": 1, "batch_size": 4, "manifest": "data", "output_dir": out },
        "flow": { "warps": 1, "iterations": 5 },
        "grid": { "epochs_per_cell": 1 }
    })
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = rev2net(&["bogus"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(!o.stderr.is_empty());
    assert_eq!(code(&rev2net(&["train", "--config", "x.json", "--nope"], dir.path())), 1);
    assert_eq!(code(&rev2net(&["train", "--config", "x.json", "--ddp", "sideways"], dir.path())), 1);
    assert_eq!(code(&rev2net(&["gradcheck", "--precision", "16"], dir.path())), 1);
    assert_eq!(code(&rev2net(&["train"], dir.path())), 1);
}

#[test]
fn help_documents_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = rev2net(&["--help"], dir.path());
    assert_eq!(code(&o), 0);
    let top = String::from_utf8_lossy(&o.stdout).to_string();
    for sub in ["gen-data", "flow", "train", "eval", "ablate", "xdomain", "grid", "gradcheck", "export"] {
        assert!(top.contains(sub), "{sub} missing from --help");
        assert_eq!(code(&rev2net(&[sub, "--help"], dir.path())), 0);
    }
    let help = |sub: &str| String::from_utf8_lossy(&rev2net(&[sub, "--help"], dir.path()).stdout).to_string();
    let gen = help("gen-data");
    for flag in ["--n <N>", "[default: 10]", "--seed", "[default: 0]", "[default: 32]"] {
        assert!(gen.contains(flag), "gen-data help lacks {flag}:\n{gen}");
    }
    let flow = help("flow");
    for flag in ["[default: 0.15]", "[default: 0.3]", "[default: 5]", "[default: 25]"] {
        assert!(flow.contains(flag), "flow help lacks {flag}:\n{flow}");
    }
    assert!(help("gradcheck").contains("[default: 64]"));
    assert!(help("eval").contains("[default: test]"));
    assert!(help("train").contains("[default: the config's model.ddp_mode]"));
}

#[test]
fn validation_and_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    write_config(&cfg, json!({ "model": { "weights": { "alpha": -0.5 } }, "train": { "output_dir": "out" } }));
    let o = rev2net(&["train", "--config", "bad.json"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("weights.alpha"));

    write_config(&cfg, json!({ "train": { "epochz": 1 } }));
    assert_eq!(code(&rev2net(&["train", "--config", "bad.json"], dir.path())), 1);

    write_config(&cfg, json!({ "train": { "manifest": "data" } }));
    let o = rev2net(&["ablate", "--config", "bad.json"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.output_dir"));

    assert_eq!(code(&rev2net(&["train", "--config", "missing.json"], dir.path())), 2);
    assert_eq!(code(&rev2net(&["eval", "--checkpoint", "none.bin", "--manifest", "none"], dir.path())), 2);
    std::fs::write(dir.path().join("junk.bin"), b"not a container").unwrap();
    std::fs::write(dir.path().join("junk.bin.config.json"), b"{}").unwrap();
    assert_eq!(code(&rev2net(&["export", "--checkpoint", "junk.bin", "--out", "x.bin"], dir.path())), 2);
    assert_eq!(code(&rev2net(&["gen-data", "--n", "1", "--out", "d"], dir.path())), 1);
}

#[test]
fn gradcheck_passes_in_double_precision() {
    let dir = tempfile::tempdir().unwrap();
    let o = rev2net(&["gradcheck", "--precision", "64"], dir.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout).to_string();
    for layer in ["conv3d", "conv_transpose3d", "loss/ddp_high", "total_loss/frame-decoder/deconv3"] {
        assert!(text.lines().any(|l| l.starts_with(layer)), "{layer} missing:\n{text}");
    }
    assert!(text.contains("0 above tolerance"));
    // An impossible tolerance makes the same suite fail with status 2.
    assert_eq!(code(&rev2net(&["gradcheck", "--tolerance", "1e-30"], dir.path())), 2);
}

#[test]
fn default_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let gen = stdout_json(&rev2net(&["gen-data", "--n", "10", "--seed", "3", "--out", "data"], root));
    assert_eq!(gen["clips"], 120);
    let flow = stdout_json(&rev2net(&["flow", "--manifest", "data"], root));
    assert_eq!(flow["clips"], 120);
    assert_eq!(tree(&root.join("data/flows")).len(), 120);

    write_config(&root.join("run.json"), json!({ "train": { "epochs": 1, "manifest": "data", "output_dir": "out" } }));
    let before = tree(&root.join("data"));
    let train = stdout_json(&rev2net(&["train", "--config", "run.json", "--ddp", "both"], root));
    // Cached flows were reused, so nothing new appears outside the output directory.
    assert_eq!(tree(&root.join("data")), before);
    assert!(!root.join("out/flows").exists());
    let files = tree(&root.join("out"));
    for f in ["metrics.jsonl", "model.bin", "model.bin.config.json", "train_report.json"] {
        assert!(files.contains(&f.to_string()), "{files:?}");
    }

    let eval = stdout_json(&rev2net(&["eval", "--checkpoint", "out/model.bin", "--manifest", "data", "--split", "test"], root));
    assert_eq!(eval["accuracy"], train["test_accuracy"]);
    stdout_json(&rev2net(&["export", "--checkpoint", "out/model.bin", "--out", "out/infer.bin"], root));
    let again = stdout_json(&rev2net(&["eval", "--checkpoint", "out/infer.bin", "--manifest", "data"], root));
    assert_eq!(again["accuracy"], eval["accuracy"]);
}

#[test]
fn protocols_write_reports_and_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let args = ["gen-data", "--n", "2", "--out", "data", "--frames", "4", "--height", "16", "--width", "16"];
    stdout_json(&rev2net(&args, root));
    write_config(&root.join("a.json"), tiny_config("out-a"));
    write_config(&root.join("b.json"), tiny_config("out-b"));

    let ablate = stdout_json(&rev2net(&["ablate", "--config", "a.json"], root));
    assert_eq!(ablate["rows"].as_array().unwrap().len(), 4);
    let xdomain = stdout_json(&rev2net(&["xdomain", "--config", "a.json"], root));
    assert_eq!(xdomain["rows"].as_array().unwrap().len(), 6);
    let grid = stdout_json(&rev2net(&["grid", "--config", "a.json"], root));
    assert_eq!(grid["cells"].as_array().unwrap().len(), 4 * 6 + 4 * 5);
    let files = tree(&root.join("out-a"));
    for f in ["ablation.json", "ablation.csv", "xdomain.json", "xdomain.csv", "grid.json", "grid.csv"] {
        assert!(files.contains(&f.to_string()), "{files:?}");
    }

    // The same config under another output directory reproduces every number.
    let xdomain_b = stdout_json(&rev2net(&["xdomain", "--config", "b.json"], root));
    assert_eq!(xdomain["rows"], xdomain_b["rows"]);
    let train_a = stdout_json(&rev2net(&["train", "--config", "a.json"], root));
    let train_b = stdout_json(&rev2net(&["train", "--config", "b.json"], root));
    assert_eq!(train_a["loss"], train_b["loss"]);
}
