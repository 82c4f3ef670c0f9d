use std::fs;
use std::path::Path;
use std::process::Command;

use fcvsr::image_io::save_frame;
use fcvsr::Tensor;

const CONFIG: &str = r#"
preset = "custom"

[model]
channels = 4
n_align = 1
q_bands = 2
r_groups = 1
kernel_size = 3

[train]
batch = 1
patch = 16
total_epochs = 3
checkpoint_every = 2
seed = 9
"#;

fn fcvsr(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_fcvsr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn fcvsr");
    out
}

fn ok(args: &[&str]) -> String {
    let out = fcvsr(args);
    assert!(
        out.status.success(),
        "fcvsr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_clip(dir: &Path, frames: usize) {
    for t in 0..frames {
        let f = Tensor::<f32>::from_fn(&[3, 32, 32], |i| {
            let (y, x) = ((i / 32) % 32, i % 32);
            0.5 + 0.4 * (0.3 * x as f32 + 0.2 * y as f32 + t as f32).sin()
        });
        save_frame(&dir.join(format!("{t:03}.png")), &f).unwrap();
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn prepare_train_eval_infer_ablate() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    write_clip(&r.join("hr/clip"), 3);
    fs::write(r.join("run.toml"), CONFIG).unwrap();

    ok(&[
        "prepare-data", "--src", p(&r.join("hr")), "--out", p(&r.join("data")),
        "--mode", "qp", "--value", "37", "--encoder-cmd", "cp {input}/*.png {output}/",
    ]);
    let manifest = r.join("data/manifest.jsonl");
    assert!(fs::read_to_string(&manifest).unwrap().contains("\"status\":\"ok\""));

    ok(&["train", "--config", p(&r.join("run.toml")), "--manifest", p(&manifest), "--out", p(&r.join("run"))]);
    let log = fs::read_to_string(r.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let row: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "l_spa", "l_fc", "l_all", "lr"] {
        assert!(row.get(key).is_some(), "log row lacks {key}");
    }

    let ck = r.join("run/checkpoint");
    let table = ok(&["eval", "--checkpoint", p(&ck), "--manifest", p(&manifest), "--out", p(&r.join("report.json"))]);
    assert!(table.contains("clip") && table.contains("mean"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(r.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 3);

    ok(&["infer", "--checkpoint", p(&ck), "--frames", p(&r.join("data/lr/clip")), "--out", p(&r.join("sr"))]);
    let sr = fs::read_dir(r.join("sr")).unwrap().count();
    assert_eq!(sr, 3);
    let img = fcvsr::image_io::load_frame(&r.join("sr/000.png"), 3).unwrap();
    assert_eq!(img.shape(), &[3, 32, 32]);

    ok(&[
        "ablate", "--config", p(&r.join("run.toml")), "--manifest", p(&manifest),
        "--variant", "No-MFFR", "--out", p(&r.join("ablate")),
    ]);
    let m = fs::read_to_string(r.join("ablate/checkpoint/manifest.toml")).unwrap();
    assert!(m.contains("variant = \"no-mffr\""), "{m}");
}

#[test]
fn bad_inputs_fail_cleanly() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    fs::write(r.join("run.toml"), CONFIG).unwrap();
    let out = fcvsr(&["ablate", "--config", p(&r.join("run.toml")), "--manifest", "missing.jsonl", "--variant", "no-such"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown variant"));
    let out = fcvsr(&["eval", "--checkpoint", p(r), "--manifest", "missing.jsonl"]);
    assert!(!out.status.success());
}

#[test]
fn params_reports_presets() {
    let text = ok(&["params", "--preset", "fcvsr-s"]);
    assert!(text.lines().any(|l| l.starts_with("total")));
    assert!(text.contains("mgaa.me"));
}
