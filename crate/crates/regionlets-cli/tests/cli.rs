//! End-to-end checks of the command-line surfaces on miniature configs.

use std::fs;
use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_regionlets"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("regionlets-cli-tests").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

const TINY: &[&str] = &[
    "-s",
    "epochs=1",
    "-s",
    "bench.train_images=6",
    "-s",
    "bench.val_images=4",
    "-s",
    "rsn.num_regions=4",
    "-s",
    "rsn.hidden=16",
    "-s",
    "rsn.summary_grid=2",
    "-s",
    "head.density=2x2",
    "-s",
    "head.hidden=16",
];

#[test]
fn train_writes_all_outputs_and_eval_reads_them() {
    let dir = tmp("train");
    let out = bin()
        .arg("train")
        .args(TINY)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.csv", "checkpoint.ckpt", "config.txt", "timing.csv"] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("# schema v1\n"));

    let eval = bin()
        .arg("eval")
        .args(TINY)
        .arg("--checkpoint")
        .arg(dir.join("checkpoint.ckpt"))
        .output()
        .unwrap();
    assert!(eval.status.success());
    let stdout = String::from_utf8_lossy(&eval.stdout);
    assert!(stdout.contains("mAP@0.5"));
    assert!(stdout.contains("mAP@0.7"));
}

#[test]
fn train_with_export_writes_dataset() {
    let dir = tmp("export-run");
    let export = tmp("export-data");
    let out = bin()
        .arg("train")
        .args(TINY)
        .arg("--out")
        .arg(&dir)
        .arg("--export")
        .arg(&export)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(export.join("img_00000.ppm").exists());
    assert!(export.join("annotations.txt").exists());
}

#[test]
fn unknown_config_key_exits_nonzero_naming_it() {
    let out = bin()
        .arg("train")
        .arg("-s")
        .arg("not.a.key=1")
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("not.a.key"), "stderr was: {err}");
}

#[test]
fn gradcheck_passes_and_fails_loudly_on_bad_module() {
    let csv = tmp("gradcheck").join("report.csv");
    let out = bin()
        .arg("gradcheck")
        .arg("--module")
        .arg("fc")
        .arg("--seeds")
        .arg("5")
        .arg("--csv")
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(csv.exists());
    let bad = bin()
        .arg("gradcheck")
        .arg("--module")
        .arg("nonsense")
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

#[test]
fn demo_warp_roundtrips_a_ppm() {
    let dir = tmp("warp");
    let input = dir.join("in.ppm");
    // 4x2 P6 image
    let mut bytes = b"P6\n4 2\n255\n".to_vec();
    bytes.extend_from_slice(&[128u8; 4 * 2 * 3]);
    fs::write(&input, bytes).unwrap();
    let output = dir.join("out.ppm");
    let out = bin()
        .arg("demo-warp")
        .arg("--input")
        .arg(&input)
        .arg("--theta")
        .arg("1,0,0,0,1,0")
        .arg("--height")
        .arg("8")
        .arg("--width")
        .arg("8")
        .arg("--output")
        .arg(&output)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let written = fs::read(&output).unwrap();
    assert!(written.starts_with(b"P6\n8 8\n255\n"));
}

#[test]
fn sweep_writes_resumable_csv() {
    let dir = tmp("sweep");
    let csv = dir.join("sweep.csv");
    // pre-populate all but one cell so the run only trains a single model
    let mut content = String::from("# schema v1\nnum_regions,density,val_map50\n");
    for k in [4usize, 9, 16] {
        for d in [2usize, 3, 4, 5, 6] {
            if (k, d) != (4, 2) {
                content.push_str(&format!("{k},{d},0.5\n"));
            }
        }
    }
    fs::write(&csv, content).unwrap();
    let out = bin()
        .arg("sweep")
        .args(TINY)
        .arg("--out")
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let done = fs::read_to_string(&csv).unwrap();
    let rows = done
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("num_regions") && !l.trim().is_empty())
        .count();
    assert_eq!(rows, 15, "grid must be complete after resume:\n{done}");
    assert!(done.lines().any(|l| l.starts_with("4,2,")));
}
