//! End-to-end tests of the CLI stages against real artifacts on disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use quantkit::container::{required_tensors, ModelBundle, ModelConfig};
use quantkit::tensor::Tensor;

fn quantkit_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_quantkit"))
}

fn run_ok(args: &[&str], dir: &Path) -> serde_json::Value {
    let output = quantkit_bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn quantkit");
    assert!(
        output.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr),
    );
    let stdout = String::from_utf8(output.stdout).expect("utf8 stdout");
    serde_json::from_str(stdout.lines().last().expect("summary line")).expect("summary json")
}

fn run_fail(args: &[&str], dir: &Path) -> Output {
    let output = quantkit_bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn quantkit");
    assert!(!output.status.success(), "command {args:?} should fail");
    output
}

fn fixture_files(dir: &Path) {
    run_ok(
        &[
            "fixture",
            "--out-model",
            "model.qmc",
            "--out-calib",
            "calib.qmc",
        ],
        dir,
    );
}

#[test]
fn fixture_same_seed_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(
        &[
            "fixture",
            "--seed",
            "7",
            "--out-model",
            "a.qmc",
            "--out-calib",
            "ac.qmc",
        ],
        dir.path(),
    );
    run_ok(
        &[
            "fixture",
            "--seed",
            "7",
            "--out-model",
            "b.qmc",
            "--out-calib",
            "bc.qmc",
        ],
        dir.path(),
    );
    let a = std::fs::read(dir.path().join("a.qmc")).unwrap();
    let b = std::fs::read(dir.path().join("b.qmc")).unwrap();
    assert_eq!(a, b);
    let ac = std::fs::read(dir.path().join("ac.qmc")).unwrap();
    let bc = std::fs::read(dir.path().join("bc.qmc")).unwrap();
    assert_eq!(ac, bc);
}

#[test]
fn fixture_rejects_zero_layers() {
    let dir = tempfile::tempdir().unwrap();
    let output = run_fail(
        &[
            "fixture",
            "--layers",
            "0",
            "--out-model",
            "m.qmc",
            "--out-calib",
            "c.qmc",
        ],
        dir.path(),
    );
    let stderr = String::from_utf8(output.stderr).unwrap();
    let line: serde_json::Value =
        serde_json::from_str(stderr.lines().next().unwrap()).expect("one-line json error");
    assert!(line["error"].as_str().unwrap().contains("positive"));
}

#[test]
fn calibrate_reports_outlier_channels() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(
        &[
            "fixture",
            "--outlier-scale",
            "100",
            "--outlier-channels",
            "3",
            "--out-model",
            "model.qmc",
            "--out-calib",
            "calib.qmc",
        ],
        dir.path(),
    );
    run_ok(
        &[
            "calibrate",
            "--model",
            "model.qmc",
            "--calib",
            "calib.qmc",
            "--out-stats",
            "stats.json",
        ],
        dir.path(),
    );
    let stats: BTreeMap<String, Vec<f64>> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("stats.json")).unwrap())
            .unwrap();
    let qkv = &stats["layer0.q_proj"];
    let mut sorted = qkv.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let big = qkv.iter().filter(|&&v| v >= 50.0 * median).count();
    assert_eq!(big, 3, "stats {qkv:?}");
}

#[test]
fn full_pipeline_reduces_loss_and_reports_footprint() {
    let dir = tempfile::tempdir().unwrap();
    fixture_files(dir.path());
    run_ok(
        &[
            "calibrate",
            "--model",
            "model.qmc",
            "--calib",
            "calib.qmc",
            "--out-stats",
            "stats.json",
        ],
        dir.path(),
    );
    let search = run_ok(
        &[
            "search",
            "--model",
            "model.qmc",
            "--calib",
            "calib.qmc",
            "--step",
            "0.05",
            "--out",
            "search.json",
            "--out-csv",
            "curve.csv",
        ],
        dir.path(),
    );
    assert_eq!(search["points"], 21);
    let smooth = run_ok(
        &[
            "smooth",
            "--model",
            "model.qmc",
            "--calib",
            "calib.qmc",
            "--alpha",
            "searched",
            "--out",
            "smoothed.qmc",
        ],
        dir.path(),
    );
    assert_eq!(smooth["alpha"], search["best_alpha"]);
    run_ok(
        &[
            "quantize",
            "--model",
            "smoothed.qmc",
            "--group-size",
            "128",
            "--out",
            "quant.qmc",
        ],
        dir.path(),
    );
    let eval = run_ok(
        &[
            "eval",
            "--model",
            "model.qmc",
            "--calib",
            "calib.qmc",
            "--alpha",
            "searched",
            "--out-report",
            "report.csv",
        ],
        dir.path(),
    );
    let rtn = eval["rtn_total"].as_f64().unwrap();
    let smoothed = eval["smoothed_total"].as_f64().unwrap();
    assert!(smoothed < rtn, "smoothed {smoothed} vs rtn {rtn}");

    // The smoothing plan sidecar carries factors for every fusion group.
    let plan: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("smoothed.smoothing.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(plan["groups"].as_object().unwrap().len(), 2 * 4);

    // CSV: header, one row per decoder layer, then the totals row.
    let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "layer,rtn_loss,smoothed_loss");
    assert_eq!(lines.len(), 1 + 2 + 1);
    assert!(lines[3].starts_with("total,"));

    assert!(dir.path().join("report.footprint.json").exists());
}

#[test]
fn eval_footprint_below_028_at_real_scale() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(
        &[
            "fixture",
            "--layers",
            "1",
            "--hidden",
            "1024",
            "--intermediate",
            "1024",
            "--heads",
            "8",
            "--samples",
            "2",
            "--tokens",
            "4",
            "--out-model",
            "model.qmc",
            "--out-calib",
            "calib.qmc",
        ],
        dir.path(),
    );
    let quantize = run_ok(
        &[
            "quantize",
            "--model",
            "model.qmc",
            "--group-size",
            "128",
            "--out",
            "quant.qmc",
        ],
        dir.path(),
    );
    let ratio = quantize["footprint_ratio"].as_f64().unwrap();
    assert!(ratio < 0.28, "ratio {ratio}");

    let eval = run_ok(
        &[
            "eval",
            "--model",
            "model.qmc",
            "--calib",
            "calib.qmc",
            "--alpha",
            "0.5",
            "--out-report",
            "report.csv",
        ],
        dir.path(),
    );
    let ratio = eval["footprint_ratio"].as_f64().unwrap();
    assert!(ratio < 0.28, "ratio {ratio}");

    // Every individual linear stays under the bound too.
    let footprint: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("report.footprint.json")).unwrap(),
    )
    .unwrap();
    for (name, entry) in footprint["linears"].as_object().unwrap() {
        let r = entry["ratio"].as_f64().unwrap();
        assert!(r < 0.28, "{name}: {r}");
    }
}

/// A model whose weights are all zero quantizes exactly, so the loss curve is
/// identically zero and the searched strength falls back to the smallest
/// grid point.
#[test]
fn smooth_alpha_zero_equals_searched_on_flat_curve() {
    let dir = tempfile::tempdir().unwrap();
    let config = ModelConfig::new(16, 24, 2, 1, 1e-5).unwrap();
    let mut tensors = BTreeMap::new();
    for (name, shape) in required_tensors(&config) {
        let numel: usize = shape.iter().product();
        let fill = if name.ends_with("gain") { 1.0f32 } else { 0.0 };
        tensors.insert(name, Tensor::new(shape, vec![fill; numel]).unwrap());
    }
    let bundle = ModelBundle { config, tensors };
    bundle
        .save(&dir.path().join("zero.qmc"), BTreeMap::new())
        .unwrap();

    let mut rng_data = Vec::new();
    for i in 0..(4 * 16) {
        rng_data.push(((i * 37 + 11) % 17) as f32 / 7.0 - 1.0);
    }
    let sample = Tensor::matrix(4, 16, rng_data).unwrap();
    quantkit::container::save_calibration(
        &dir.path().join("calib.qmc"),
        &[sample],
        BTreeMap::new(),
    )
    .unwrap();

    let searched = run_ok(
        &[
            "smooth",
            "--model",
            "zero.qmc",
            "--calib",
            "calib.qmc",
            "--alpha",
            "searched",
            "--out",
            "searched.qmc",
        ],
        dir.path(),
    );
    assert_eq!(searched["alpha"], 0.0);
    run_ok(
        &[
            "smooth",
            "--model",
            "zero.qmc",
            "--calib",
            "calib.qmc",
            "--alpha",
            "0",
            "--out",
            "fixed.qmc",
        ],
        dir.path(),
    );
    let a = std::fs::read(dir.path().join("searched.qmc")).unwrap();
    let b = std::fs::read(dir.path().join("fixed.qmc")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn commands_are_idempotent_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    fixture_files(dir.path());
    for out in ["r1.csv", "r2.csv"] {
        run_ok(
            &[
                "eval",
                "--model",
                "model.qmc",
                "--calib",
                "calib.qmc",
                "--alpha",
                "0.45",
                "--out-report",
                out,
            ],
            dir.path(),
        );
    }
    let a = std::fs::read(dir.path().join("r1.csv")).unwrap();
    let b = std::fs::read(dir.path().join("r2.csv")).unwrap();
    assert_eq!(a, b);
    let a = std::fs::read(dir.path().join("r1.footprint.json")).unwrap();
    let b = std::fs::read(dir.path().join("r2.footprint.json")).unwrap();
    assert_eq!(a, b);

    // Manifests agree except for the wall-time field.
    let norm = |p: PathBuf| -> serde_json::Value {
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        v["wall_time_ms"] = serde_json::json!(0);
        v
    };
    assert_eq!(
        norm(dir.path().join("r1.csv.manifest.json")),
        norm(dir.path().join("r2.csv.manifest.json")),
    );
}

#[test]
fn quantized_container_uses_q4_dtype_regions() {
    let dir = tempfile::tempdir().unwrap();
    fixture_files(dir.path());
    run_ok(
        &[
            "quantize",
            "--model",
            "model.qmc",
            "--group-size",
            "128",
            "--out",
            "quant.qmc",
        ],
        dir.path(),
    );
    let container = quantkit::container::Container::load(&dir.path().join("quant.qmc")).unwrap();
    let qw = container.quantized("layer0.down_proj.W").unwrap();
    assert_eq!(qw.in_features(), 172);
    assert_eq!(qw.out_features(), 64);
    assert_eq!(qw.group_size(), 128);
    // 172 input channels in groups of 128: one full group and a ragged one.
    assert_eq!(qw.groups_per_channel(), 2);
    container.dense("layer0.input_layernorm.gain").unwrap();

    // Smoothing then quantizing must round-trip through the container
    // with codes, scales, and zeros intact.
    run_ok(
        &[
            "smooth",
            "--model",
            "model.qmc",
            "--calib",
            "calib.qmc",
            "--alpha",
            "0.5",
            "--out",
            "smoothed.qmc",
        ],
        dir.path(),
    );
    run_ok(
        &["quantize", "--model", "smoothed.qmc", "--out", "q2.qmc"],
        dir.path(),
    );
    let reloaded = quantkit::container::Container::load(&dir.path().join("q2.qmc")).unwrap();
    let bundle = ModelBundle::load(&dir.path().join("smoothed.qmc")).unwrap();
    let model = quantkit::MiniModel32::from_bundle(&bundle).unwrap();
    let expected = model.quantize(128).unwrap();
    assert_eq!(
        reloaded.quantized("layer1.up_proj.W").unwrap(),
        &expected.layers[1].up_proj
    );
}
