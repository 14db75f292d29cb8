//! Implementations of the CLI subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use quantkit::container::{load_calibration, save_calibration, Container, ModelBundle};
use quantkit::error::Error;
use quantkit::fixture::{generate, FixtureSpec};
use quantkit::model::{collect_calibration_stats, ActStats, MiniModel, QuantizedModel};
use quantkit::quant::{footprint_report, FootprintReport, LossReport};
use quantkit::search::grid_search_alpha;
use quantkit::smoothing::{apply_smoothing, rtn_quantize, smooth_and_quantize, LossMode};
use quantkit::{Result, Tensor32};

use crate::manifest::{Outcome, RunManifest};
use crate::{AlphaArg, CalibrateArgs, EvalArgs, FixtureArgs, QuantizeArgs, SearchArgs, SmoothArgs};

fn base_metadata(command: &str) -> BTreeMap<String, String> {
    let mut metadata = BTreeMap::new();
    metadata.insert("tool".to_string(), "quantkit".to_string());
    metadata.insert(
        "tool_version".to_string(),
        env!("CARGO_PKG_VERSION").to_string(),
    );
    metadata.insert("command".to_string(), command.to_string());
    metadata
}

fn load_model_and_samples(model: &Path, calib: &Path) -> Result<(MiniModel<f32>, Vec<Tensor32>)> {
    let bundle = ModelBundle::load(model)?;
    let samples = load_calibration(calib)?;
    let model = MiniModel::from_bundle(&bundle)?;
    for sample in &samples {
        if sample.cols() != model.config.hidden_size {
            return Err(Error::ShapeMismatch(format!(
                "calibration sample width {} does not match hidden size {}",
                sample.cols(),
                model.config.hidden_size
            )));
        }
    }
    Ok((model, samples))
}

fn validate_bundle(path: &Path) -> Result<()> {
    ModelBundle::load(path).map(|_| ())
}

fn validate_calibration(path: &Path) -> Result<()> {
    load_calibration(path).map(|_| ())
}

fn validate_json(path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str::<Value>(&text)?;
    Ok(())
}

fn validate_csv(expected_header: &'static str) -> impl Fn(&Path) -> Result<()> {
    move |path| {
        let text = std::fs::read_to_string(path)?;
        match text.lines().next() {
            Some(header) if header == expected_header => Ok(()),
            other => Err(Error::InvalidArg(format!(
                "csv {} has header {:?}, expected {:?}",
                path.display(),
                other,
                expected_header
            ))),
        }
    }
}

fn validate_quantized_container(path: &Path) -> Result<()> {
    let container = Container::load(path)?;
    let config = container
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidArg("quantized container has no config".to_string()))?;
    for i in 0..config.num_layers {
        for name in quantkit::model::LINEAR_NAMES {
            container.quantized(&format!("layer{i}.{name}.W"))?;
        }
        container.dense(&format!("layer{i}.input_layernorm.gain"))?;
        container.dense(&format!("layer{i}.post_attention_layernorm.gain"))?;
    }
    Ok(())
}

pub fn run_fixture(args: &FixtureArgs) -> Result<Outcome> {
    let spec = FixtureSpec {
        seed: args.seed,
        layers: args.layers,
        hidden: args.hidden,
        intermediate: args.intermediate,
        heads: args.heads,
        outlier_channels: args.outlier_channels,
        outlier_scale: args.outlier_scale,
        samples: args.samples,
        tokens: args.tokens,
    };
    let (bundle, samples) = generate(&spec)?;

    let mut metadata = base_metadata("fixture");
    metadata.insert("seed".to_string(), args.seed.to_string());
    metadata.insert(
        "outlier_channels".to_string(),
        args.outlier_channels.to_string(),
    );
    metadata.insert("outlier_scale".to_string(), args.outlier_scale.to_string());
    bundle.save(&args.out_model, metadata.clone())?;
    save_calibration(&args.out_calib, &samples, metadata)?;

    let manifest = RunManifest {
        seed: Some(args.seed),
        ..RunManifest::new("fixture")
    };
    Ok(Outcome {
        manifest,
        outputs: vec![
            (args.out_model.clone(), Box::new(validate_bundle)),
            (args.out_calib.clone(), Box::new(validate_calibration)),
        ],
        summary: json!({
            "command": "fixture",
            "model": args.out_model.display().to_string(),
            "calib": args.out_calib.display().to_string(),
            "seed": args.seed,
        }),
    })
}

pub fn run_calibrate(args: &CalibrateArgs) -> Result<Outcome> {
    let (model, samples) = load_model_and_samples(&args.model, &args.calib)?;
    let stats = collect_calibration_stats(&model, &samples)?;
    let map = stats.to_f64_map();
    std::fs::write(&args.out_stats, serde_json::to_vec_pretty(&map)?)?;

    let manifest = RunManifest::new("calibrate")
        .input("model", &args.model)
        .input("calib", &args.calib);
    Ok(Outcome {
        manifest,
        outputs: vec![(args.out_stats.clone(), Box::new(validate_json))],
        summary: json!({
            "command": "calibrate",
            "stats": args.out_stats.display().to_string(),
            "linears": map.len(),
        }),
    })
}

pub fn run_search(args: &SearchArgs) -> Result<Outcome> {
    let (model, samples) = load_model_and_samples(&args.model, &args.calib)?;
    let stats = collect_calibration_stats(&model, &samples)?;
    let result = grid_search_alpha(
        &model,
        &stats,
        &samples,
        args.step,
        args.group_size,
        args.mode,
    )?;
    std::fs::write(&args.out, serde_json::to_vec_pretty(&result)?)?;

    let mut outputs: Vec<(PathBuf, crate::manifest::Validator)> =
        vec![(args.out.clone(), Box::new(validate_json))];
    if let Some(csv_path) = &args.out_csv {
        let mut csv = String::from("alpha,total_loss\n");
        for point in &result.curve {
            csv.push_str(&format!("{},{}\n", point.alpha, point.total_loss));
        }
        std::fs::write(csv_path, csv)?;
        outputs.push((csv_path.clone(), Box::new(validate_csv("alpha,total_loss"))));
    }

    let manifest = RunManifest {
        step: Some(args.step),
        group_size: Some(args.group_size),
        mode: Some(args.mode.as_str().to_string()),
        ..RunManifest::new("search")
            .input("model", &args.model)
            .input("calib", &args.calib)
    };
    Ok(Outcome {
        manifest,
        outputs,
        summary: json!({
            "command": "search",
            "best_alpha": result.best_alpha,
            "mode": args.mode.as_str(),
            "step": args.step,
            "points": result.curve.len(),
            "out": args.out.display().to_string(),
        }),
    })
}

fn resolve_alpha(
    alpha: &AlphaArg,
    model: &MiniModel<f32>,
    stats: &ActStats<f32>,
    samples: &[Tensor32],
    step: f64,
    group_size: usize,
    mode: LossMode,
) -> Result<(f64, Value)> {
    match alpha {
        AlphaArg::Value(v) => Ok((*v, json!(*v))),
        AlphaArg::Searched => {
            let result = grid_search_alpha(model, stats, samples, step, group_size, mode)?;
            Ok((result.best_alpha, json!("searched")))
        }
    }
}

pub fn run_smooth(args: &SmoothArgs) -> Result<Outcome> {
    let (model, samples) = load_model_and_samples(&args.model, &args.calib)?;
    let stats = collect_calibration_stats(&model, &samples)?;
    let (alpha, alpha_manifest) = resolve_alpha(
        &args.alpha,
        &model,
        &stats,
        &samples,
        args.step,
        args.group_size,
        args.mode,
    )?;
    let (smoothed, plan) = apply_smoothing(&model, &stats, alpha)?;

    let mut metadata = base_metadata("smooth");
    metadata.insert("alpha".to_string(), format!("{alpha}"));
    smoothed.to_bundle()?.save(&args.out, metadata)?;

    let plan_path = sibling(&args.out, "smoothing.json");
    std::fs::write(&plan_path, serde_json::to_vec_pretty(&plan)?)?;

    let manifest = RunManifest {
        alpha: Some(alpha_manifest),
        step: Some(args.step),
        group_size: Some(args.group_size),
        mode: Some(args.mode.as_str().to_string()),
        ..RunManifest::new("smooth")
            .input("model", &args.model)
            .input("calib", &args.calib)
    };
    Ok(Outcome {
        manifest,
        outputs: vec![
            (args.out.clone(), Box::new(validate_bundle)),
            (plan_path.clone(), Box::new(validate_json)),
        ],
        summary: json!({
            "command": "smooth",
            "alpha": alpha,
            "out": args.out.display().to_string(),
            "plan": plan_path.display().to_string(),
        }),
    })
}

pub fn run_quantize(args: &QuantizeArgs) -> Result<Outcome> {
    let bundle = ModelBundle::load(&args.model)?;
    let model = MiniModel::<f32>::from_bundle(&bundle)?;
    let quantized = model.quantize(args.group_size)?;

    let mut metadata = base_metadata("quantize");
    metadata.insert("group_size".to_string(), args.group_size.to_string());
    save_quantized_model(&quantized, &args.out, metadata)?;

    let footprint = model_footprint(&quantized);
    let manifest = RunManifest {
        group_size: Some(args.group_size),
        ..RunManifest::new("quantize").input("model", &args.model)
    };
    Ok(Outcome {
        manifest,
        outputs: vec![(args.out.clone(), Box::new(validate_quantized_container))],
        summary: json!({
            "command": "quantize",
            "group_size": args.group_size,
            "out": args.out.display().to_string(),
            "footprint_ratio": footprint["total"]["ratio"],
        }),
    })
}

pub fn run_eval(args: &EvalArgs) -> Result<Outcome> {
    let (model, samples) = load_model_and_samples(&args.model, &args.calib)?;
    let stats = collect_calibration_stats(&model, &samples)?;
    let (alpha, alpha_manifest) = resolve_alpha(
        &args.alpha,
        &model,
        &stats,
        &samples,
        args.step,
        args.group_size,
        args.mode,
    )?;

    let (_, rtn_report) = rtn_quantize(&model, &samples, args.group_size, args.mode)?;
    let (q_model, smoothed_report, _) =
        smooth_and_quantize(&model, &stats, &samples, alpha, args.group_size, args.mode)?;

    let csv = loss_csv(&model.config.num_layers, &rtn_report, &smoothed_report);
    std::fs::write(&args.out_report, csv)?;

    let footprint = model_footprint(&q_model);
    let footprint_path = sibling(&args.out_report, "footprint.json");
    std::fs::write(&footprint_path, serde_json::to_vec_pretty(&footprint)?)?;

    let manifest = RunManifest {
        alpha: Some(alpha_manifest),
        step: Some(args.step),
        group_size: Some(args.group_size),
        mode: Some(args.mode.as_str().to_string()),
        ..RunManifest::new("eval")
            .input("model", &args.model)
            .input("calib", &args.calib)
    };
    Ok(Outcome {
        manifest,
        outputs: vec![
            (
                args.out_report.clone(),
                Box::new(validate_csv("layer,rtn_loss,smoothed_loss")),
            ),
            (footprint_path.clone(), Box::new(validate_json)),
        ],
        summary: json!({
            "command": "eval",
            "baseline": args.baseline,
            "alpha": alpha,
            "mode": args.mode.as_str(),
            "rtn_total": rtn_report.total,
            "smoothed_total": smoothed_report.total,
            "footprint_ratio": footprint["total"]["ratio"],
            "report": args.out_report.display().to_string(),
        }),
    })
}

/// `<stem>.<suffix>` next to `path` (e.g. `report.csv` -> `report.footprint.json`).
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Per-decoder-layer CSV with a final `total` row.
fn loss_csv(num_layers: &usize, rtn: &LossReport, smoothed: &LossReport) -> String {
    let rtn_layers = rtn.by_decoder_layer();
    let smoothed_layers = smoothed.by_decoder_layer();
    let mut csv = String::from("layer,rtn_loss,smoothed_loss\n");
    for i in 0..*num_layers {
        let key = format!("layer{i}");
        csv.push_str(&format!(
            "{key},{},{}\n",
            rtn_layers.get(&key).copied().unwrap_or(0.0),
            smoothed_layers.get(&key).copied().unwrap_or(0.0),
        ));
    }
    csv.push_str(&format!("total,{},{}\n", rtn.total, smoothed.total));
    csv
}

fn save_quantized_model(
    model: &QuantizedModel<f32>,
    path: &Path,
    metadata: BTreeMap<String, String>,
) -> Result<()> {
    let mut container = Container::with_config(model.config.clone());
    container.metadata = metadata;
    let h = model.config.hidden_size;
    for (i, layer) in model.layers.iter().enumerate() {
        container.insert_dense(
            &format!("layer{i}.input_layernorm.gain"),
            quantkit::tensor::Tensor::new(vec![h], layer.input_gain.clone())?,
        )?;
        container.insert_dense(
            &format!("layer{i}.post_attention_layernorm.gain"),
            quantkit::tensor::Tensor::new(vec![h], layer.post_gain.clone())?,
        )?;
        for (name, qw) in layer.linears() {
            container.insert_quantized(&format!("layer{i}.{name}.W"), qw.clone())?;
        }
    }
    container.save(path)
}

/// Footprint per linear plus whole-model totals.
fn model_footprint(model: &QuantizedModel<f32>) -> Value {
    let mut linears = serde_json::Map::new();
    let mut packed = 0u64;
    let mut fp16 = 0u64;
    for (i, layer) in model.layers.iter().enumerate() {
        for (name, qw) in layer.linears() {
            let report: FootprintReport = footprint_report(qw);
            packed += report.packed_bytes;
            fp16 += report.fp16_equiv_bytes;
            linears.insert(
                format!("layer{i}.{name}"),
                serde_json::to_value(report).expect("footprint serializes"),
            );
        }
    }
    json!({
        "linears": Value::Object(linears),
        "total": {
            "packed_bytes": packed,
            "fp16_equiv_bytes": fp16,
            "ratio": packed as f64 / fp16 as f64,
        }
    })
}
