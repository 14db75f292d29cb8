//! Per-channel activation smoothing with mathematically equivalent weight
//! adjustment.
//!
//! For a linear `Y = X W`, dividing activations channel-wise by a positive
//! factor vector `s` and multiplying the matching weight rows keeps the
//! product unchanged:
//!
//! ```text
//! Y = (X diag(s)^-1) (diag(s) W)
//! s_j = max(|X_j|)^alpha / max(|W_j|)^(1-alpha)
//! ```
//!
//! The division never happens at runtime: `s^-1` is folded into whatever
//! produced `X`. Four fusion groups cover a decoder layer, each sharing one
//! `s` across every consumer of the same input:
//!
//! * `qkv`: q/k/v projections; `s^-1` folds into the input RMSNorm gain.
//! * `gate_up`: gate/up projections; `s^-1` folds into the post-attention
//!   RMSNorm gain.
//! * `down`: down projection; `s^-1` folds into up_proj's output channels
//!   (the gate path is unaffected because silu(gate) multiplies elementwise).
//! * `o`: o projection; `s^-1` folds into v_proj's output channels. Attention
//!   weights only mix token rows, so per-channel scaling of V commutes with
//!   the mixing, and softmax(QK^T) never sees the scaling.
//!
//! Factors for all groups are computed from the unsmoothed weights, so the
//! groups are independent and can be applied in any order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ActStats, DecoderLayer, MiniModel, QuantizedModel};
use crate::quant::{squared_diff, w4a16_matmul, LossReport, LossVariant};
use crate::scalar::Scalar;
use crate::tensor::{matmul, Tensor};

/// Floor applied to both maxima so dead channels and zero columns cannot
/// produce zero or infinite factors.
pub const SMOOTHING_EPS: f64 = 1e-5;

/// How whole-model quantization loss is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Each linear is scored on the FP model's own tap:
    /// `sum ||X W - X W_hat||^2`.
    PerLayerFp,
    /// The quantized model runs end to end and each linear is scored on its
    /// error-carrying input: `sum ||X_fp W - X_q W_hat||^2`.
    Propagated,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::PerLayerFp => "per_layer_fp",
            LossMode::Propagated => "propagated",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_layer_fp" => Ok(LossMode::PerLayerFp),
            "propagated" => Ok(LossMode::Propagated),
            other => Err(Error::InvalidArg(format!("unknown loss mode {other:?}"))),
        }
    }
}

/// `s_j = max(act_max_j, eps)^alpha / max(weight_max_j, eps)^(1-alpha)`.
pub fn smoothing_factors<S: Scalar>(act_max: &[S], weight_max: &[S], alpha: f64) -> Result<Vec<S>> {
    if act_max.len() != weight_max.len() {
        return Err(Error::ShapeMismatch(format!(
            "act_max has {} channels, weight_max has {}",
            act_max.len(),
            weight_max.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArg(format!("alpha {alpha} not in [0, 1]")));
    }
    let eps = S::from_f64_lossy(SMOOTHING_EPS);
    let a = S::from_f64_lossy(alpha);
    let one_minus = S::from_f64_lossy(1.0 - alpha);
    let factors: Vec<S> = act_max
        .iter()
        .zip(weight_max.iter())
        .map(|(&x, &w)| x.max(eps).powf(a) / w.max(eps).powf(one_minus))
        .collect();
    if factors.iter().any(|s| !s.is_finite() || *s <= S::zero()) {
        return Err(Error::NonFinite("smoothing factors".to_string()));
    }
    Ok(factors)
}

/// Factors and the statistics they came from, for one fusion group.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupPlan {
    pub act_max: Vec<f64>,
    pub weight_max: Vec<f64>,
    pub factors: Vec<f64>,
}

/// Record of one smoothing application, keyed `layer{i}.{qkv,gate_up,down,o}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SmoothingPlan {
    pub alpha: f64,
    pub groups: BTreeMap<String, GroupPlan>,
}

fn to_f64_vec<S: Scalar>(v: &[S]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

/// Per input channel `j`: `max_o |w[j, o]|`.
fn row_abs_max<S: Scalar>(w: &Tensor<S>) -> Vec<S> {
    let (rows, cols) = (w.rows(), w.cols());
    let mut out = vec![S::zero(); rows];
    for (j, m) in out.iter_mut().enumerate() {
        for o in 0..cols {
            *m = m.max(w.at(j, o).abs());
        }
    }
    out
}

fn max_rows_over<S: Scalar>(consumers: &[&Tensor<S>]) -> Vec<S> {
    let mut joined = row_abs_max(consumers[0]);
    for w in &consumers[1..] {
        for (m, v) in joined.iter_mut().zip(row_abs_max(w)) {
            *m = m.max(v);
        }
    }
    joined
}

fn scale_rows<S: Scalar>(w: &Tensor<S>, s: &[S]) -> Tensor<S> {
    let (rows, cols) = (w.rows(), w.cols());
    let mut data = w.data().to_vec();
    for (j, &sj) in s.iter().enumerate().take(rows) {
        for item in data.iter_mut().skip(j * cols).take(cols) {
            *item *= sj;
        }
    }
    Tensor::matrix(rows, cols, data).expect("scale_rows shape")
}

fn divide_cols<S: Scalar>(w: &Tensor<S>, s: &[S]) -> Tensor<S> {
    let (rows, cols) = (w.rows(), w.cols());
    let mut data = w.data().to_vec();
    for r in 0..rows {
        for (o, &so) in s.iter().enumerate().take(cols) {
            data[r * cols + o] /= so;
        }
    }
    Tensor::matrix(rows, cols, data).expect("divide_cols shape")
}

fn divide_vec<S: Scalar>(gain: &[S], s: &[S]) -> Vec<S> {
    gain.iter().zip(s.iter()).map(|(g, sj)| *g / *sj).collect()
}

/// Smooth every layer of `model` using activation maxima from `stats`.
///
/// Returns a new model that computes the same function in exact arithmetic,
/// plus the plan needed to audit or reproduce the transform.
pub fn apply_smoothing<S: Scalar>(
    model: &MiniModel<S>,
    stats: &ActStats<S>,
    alpha: f64,
) -> Result<(MiniModel<S>, SmoothingPlan)> {
    let mut groups = BTreeMap::new();
    let mut layers = Vec::with_capacity(model.layers.len());

    for (i, layer) in model.layers.iter().enumerate() {
        let act_qkv = stats.get(i, "q_proj")?;
        let w_qkv = max_rows_over(&[&layer.q_proj, &layer.k_proj, &layer.v_proj]);
        let s_qkv = smoothing_factors(act_qkv, &w_qkv, alpha)?;

        let act_gate_up = stats.get(i, "gate_proj")?;
        let w_gate_up = max_rows_over(&[&layer.gate_proj, &layer.up_proj]);
        let s_gate_up = smoothing_factors(act_gate_up, &w_gate_up, alpha)?;

        let act_down = stats.get(i, "down_proj")?;
        let w_down = max_rows_over(&[&layer.down_proj]);
        let s_down = smoothing_factors(act_down, &w_down, alpha)?;

        let act_o = stats.get(i, "o_proj")?;
        let w_o = max_rows_over(&[&layer.o_proj]);
        let s_o = smoothing_factors(act_o, &w_o, alpha)?;

        layers.push(DecoderLayer {
            input_gain: divide_vec(&layer.input_gain, &s_qkv),
            q_proj: scale_rows(&layer.q_proj, &s_qkv),
            k_proj: scale_rows(&layer.k_proj, &s_qkv),
            v_proj: divide_cols(&scale_rows(&layer.v_proj, &s_qkv), &s_o),
            o_proj: scale_rows(&layer.o_proj, &s_o),
            post_gain: divide_vec(&layer.post_gain, &s_gate_up),
            gate_proj: scale_rows(&layer.gate_proj, &s_gate_up),
            up_proj: divide_cols(&scale_rows(&layer.up_proj, &s_gate_up), &s_down),
            down_proj: scale_rows(&layer.down_proj, &s_down),
        });

        for (suffix, act, wmax, s) in [
            ("qkv", act_qkv, &w_qkv, &s_qkv),
            ("gate_up", act_gate_up, &w_gate_up, &s_gate_up),
            ("down", act_down, &w_down, &s_down),
            ("o", act_o, &w_o, &s_o),
        ] {
            groups.insert(
                format!("layer{i}.{suffix}"),
                GroupPlan {
                    act_max: to_f64_vec(act),
                    weight_max: to_f64_vec(wmax),
                    factors: to_f64_vec(s),
                },
            );
        }
    }

    Ok((
        MiniModel {
            config: model.config.clone(),
            layers,
        },
        SmoothingPlan { alpha, groups },
    ))
}

/// Quantize every linear of `fp_model` and measure per-linear losses over the
/// calibration samples in the requested mode.
pub fn quantize_with_losses<S: Scalar>(
    fp_model: &MiniModel<S>,
    samples: &[Tensor<S>],
    group_size: usize,
    mode: LossMode,
    variant: LossVariant,
) -> Result<(QuantizedModel<S>, LossReport)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("calibration samples".to_string()));
    }
    let q_model = fp_model.quantize(group_size)?;

    let mut per_layer: BTreeMap<String, f64> = BTreeMap::new();
    for (i, layer) in fp_model.layers.iter().enumerate() {
        for (name, _) in layer.linears() {
            per_layer.insert(format!("layer{i}.{name}"), 0.0);
        }
    }

    for sample in samples {
        let fp_run = forward(fp_model, sample, true)?;
        let q_taps = match mode {
            LossMode::PerLayerFp => None,
            LossMode::Propagated => Some(forward(&q_model, sample, true)?.taps),
        };
        for (i, (layer, q_layer)) in fp_model.layers.iter().zip(&q_model.layers).enumerate() {
            for ((name, w), (_, qw)) in layer.linears().iter().zip(q_layer.linears()) {
                let key = format!("layer{i}.{name}");
                let x_fp = &fp_run.taps[&key];
                let y_fp = matmul(x_fp, w)?;
                let y_q = match &q_taps {
                    None => w4a16_matmul(x_fp, qw)?,
                    Some(taps) => w4a16_matmul(&taps[&key], qw)?,
                };
                *per_layer.get_mut(&key).expect("initialized key") += squared_diff(&y_fp, &y_q);
            }
        }
    }

    Ok((q_model, LossReport::new(variant, per_layer)))
}

/// Plain group-wise quantization with no smoothing, the RTN baseline.
pub fn rtn_quantize<S: Scalar>(
    model: &MiniModel<S>,
    samples: &[Tensor<S>],
    group_size: usize,
    mode: LossMode,
) -> Result<(QuantizedModel<S>, LossReport)> {
    quantize_with_losses(model, samples, group_size, mode, LossVariant::Rtn)
}

/// Smooth with the given strength, then quantize and score.
///
/// Norm gains stay floating-point; only linear weights are quantized.
pub fn smooth_and_quantize<S: Scalar>(
    model: &MiniModel<S>,
    stats: &ActStats<S>,
    samples: &[Tensor<S>],
    alpha: f64,
    group_size: usize,
    mode: LossMode,
) -> Result<(QuantizedModel<S>, LossReport, SmoothingPlan)> {
    let (smoothed, plan) = apply_smoothing(model, stats, alpha)?;
    let (q_model, report) =
        quantize_with_losses(&smoothed, samples, group_size, mode, LossVariant::Smoothed)?;
    Ok((q_model, report, plan))
}
