//! Miniature Llama-style decoder: RMSNorm, causal multi-head attention, and a
//! SiLU-gated MLP, with taps on every linear-layer input.
//!
//! There is no embedding, positional encoding, KV cache, or sampling head;
//! inputs are activation matrices and the model exists to measure how
//! quantization perturbs linear-layer outputs.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::container::{ModelBundle, ModelConfig};
use crate::error::{Error, Result};
use crate::quant::{quantize_linear, w4a16_matmul, QuantizedLinear};
use crate::scalar::Scalar;
use crate::tensor::{matmul, Tensor};

/// The seven linear families of one decoder layer, in execution order.
pub const LINEAR_NAMES: [&str; 7] = [
    "q_proj",
    "k_proj",
    "v_proj",
    "o_proj",
    "gate_proj",
    "up_proj",
    "down_proj",
];

/// Anything usable as a linear layer weight in the forward pass.
pub trait LinearLayer<S: Scalar> {
    fn in_features(&self) -> usize;
    fn out_features(&self) -> usize;
    fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>>;
}

impl<S: Scalar> LinearLayer<S> for Tensor<S> {
    fn in_features(&self) -> usize {
        self.rows()
    }

    fn out_features(&self) -> usize {
        self.cols()
    }

    fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        matmul(x, self)
    }
}

impl<S: Scalar> LinearLayer<S> for QuantizedLinear<S> {
    fn in_features(&self) -> usize {
        QuantizedLinear::in_features(self)
    }

    fn out_features(&self) -> usize {
        QuantizedLinear::out_features(self)
    }

    fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        w4a16_matmul(x, self)
    }
}

/// One decoder layer. `L` is the linear weight representation.
#[derive(Clone, Debug)]
pub struct DecoderLayer<S, L> {
    pub input_gain: Vec<S>,
    pub q_proj: L,
    pub k_proj: L,
    pub v_proj: L,
    pub o_proj: L,
    pub post_gain: Vec<S>,
    pub gate_proj: L,
    pub up_proj: L,
    pub down_proj: L,
}

impl<S, L> DecoderLayer<S, L> {
    pub fn linears(&self) -> [(&'static str, &L); 7] {
        [
            ("q_proj", &self.q_proj),
            ("k_proj", &self.k_proj),
            ("v_proj", &self.v_proj),
            ("o_proj", &self.o_proj),
            ("gate_proj", &self.gate_proj),
            ("up_proj", &self.up_proj),
            ("down_proj", &self.down_proj),
        ]
    }
}

/// Decoder stack over any linear representation.
#[derive(Clone, Debug)]
pub struct Model<S, L> {
    pub config: ModelConfig,
    pub layers: Vec<DecoderLayer<S, L>>,
}

/// FP model.
pub type MiniModel<S> = Model<S, Tensor<S>>;
/// Model whose linear weights are 4-bit group-quantized; norm gains stay FP.
pub type QuantizedModel<S> = Model<S, QuantizedLinear<S>>;

impl<S: Scalar> MiniModel<S> {
    /// Build from an f32 tensor bundle, casting into the model scalar type.
    pub fn from_bundle(bundle: &ModelBundle) -> Result<Self> {
        bundle.validate()?;
        let config = bundle.config.clone();
        let get = |name: &str| -> Tensor<S> { bundle.tensors[name].cast::<S>() };
        let layers = (0..config.num_layers)
            .map(|i| DecoderLayer {
                input_gain: get(&format!("layer{i}.input_layernorm.gain"))
                    .data()
                    .to_vec(),
                q_proj: get(&format!("layer{i}.q_proj.W")),
                k_proj: get(&format!("layer{i}.k_proj.W")),
                v_proj: get(&format!("layer{i}.v_proj.W")),
                o_proj: get(&format!("layer{i}.o_proj.W")),
                post_gain: get(&format!("layer{i}.post_attention_layernorm.gain"))
                    .data()
                    .to_vec(),
                gate_proj: get(&format!("layer{i}.gate_proj.W")),
                up_proj: get(&format!("layer{i}.up_proj.W")),
                down_proj: get(&format!("layer{i}.down_proj.W")),
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// Flatten back into an f32 bundle.
    pub fn to_bundle(&self) -> Result<ModelBundle> {
        let mut tensors = BTreeMap::new();
        let h = self.config.hidden_size;
        for (i, layer) in self.layers.iter().enumerate() {
            let gain1 = Tensor::new(vec![h], layer.input_gain.clone())?.cast::<f32>();
            let gain2 = Tensor::new(vec![h], layer.post_gain.clone())?.cast::<f32>();
            tensors.insert(format!("layer{i}.input_layernorm.gain"), gain1);
            tensors.insert(format!("layer{i}.post_attention_layernorm.gain"), gain2);
            for (name, w) in layer.linears() {
                tensors.insert(format!("layer{i}.{name}.W"), w.cast::<f32>());
            }
        }
        let bundle = ModelBundle {
            config: self.config.clone(),
            tensors,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Group-quantize all seven linear families of every layer.
    pub fn quantize(&self, group_size: usize) -> Result<QuantizedModel<S>> {
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                Ok(DecoderLayer {
                    input_gain: layer.input_gain.clone(),
                    q_proj: quantize_linear(&layer.q_proj, group_size)?,
                    k_proj: quantize_linear(&layer.k_proj, group_size)?,
                    v_proj: quantize_linear(&layer.v_proj, group_size)?,
                    o_proj: quantize_linear(&layer.o_proj, group_size)?,
                    post_gain: layer.post_gain.clone(),
                    gate_proj: quantize_linear(&layer.gate_proj, group_size)?,
                    up_proj: quantize_linear(&layer.up_proj, group_size)?,
                    down_proj: quantize_linear(&layer.down_proj, group_size)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(QuantizedModel {
            config: self.config.clone(),
            layers,
        })
    }
}

/// Output of one forward pass; taps are keyed `layer{i}.{linear}` and hold
/// the exact input matrix each linear saw.
pub struct ForwardOutput<S> {
    pub output: Tensor<S>,
    pub taps: BTreeMap<String, Tensor<S>>,
}

fn rmsnorm<S: Scalar>(x: &Tensor<S>, gain: &[S], eps: S) -> Tensor<S> {
    let (t, h) = (x.rows(), x.cols());
    let mut out = vec![S::zero(); t * h];
    let h_s = S::from_usize_lossy(h);
    for i in 0..t {
        let row = x.row(i);
        let mean_sq = row.iter().map(|v| *v * *v).sum::<S>() / h_s;
        let denom = (mean_sq + eps).sqrt();
        for j in 0..h {
            out[i * h + j] = row[j] / denom * gain[j];
        }
    }
    Tensor::matrix(t, h, out).expect("rmsnorm shape")
}

fn silu<S: Scalar>(v: S) -> S {
    v / (S::one() + (-v).exp())
}

/// Causal multi-head attention over already-projected Q, K, V.
fn causal_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    num_heads: usize,
) -> Tensor<S> {
    let (t, h) = (q.rows(), q.cols());
    let d = h / num_heads;
    let scale = S::one() / S::from_usize_lossy(d).sqrt();
    let mut out = vec![S::zero(); t * h];

    for head in 0..num_heads {
        let base = head * d;
        for i in 0..t {
            // Scores over the causal prefix j <= i.
            let mut scores = Vec::with_capacity(i + 1);
            for j in 0..=i {
                let mut dot = S::zero();
                for c in 0..d {
                    dot += q.at(i, base + c) * k.at(j, base + c);
                }
                scores.push(dot * scale);
            }
            let max = scores.iter().copied().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                denom += *s;
            }
            for (j, s) in scores.iter().enumerate() {
                let weight = *s / denom;
                for c in 0..d {
                    out[i * h + base + c] += weight * v.at(j, base + c);
                }
            }
        }
    }
    Tensor::matrix(t, h, out).expect("attention shape")
}

fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| *x + *y)
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("add shape")
}

/// Run the decoder on `x: T x hidden`.
///
/// Per layer: `h = x + o_proj(attn(rmsnorm1(x)))`, then
/// `out = h + down_proj(silu(gate_proj(rmsnorm2(h))) * up_proj(rmsnorm2(h)))`.
pub fn forward<S: Scalar, L: LinearLayer<S>>(
    model: &Model<S, L>,
    x: &Tensor<S>,
    record_taps: bool,
) -> Result<ForwardOutput<S>> {
    let h = model.config.hidden_size;
    if x.shape().len() != 2 || x.cols() != h {
        return Err(Error::ShapeMismatch(format!(
            "input shape {:?}, model hidden size {h}",
            x.shape()
        )));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("forward input".to_string()));
    }
    let eps = S::from_f32_lossy(model.config.rms_eps);

    let mut taps = BTreeMap::new();
    let mut current = x.clone();
    for (i, layer) in model.layers.iter().enumerate() {
        let normed = rmsnorm(&current, &layer.input_gain, eps);
        if record_taps {
            for name in ["q_proj", "k_proj", "v_proj"] {
                taps.insert(format!("layer{i}.{name}"), normed.clone());
            }
        }
        let q = layer.q_proj.apply(&normed)?;
        let k = layer.k_proj.apply(&normed)?;
        let v = layer.v_proj.apply(&normed)?;
        let attn = causal_attention(&q, &k, &v, model.config.num_heads);
        if record_taps {
            taps.insert(format!("layer{i}.o_proj"), attn.clone());
        }
        let residual = add(&current, &layer.o_proj.apply(&attn)?);

        let normed2 = rmsnorm(&residual, &layer.post_gain, eps);
        if record_taps {
            for name in ["gate_proj", "up_proj"] {
                taps.insert(format!("layer{i}.{name}"), normed2.clone());
            }
        }
        let gate = layer.gate_proj.apply(&normed2)?;
        let up = layer.up_proj.apply(&normed2)?;
        let gated_data: Vec<S> = gate
            .data()
            .iter()
            .zip(up.data().iter())
            .map(|(g, u)| silu(*g) * *u)
            .collect();
        let gated = Tensor::matrix(gate.rows(), gate.cols(), gated_data)?;
        if record_taps {
            taps.insert(format!("layer{i}.down_proj"), gated.clone());
        }
        current = add(&residual, &layer.down_proj.apply(&gated)?);
        if !current.is_finite() {
            return Err(Error::NonFinite(format!("layer{i} output")));
        }
    }

    Ok(ForwardOutput {
        output: current,
        taps,
    })
}

/// Per-channel activation maxima `max |X_j|` for every linear-layer input,
/// accumulated over all calibration samples and tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ActStats<S> {
    pub per_linear: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> ActStats<S> {
    fn from_taps(taps: &BTreeMap<String, Tensor<S>>) -> Self {
        let per_linear = taps
            .iter()
            .map(|(name, tap)| {
                let cols = tap.cols();
                let mut maxima = vec![S::zero(); cols];
                for i in 0..tap.rows() {
                    for (j, m) in maxima.iter_mut().enumerate() {
                        *m = m.max(tap.at(i, j).abs());
                    }
                }
                (name.clone(), maxima)
            })
            .collect();
        Self { per_linear }
    }

    /// Entrywise max; the reduction over samples.
    fn merge(mut self, other: Self) -> Self {
        for (name, theirs) in other.per_linear {
            match self.per_linear.get_mut(&name) {
                Some(ours) => {
                    for (o, t) in ours.iter_mut().zip(theirs) {
                        *o = o.max(t);
                    }
                }
                None => {
                    self.per_linear.insert(name, theirs);
                }
            }
        }
        self
    }

    pub fn get(&self, layer: usize, linear: &str) -> Result<&[S]> {
        self.per_linear
            .get(&format!("layer{layer}.{linear}"))
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::MissingStats(format!("layer{layer}.{linear}")))
    }

    pub fn to_f64_map(&self) -> BTreeMap<String, Vec<f64>> {
        self.per_linear
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|x| x.to_f64_lossy()).collect()))
            .collect()
    }

    pub fn from_f64_map(map: BTreeMap<String, Vec<f64>>) -> Self {
        let per_linear = map
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().map(S::from_f64_lossy).collect()))
            .collect();
        Self { per_linear }
    }
}

/// Run every sample through the model and reduce tap maxima entrywise.
/// The reduction is associative and commutative, so samples fan out in
/// parallel with a schedule-independent result.
pub fn collect_calibration_stats<S: Scalar, L: LinearLayer<S> + Sync>(
    model: &Model<S, L>,
    samples: &[Tensor<S>],
) -> Result<ActStats<S>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("calibration samples".to_string()));
    }
    samples
        .par_iter()
        .map(|sample| forward(model, sample, true).map(|out| ActStats::from_taps(&out.taps)))
        .try_reduce_with(|a, b| Ok(a.merge(b)))
        .expect("non-empty samples")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::{generate, FixtureSpec};
    use rand::{Rng as _, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;

    fn random_model(seed: u64, layers: usize, hidden: usize) -> MiniModel<f32> {
        let spec = FixtureSpec {
            seed,
            layers,
            hidden,
            intermediate: hidden + hidden / 2,
            heads: 4,
            outlier_channels: 0,
            outlier_scale: 1.0,
            samples: 1,
            tokens: 4,
        };
        let (bundle, _) = generate(&spec).unwrap();
        MiniModel::from_bundle(&bundle).unwrap()
    }

    fn random_input(seed: u64, t: usize, h: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..t * h).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor::matrix(t, h, data).unwrap()
    }

    #[test]
    fn zero_weights_pass_input_through() {
        let config = ModelConfig::new(8, 12, 2, 2, 1e-5).unwrap();
        let zeros = |r, c| Tensor::matrix(r, c, vec![0.0f32; r * c]).unwrap();
        let layers = (0..2)
            .map(|_| DecoderLayer {
                input_gain: vec![1.0f32; 8],
                q_proj: zeros(8, 8),
                k_proj: zeros(8, 8),
                v_proj: zeros(8, 8),
                o_proj: zeros(8, 8),
                post_gain: vec![1.0f32; 8],
                gate_proj: zeros(8, 12),
                up_proj: zeros(8, 12),
                down_proj: zeros(12, 8),
            })
            .collect();
        let model = Model { config, layers };
        let x = random_input(1, 3, 8);
        let out = forward(&model, &x, false).unwrap();
        assert_eq!(out.output.data(), x.data());
    }

    #[test]
    fn single_token_attention_is_v_through_o() {
        // With one token the softmax weight is 1, so the attention output is
        // exactly the v projection row.
        let model = random_model(2, 1, 16);
        let x = random_input(3, 1, 16);
        let out = forward(&model, &x, true).unwrap();

        let normed = &out.taps["layer0.q_proj"];
        let v = matmul(normed, &model.layers[0].v_proj).unwrap();
        let attn_tap = &out.taps["layer0.o_proj"];
        assert!(v.max_abs_diff(attn_tap) <= 1e-6);

        // And the attention branch contribution is exactly o_proj(v).
        let branch = matmul(&v, &model.layers[0].o_proj).unwrap();
        let gate_tap = &out.taps["layer0.gate_proj"];
        let residual: Vec<f32> = x
            .data()
            .iter()
            .zip(branch.data())
            .map(|(a, b)| a + b)
            .collect();
        let eps = model.config.rms_eps;
        let ms = residual.iter().map(|v| v * v).sum::<f32>() / 16.0;
        let denom = (ms + eps).sqrt();
        for (j, &g) in gate_tap.row(0).iter().enumerate() {
            let expect = residual[j] / denom * model.layers[0].post_gain[j];
            assert!((g - expect).abs() <= 1e-5, "channel {j}: {g} vs {expect}");
        }
    }

    #[test]
    fn down_proj_tap_matches_external_recomputation() {
        let model = random_model(5, 2, 16);
        let x = random_input(7, 4, 16);
        let out = forward(&model, &x, true).unwrap();

        // Recompute silu(gate) * up with plain loops from the shared tap.
        let normed2 = &out.taps["layer0.gate_proj"];
        let layer = &model.layers[0];
        let (t, m) = (normed2.rows(), layer.gate_proj.cols());
        let h = normed2.cols();
        let mut expected = vec![0.0f32; t * m];
        for i in 0..t {
            for o in 0..m {
                let mut g = 0.0f32;
                let mut u = 0.0f32;
                for j in 0..h {
                    g += normed2.at(i, j) * layer.gate_proj.at(j, o);
                    u += normed2.at(i, j) * layer.up_proj.at(j, o);
                }
                expected[i * m + o] = g / (1.0 + (-g).exp()) * u;
            }
        }
        let expected = Tensor::matrix(t, m, expected).unwrap();
        assert!(out.taps["layer0.down_proj"].max_abs_diff(&expected) <= 1e-6);
    }

    #[test]
    fn causal_prefix_outputs_unchanged_by_appending_tokens() {
        let model = random_model(9, 2, 16);
        let full = random_input(11, 6, 16);
        let full_out = forward(&model, &full, false).unwrap();

        for t in 1..6 {
            let prefix = Tensor::matrix(t, 16, full.data()[..t * 16].to_vec()).unwrap();
            let prefix_out = forward(&model, &prefix, false).unwrap();
            assert_eq!(
                prefix_out.output.data(),
                &full_out.output.data()[..t * 16],
                "prefix length {t}"
            );
        }
    }

    #[test]
    fn rejects_width_mismatch_and_nonfinite() {
        let model = random_model(13, 1, 16);
        let bad = random_input(1, 2, 8);
        assert!(forward(&model, &bad, false).is_err());

        let mut data = vec![0.0f32; 2 * 16];
        data[5] = f32::NAN;
        let x = Tensor::matrix(2, 16, data).unwrap();
        assert!(forward(&model, &x, false).is_err());
    }

    #[test]
    fn stats_single_token_equals_abs_row() {
        let model = random_model(17, 1, 16);
        let x = random_input(19, 1, 16);
        let stats = collect_calibration_stats(&model, &[x.clone()]).unwrap();
        let out = forward(&model, &x, true).unwrap();
        for (name, tap) in &out.taps {
            let expect: Vec<f32> = tap.row(0).iter().map(|v| v.abs()).collect();
            assert_eq!(&stats.per_linear[name], &expect);
        }
    }

    #[test]
    fn stats_merge_is_entrywise_max_and_order_free() {
        let model = random_model(23, 2, 16);
        let a = random_input(29, 3, 16);
        let b = random_input(31, 5, 16);

        let ab = collect_calibration_stats(&model, &[a.clone(), b.clone()]).unwrap();
        let ba = collect_calibration_stats(&model, &[b.clone(), a.clone()]).unwrap();
        assert_eq!(ab, ba);

        let sa = collect_calibration_stats(&model, &[a]).unwrap();
        let sb = collect_calibration_stats(&model, &[b]).unwrap();
        for (name, merged) in &ab.per_linear {
            let expect: Vec<f32> = sa.per_linear[name]
                .iter()
                .zip(&sb.per_linear[name])
                .map(|(x, y)| x.max(*y))
                .collect();
            assert_eq!(merged, &expect);
        }
    }

    #[test]
    fn stats_partition_merge_associativity() {
        let model = random_model(37, 2, 16);
        let samples: Vec<Tensor<f32>> = (0..6).map(|i| random_input(100 + i, 4, 16)).collect();
        let all = collect_calibration_stats(&model, &samples).unwrap();
        let left = collect_calibration_stats(&model, &samples[..2]).unwrap();
        let right = collect_calibration_stats(&model, &samples[2..]).unwrap();
        assert_eq!(all, left.merge(right));
    }

    #[test]
    fn outlier_channel_dominates_first_layer_stats() {
        let spec = FixtureSpec {
            seed: 7,
            outlier_channels: 1,
            ..FixtureSpec::default()
        };
        let (bundle, samples) = generate(&spec).unwrap();
        let model = MiniModel::<f32>::from_bundle(&bundle).unwrap();
        let stats = collect_calibration_stats(&model, &samples).unwrap();

        let qkv = stats.get(0, "q_proj").unwrap();
        let mut sorted: Vec<f32> = qkv.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[sorted.len() / 2];
        let peak = sorted[sorted.len() - 1];
        let ratio = peak / median;
        assert!(
            (50.0..200.0).contains(&ratio),
            "outlier/median ratio {ratio}"
        );
    }

    #[test]
    fn stats_error_on_empty_samples() {
        let model = random_model(41, 1, 16);
        assert!(collect_calibration_stats(&model, &[]).is_err());
    }

    #[test]
    fn bundle_model_roundtrip() {
        let spec = FixtureSpec::default();
        let (bundle, _) = generate(&spec).unwrap();
        let model = MiniModel::<f32>::from_bundle(&bundle).unwrap();
        let back = model.to_bundle().unwrap();
        assert_eq!(back.tensors, bundle.tensors);
    }

    #[test]
    fn quantized_forward_stays_close_to_fp() {
        let model = random_model(43, 2, 16);
        let qmodel = model.quantize(8).unwrap();
        let x = random_input(47, 4, 16);
        let fp = forward(&model, &x, false).unwrap();
        let q = forward(&qmodel, &x, false).unwrap();
        let diff = fp.output.max_abs_diff(&q.output);
        assert!(diff > 0.0 && diff < 0.5, "diff {diff}");
    }
}
