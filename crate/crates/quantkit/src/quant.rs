//! Group-wise asymmetric 4-bit weight quantization.
//!
//! A weight matrix `W: C_i x C_o` is split, per output channel, into groups of
//! `group_size` consecutive input channels. Each group gets its own step size
//! `delta` and zero point `zero`:
//!
//! ```text
//! code  = clamp(round(w / delta) + zero, 0, 15)
//! w_hat = (code - zero) * delta
//! delta = (max - min) / 15
//! zero  = clamp(round(-min / delta), 0, 15)
//! ```
//!
//! `round` is half-away-from-zero everywhere, so codes are bit-reproducible.
//! Codes are stored two per byte (low nibble first), zero points as one byte
//! per group, step sizes as one f32 per group.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul, Tensor};

/// Group length used when none is specified.
pub const DEFAULT_GROUP_SIZE: usize = 128;

const NIBBLE_BITS: u32 = 4;
const NIBBLE_MAX: u8 = 15;

/// Step size and zero point for one (output channel, group) pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantGroupParams<S> {
    /// Quantization step, always > 0.
    pub delta: S,
    /// Zero point on the code grid, in `0..=15`.
    pub zero: u8,
}

fn check_finite<S: Scalar>(values: &[S], ctx: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(ctx.to_string()));
    }
    Ok(())
}

/// Quantize one group of values with the given bit width.
///
/// A degenerate group (max == min == c) has no usable range, so the step is
/// chosen to reconstruct the constant exactly: c == 0 gives delta = 1,
/// zero = 0, codes 0; c > 0 gives delta = c, zero = 0, codes 1; c < 0 gives
/// delta = -c, zero = 1, codes 0. With `(code - zero)` equal to 0 or +-1 the
/// reconstruction multiply is exact for every finite constant, which steps
/// like c/8 or -c/15 are not (they round at 1 ulp for some inputs).
pub fn quantize_group_n<S: Scalar>(
    values: &[S],
    n_bits: u32,
) -> Result<(Vec<u8>, QuantGroupParams<S>)> {
    if values.is_empty() {
        return Err(Error::EmptyInput("quantize_group".to_string()));
    }
    if !(2..=8).contains(&n_bits) {
        return Err(Error::InvalidArg(format!("n_bits {n_bits} not in 2..=8")));
    }
    check_finite(values, "quantize_group input")?;

    let qmax_int: u8 = ((1u32 << n_bits) - 1) as u8;
    let qmax = S::from_usize_lossy(qmax_int as usize);
    let min = values.iter().copied().fold(S::infinity(), S::min);
    let max = values.iter().copied().fold(S::neg_infinity(), S::max);

    if max == min {
        let c = max;
        let (delta, zero, code) = if c == S::zero() {
            (S::one(), 0u8, 0u8)
        } else if c > S::zero() {
            (c, 0u8, 1u8)
        } else {
            (-c, 1u8, 0u8)
        };
        return Ok((vec![code; values.len()], QuantGroupParams { delta, zero }));
    }

    let delta = (max - min) / qmax;
    let zero_f = (-min / delta).round().max(S::zero()).min(qmax);
    let zero = zero_f.to_f64_lossy() as u8;
    let codes = values
        .iter()
        .map(|&v| {
            let q = (v / delta).round() + zero_f;
            q.max(S::zero()).min(qmax).to_f64_lossy() as u8
        })
        .collect();
    Ok((codes, QuantGroupParams { delta, zero }))
}

/// 4-bit [`quantize_group_n`].
pub fn quantize_group<S: Scalar>(values: &[S]) -> Result<(Vec<u8>, QuantGroupParams<S>)> {
    quantize_group_n(values, NIBBLE_BITS)
}

/// Reconstruct `(code - zero) * delta` for each code.
pub fn dequantize_group_n<S: Scalar>(
    codes: &[u8],
    params: &QuantGroupParams<S>,
    n_bits: u32,
) -> Result<Vec<S>> {
    let qmax = ((1u32 << n_bits) - 1) as u8;
    let zero = S::from_usize_lossy(params.zero as usize);
    codes
        .iter()
        .map(|&c| {
            if c > qmax {
                return Err(Error::CodeOutOfRange(c as u32));
            }
            Ok((S::from_usize_lossy(c as usize) - zero) * params.delta)
        })
        .collect()
}

/// 4-bit [`dequantize_group_n`].
pub fn dequantize_group<S: Scalar>(codes: &[u8], params: &QuantGroupParams<S>) -> Result<Vec<S>> {
    dequantize_group_n(codes, params, NIBBLE_BITS)
}

/// Pack 4-bit codes two per byte: element 2k in the low nibble of byte k,
/// element 2k+1 in the high nibble. Odd lengths zero-pad the final high nibble.
pub fn pack_nibbles(codes: &[u8]) -> Result<Vec<u8>> {
    if let Some(&bad) = codes.iter().find(|&&c| c > NIBBLE_MAX) {
        return Err(Error::CodeOutOfRange(bad as u32));
    }
    let mut bytes = Vec::with_capacity(codes.len().div_ceil(2));
    for pair in codes.chunks(2) {
        let lo = pair[0];
        let hi = if pair.len() == 2 { pair[1] } else { 0 };
        bytes.push(lo | (hi << 4));
    }
    Ok(bytes)
}

/// Exact inverse of [`pack_nibbles`] given the original element count.
pub fn unpack_nibbles(bytes: &[u8], count: usize) -> Result<Vec<u8>> {
    if count > bytes.len() * 2 {
        return Err(Error::Truncated(format!(
            "{count} nibbles requested from {} bytes",
            bytes.len()
        )));
    }
    let mut codes = Vec::with_capacity(count);
    for k in 0..count {
        let byte = bytes[k / 2];
        codes.push(if k % 2 == 0 { byte & 0x0F } else { byte >> 4 });
    }
    Ok(codes)
}

/// A 4-bit group-quantized linear weight.
///
/// Codes are laid out per output channel: channel `o` owns
/// `ceil(in_features / 2)` bytes starting at `o * ceil(in_features / 2)`,
/// holding its `in_features` codes in input order. Group parameters are
/// output-major: `params[o * n_groups + g]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLinear<S> {
    in_features: usize,
    out_features: usize,
    group_size: usize,
    packed_codes: Vec<u8>,
    params: Vec<QuantGroupParams<S>>,
}

impl<S: Scalar> QuantizedLinear<S> {
    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    /// Groups per output channel; the last group may be ragged.
    pub fn groups_per_channel(&self) -> usize {
        self.in_features.div_ceil(self.group_size)
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.packed_codes
    }

    pub fn params(&self) -> &[QuantGroupParams<S>] {
        &self.params
    }

    fn bytes_per_channel(&self) -> usize {
        self.in_features.div_ceil(2)
    }

    fn code_at(&self, out_ch: usize, in_ch: usize) -> u8 {
        let byte = self.packed_codes[out_ch * self.bytes_per_channel() + in_ch / 2];
        if in_ch.is_multiple_of(2) {
            byte & 0x0F
        } else {
            byte >> 4
        }
    }

    fn params_at(&self, out_ch: usize, in_ch: usize) -> &QuantGroupParams<S> {
        &self.params[out_ch * self.groups_per_channel() + in_ch / self.group_size]
    }

    /// Rebuild from raw storage regions, validating sizes and ranges.
    pub fn from_parts(
        in_features: usize,
        out_features: usize,
        group_size: usize,
        packed_codes: Vec<u8>,
        deltas: Vec<S>,
        zeros: Vec<u8>,
    ) -> Result<Self> {
        if in_features == 0 || out_features == 0 || group_size == 0 {
            return Err(Error::InvalidArg(
                "quantized linear dimensions must be positive".to_string(),
            ));
        }
        let n_groups = in_features.div_ceil(group_size) * out_features;
        if deltas.len() != n_groups || zeros.len() != n_groups {
            return Err(Error::ShapeMismatch(format!(
                "expected {n_groups} group params, got {} deltas / {} zeros",
                deltas.len(),
                zeros.len()
            )));
        }
        let expected_bytes = out_features * in_features.div_ceil(2);
        if packed_codes.len() != expected_bytes {
            return Err(Error::ShapeMismatch(format!(
                "expected {expected_bytes} packed bytes, got {}",
                packed_codes.len()
            )));
        }
        if let Some(&z) = zeros.iter().find(|&&z| z > NIBBLE_MAX) {
            return Err(Error::CodeOutOfRange(z as u32));
        }
        if deltas.iter().any(|d| !d.is_finite() || *d <= S::zero()) {
            return Err(Error::NonFinite("quantized deltas".to_string()));
        }
        let params = deltas
            .into_iter()
            .zip(zeros)
            .map(|(delta, zero)| QuantGroupParams { delta, zero })
            .collect();
        Ok(Self {
            in_features,
            out_features,
            group_size,
            packed_codes,
            params,
        })
    }

    /// Reconstruct the dense `C_i x C_o` weight.
    pub fn dequantize(&self) -> Tensor<S> {
        let mut out = vec![S::zero(); self.in_features * self.out_features];
        for o in 0..self.out_features {
            for j in 0..self.in_features {
                let p = self.params_at(o, j);
                let zero = S::from_usize_lossy(p.zero as usize);
                let code = S::from_usize_lossy(self.code_at(o, j) as usize);
                out[j * self.out_features + o] = (code - zero) * p.delta;
            }
        }
        Tensor::matrix(self.in_features, self.out_features, out).expect("dequantize shape")
    }
}

/// Group-quantize a `C_i x C_o` weight along the input-channel dimension.
pub fn quantize_linear<S: Scalar>(w: &Tensor<S>, group_size: usize) -> Result<QuantizedLinear<S>> {
    if w.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "quantize_linear expects a matrix, got shape {:?}",
            w.shape()
        )));
    }
    if group_size == 0 {
        return Err(Error::InvalidArg("group_size must be >= 1".to_string()));
    }
    check_finite(w.data(), "quantize_linear weight")?;

    let (c_in, c_out) = (w.rows(), w.cols());
    let n_groups = c_in.div_ceil(group_size);
    let mut packed = Vec::with_capacity(c_out * c_in.div_ceil(2));
    let mut params = Vec::with_capacity(c_out * n_groups);
    let mut column = vec![S::zero(); c_in];
    let mut codes = Vec::with_capacity(c_in);

    for o in 0..c_out {
        for (j, slot) in column.iter_mut().enumerate() {
            *slot = w.at(j, o);
        }
        codes.clear();
        for block in column.chunks(group_size) {
            let (block_codes, p) = quantize_group(block)?;
            codes.extend_from_slice(&block_codes);
            params.push(p);
        }
        packed.extend_from_slice(&pack_nibbles(&codes)?);
    }

    Ok(QuantizedLinear {
        in_features: c_in,
        out_features: c_out,
        group_size,
        packed_codes: packed,
        params,
    })
}

/// Reference W4A16 matmul: decodes each weight on the fly and accumulates in
/// the activation dtype, in ascending input-channel order. Bit-identical to
/// `matmul(x, qw.dequantize())`.
pub fn w4a16_matmul<S: Scalar>(x: &Tensor<S>, qw: &QuantizedLinear<S>) -> Result<Tensor<S>> {
    if x.shape().len() != 2 || x.cols() != qw.in_features {
        return Err(Error::ShapeMismatch(format!(
            "w4a16_matmul {:?} x ({} x {})",
            x.shape(),
            qw.in_features,
            qw.out_features
        )));
    }
    let (t, k, n) = (x.rows(), qw.in_features, qw.out_features);
    let mut out = vec![S::zero(); t * n];
    for i in 0..t {
        let x_row = x.row(i);
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, &x_ij) in x_row.iter().enumerate().take(k) {
            for (o, acc) in out_row.iter_mut().enumerate() {
                let p = qw.params_at(o, j);
                let zero = S::from_usize_lossy(p.zero as usize);
                let code = S::from_usize_lossy(qw.code_at(o, j) as usize);
                let w_hat = (code - zero) * p.delta;
                *acc += x_ij * w_hat;
            }
        }
    }
    Tensor::matrix(t, n, out)
}

/// Squared Frobenius norm of `X W - X W_hat`, accumulated in f64.
pub fn quant_loss<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, qw: &QuantizedLinear<S>) -> Result<f64> {
    if w.rows() != qw.in_features || w.cols() != qw.out_features {
        return Err(Error::ShapeMismatch(format!(
            "weight {:?} vs quantized ({} x {})",
            w.shape(),
            qw.in_features,
            qw.out_features
        )));
    }
    let exact = matmul(x, w)?;
    let approx = w4a16_matmul(x, qw)?;
    Ok(squared_diff(&exact, &approx))
}

/// Sum of squared element differences in f64.
pub fn squared_diff<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(p, q)| {
            let d = p.to_f64_lossy() - q.to_f64_lossy();
            d * d
        })
        .sum()
}

/// Storage accounting for one quantized linear versus its FP16 equivalent.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct FootprintReport {
    /// Packed codes plus 4 bytes of scale and 1 byte of zero point per group.
    pub packed_bytes: u64,
    /// 2 bytes per weight.
    pub fp16_equiv_bytes: u64,
    pub ratio: f64,
}

/// Footprint from dimensions alone.
pub fn footprint_for_shape(
    in_features: usize,
    out_features: usize,
    group_size: usize,
) -> FootprintReport {
    let code_bytes = (out_features * in_features.div_ceil(2)) as u64;
    let n_groups = (out_features * in_features.div_ceil(group_size)) as u64;
    let packed_bytes = code_bytes + n_groups * 5;
    let fp16_equiv_bytes = 2 * (in_features * out_features) as u64;
    FootprintReport {
        packed_bytes,
        fp16_equiv_bytes,
        ratio: packed_bytes as f64 / fp16_equiv_bytes as f64,
    }
}

/// Footprint of an actual quantized linear.
pub fn footprint_report<S: Scalar>(qw: &QuantizedLinear<S>) -> FootprintReport {
    let packed_bytes = qw.packed_codes.len() as u64 + qw.params.len() as u64 * 5;
    let fp16_equiv_bytes = 2 * (qw.in_features * qw.out_features) as u64;
    FootprintReport {
        packed_bytes,
        fp16_equiv_bytes,
        ratio: packed_bytes as f64 / fp16_equiv_bytes as f64,
    }
}

/// Which quantization variant a [`LossReport`] describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Rtn,
    Smoothed,
}

/// Per-linear-layer quantization losses and their sum.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossReport {
    pub per_layer: BTreeMap<String, f64>,
    pub total: f64,
    pub variant: LossVariant,
}

impl LossReport {
    pub fn new(variant: LossVariant, per_layer: BTreeMap<String, f64>) -> Self {
        let total = per_layer.values().sum();
        Self {
            per_layer,
            total,
            variant,
        }
    }

    /// Aggregate per-linear losses by their decoder-layer prefix
    /// (everything before the first '.').
    pub fn by_decoder_layer(&self) -> BTreeMap<String, f64> {
        let mut agg: BTreeMap<String, f64> = BTreeMap::new();
        for (name, loss) in &self.per_layer {
            let prefix = name.split('.').next().unwrap_or(name).to_string();
            *agg.entry(prefix).or_insert(0.0) += loss;
        }
        agg
    }
}
