//! QMC1 binary container for model weights, calibration samples, and
//! quantized tensors.
//!
//! Layout:
//!
//! ```text
//! [0..4)     magic "QMC1"
//! [4..12)    u64 LE header length H
//! [12..12+H) UTF-8 JSON header
//! [12+H..)   data section
//! ```
//!
//! Header schema:
//!
//! ```json
//! {
//!   "version": 1,
//!   "config": { ...model config... } | null,
//!   "tensors": {
//!     "<name>": {"dtype": "f32", "shape": [..], "offset": 0, "nbytes": 0}
//!   },
//!   "metadata": {"key": "value"}
//! }
//! ```
//!
//! Offsets are relative to the start of the data section; tensors are packed
//! back to back with no padding, in name order. Dense scalars are IEEE-754
//! binary32 little-endian, row-major. A group-quantized tensor uses dtype
//! `q4g<group_size>` and occupies three adjacent regions: packed codes at
//! `offset`, then f32 scales at `scales_offset`, then zero-point bytes at
//! `zeros_offset`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantizedLinear;
use crate::tensor::Tensor;
use crate::Tensor32;

pub const MAGIC: &[u8; 4] = b"QMC1";
pub const VERSION: u32 = 1;

/// Shape of the decoder model stored alongside its tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub rms_eps: f32,
    /// Inputs are activation matrices, never token ids.
    pub vocabless: bool,
}

impl ModelConfig {
    pub fn new(
        hidden_size: usize,
        intermediate_size: usize,
        num_heads: usize,
        num_layers: usize,
        rms_eps: f32,
    ) -> Result<Self> {
        let config = Self {
            hidden_size,
            intermediate_size,
            num_heads,
            num_layers,
            rms_eps,
            vocabless: true,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0
            || self.intermediate_size == 0
            || self.num_heads == 0
            || self.num_layers == 0
        {
            return Err(Error::InvalidArg(
                "model dimensions must be positive".to_string(),
            ));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidArg(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !self.rms_eps.is_finite() || self.rms_eps <= 0.0 {
            return Err(Error::InvalidArg(format!(
                "rms_eps must be > 0, got {}",
                self.rms_eps
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

/// One stored tensor: dense f32 or 4-bit group-quantized.
#[derive(Clone, Debug, PartialEq)]
pub enum ContainerTensor {
    Dense(Tensor32),
    Quantized(QuantizedLinear<f32>),
}

/// In-memory view of a QMC1 file.
#[derive(Clone, Debug, Default)]
pub struct Container {
    pub config: Option<ModelConfig>,
    pub tensors: BTreeMap<String, ContainerTensor>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct HeaderTensor {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    scales_offset: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    scales_nbytes: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    zeros_offset: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    zeros_nbytes: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: Option<ModelConfig>,
    tensors: BTreeMap<String, HeaderTensor>,
    metadata: BTreeMap<String, String>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_config(config: ModelConfig) -> Self {
        Self {
            config: Some(config),
            ..Self::default()
        }
    }

    /// Add a dense tensor, rejecting duplicates and non-finite scalars.
    pub fn insert_dense(&mut self, name: &str, tensor: Tensor32) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(Error::DuplicateTensor(name.to_string()));
        }
        if !tensor.is_finite() {
            return Err(Error::NonFinite(format!("tensor {name}")));
        }
        self.tensors
            .insert(name.to_string(), ContainerTensor::Dense(tensor));
        Ok(())
    }

    /// Add a quantized tensor, rejecting duplicates.
    pub fn insert_quantized(&mut self, name: &str, qw: QuantizedLinear<f32>) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(Error::DuplicateTensor(name.to_string()));
        }
        self.tensors
            .insert(name.to_string(), ContainerTensor::Quantized(qw));
        Ok(())
    }

    pub fn dense(&self, name: &str) -> Result<&Tensor32> {
        match self.tensors.get(name) {
            Some(ContainerTensor::Dense(t)) => Ok(t),
            Some(ContainerTensor::Quantized(_)) => Err(Error::ShapeMismatch(format!(
                "tensor {name} is quantized, expected dense"
            ))),
            None => Err(Error::MissingTensor(name.to_string())),
        }
    }

    pub fn quantized(&self, name: &str) -> Result<&QuantizedLinear<f32>> {
        match self.tensors.get(name) {
            Some(ContainerTensor::Quantized(q)) => Ok(q),
            Some(ContainerTensor::Dense(_)) => Err(Error::ShapeMismatch(format!(
                "tensor {name} is dense, expected quantized"
            ))),
            None => Err(Error::MissingTensor(name.to_string())),
        }
    }

    /// Serialize to QMC1 bytes. Tensors are laid out in name order; the byte
    /// stream is a pure function of the contents.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header_tensors = BTreeMap::new();
        let mut data = Vec::new();

        for (name, entry) in &self.tensors {
            match entry {
                ContainerTensor::Dense(t) => {
                    if !t.is_finite() {
                        return Err(Error::NonFinite(format!("tensor {name}")));
                    }
                    let offset = data.len() as u64;
                    for v in t.data() {
                        data.extend_from_slice(&v.to_le_bytes());
                    }
                    header_tensors.insert(
                        name.clone(),
                        HeaderTensor {
                            dtype: "f32".to_string(),
                            shape: t.shape().to_vec(),
                            offset,
                            nbytes: (t.numel() * 4) as u64,
                            scales_offset: None,
                            scales_nbytes: None,
                            zeros_offset: None,
                            zeros_nbytes: None,
                        },
                    );
                }
                ContainerTensor::Quantized(q) => {
                    let offset = data.len() as u64;
                    data.extend_from_slice(q.packed_codes());
                    let scales_offset = data.len() as u64;
                    for p in q.params() {
                        data.extend_from_slice(&p.delta.to_le_bytes());
                    }
                    let zeros_offset = data.len() as u64;
                    for p in q.params() {
                        data.push(p.zero);
                    }
                    header_tensors.insert(
                        name.clone(),
                        HeaderTensor {
                            dtype: format!("q4g{}", q.group_size()),
                            shape: vec![q.in_features(), q.out_features()],
                            offset,
                            nbytes: q.packed_codes().len() as u64,
                            scales_offset: Some(scales_offset),
                            scales_nbytes: Some((q.params().len() * 4) as u64),
                            zeros_offset: Some(zeros_offset),
                            zeros_nbytes: Some(q.params().len() as u64),
                        },
                    );
                }
            }
        }

        let header = Header {
            version: VERSION,
            config: self.config.clone(),
            tensors: header_tensors,
            metadata: self.metadata.clone(),
        };
        let header_json = serde_json::to_vec(&header)?;

        let mut out = Vec::with_capacity(12 + header_json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(config) = &self.config {
            config.validate()?;
        }
        let bytes = self.to_bytes()?;
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Truncated(format!(
                "file is {} bytes, need at least 12",
                bytes.len()
            )));
        }
        if &bytes[0..4] != MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(&bytes[0..4]);
            return Err(Error::BadMagic { found });
        }
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let data_start = 12usize
            .checked_add(header_len)
            .ok_or_else(|| Error::Truncated("header length overflows".to_string()))?;
        if bytes.len() < data_start {
            return Err(Error::Truncated(format!(
                "header declares {header_len} bytes, file has {}",
                bytes.len() - 12
            )));
        }
        let header: Header = serde_json::from_slice(&bytes[12..data_start])?;
        if header.version != VERSION {
            return Err(Error::InvalidArg(format!(
                "unsupported container version {}",
                header.version
            )));
        }
        if let Some(config) = &header.config {
            config.validate()?;
        }
        let data = &bytes[data_start..];

        let mut regions: Vec<(u64, u64, String)> = Vec::new();
        let mut tensors = BTreeMap::new();
        for (name, ht) in &header.tensors {
            let entry = if ht.dtype == "f32" {
                let numel: usize = ht.shape.iter().product();
                if ht.nbytes != (numel * 4) as u64 {
                    return Err(Error::ShapeMismatch(format!(
                        "tensor {name}: shape {:?} needs {} bytes, header says {}",
                        ht.shape,
                        numel * 4,
                        ht.nbytes
                    )));
                }
                let raw = slice_region(data, ht.offset, ht.nbytes, name)?;
                regions.push((ht.offset, ht.nbytes, name.clone()));
                let mut values = Vec::with_capacity(numel);
                for chunk in raw.chunks_exact(4) {
                    values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("tensor {name}")));
                }
                ContainerTensor::Dense(Tensor::new(ht.shape.clone(), values)?)
            } else if let Some(group_size) = ht.dtype.strip_prefix("q4g") {
                let group_size: usize = group_size.parse().map_err(|_| {
                    Error::InvalidArg(format!("bad dtype {:?} for tensor {name}", ht.dtype))
                })?;
                if ht.shape.len() != 2 {
                    return Err(Error::ShapeMismatch(format!(
                        "quantized tensor {name} must be rank 2, got {:?}",
                        ht.shape
                    )));
                }
                let (so, sn, zo, zn) = match (
                    ht.scales_offset,
                    ht.scales_nbytes,
                    ht.zeros_offset,
                    ht.zeros_nbytes,
                ) {
                    (Some(so), Some(sn), Some(zo), Some(zn)) => (so, sn, zo, zn),
                    _ => {
                        return Err(Error::ShapeMismatch(format!(
                            "quantized tensor {name} missing scale/zero regions"
                        )))
                    }
                };
                let codes = slice_region(data, ht.offset, ht.nbytes, name)?.to_vec();
                let scales_raw = slice_region(data, so, sn, name)?;
                let zeros = slice_region(data, zo, zn, name)?.to_vec();
                regions.push((ht.offset, ht.nbytes, name.clone()));
                regions.push((so, sn, format!("{name}.scales")));
                regions.push((zo, zn, format!("{name}.zeros")));
                let mut scales = Vec::with_capacity(scales_raw.len() / 4);
                for chunk in scales_raw.chunks_exact(4) {
                    scales.push(f32::from_le_bytes(chunk.try_into().unwrap()));
                }
                ContainerTensor::Quantized(QuantizedLinear::from_parts(
                    ht.shape[0],
                    ht.shape[1],
                    group_size,
                    codes,
                    scales,
                    zeros,
                )?)
            } else {
                return Err(Error::InvalidArg(format!(
                    "unknown dtype {:?} for tensor {name}",
                    ht.dtype
                )));
            };
            tensors.insert(name.clone(), entry);
        }

        check_no_overlap(&mut regions)?;

        Ok(Self {
            config: header.config,
            tensors,
            metadata: header.metadata,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn slice_region<'d>(data: &'d [u8], offset: u64, nbytes: u64, name: &str) -> Result<&'d [u8]> {
    let end = offset
        .checked_add(nbytes)
        .ok_or_else(|| Error::Truncated(format!("tensor {name} region overflows")))?;
    if end > data.len() as u64 {
        return Err(Error::Truncated(format!(
            "tensor {name} ends at {end}, data section is {} bytes",
            data.len()
        )));
    }
    Ok(&data[offset as usize..end as usize])
}

fn check_no_overlap(regions: &mut [(u64, u64, String)]) -> Result<()> {
    regions.sort();
    for pair in regions.windows(2) {
        let (off_a, len_a, name_a) = &pair[0];
        let (off_b, _, name_b) = &pair[1];
        if off_a + len_a > *off_b {
            return Err(Error::ShapeMismatch(format!(
                "regions {name_a} and {name_b} overlap"
            )));
        }
    }
    Ok(())
}

/// A full FP model: config plus one tensor per parameter.
///
/// Per layer `i` the bundle holds `layer{i}.input_layernorm.gain`,
/// `layer{i}.post_attention_layernorm.gain` (both length hidden) and the
/// seven projection weights `layer{i}.{q,k,v,o,gate,up,down}_proj.W`, stored
/// input-channels by output-channels.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor32>,
}

/// Expected `(name, shape)` pairs for a config.
pub fn required_tensors(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let h = config.hidden_size;
    let m = config.intermediate_size;
    let mut out = Vec::new();
    for i in 0..config.num_layers {
        out.push((format!("layer{i}.input_layernorm.gain"), vec![h]));
        out.push((format!("layer{i}.q_proj.W"), vec![h, h]));
        out.push((format!("layer{i}.k_proj.W"), vec![h, h]));
        out.push((format!("layer{i}.v_proj.W"), vec![h, h]));
        out.push((format!("layer{i}.o_proj.W"), vec![h, h]));
        out.push((format!("layer{i}.post_attention_layernorm.gain"), vec![h]));
        out.push((format!("layer{i}.gate_proj.W"), vec![h, m]));
        out.push((format!("layer{i}.up_proj.W"), vec![h, m]));
        out.push((format!("layer{i}.down_proj.W"), vec![m, h]));
    }
    out
}

impl ModelBundle {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for (name, shape) in required_tensors(&self.config) {
            let tensor = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if tensor.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {name}: expected shape {:?}, got {:?}",
                    shape,
                    tensor.shape()
                )));
            }
            if !tensor.is_finite() {
                return Err(Error::NonFinite(format!("tensor {name}")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, metadata: BTreeMap<String, String>) -> Result<()> {
        self.validate()?;
        let mut container = Container::with_config(self.config.clone());
        container.metadata = metadata;
        for (name, tensor) in &self.tensors {
            container.insert_dense(name, tensor.clone())?;
        }
        container.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let container = Container::load(path)?;
        Self::from_container(container)
    }

    pub fn from_container(container: Container) -> Result<Self> {
        let config = container
            .config
            .clone()
            .ok_or_else(|| Error::InvalidArg("container has no model config".to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, entry) in container.tensors {
            match entry {
                ContainerTensor::Dense(t) => {
                    tensors.insert(name, t);
                }
                ContainerTensor::Quantized(_) => {
                    return Err(Error::InvalidArg(format!(
                        "tensor {name} is quantized; expected an FP bundle"
                    )));
                }
            }
        }
        let bundle = Self { config, tensors };
        bundle.validate()?;
        Ok(bundle)
    }
}

/// Write calibration samples named `sample_0000`, `sample_0001`, ...
pub fn save_calibration(
    path: &Path,
    samples: &[Tensor32],
    metadata: BTreeMap<String, String>,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("calibration samples".to_string()));
    }
    let mut container = Container::new();
    container.metadata = metadata;
    for (i, sample) in samples.iter().enumerate() {
        container.insert_dense(&format!("sample_{i:04}"), sample.clone())?;
    }
    container.save(path)
}

/// Read calibration samples back in index order.
pub fn load_calibration(path: &Path) -> Result<Vec<Tensor32>> {
    let container = Container::load(path)?;
    let mut samples = Vec::new();
    for (name, entry) in &container.tensors {
        if !name.starts_with("sample_") {
            return Err(Error::InvalidArg(format!(
                "unexpected tensor {name} in calibration container"
            )));
        }
        match entry {
            ContainerTensor::Dense(t) => samples.push(t.clone()),
            ContainerTensor::Quantized(_) => {
                return Err(Error::InvalidArg(format!(
                    "calibration tensor {name} must be dense"
                )))
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput("calibration container".to_string()));
    }
    Ok(samples)
}
