//! The `DIVA1` checkpoint format.
//!
//! ```text
//! DIVA1\n
//! <header length in bytes, ASCII decimal>\n
//! <header: UTF-8 JSON object, exactly that many bytes>
//! <blob region: tensor payloads, back to back in header order>
//! ```
//!
//! Header fields:
//!
//! - `format`: always `1`.
//! - `kind`: `"model"` or `"adapted"`.
//! - `input_shape`, `num_classes`, `layers` (see [`Layer`] for the tagged form).
//! - `tensors`: list of `{name, dtype, shape, offset, length}`; `offset` and
//!   `length` are bytes within the blob region. `dtype` is `f32` (little
//!   endian), `u8` (quantization codes) or `bits` (mask, LSB-first packing,
//!   `ceil(len / 8)` bytes). Mask tensors are named `mask:<param>`.
//! - `adaptation` (adapted only): `{mode, bits, activations, quant}` where
//!   `activations` holds one `{min, max}` or `null` per layer and `quant` one
//!   `{name, bits, scale, zero_point}` record per quantized tensor.
//! - `provenance`: free-form string map.
//!
//! The blob region must be exactly as long as the sum of tensor lengths.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptMode, AdaptedModel, Masks, QuantParams, QuantRange, QuantizedTensor};
use crate::error::{DivaError, Result};
use crate::nn::model::{Classifier, Model, Params};
use crate::nn::Layer;
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"DIVA1\n";

pub type Provenance = BTreeMap<String, String>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    U8,
    Bits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantRecord {
    pub name: String,
    pub bits: u8,
    pub scale: f32,
    pub zero_point: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adaptation {
    pub mode: AdaptMode,
    pub bits: u8,
    pub activations: Vec<Option<QuantRange>>,
    pub quant: Vec<QuantRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Model,
    Adapted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: u32,
    pub kind: Kind,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<Layer>,
    pub tensors: Vec<TensorRecord>,
    #[serde(default)]
    pub adaptation: Option<Adaptation>,
    #[serde(default)]
    pub provenance: Provenance,
}

/// A decoded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Model(Model),
    Adapted(AdaptedModel),
}

struct Writer {
    tensors: Vec<TensorRecord>,
    blob: Vec<u8>,
}

impl Writer {
    fn push(&mut self, name: String, dtype: Dtype, shape: &[usize], bytes: Vec<u8>) {
        self.tensors.push(TensorRecord {
            name,
            dtype,
            shape: shape.to_vec(),
            offset: self.blob.len(),
            length: bytes.len(),
        });
        self.blob.extend(bytes);
    }
}

fn pack_bits(mask: &Tensor) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (i, &v) in mask.data().iter().enumerate() {
        if v != 0.0 {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if bytes.len() != n.div_ceil(8) {
        return Err(DivaError::Checkpoint("mask blob has the wrong length".into()));
    }
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|i| if bytes[i / 8] >> (i % 8) & 1 == 1 { 1.0 } else { 0.0 })
            .collect(),
    )
}

fn assemble(header: &Header, blob: Vec<u8>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(format!("{}\n", json.len()).as_bytes());
    out.extend(json);
    out.extend(blob);
    Ok(out)
}

fn f32_bytes(t: &Tensor) -> Vec<u8> {
    t.to_le_bytes()
}

/// Serializes a full-precision model.
pub fn encode_model(model: &Model, provenance: &Provenance) -> Result<Vec<u8>> {
    let mut w = Writer {
        tensors: Vec::new(),
        blob: Vec::new(),
    };
    for (name, t) in model.params() {
        w.push(name.clone(), Dtype::F32, t.shape(), f32_bytes(t));
    }
    let header = Header {
        format: 1,
        kind: Kind::Model,
        input_shape: model.input_shape().to_vec(),
        num_classes: model.num_classes(),
        layers: model.layers().to_vec(),
        tensors: w.tensors,
        adaptation: None,
        provenance: provenance.clone(),
    };
    assemble(&header, w.blob)
}

/// Serializes an adapted model: integer codes for quantized modes, raw
/// parameters otherwise, plus bit-packed masks.
pub fn encode_adapted(adapted: &AdaptedModel, provenance: &Provenance) -> Result<Vec<u8>> {
    let mut w = Writer {
        tensors: Vec::new(),
        blob: Vec::new(),
    };
    let mut quant = Vec::new();
    if adapted.mode().is_quantized() {
        for (name, q) in adapted.quantized_weights() {
            w.push(name.clone(), Dtype::U8, &q.shape, q.codes.clone());
            quant.push(QuantRecord {
                name: name.clone(),
                bits: q.params.bits,
                scale: q.params.scale,
                zero_point: q.params.zero_point,
            });
        }
    } else {
        for (name, t) in adapted.base().params() {
            w.push(name.clone(), Dtype::F32, t.shape(), f32_bytes(t));
        }
    }
    for (name, m) in adapted.masks() {
        w.push(format!("mask:{name}"), Dtype::Bits, m.shape(), pack_bits(m));
    }
    let base = adapted.base();
    let header = Header {
        format: 1,
        kind: Kind::Adapted,
        input_shape: base.input_shape().to_vec(),
        num_classes: base.num_classes(),
        layers: base.layers().to_vec(),
        tensors: w.tensors,
        adaptation: Some(Adaptation {
            mode: adapted.mode(),
            bits: adapted.bits(),
            activations: adapted.activation_ranges().to_vec(),
            quant,
        }),
        provenance: provenance.clone(),
    };
    assemble(&header, w.blob)
}

/// Splits a checkpoint into its header and blob region.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if !bytes.starts_with(MAGIC) {
        return Err(DivaError::Checkpoint("unknown magic".into()));
    }
    let rest = &bytes[MAGIC.len()..];
    let nl = rest
        .iter()
        .take(20)
        .position(|&b| b == b'\n')
        .ok_or_else(|| DivaError::Checkpoint("missing header length".into()))?;
    let len: usize = std::str::from_utf8(&rest[..nl])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| DivaError::Checkpoint("malformed header length".into()))?;
    let rest = &rest[nl + 1..];
    if rest.len() < len {
        return Err(DivaError::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&rest[..len])
        .map_err(|e| DivaError::Checkpoint(format!("corrupt header: {e}")))?;
    if header.format != 1 {
        return Err(DivaError::Checkpoint(format!(
            "unsupported format version {}",
            header.format
        )));
    }
    let blob = &rest[len..];
    let expected: usize = header.tensors.iter().map(|t| t.length).sum();
    if blob.len() != expected {
        return Err(DivaError::Checkpoint(format!(
            "blob region is {} bytes, header declares {expected}",
            blob.len()
        )));
    }
    Ok((header, blob))
}

fn tensor_bytes<'a>(blob: &'a [u8], rec: &TensorRecord) -> Result<&'a [u8]> {
    let n: usize = rec.shape.iter().product();
    let want = match rec.dtype {
        Dtype::F32 => n * 4,
        Dtype::U8 => n,
        Dtype::Bits => n.div_ceil(8),
    };
    if rec.length != want {
        return Err(DivaError::Checkpoint(format!(
            "tensor '{}' declares {} bytes, shape needs {want}",
            rec.name, rec.length
        )));
    }
    blob.get(rec.offset..rec.offset + rec.length)
        .ok_or_else(|| DivaError::Checkpoint(format!("tensor '{}' lies outside the blob", rec.name)))
}

fn decode_f32(bytes: &[u8], shape: &[usize]) -> Result<Tensor> {
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let t = Tensor::new(shape.to_vec(), data)?;
    if !t.all_finite() {
        return Err(DivaError::Checkpoint("non-finite parameter values".into()));
    }
    Ok(t)
}

/// Decodes a checkpoint of either kind.
pub fn decode(bytes: &[u8]) -> Result<(Checkpoint, Provenance)> {
    let (header, blob) = read_header(bytes)?;
    let mut floats = Params::new();
    let mut codes = BTreeMap::new();
    let mut masks = Masks::new();
    for rec in &header.tensors {
        let raw = tensor_bytes(blob, rec)?;
        match rec.dtype {
            Dtype::F32 => {
                floats.insert(rec.name.clone(), decode_f32(raw, &rec.shape)?);
            }
            Dtype::U8 => {
                codes.insert(rec.name.clone(), (rec.shape.clone(), raw.to_vec()));
            }
            Dtype::Bits => {
                let name = rec.name.strip_prefix("mask:").ok_or_else(|| {
                    DivaError::Checkpoint(format!("bit tensor '{}' is not a mask", rec.name))
                })?;
                masks.insert(name.to_string(), unpack_bits(raw, &rec.shape)?);
            }
        }
    }
    let wrap = |e: DivaError| match e {
        DivaError::Checkpoint(m) => DivaError::Checkpoint(m),
        other => DivaError::Checkpoint(other.to_string()),
    };
    let ckpt = match (&header.kind, &header.adaptation) {
        (Kind::Model, _) => Checkpoint::Model(
            Model::from_params(&header.input_shape, header.layers.clone(), floats).map_err(wrap)?,
        ),
        (Kind::Adapted, None) => {
            return Err(DivaError::Checkpoint("adapted checkpoint without adaptation section".into()))
        }
        (Kind::Adapted, Some(ad)) if ad.mode.is_quantized() => {
            let mut weights = BTreeMap::new();
            for q in &ad.quant {
                let (shape, c) = codes.remove(&q.name).ok_or_else(|| {
                    DivaError::Checkpoint(format!("no codes for quantized tensor '{}'", q.name))
                })?;
                weights.insert(
                    q.name.clone(),
                    QuantizedTensor {
                        shape,
                        codes: c,
                        params: QuantParams {
                            scale: q.scale,
                            zero_point: q.zero_point,
                            bits: q.bits,
                        },
                    },
                );
            }
            if !codes.is_empty() {
                return Err(DivaError::Checkpoint("code tensors without quantization records".into()));
            }
            // Architecture carrier: from_codes only reads layers and input shape.
            let arch = Model::new(&header.input_shape, header.layers.clone(), 0).map_err(wrap)?;
            Checkpoint::Adapted(
                AdaptedModel::from_codes(&arch, weights, ad.activations.clone(), ad.bits, masks, ad.mode)
                    .map_err(wrap)?,
            )
        }
        (Kind::Adapted, Some(_)) => {
            let model =
                Model::from_params(&header.input_shape, header.layers.clone(), floats).map_err(wrap)?;
            Checkpoint::Adapted(AdaptedModel::pruned(model, masks).map_err(wrap)?)
        }
    };
    if let Checkpoint::Model(m) = &ckpt {
        if m.num_classes() != header.num_classes {
            return Err(DivaError::Checkpoint("class count disagrees with layers".into()));
        }
    }
    Ok((ckpt, header.provenance))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_model(path: &Path, model: &Model, provenance: &Provenance) -> Result<()> {
    write_atomic(path, &encode_model(model, provenance)?)
}

/// Writes an adapted model (codes, quantization parameters and masks).
pub fn export_adapted(path: &Path, adapted: &AdaptedModel, provenance: &Provenance) -> Result<()> {
    write_atomic(path, &encode_adapted(adapted, provenance)?)
}

pub fn load(path: &Path) -> Result<(Checkpoint, Provenance)> {
    let bytes = std::fs::read(path)
        .map_err(|e| DivaError::Checkpoint(format!("{}: {e}", path.display())))?;
    decode(&bytes).map_err(|e| match e {
        DivaError::Checkpoint(m) => DivaError::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn load_model(path: &Path) -> Result<Model> {
    match load(path)?.0 {
        Checkpoint::Model(m) => Ok(m),
        Checkpoint::Adapted(_) => Err(DivaError::Checkpoint(format!(
            "{} holds an adapted model, expected a full-precision one",
            path.display()
        ))),
    }
}

pub fn import_adapted(path: &Path) -> Result<AdaptedModel> {
    match load(path)?.0 {
        Checkpoint::Adapted(a) => Ok(a),
        Checkpoint::Model(_) => Err(DivaError::Checkpoint(format!(
            "{} holds a full-precision model, expected an adapted one",
            path.display()
        ))),
    }
}
