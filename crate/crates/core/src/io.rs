//! Self-describing binary container for checkpoints, adapter files and
//! window caches.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | content                                  |
//! |--------|------|------------------------------------------|
//! | 0      | 4    | magic `HPCK`                             |
//! | 4      | 4    | `u32` format version (currently 1)       |
//! | 8      | 8    | `u64` manifest length `m` in bytes       |
//! | 16     | m    | UTF-8 JSON manifest                      |
//! | 16 + m | rest | payload                                  |
//!
//! The manifest carries `kind` (`backbone`, `adapters`, `model` or
//! `windows`), a `meta` object and a `tensors` list. Each tensor records its
//! name, shape, precision class, trainable flag and `offset` (relative to
//! the payload start). Dense tensors are row-major `f64` values. NF4
//! tensors store `ceil(n/2)` packed code bytes (element `2i` in the low
//! nibble of byte `i`), followed by either one `f32` scale per block, or
//! one `u8` scale code per block and one `f32` per group of blocks.
//! Manifest keys are emitted in a fixed order, so identical inputs give
//! identical files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{DatasetBundle, Window};
use crate::error::{Error, Result};
use crate::finetune::FineTuneModel;
use crate::model::{Encoder, LinearWeight, Module, ModelConfig, WrapInfo};
use crate::numerics::{Matrix, Parameter, PrecisionClass};
use crate::peft::{wrap_model_with, InitScheme, LoraAdapter, LoraTarget, QuantizedMatrix, Scales};

pub const MAGIC: &[u8; 4] = b"HPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "encoding", rename_all = "snake_case")]
pub enum TensorData {
    Dense,
    Nf4 {
        block_size: usize,
        /// `None` for plain `f32` scales, otherwise the double-quant group size.
        double_quant_group: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub precision: PrecisionClass,
    pub trainable: bool,
    pub offset: u64,
    pub bytes: u64,
    #[serde(flatten)]
    pub data: TensorData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerManifest {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<TensorEntry>,
}

/// In-memory container: manifest plus payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub manifest: ContainerManifest,
    pub payload: Vec<u8>,
}

impl Container {
    pub fn new(kind: &str, meta: Value) -> Self {
        Self {
            manifest: ContainerManifest {
                kind: kind.to_string(),
                meta,
                tensors: Vec::new(),
            },
            payload: Vec::new(),
        }
    }

    fn push_entry(&mut self, p: (&str, (usize, usize), PrecisionClass, bool), data: TensorData, bytes: Vec<u8>) {
        let (name, shape, precision, trainable) = p;
        self.manifest.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: [shape.0, shape.1],
            precision,
            trainable,
            offset: self.payload.len() as u64,
            bytes: bytes.len() as u64,
            data,
        });
        self.payload.extend(bytes);
    }

    pub fn add_param(&mut self, p: &Parameter) {
        self.push_entry(
            (&p.name, p.value.shape(), p.precision, p.trainable),
            TensorData::Dense,
            p.value.to_le_bytes(),
        );
    }

    pub fn add_matrix(&mut self, name: &str, m: &Matrix) {
        self.push_entry((name, m.shape(), PrecisionClass::Full, false), TensorData::Dense, m.to_le_bytes());
    }

    pub fn add_quantized(&mut self, name: &str, q: &QuantizedMatrix) {
        let mut bytes = q.packed_codes().to_vec();
        let group = match q.scales() {
            Scales::Plain(s) => {
                s.iter().for_each(|v| bytes.extend(v.to_le_bytes()));
                None
            }
            Scales::Double {
                codes,
                group_scales,
                group_size,
            } => {
                bytes.extend(codes);
                group_scales.iter().for_each(|v| bytes.extend(v.to_le_bytes()));
                Some(*group_size)
            }
        };
        self.push_entry(
            (name, q.shape(), PrecisionClass::QuantizedNf4, false),
            TensorData::Nf4 {
                block_size: q.block_size(),
                double_quant_group: group,
            },
            bytes,
        );
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Data(format!("tensor `{name}` missing from container")))
    }

    fn slice(&self, e: &TensorEntry) -> Result<&[u8]> {
        let start = e.offset as usize;
        let end = start
            .checked_add(e.bytes as usize)
            .filter(|&end| end <= self.payload.len())
            .ok_or_else(|| Error::Data(format!("tensor `{}` exceeds the payload", e.name)))?;
        Ok(&self.payload[start..end])
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let e = self.entry(name)?;
        if e.data != TensorData::Dense {
            return Err(Error::Data(format!("tensor `{name}` is not dense")));
        }
        let raw = self.slice(e)?;
        let n = e.shape[0] * e.shape[1];
        if raw.len() != n * 8 {
            return Err(Error::Data(format!("tensor `{name}` has {} bytes, expected {}", raw.len(), n * 8)));
        }
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Matrix::from_vec(e.shape[0], e.shape[1], values)
    }

    /// Restores value, trainable flag and precision class into `p`.
    pub fn load_param(&self, p: &mut Parameter) -> Result<()> {
        let m = self.matrix(&p.name)?;
        if m.shape() != p.value.shape() {
            return Err(Error::Shape {
                op: "checkpoint load",
                left: m.shape(),
                right: p.value.shape(),
            });
        }
        let e = self.entry(&p.name)?;
        p.value = m;
        p.trainable = e.trainable;
        p.precision = e.precision;
        p.zero_grad();
        Ok(())
    }

    pub fn quantized(&self, name: &str) -> Result<QuantizedMatrix> {
        let e = self.entry(name)?;
        let TensorData::Nf4 {
            block_size,
            double_quant_group,
        } = e.data
        else {
            return Err(Error::Data(format!("tensor `{name}` is not NF4")));
        };
        let raw = self.slice(e)?;
        let n = e.shape[0] * e.shape[1];
        let n_codes = n.div_ceil(2);
        if block_size < 2 {
            return Err(Error::Data(format!("tensor `{name}` has block size {block_size}")));
        }
        let n_blocks = n.div_ceil(block_size);
        let f32s = |b: &[u8]| -> Vec<f32> {
            b.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect()
        };
        let expect = |len: usize| -> Result<()> {
            if raw.len() != len {
                return Err(Error::Data(format!("tensor `{name}` has {} bytes, expected {len}", raw.len())));
            }
            Ok(())
        };
        let scales = match double_quant_group {
            None => {
                expect(n_codes + 4 * n_blocks)?;
                Scales::Plain(f32s(&raw[n_codes..]))
            }
            Some(g) => {
                if g == 0 {
                    return Err(Error::Data(format!("tensor `{name}` has group size 0")));
                }
                let groups = n_blocks.div_ceil(g);
                expect(n_codes + n_blocks + 4 * groups)?;
                Scales::Double {
                    codes: raw[n_codes..n_codes + n_blocks].to_vec(),
                    group_scales: f32s(&raw[n_codes + n_blocks..]),
                    group_size: g,
                }
            }
        };
        let q = QuantizedMatrix::from_packed(e.shape[0], e.shape[1], block_size, raw[..n_codes].to_vec(), scales)?;
        // Surface corrupted nibbles at load time rather than at first use.
        q.dequantize()?;
        Ok(q)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(16 + manifest.len() + self.payload.len());
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((manifest.len() as u64).to_le_bytes());
        out.extend(manifest);
        out.extend(&self.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Data("not a container file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Data(format!("unsupported container version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Data("manifest length exceeds file size".into()))?;
        let manifest: ContainerManifest = serde_json::from_slice(&bytes[16..end])?;
        Ok(Self {
            manifest,
            payload: bytes[end..].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.manifest.kind != kind {
            return Err(Error::Data(format!(
                "expected a `{kind}` container, found `{}`",
                self.manifest.kind
            )));
        }
        Ok(())
    }
}

fn add_encoder(c: &mut Container, encoder: &Encoder) {
    encoder.visit(&mut |p| c.add_param(p));
    encoder.visit_quantized(&mut |name, q| c.add_quantized(name, q));
}

fn meta_field<T: for<'de> Deserialize<'de>>(meta: &Value, key: &str) -> Result<T> {
    let v = meta
        .get(key)
        .ok_or_else(|| Error::Data(format!("container meta lacks `{key}`")))?;
    Ok(serde_json::from_value(v.clone())?)
}

#[derive(Serialize)]
struct BackboneMeta<'a> {
    config: &'a ModelConfig,
    wrap: &'a Option<WrapInfo>,
}

/// Serializes an encoder (adapters and NF4 weights included, if any).
pub fn encoder_container(encoder: &Encoder) -> Result<Container> {
    let meta = serde_json::to_value(BackboneMeta {
        config: &encoder.config,
        wrap: &encoder.wrap,
    })?;
    let mut c = Container::new("backbone", meta);
    add_encoder(&mut c, encoder);
    Ok(c)
}

pub fn save_encoder(path: &Path, encoder: &Encoder) -> Result<()> {
    encoder_container(encoder)?.save(path)
}

fn restore_encoder(c: &Container) -> Result<Encoder> {
    let config: ModelConfig = meta_field(&c.manifest.meta, "config")?;
    let wrap: Option<WrapInfo> = meta_field(&c.manifest.meta, "wrap")?;
    let mut rng = crate::numerics::Rng::new(0);
    let mut encoder = Encoder::new(&config, &mut rng)?;
    if let Some(w) = &wrap {
        let quant = w.quantized.then_some(crate::peft::QuantOptions {
            block_size: w.block_size,
            double_quant: w.double_quant,
        });
        wrap_model_with(&mut encoder, &w.lora, quant, &mut rng)?;
        for block in &mut encoder.blocks {
            for t in LoraTarget::ALL {
                let lin = block.linear_mut(t);
                if let LinearWeight::Quantized { name, q } = &mut lin.weight {
                    *q = c.quantized(name)?;
                }
            }
        }
    }
    let mut status = Ok(());
    encoder.visit_mut(&mut |p| {
        if status.is_ok() {
            status = c.load_param(p);
        }
    });
    status?;
    Ok(encoder)
}

pub fn load_encoder(path: &Path) -> Result<Encoder> {
    let c = Container::load(path)?;
    c.expect_kind("backbone")?;
    restore_encoder(&c)
}

#[derive(Serialize, Deserialize)]
struct HeadMeta {
    n_classes: usize,
    head_hidden: usize,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

fn head_meta(model: &FineTuneModel) -> HeadMeta {
    HeadMeta {
        n_classes: model.head.n_classes(),
        head_hidden: model.head.hidden.shape().1,
        running_mean: model.head.running_mean.clone(),
        running_var: model.head.running_var.clone(),
    }
}

fn add_head(c: &mut Container, model: &FineTuneModel) {
    model.head.visit(&mut |p| c.add_param(p));
}

fn restore_head(c: &Container, model: &mut FineTuneModel) -> Result<()> {
    let hm: HeadMeta = meta_field(&c.manifest.meta, "head")?;
    if hm.n_classes != model.head.n_classes() || hm.running_mean.len() != model.head.running_mean.len() {
        return Err(Error::Data("head dimensions differ from the container".into()));
    }
    let mut status = Ok(());
    model.head.visit_mut(&mut |p| {
        if status.is_ok() {
            status = c.load_param(p);
        }
    });
    status?;
    model.head.running_mean = hm.running_mean;
    model.head.running_var = hm.running_var;
    Ok(())
}

/// Full fine-tuned model: backbone (possibly wrapped) plus head.
pub fn save_model(path: &Path, model: &FineTuneModel) -> Result<()> {
    let mut meta = serde_json::to_value(BackboneMeta {
        config: &model.encoder.config,
        wrap: &model.encoder.wrap,
    })?;
    meta["head"] = serde_json::to_value(head_meta(model))?;
    let mut c = Container::new("model", meta);
    add_encoder(&mut c, &model.encoder);
    add_head(&mut c, model);
    c.save(path)
}

pub fn load_model(path: &Path) -> Result<FineTuneModel> {
    let c = Container::load(path)?;
    c.expect_kind("model")?;
    let encoder = restore_encoder(&c)?;
    let hm: HeadMeta = meta_field(&c.manifest.meta, "head")?;
    let mut model = FineTuneModel::new(encoder, hm.n_classes, 0);
    restore_head(&c, &mut model)?;
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct AdapterRecord {
    layer_id: String,
    target: LoraTarget,
    block: usize,
    rank: usize,
    alpha: f64,
    init: InitScheme,
}

/// Adapters and head only; the backbone is stored separately so one
/// backbone can serve many adapter files.
pub fn save_adapters(path: &Path, model: &FineTuneModel) -> Result<()> {
    let wrap = model
        .encoder
        .wrap
        .as_ref()
        .ok_or_else(|| Error::Config("model has no adapters to save".into()))?;
    let mut records = Vec::new();
    let mut c = Container::new("adapters", Value::Null);
    for (i, block) in model.encoder.blocks.iter().enumerate() {
        for t in LoraTarget::ALL {
            if let Some(ad) = &block.linear(t).adapter {
                records.push(AdapterRecord {
                    layer_id: ad.layer_id.clone(),
                    target: t,
                    block: i,
                    rank: ad.rank,
                    alpha: ad.alpha,
                    init: ad.init,
                });
                c.add_param(&ad.a);
                c.add_param(&ad.b);
            }
        }
    }
    add_head(&mut c, model);
    c.manifest.meta = serde_json::json!({
        "wrap": wrap,
        "adapters": records,
        "head": head_meta(model),
    });
    c.save(path)
}

/// Rebuilds the adapted model from an unwrapped backbone and an adapter file.
pub fn load_adapters(path: &Path, backbone: &Encoder) -> Result<FineTuneModel> {
    let c = Container::load(path)?;
    c.expect_kind("adapters")?;
    let wrap: WrapInfo = meta_field(&c.manifest.meta, "wrap")?;
    let records: Vec<AdapterRecord> = meta_field(&c.manifest.meta, "adapters")?;
    let hm: HeadMeta = meta_field(&c.manifest.meta, "head")?;
    let mut encoder = backbone.clone();
    let quant = wrap.quantized.then_some(crate::peft::QuantOptions {
        block_size: wrap.block_size,
        double_quant: wrap.double_quant,
    });
    wrap_model_with(&mut encoder, &wrap.lora, quant, &mut crate::numerics::Rng::new(0))?;
    for r in &records {
        let block = encoder
            .blocks
            .get_mut(r.block)
            .ok_or_else(|| Error::Data(format!("adapter for missing block {}", r.block)))?;
        let lin = block.linear_mut(r.target);
        let a = c.matrix(&format!("{}.lora_a", r.layer_id))?;
        let b = c.matrix(&format!("{}.lora_b", r.layer_id))?;
        let mut ad = LoraAdapter::from_factors(&r.layer_id, a, b, r.alpha, r.init);
        for p in ad.params_mut() {
            let e = c.entry(&p.name)?;
            p.trainable = e.trainable;
        }
        lin.adapter = Some(ad);
    }
    let mut model = FineTuneModel::new(encoder, hm.n_classes, 0);
    restore_head(&c, &mut model)?;
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct WindowRecord {
    activity: String,
    domain: String,
}

#[derive(Serialize, Deserialize)]
struct BundleRecord {
    name: String,
    vocabulary: Vec<String>,
    rows: usize,
    cols: usize,
    windows: Vec<WindowRecord>,
}

/// Preprocessed windows of several bundles; values are stored back to back
/// as `f64` in window order.
pub fn save_windows(path: &Path, bundles: &[DatasetBundle]) -> Result<()> {
    let mut c = Container::new("windows", Value::Null);
    let mut records = Vec::new();
    for b in bundles {
        let (rows, cols) = b.windows.first().map_or((0, 0), |w| w.values.shape());
        let mut m = Matrix::zeros(0, cols);
        let parts: Vec<&Matrix> = b.values();
        if !parts.is_empty() {
            m = Matrix::vstack(&parts)?;
        }
        c.add_matrix(&b.name, &m);
        records.push(BundleRecord {
            name: b.name.clone(),
            vocabulary: b.vocabulary.clone(),
            rows,
            cols,
            windows: b
                .windows
                .iter()
                .map(|w| WindowRecord {
                    activity: w.activity.clone(),
                    domain: w.domain.clone(),
                })
                .collect(),
        });
    }
    c.manifest.meta = serde_json::json!({ "bundles": records });
    c.save(path)
}

pub fn load_windows(path: &Path) -> Result<Vec<DatasetBundle>> {
    let c = Container::load(path)?;
    c.expect_kind("windows")?;
    let records: Vec<BundleRecord> = meta_field(&c.manifest.meta, "bundles")?;
    records
        .into_iter()
        .map(|r| {
            let m = c.matrix(&r.name)?;
            if m.rows() != r.rows * r.windows.len() {
                return Err(Error::Data(format!("bundle `{}` has inconsistent row count", r.name)));
            }
            let windows = r
                .windows
                .into_iter()
                .enumerate()
                .map(|(i, w)| Window {
                    values: m.slice_rows(i * r.rows, (i + 1) * r.rows),
                    activity: w.activity,
                    domain: w.domain,
                })
                .collect();
            Ok(DatasetBundle {
                name: r.name,
                windows,
                vocabulary: r.vocabulary,
            })
        })
        .collect()
}
