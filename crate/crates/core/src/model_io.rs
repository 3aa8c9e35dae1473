//! Self-describing model bundles: a `manifest.json` plus one little-endian
//! blob per tensor under `tensors/`, each guarded by a SHA-256 checksum.
//!
//! Saves go to a sibling temporary directory that is renamed into place, so
//! a failed save leaves no partial bundle. Identical models produce
//! byte-identical bundles.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::Result;
use crate::nn::{ArchConfig, BatchNorm, CnnModel, Conv2d, ConvBlock, Dense};
use crate::quant::{LayerScales, QConvLayer, QDenseLayer, QuantModel};
use crate::scalar::Real;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("bundle format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("bundle shape mismatch: {0}")]
    Shape(String),
    #[error("checksum mismatch for tensor {tensor}")]
    Checksum { tensor: String },
    #[error("missing blob for tensor {tensor}")]
    MissingBlob { tensor: String },
    #[error("invalid bundle: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Float,
    Quant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    Float32,
    Int8,
    Int32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::Float32 | Dtype::Int32 => 4,
            Dtype::Int8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frac_bits: Option<i32>,
    /// Relative to the bundle directory.
    pub file: String,
    /// Lowercase hex SHA-256 of the blob.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScaleEntry {
    pub layer: String,
    #[serde(flatten)]
    pub scales: LayerScales,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: ModelKind,
    pub architecture: ArchConfig,
    /// Float bundles only: whether batch norm has been folded away.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folded: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_frac: Option<i32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layer_scales: Vec<LayerScaleEntry>,
    pub tensors: Vec<TensorEntry>,
}

/// A loaded bundle.
#[derive(Clone, Debug, PartialEq)]
pub enum Bundle {
    Float(CnnModel<f32>),
    Quant(QuantModel),
}

struct Blob {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    frac_bits: Option<i32>,
    bytes: Vec<u8>,
}

fn f32_blob<T: Real>(name: String, shape: Vec<usize>, v: &[T]) -> Blob {
    let bytes = v.iter().flat_map(|x| (x.as_f64() as f32).to_le_bytes()).collect();
    Blob {
        name,
        shape,
        dtype: Dtype::Float32,
        frac_bits: None,
        bytes,
    }
}

fn i8_blob(name: String, shape: Vec<usize>, v: &[i8], frac: i32) -> Blob {
    Blob {
        name,
        shape,
        dtype: Dtype::Int8,
        frac_bits: Some(frac),
        bytes: v.iter().map(|&x| x as u8).collect(),
    }
}

fn i32_blob(name: String, shape: Vec<usize>, v: &[i32], frac: i32) -> Blob {
    Blob {
        name,
        shape,
        dtype: Dtype::Int32,
        frac_bits: Some(frac),
        bytes: v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_bundle(dir: &Path, mut manifest: Manifest, blobs: Vec<Blob>) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| BundleError::Invalid(format!("{} has no final path component", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    let result = (|| -> Result<()> {
        fs::create_dir_all(tmp.join("tensors"))?;
        for b in blobs {
            let file = format!("tensors/{}.bin", b.name);
            fs::write(tmp.join(&file), &b.bytes)?;
            manifest.tensors.push(TensorEntry {
                sha256: sha256_hex(&b.bytes),
                name: b.name,
                shape: b.shape,
                dtype: b.dtype,
                frac_bits: b.frac_bits,
                file,
            });
        }
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        fs::write(tmp.join(MANIFEST), json)?;
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&tmp, dir)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_dir_all(&tmp);
    }
    result
}

/// Saves a float model (as float32) with its batch-norm statistics.
pub fn save_float<T: Real>(model: &CnnModel<T>, dir: &Path) -> Result<()> {
    let mut blobs = Vec::new();
    let mut in_ch = model.arch().input_shape[0];
    for (i, b) in model.blocks().iter().enumerate() {
        let (k, oc) = (i + 1, b.conv.out_channels);
        blobs.push(f32_blob(format!("conv{k}.weight"), vec![oc, in_ch, 3, 3], &b.conv.weight));
        blobs.push(f32_blob(format!("conv{k}.bias"), vec![oc], &b.conv.bias));
        if let Some(bn) = &b.bn {
            blobs.push(f32_blob(format!("bn{k}.gamma"), vec![oc], &bn.gamma));
            blobs.push(f32_blob(format!("bn{k}.beta"), vec![oc], &bn.beta));
            blobs.push(f32_blob(format!("bn{k}.running_mean"), vec![oc], &bn.running_mean));
            blobs.push(f32_blob(format!("bn{k}.running_var"), vec![oc], &bn.running_var));
        }
        in_ch = oc;
    }
    for (name, d) in [("dense1", model.dense1()), ("dense2", model.dense2())] {
        blobs.push(f32_blob(format!("{name}.weight"), vec![d.out_dim, d.in_dim], &d.weight));
        blobs.push(f32_blob(format!("{name}.bias"), vec![d.out_dim], &d.bias));
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: ModelKind::Float,
        architecture: model.arch().clone(),
        folded: Some(model.is_folded()),
        input_frac: None,
        layer_scales: Vec::new(),
        tensors: Vec::new(),
    };
    write_bundle(dir, manifest, blobs)
}

pub fn save_quant(model: &QuantModel, dir: &Path) -> Result<()> {
    let mut blobs = Vec::new();
    let mut layer_scales = Vec::new();
    for (i, c) in model.convs().iter().enumerate() {
        let name = format!("conv{}", i + 1);
        let (oc, ic) = (c.out_channels, c.in_channels);
        blobs.push(i8_blob(format!("{name}.weight"), vec![oc, ic, 3, 3], &c.weight, c.scales.weight_frac));
        blobs.push(i32_blob(format!("{name}.bias"), vec![oc], &c.bias, c.scales.accumulator_frac()));
        layer_scales.push(LayerScaleEntry { layer: name, scales: c.scales });
    }
    for (name, d) in [("dense1", model.dense1()), ("dense2", model.dense2())] {
        blobs.push(i8_blob(format!("{name}.weight"), vec![d.out_dim, d.in_dim], &d.weight, d.scales.weight_frac));
        blobs.push(i32_blob(format!("{name}.bias"), vec![d.out_dim], &d.bias, d.scales.accumulator_frac()));
        layer_scales.push(LayerScaleEntry {
            layer: name.into(),
            scales: d.scales,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: ModelKind::Quant,
        architecture: model.arch().clone(),
        folded: None,
        input_frac: Some(model.input_frac()),
        layer_scales,
        tensors: Vec::new(),
    };
    write_bundle(dir, manifest, blobs)
}

pub fn save_bundle(bundle: &Bundle, dir: &Path) -> Result<()> {
    match bundle {
        Bundle::Float(m) => save_float(m, dir),
        Bundle::Quant(q) => save_quant(q, dir),
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let bytes = fs::read(dir.join(MANIFEST))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(BundleError::Version {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    Ok(manifest)
}

struct Reader<'a> {
    dir: &'a Path,
    manifest: &'a Manifest,
}

impl Reader<'_> {
    fn raw(&self, name: &str, dtype: Dtype, shape: &[usize]) -> Result<(Vec<u8>, Option<i32>)> {
        let e = self
            .manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| BundleError::Invalid(format!("manifest has no tensor {name}")))?;
        if e.dtype != dtype || e.shape != shape {
            return Err(BundleError::Shape(format!(
                "{name}: manifest says {:?} {:?}, architecture needs {dtype:?} {shape:?}",
                e.dtype, e.shape
            ))
            .into());
        }
        if Path::new(&e.file).is_absolute() || e.file.split(['/', '\\']).any(|c| c == "..") {
            return Err(BundleError::Invalid(format!("{name}: blob path {} escapes the bundle", e.file)).into());
        }
        let bytes = match fs::read(self.dir.join(&e.file)) {
            Ok(b) => b,
            Err(err) if err.kind() == ErrorKind::NotFound => {
                return Err(BundleError::MissingBlob { tensor: name.into() }.into())
            }
            Err(err) => return Err(err.into()),
        };
        if bytes.len() != shape.iter().product::<usize>() * dtype.size() {
            return Err(BundleError::Shape(format!("{name}: blob holds {} bytes", bytes.len())).into());
        }
        if sha256_hex(&bytes) != e.sha256 {
            return Err(BundleError::Checksum { tensor: name.into() }.into());
        }
        Ok((bytes, e.frac_bits))
    }

    fn f32s(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let (b, _) = self.raw(name, Dtype::Float32, shape)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn i8s(&self, name: &str, shape: &[usize], frac: i32) -> Result<Vec<i8>> {
        let (b, f) = self.raw(name, Dtype::Int8, shape)?;
        self.check_frac(name, f, frac)?;
        let v: Vec<i8> = b.into_iter().map(|x| x as i8).collect();
        if v.contains(&i8::MIN) {
            return Err(BundleError::Invalid(format!("{name}: value -128 outside [-127, 127]")).into());
        }
        Ok(v)
    }

    fn i32s(&self, name: &str, shape: &[usize], frac: i32) -> Result<Vec<i32>> {
        let (b, f) = self.raw(name, Dtype::Int32, shape)?;
        self.check_frac(name, f, frac)?;
        Ok(b.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn check_frac(&self, name: &str, found: Option<i32>, expected: i32) -> Result<()> {
        if found != Some(expected) {
            return Err(BundleError::Invalid(format!("{name}: frac_bits {found:?} disagree with layer scales ({expected})")).into());
        }
        Ok(())
    }
}

fn load_float(dir: &Path, m: &Manifest) -> Result<CnnModel<f32>> {
    let r = Reader { dir, manifest: m };
    let arch = &m.architecture;
    let folded = m.folded.unwrap_or(false);
    let mut blocks = Vec::new();
    let mut in_ch = arch.input_shape[0];
    for (i, &oc) in arch.conv_channels.iter().enumerate() {
        let k = i + 1;
        let conv = Conv2d::new(
            in_ch,
            oc,
            r.f32s(&format!("conv{k}.weight"), &[oc, in_ch, 3, 3])?,
            r.f32s(&format!("conv{k}.bias"), &[oc])?,
        )?;
        let bn = if folded {
            None
        } else {
            Some(BatchNorm {
                gamma: r.f32s(&format!("bn{k}.gamma"), &[oc])?,
                beta: r.f32s(&format!("bn{k}.beta"), &[oc])?,
                running_mean: r.f32s(&format!("bn{k}.running_mean"), &[oc])?,
                running_var: r.f32s(&format!("bn{k}.running_var"), &[oc])?,
                eps: arch.bn_eps as f32,
                momentum: arch.bn_momentum as f32,
            })
        };
        blocks.push(ConvBlock { conv, bn });
        in_ch = oc;
    }
    let (f, u) = (arch.flatten_len(), arch.dense_units);
    let dense1 = Dense::new(f, u, r.f32s("dense1.weight", &[u, f])?, r.f32s("dense1.bias", &[u])?)?;
    let dense2 = Dense::new(u, 1, r.f32s("dense2.weight", &[1, u])?, r.f32s("dense2.bias", &[1])?)?;
    CnnModel::from_parts(arch.clone(), blocks, dense1, dense2)
}

fn load_quant(dir: &Path, m: &Manifest) -> Result<QuantModel> {
    let r = Reader { dir, manifest: m };
    let arch = &m.architecture;
    let input_frac = m
        .input_frac
        .ok_or_else(|| BundleError::Invalid("quant bundle without input_frac".into()))?;
    let nb = arch.conv_channels.len();
    if m.layer_scales.len() != nb + 2 {
        return Err(BundleError::Invalid(format!("{} layer scale entries for {} layers", m.layer_scales.len(), nb + 2)).into());
    }
    let scale_of = |i: usize, name: &str| -> Result<LayerScales> {
        let e = &m.layer_scales[i];
        if e.layer != name {
            return Err(BundleError::Invalid(format!("layer scale entry {i} is {}, expected {name}", e.layer)).into());
        }
        Ok(e.scales)
    };
    let mut convs = Vec::new();
    let mut in_ch = arch.input_shape[0];
    for (i, &oc) in arch.conv_channels.iter().enumerate() {
        let name = format!("conv{}", i + 1);
        let scales = scale_of(i, &name)?;
        convs.push(QConvLayer {
            in_channels: in_ch,
            out_channels: oc,
            weight: r.i8s(&format!("{name}.weight"), &[oc, in_ch, 3, 3], scales.weight_frac)?,
            bias: r.i32s(&format!("{name}.bias"), &[oc], scales.accumulator_frac())?,
            scales,
        });
        in_ch = oc;
    }
    let (f, u) = (arch.flatten_len(), arch.dense_units);
    let dense = |idx: usize, name: &str, i: usize, o: usize| -> Result<QDenseLayer> {
        let scales = scale_of(idx, name)?;
        Ok(QDenseLayer {
            in_dim: i,
            out_dim: o,
            weight: r.i8s(&format!("{name}.weight"), &[o, i], scales.weight_frac)?,
            bias: r.i32s(&format!("{name}.bias"), &[o], scales.accumulator_frac())?,
            scales,
        })
    };
    let dense1 = dense(nb, "dense1", f, u)?;
    let dense2 = dense(nb + 1, "dense2", u, 1)?;
    QuantModel::from_parts(arch.clone(), input_frac, convs, dense1, dense2)
}

pub fn load_bundle(dir: &Path) -> Result<Bundle> {
    let m = read_manifest(dir)?;
    Ok(match m.kind {
        ModelKind::Float => Bundle::Float(load_float(dir, &m)?),
        ModelKind::Quant => Bundle::Quant(load_quant(dir, &m)?),
    })
}

pub fn load_float_bundle(dir: &Path) -> Result<CnnModel<f32>> {
    match load_bundle(dir)? {
        Bundle::Float(m) => Ok(m),
        Bundle::Quant(_) => Err(BundleError::Invalid(format!("{} holds a quantized model", dir.display())).into()),
    }
}

pub fn load_quant_bundle(dir: &Path) -> Result<QuantModel> {
    match load_bundle(dir)? {
        Bundle::Quant(m) => Ok(m),
        Bundle::Float(_) => Err(BundleError::Invalid(format!("{} holds a float model", dir.display())).into()),
    }
}

/// Bundle directory path for a checkpoint epoch.
pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}"))
}
