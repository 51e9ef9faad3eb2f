//! Single-file container for parameters, trainer state and feature caches.
//!
//! Layout: one line of UTF-8 JSON (the manifest) terminated by `\n`,
//! followed by the arrays listed in `manifest.fields`, in that order, as
//! flat row-major little-endian IEEE-754 `f64`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::classifier::MlpParams;
use crate::error::{DbmError, Result};
use crate::model::{DbmParams, InitScheme, ModelSpec};

pub const FORMAT: &str = "jdbm-container";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl FieldSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<InitScheme>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub fields: Vec<FieldSpec>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

impl Manifest {
    pub fn new(kind: &str) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            kind: kind.into(),
            spec: None,
            scheme: None,
            seed: None,
            fields: Vec::new(),
            meta: serde_json::Value::Null,
        }
    }
}

/// Serialises a manifest and its arrays. `arrays[i]` must have
/// `manifest.fields[i].len()` entries.
pub fn encode(manifest: &Manifest, arrays: &[&[f64]]) -> Result<Vec<u8>> {
    if manifest.fields.len() != arrays.len() {
        return Err(DbmError::Format("field count differs from array count".into()));
    }
    for (field, data) in manifest.fields.iter().zip(arrays) {
        if field.len() != data.len() {
            return Err(DbmError::Format(format!("field {} has {} values, shape says {}", field.name, data.len(), field.len())));
        }
    }
    let mut out = serde_json::to_vec(manifest)?;
    out.push(b'\n');
    for data in arrays {
        for x in *data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Manifest, Vec<Vec<f64>>)> {
    let mut reader = BufReader::new(bytes);
    let mut header = Vec::new();
    reader.read_until(b'\n', &mut header)?;
    if header.last() != Some(&b'\n') {
        return Err(DbmError::Format("missing manifest terminator".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&header[..header.len() - 1])?;
    if manifest.format != FORMAT {
        return Err(DbmError::Format(format!("unknown container format {:?}", manifest.format)));
    }
    if manifest.version != VERSION {
        return Err(DbmError::Format(format!("unsupported container version {}", manifest.version)));
    }
    let mut arrays = Vec::with_capacity(manifest.fields.len());
    for field in &manifest.fields {
        let mut raw = vec![0u8; field.len() * 8];
        reader
            .read_exact(&mut raw)
            .map_err(|_| DbmError::Format(format!("truncated data for field {}", field.name)))?;
        arrays.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect());
    }
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(DbmError::Format(format!("{} trailing bytes after the last field", rest.len())));
    }
    Ok((manifest, arrays))
}

/// Writes through a temporary file and a rename so readers never see a
/// partial file.
pub fn write_container(path: &Path, manifest: &Manifest, arrays: &[&[f64]]) -> Result<()> {
    let bytes = encode(manifest, arrays)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(Manifest, Vec<Vec<f64>>)> {
    decode(&fs::read(path)?)
}

fn expect_kind(manifest: &Manifest, kind: &str) -> Result<()> {
    if manifest.kind != kind {
        return Err(DbmError::Format(format!("expected a {kind} container, found {}", manifest.kind)));
    }
    Ok(())
}

fn fields_of(blocks: &[(&'static str, Vec<usize>, &[f64])]) -> Vec<FieldSpec> {
    blocks.iter().map(|(n, s, _)| FieldSpec { name: (*n).into(), shape: s.clone() }).collect()
}

/// Manifest and arrays for a parameter set; `extra` fields follow the
/// parameter blocks.
pub fn params_manifest(
    kind: &str,
    params: &DbmParams,
    scheme: Option<InitScheme>,
    seed: Option<u64>,
) -> (Manifest, Vec<Vec<f64>>) {
    let blocks = params.named_blocks();
    let mut manifest = Manifest::new(kind);
    manifest.spec = Some(params.spec());
    manifest.scheme = scheme;
    manifest.seed = seed;
    manifest.fields = fields_of(&blocks);
    (manifest, blocks.into_iter().map(|(_, _, d)| d.to_vec()).collect())
}

pub fn save_params(path: &Path, params: &DbmParams, scheme: Option<InitScheme>, seed: Option<u64>) -> Result<()> {
    let (manifest, arrays) = params_manifest("dbm_params", params, scheme, seed);
    let views: Vec<&[f64]> = arrays.iter().map(Vec::as_slice).collect();
    write_container(path, &manifest, &views)
}

/// Rebuilds parameters from the first seven arrays of a container.
pub fn params_from_arrays(manifest: &Manifest, arrays: &[Vec<f64>]) -> Result<DbmParams> {
    let spec = manifest.spec.ok_or_else(|| DbmError::Format("container has no model spec".into()))?;
    spec.validate()?;
    let names: Vec<&str> = manifest.fields.iter().take(7).map(|f| f.name.as_str()).collect();
    if names != crate::model::PARAM_FIELDS || arrays.len() < 7 {
        return Err(DbmError::Format(format!("unexpected parameter fields {names:?}")));
    }
    let flat: Vec<f64> = arrays[..7].concat();
    DbmParams::from_flat(spec, &flat)
}

pub fn load_params(path: &Path) -> Result<(DbmParams, Manifest)> {
    let (manifest, arrays) = read_container(path)?;
    expect_kind(&manifest, "dbm_params")?;
    Ok((params_from_arrays(&manifest, &arrays)?, manifest))
}

pub fn save_mlp(path: &Path, mlp: &MlpParams) -> Result<()> {
    let blocks = mlp.named_blocks();
    let mut manifest = Manifest::new("mlp_params");
    manifest.fields = fields_of(&blocks);
    let views: Vec<&[f64]> = blocks.iter().map(|(_, _, d)| *d).collect();
    write_container(path, &manifest, &views)
}

pub fn load_mlp(path: &Path) -> Result<MlpParams> {
    let (manifest, arrays) = read_container(path)?;
    expect_kind(&manifest, "mlp_params")?;
    let names: Vec<&str> = manifest.fields.iter().map(|f| f.name.as_str()).collect();
    if names != crate::classifier::MLP_FIELDS {
        return Err(DbmError::Format(format!("unexpected MLP fields {names:?}")));
    }
    let shape = |i: usize, j: usize| manifest.fields[i].shape.get(j).copied().unwrap_or(0);
    let (d, n1, n2, k) = (shape(0, 0), shape(0, 1), shape(2, 1), shape(5, 1));
    MlpParams::from_flat(d, n1, n2, k, &arrays.concat())
}

/// Feature cache: one `[n_examples x n_features]` array.
pub fn save_features(path: &Path, features: &[Array1<f64>], meta: serde_json::Value) -> Result<()> {
    let width = features.first().map_or(0, |f| f.len());
    if features.iter().any(|f| f.len() != width) {
        return Err(DbmError::ShapeMismatch("ragged feature rows".into()));
    }
    let mut manifest = Manifest::new("features");
    manifest.fields = vec![FieldSpec { name: "phi".into(), shape: vec![features.len(), width] }];
    manifest.meta = meta;
    let flat: Vec<f64> = features.iter().flat_map(|f| f.iter().copied()).collect();
    write_container(path, &manifest, &[&flat])
}

pub fn load_features(path: &Path) -> Result<(Vec<Array1<f64>>, Manifest)> {
    let (manifest, arrays) = read_container(path)?;
    expect_kind(&manifest, "features")?;
    let shape = &manifest.fields.first().ok_or_else(|| DbmError::Format("no feature field".into()))?.shape;
    if shape.len() != 2 {
        return Err(DbmError::Format("feature array must be two-dimensional".into()));
    }
    let width = shape[1];
    let rows = if width == 0 {
        vec![Array1::zeros(0); shape[0]]
    } else {
        arrays[0].chunks(width).map(|c| Array1::from(c.to_vec())).collect()
    };
    Ok((rows, manifest))
}
