//! Checkpoints: a JSON manifest next to a flat little-endian blob.
//!
//! `model.json` names `model.bin`; parameters are stored back to back in
//! manifest order. Nothing time-dependent is written, so saving the same
//! weights twice gives identical files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::{self, LoraAdapter};
use crate::params::{Param, ParamStore};
use crate::segformer::{ModelConfig, SegFormer};
use crate::tensor::{Element, Tensor};

pub const FORMAT: &str = "waterseg-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the blob.
    pub offset: usize,
    pub numel: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub blob: String,
    pub blob_sha256: String,
    pub params: Vec<Entry>,
    pub meta: Meta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
    pub merged: bool,
}

impl From<&LoraAdapter> for AdapterMeta {
    fn from(a: &LoraAdapter) -> Self {
        Self {
            target: a.target.clone(),
            rank: a.rank,
            alpha: a.alpha,
            merged: a.merged,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub kind: CheckpointKind,
    pub model_config: ModelConfig,
    #[serde(default)]
    pub lora: Vec<AdapterMeta>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Full,
    Adapters,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn write_params<'a, S: Element>(
    path: &Path,
    params: impl Iterator<Item = &'a Param<S>>,
    meta: Meta,
) -> Result<()> {
    let blob = blob_path(path);
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for p in params {
        for &v in p.value.data() {
            v.write_le(&mut bytes);
        }
        entries.push(Entry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            numel: p.value.numel(),
            trainable: p.requires_grad,
        });
        offset += p.value.numel();
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: S::DTYPE.into(),
        blob: blob.file_name().unwrap_or_default().to_string_lossy().into_owned(),
        blob_sha256: hex::encode(Sha256::digest(&bytes)),
        params: entries,
        meta,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a manifest and its tensors, checking format, dtype and integrity.
pub fn read<S: Element>(path: &Path) -> Result<(Manifest, Vec<Tensor<S>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format {} v{}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    if manifest.dtype != S::DTYPE {
        return Err(Error::Checkpoint(format!(
            "{}: stored dtype {} but {} was requested",
            path.display(),
            manifest.dtype,
            S::DTYPE
        )));
    }
    let blob = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.blob_sha256 {
        return Err(Error::Checkpoint(format!("{}: blob checksum mismatch", blob.display())));
    }
    let mut tensors = Vec::with_capacity(manifest.params.len());
    for e in &manifest.params {
        let (start, end) = (e.offset * S::BYTES, (e.offset + e.numel) * S::BYTES);
        if end > bytes.len() || e.shape.iter().product::<usize>() != e.numel {
            return Err(Error::Checkpoint(format!("{}: entry {} is out of range", path.display(), e.name)));
        }
        let data = bytes[start..end].chunks_exact(S::BYTES).map(S::read_le).collect();
        tensors.push(Tensor::new(e.shape.clone(), data)?);
    }
    Ok((manifest, tensors))
}

/// Copies stored tensors into `store`. The stored names must be exactly
/// `expected` (in order) with matching shapes; every difference is listed.
fn assign<S: Element>(
    store: &mut ParamStore<S>,
    expected: &[String],
    manifest: &Manifest,
    tensors: Vec<Tensor<S>>,
) -> Result<()> {
    let mut problems = Vec::new();
    for name in expected {
        if !manifest.params.iter().any(|e| &e.name == name) {
            problems.push(format!("missing {name}"));
        }
    }
    for e in &manifest.params {
        match store.by_name(&e.name) {
            None => problems.push(format!("unexpected {}", e.name)),
            Some(p) if p.value.shape() != e.shape.as_slice() => {
                problems.push(format!("{}: model {:?} vs checkpoint {:?}", e.name, p.value.shape(), e.shape))
            }
            Some(_) => {}
        }
    }
    if !problems.is_empty() {
        return Err(Error::Checkpoint(problems.join("; ")));
    }
    for (e, t) in manifest.params.iter().zip(tensors) {
        let id = store.id(&e.name).expect("checked above");
        let p = store.get_mut(id);
        p.value = t;
        p.requires_grad = e.trainable;
    }
    Ok(())
}

/// Writes every parameter together with the config and adapter layout.
pub fn save<S: Element>(model: &SegFormer<S>, path: &Path) -> Result<()> {
    let meta = Meta {
        kind: CheckpointKind::Full,
        model_config: model.config().clone(),
        lora: lora::adapters(model).iter().map(AdapterMeta::from).collect(),
    };
    write_params(path, model.params().iter().map(|(_, p)| p), meta)
}

fn attach_adapters<S: Element>(model: &mut SegFormer<S>, adapters: &[AdapterMeta]) -> Result<()> {
    for a in adapters {
        lora::inject_lora(model, std::slice::from_ref(&a.target), a.rank, a.alpha, 0)?;
        if a.merged {
            let (layers, _) = model.linears_mut();
            if let Some(ad) = layers.into_iter().find(|l| l.name == a.target).and_then(|l| l.lora.as_mut()) {
                ad.merged = true;
            }
        }
    }
    Ok(())
}

/// Rebuilds a model from a full checkpoint.
pub fn load<S: Element>(path: &Path) -> Result<SegFormer<S>> {
    let (manifest, tensors) = read::<S>(path)?;
    if manifest.meta.kind != CheckpointKind::Full {
        return Err(Error::Checkpoint(format!("{} holds adapters only", path.display())));
    }
    let mut model = SegFormer::new(manifest.meta.model_config.clone(), 0)?;
    attach_adapters(&mut model, &manifest.meta.lora)?;
    let names: Vec<String> = model.params().iter().map(|(_, p)| p.name.clone()).collect();
    assign(model.params_mut(), &names, &manifest, tensors)?;
    Ok(model)
}

/// Loads a full checkpoint into an existing model of a given architecture.
/// Differing configurations are reported parameter by parameter.
pub fn load_into<S: Element>(model: &mut SegFormer<S>, path: &Path) -> Result<()> {
    let (manifest, tensors) = read::<S>(path)?;
    let names: Vec<String> = model.params().iter().map(|(_, p)| p.name.clone()).collect();
    assign(model.params_mut(), &names, &manifest, tensors)
}

/// Writes only adapter factors plus rank/alpha per target.
pub fn save_adapters<S: Element>(model: &SegFormer<S>, path: &Path) -> Result<()> {
    let adapters = lora::adapters(model);
    if adapters.is_empty() {
        return Err(Error::State("model has no adapters to save".into()));
    }
    if adapters.iter().any(|a| a.merged) {
        return Err(Error::State("unmerge adapters before saving them separately".into()));
    }
    let store = model.params();
    let params = adapters.iter().flat_map(|a| [store.get(a.a), store.get(a.b)]);
    let meta = Meta {
        kind: CheckpointKind::Adapters,
        model_config: model.config().clone(),
        lora: adapters.iter().map(AdapterMeta::from).collect(),
    };
    write_params(path, params, meta)
}

/// Attaches stored adapters to a model that has none yet.
pub fn load_adapters<S: Element>(model: &mut SegFormer<S>, path: &Path) -> Result<()> {
    let (manifest, tensors) = read::<S>(path)?;
    if manifest.meta.kind != CheckpointKind::Adapters {
        return Err(Error::Checkpoint(format!("{} is not an adapter checkpoint", path.display())));
    }
    if &manifest.meta.model_config != model.config() {
        return Err(Error::Checkpoint("adapter checkpoint was made for a different model config".into()));
    }
    if !lora::adapters(model).is_empty() {
        return Err(Error::State("model already carries adapters".into()));
    }
    attach_adapters(model, &manifest.meta.lora)?;
    let names: Vec<String> = lora::adapters(model)
        .iter()
        .flat_map(|a| [model.params().get(a.a).name.clone(), model.params().get(a.b).name.clone()])
        .collect();
    assign(model.params_mut(), &names, &manifest, tensors)
}
