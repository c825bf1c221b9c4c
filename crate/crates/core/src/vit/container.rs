//! Tensor container: a JSON manifest beside one raw little-endian f32 payload.
//!
//! `model.json` pairs with `model.bin`. Each manifest entry gives a tensor's
//! byte offset (64-byte aligned) and length inside the payload.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::calibrate::{CalibratedModel, CalibratedWeight, SiteQuantizer};
use super::sites::{act_site_kind, act_site_name, linear_name, QuantizationSiteMap, SiteMode};
use super::{Block, ModelSpec, VitModel};
use crate::error::{Error, Result};
use crate::igq::{GroupAssignment, GroupQuantizers};
use crate::quant::{QuantizerBounds, WeightQuantConfig};
use crate::tensor::Tensor;

pub const ALIGN: u64 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<serde_json::Value>,
}

/// Named tensors in insertion order plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelContainer {
    pub tensors: Vec<(String, Tensor)>,
    pub metadata: Option<serde_json::Value>,
}

impl ModelContainer {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::DuplicateName(name));
        }
        self.tensors.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MalformedManifest(format!("missing tensor {name:?}")))
    }

    /// Calibration batch container: `sample_0000`, `sample_0001`, ...
    pub fn from_samples(samples: &[Tensor]) -> Self {
        Self {
            tensors: samples
                .iter()
                .enumerate()
                .map(|(i, t)| (format!("sample_{i:04}"), t.clone()))
                .collect(),
            metadata: None,
        }
    }

    pub fn samples(&self) -> Result<Vec<Tensor>> {
        let mut out = Vec::new();
        while let Some(t) = self.get(&format!("sample_{:04}", out.len())) {
            out.push(t.clone());
        }
        if out.len() != self.tensors.len() {
            return Err(Error::MalformedManifest(
                "calibration container must hold only consecutive sample_NNNN tensors".into(),
            ));
        }
        Ok(out)
    }
}

/// Payload file paired with a manifest path.
pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn align_up(x: u64) -> u64 {
    x.div_ceil(ALIGN) * ALIGN
}

/// Manifest bytes and payload bytes for a container.
pub fn encode(c: &ModelContainer) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut seen = HashSet::new();
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(c.tensors.len());
    for (name, t) in &c.tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateName(name.clone()));
        }
        let offset = align_up(payload.len() as u64);
        payload.resize(offset as usize, 0);
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            nbytes: 4 * t.numel() as u64,
        });
    }
    let manifest = Manifest {
        tensors: entries,
        metadata: c.metadata.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    json.push(b'\n');
    Ok((json, payload))
}

pub fn decode(manifest: &[u8], payload: &[u8]) -> Result<ModelContainer> {
    let m: Manifest = serde_json::from_slice(manifest).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    let mut seen = HashSet::new();
    let mut tensors = Vec::with_capacity(m.tensors.len());
    for e in m.tensors {
        if !seen.insert(e.name.clone()) {
            return Err(Error::DuplicateName(e.name));
        }
        if e.dtype != "f32" {
            return Err(Error::MalformedManifest(format!("{}: unsupported dtype {:?}", e.name, e.dtype)));
        }
        if e.offset % ALIGN != 0 {
            return Err(Error::MalformedManifest(format!("{}: offset {} not 64-byte aligned", e.name, e.offset)));
        }
        let numel = e.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if numel.and_then(|n| n.checked_mul(4)).map(|n| n as u64) != Some(e.nbytes) {
            return Err(Error::MalformedManifest(format!(
                "{}: {} bytes do not match shape {:?}",
                e.name, e.nbytes, e.shape
            )));
        }
        let end = e.offset.saturating_add(e.nbytes);
        if end > payload.len() as u64 {
            return Err(Error::TruncatedPayload {
                name: e.name,
                end,
                len: payload.len() as u64,
            });
        }
        let bytes = &payload[e.offset as usize..end as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(ModelContainer {
        tensors,
        metadata: m.metadata,
    })
}

/// Writes through a sibling temp file and renames, so a failed write never
/// leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn save_container(c: &ModelContainer, manifest: &Path) -> Result<()> {
    let (json, payload) = encode(c)?;
    write_atomic(&payload_path(manifest), &payload)?;
    write_atomic(manifest, &json)
}

pub fn load_container(manifest: &Path) -> Result<ModelContainer> {
    let json = fs::read(manifest)?;
    let payload = fs::read(payload_path(manifest))?;
    decode(&json, &payload)
}

fn vec_tensor(v: &[f32]) -> Tensor {
    Tensor::vector(v.to_vec()).expect("rank-1")
}

fn take_vec(c: &ModelContainer, name: &str, len: usize) -> Result<Vec<f32>> {
    let t = c.require(name)?;
    if t.shape() != [len] {
        return Err(Error::shape("container tensor", format!("{name}: expected [{len}], got {:?}", t.shape())));
    }
    Ok(t.data().to_vec())
}

fn take_mat(c: &ModelContainer, name: &str, rows: usize, cols: usize) -> Result<Tensor> {
    let t = c.require(name)?;
    if t.shape() != [rows, cols] {
        return Err(Error::shape(
            "container tensor",
            format!("{name}: expected [{rows}, {cols}], got {:?}", t.shape()),
        ));
    }
    Ok(t.clone())
}

impl VitModel {
    pub fn to_container(&self) -> ModelContainer {
        let mut t: Vec<(String, Tensor)> = vec![("pos_embed".into(), self.pos_embed.clone())];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{i}");
            t.push((format!("{p}.ln1.gamma"), vec_tensor(&b.ln1_gamma)));
            t.push((format!("{p}.ln1.beta"), vec_tensor(&b.ln1_beta)));
            t.push((format!("{p}.qkv.weight"), b.w_qkv.clone()));
            t.push((format!("{p}.qkv.bias"), vec_tensor(&b.b_qkv)));
            t.push((format!("{p}.proj.weight"), b.w_proj.clone()));
            t.push((format!("{p}.proj.bias"), vec_tensor(&b.b_proj)));
            t.push((format!("{p}.ln2.gamma"), vec_tensor(&b.ln2_gamma)));
            t.push((format!("{p}.ln2.beta"), vec_tensor(&b.ln2_beta)));
            t.push((format!("{p}.fc1.weight"), b.w_fc1.clone()));
            t.push((format!("{p}.fc1.bias"), vec_tensor(&b.b_fc1)));
            t.push((format!("{p}.fc2.weight"), b.w_fc2.clone()));
            t.push((format!("{p}.fc2.bias"), vec_tensor(&b.b_fc2)));
        }
        t.push(("head.weight".into(), self.head_w.clone()));
        t.push(("head.bias".into(), vec_tensor(&self.head_b)));
        ModelContainer {
            tensors: t,
            metadata: Some(serde_json::json!({ "model_spec": self.spec })),
        }
    }

    pub fn from_container(c: &ModelContainer) -> Result<Self> {
        let spec_value = c
            .metadata
            .as_ref()
            .and_then(|m| m.get("model_spec"))
            .ok_or_else(|| Error::MalformedManifest("metadata.model_spec missing".into()))?;
        let spec: ModelSpec =
            serde_json::from_value(spec_value.clone()).map_err(|e| Error::MalformedManifest(e.to_string()))?;
        spec.validate()?;
        let (d, hd) = (spec.dim, spec.hidden());
        let mut blocks = Vec::with_capacity(spec.depth);
        for i in 0..spec.depth {
            let p = format!("block{i}");
            blocks.push(Block {
                ln1_gamma: take_vec(c, &format!("{p}.ln1.gamma"), d)?,
                ln1_beta: take_vec(c, &format!("{p}.ln1.beta"), d)?,
                w_qkv: take_mat(c, &format!("{p}.qkv.weight"), d, 3 * d)?,
                b_qkv: take_vec(c, &format!("{p}.qkv.bias"), 3 * d)?,
                w_proj: take_mat(c, &format!("{p}.proj.weight"), d, d)?,
                b_proj: take_vec(c, &format!("{p}.proj.bias"), d)?,
                ln2_gamma: take_vec(c, &format!("{p}.ln2.gamma"), d)?,
                ln2_beta: take_vec(c, &format!("{p}.ln2.beta"), d)?,
                w_fc1: take_mat(c, &format!("{p}.fc1.weight"), d, hd)?,
                b_fc1: take_vec(c, &format!("{p}.fc1.bias"), hd)?,
                w_fc2: take_mat(c, &format!("{p}.fc2.weight"), hd, d)?,
                b_fc2: take_vec(c, &format!("{p}.fc2.bias"), d)?,
            });
        }
        Ok(Self {
            spec,
            pos_embed: take_mat(c, "pos_embed", spec.n_tokens, d)?,
            blocks,
            head_w: take_mat(c, "head.weight", d, spec.n_classes)?,
            head_b: take_vec(c, "head.bias", spec.n_classes)?,
        })
    }
}

impl CalibratedModel {
    /// Original tensors followed by every site's quantizer parameters:
    /// `<site>.lower/.upper/.scale/.zero_point` per group, `<site>.membership`
    /// for frozen grouping, and `<linear>.weight_scale/.weight_zero_point`
    /// per output column.
    pub fn to_container(&self) -> ModelContainer {
        let mut c = self.model.to_container();
        let spec = self.spec();
        for (i, q) in self.activations.iter().enumerate() {
            if let SiteQuantizer::Grouped { quantizers, fixed } = q {
                let name = act_site_name(spec, i);
                let lower: Vec<f32> = quantizers.bounds.iter().map(|b| b.lower).collect();
                let upper: Vec<f32> = quantizers.bounds.iter().map(|b| b.upper).collect();
                let scale: Vec<f32> = quantizers.qparams.iter().map(|q| q.scale).collect();
                let zp: Vec<f32> = quantizers.qparams.iter().map(|q| q.zero_point as f32).collect();
                c.tensors.push((format!("{name}.lower"), vec_tensor(&lower)));
                c.tensors.push((format!("{name}.upper"), vec_tensor(&upper)));
                c.tensors.push((format!("{name}.scale"), vec_tensor(&scale)));
                c.tensors.push((format!("{name}.zero_point"), vec_tensor(&zp)));
                if let Some(a) = fixed {
                    let m: Vec<f32> = a.indices.iter().map(|&g| g as f32).collect();
                    c.tensors.push((format!("{name}.membership"), vec_tensor(&m)));
                }
            }
        }
        for (i, w) in self.weights.iter().enumerate() {
            if let Some(w) = w {
                let name = linear_name(spec, i);
                let scale: Vec<f32> = w.quantized.qparams.iter().map(|q| q.scale).collect();
                let zp: Vec<f32> = w.quantized.qparams.iter().map(|q| q.zero_point as f32).collect();
                c.tensors.push((format!("{name}.weight_scale"), vec_tensor(&scale)));
                c.tensors.push((format!("{name}.weight_zero_point"), vec_tensor(&zp)));
            }
        }
        c.metadata = Some(serde_json::json!({
            "model_spec": spec,
            "sites": self.sites,
        }));
        c
    }

    /// Inverse of [`CalibratedModel::to_container`]. Quantization parameters
    /// are re-derived from the stored bounds and float weights and must match
    /// the stored scales and zero points bit for bit.
    pub fn from_container(c: &ModelContainer) -> Result<Self> {
        let model = VitModel::from_container(c)?;
        let spec = model.spec;
        let sites_value = c
            .metadata
            .as_ref()
            .and_then(|m| m.get("sites"))
            .ok_or_else(|| Error::MalformedManifest("metadata.sites missing".into()))?;
        let sites: QuantizationSiteMap =
            serde_json::from_value(sites_value.clone()).map_err(|e| Error::MalformedManifest(e.to_string()))?;
        sites.validate(&spec)?;

        let mut activations = Vec::with_capacity(sites.activations.len());
        for (i, sc) in sites.activations.iter().enumerate() {
            let name = act_site_name(&spec, i);
            let kind = act_site_kind(&spec, i).group_kind();
            let q = match sc.mode {
                SiteMode::Disabled => SiteQuantizer::Disabled,
                SiteMode::PerUnit => SiteQuantizer::PerUnit { kind, bits: sc.bits },
                _ => {
                    let lower = c.require(&format!("{name}.lower"))?.data();
                    let g = lower.len();
                    let upper = take_vec(c, &format!("{name}.upper"), g)?;
                    let bounds = lower
                        .iter()
                        .zip(&upper)
                        .map(|(&l, &u)| QuantizerBounds::new(l, u))
                        .collect();
                    let quantizers = GroupQuantizers::from_bounds(kind, bounds, sc.bits)?;
                    let scale = take_vec(c, &format!("{name}.scale"), g)?;
                    let zp = take_vec(c, &format!("{name}.zero_point"), g)?;
                    let same = quantizers
                        .qparams
                        .iter()
                        .zip(scale.iter().zip(&zp))
                        .all(|(q, (&s, &z))| q.scale.to_bits() == s.to_bits() && q.zero_point as f32 == z);
                    if !same {
                        return Err(Error::MalformedManifest(format!("{name}: stored qparams disagree with bounds")));
                    }
                    let fixed = match c.get(&format!("{name}.membership")) {
                        Some(m) => Some(GroupAssignment {
                            indices: m
                                .data()
                                .iter()
                                .map(|&v| {
                                    if v >= 0.0 && v.fract() == 0.0 && (v as usize) < g {
                                        Ok(v as usize)
                                    } else {
                                        Err(Error::MalformedManifest(format!("{name}.membership: bad group {v}")))
                                    }
                                })
                                .collect::<Result<_>>()?,
                        }),
                        None => None,
                    };
                    SiteQuantizer::Grouped { quantizers, fixed }
                }
            };
            activations.push(q);
        }

        let mut weights = Vec::with_capacity(sites.weights.len());
        for (i, wc) in sites.weights.iter().enumerate() {
            if !wc.enabled {
                weights.push(None);
                continue;
            }
            let cfg = WeightQuantConfig {
                eps_percentile: wc.eps_percentile,
                bits: wc.bits,
            };
            let w = CalibratedWeight::new(model.linear_weight(i).0, &cfg)?;
            let name = linear_name(&spec, i);
            let cols = w.quantized.qparams.len();
            let scale = take_vec(c, &format!("{name}.weight_scale"), cols)?;
            let zp = take_vec(c, &format!("{name}.weight_zero_point"), cols)?;
            let same = w
                .quantized
                .qparams
                .iter()
                .zip(scale.iter().zip(&zp))
                .all(|(q, (&s, &z))| q.scale.to_bits() == s.to_bits() && q.zero_point as f32 == z);
            if !same {
                return Err(Error::MalformedManifest(format!("{name}: stored weight qparams disagree")));
            }
            weights.push(Some(w));
        }
        Ok(Self {
            model,
            sites,
            activations,
            weights,
        })
    }
}
