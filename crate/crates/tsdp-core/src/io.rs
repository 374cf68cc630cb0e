//! On-disk formats: the versioned "TSDP" binary container family (models,
//! datasets, hybrid models), JSON helpers for plans/reports/sweeps, and
//! JSON-lines emission for verification logs.
//!
//! Model files carry an embedded topology plus a human-readable JSON
//! sidecar next to them; when the sidecar exists at load time it must
//! agree with the embedded topology.

use crate::data::{Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::nn::graph::{Edge, Layer, LayerKind, ModelGraph, OutputMode};
use crate::tensor::Tensor;
use crate::teeslice::{HybridModel, Slice};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const MAGIC: [u8; 4] = *b"TSDP";
pub const FORMAT_VERSION: u16 = 1;

/// Container payload kinds sharing the magic/version header.
const KIND_MODEL: u16 = 1;
const KIND_DATASET: u16 = 2;
const KIND_HYBRID: u16 = 3;

// ---------------------------------------------------------------------------
// Byte-level plumbing
// ---------------------------------------------------------------------------

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("container truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn write_header(out: &mut Vec<u8>, kind: u16) {
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&kind.to_le_bytes());
}

fn read_header(r: &mut Reader, want_kind: u16) -> Result<()> {
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic; not a TSDP container".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let kind = r.u16()?;
    if kind != want_kind {
        return Err(Error::Format(format!(
            "container kind {kind} does not match expected {want_kind}"
        )));
    }
    Ok(())
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for &v in t.data() {
        put_u64(out, v.to_bits());
    }
}

fn read_tensor(r: &mut Reader) -> Result<Tensor> {
    let ndim = r.take(1)?[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32()? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f64::from_bits(r.u64()?));
    }
    Tensor::new(shape, data)
}

// ---------------------------------------------------------------------------
// Model container
// ---------------------------------------------------------------------------

/// The graph topology (everything but the parameters); also the sidecar
/// JSON schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Topology {
    input_shape: Vec<usize>,
    output_mode: OutputMode,
    layers: Vec<LayerTopo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerTopo {
    kind: LayerKind,
    inputs: Vec<Edge>,
}

fn topology_of(model: &ModelGraph) -> Topology {
    Topology {
        input_shape: model.input_shape.clone(),
        output_mode: model.output_mode,
        layers: model
            .layers
            .iter()
            .map(|l| LayerTopo {
                kind: l.kind.clone(),
                inputs: l.inputs.clone(),
            })
            .collect(),
    }
}

/// Layer table + parameter blobs + checksum trailer; shared by the model
/// and hybrid containers.
fn write_model_body(out: &mut Vec<u8>, model: &ModelGraph) -> Result<()> {
    let topo = serde_json::to_vec(&topology_of(model))?;
    put_u32(out, topo.len() as u32);
    out.extend_from_slice(&topo);
    put_u32(out, model.layers.len() as u32);
    for layer in &model.layers {
        out.push(layer.weights.len() as u8);
        for w in &layer.weights {
            write_tensor(out, w);
        }
        out.push(layer.buffers.len() as u8);
        for b in &layer.buffers {
            write_tensor(out, b);
        }
    }
    out.extend_from_slice(&model.param_checksum());
    Ok(())
}

fn read_model_body(r: &mut Reader) -> Result<ModelGraph> {
    let topo_len = r.u32()? as usize;
    let topo: Topology = serde_json::from_slice(r.take(topo_len)?)?;
    let n_layers = r.u32()? as usize;
    if n_layers != topo.layers.len() {
        return Err(Error::Format(format!(
            "layer table size {n_layers} disagrees with topology ({})",
            topo.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for lt in topo.layers {
        let n_w = r.take(1)?[0] as usize;
        let weights = (0..n_w).map(|_| read_tensor(r)).collect::<Result<_>>()?;
        let n_b = r.take(1)?[0] as usize;
        let buffers = (0..n_b).map(|_| read_tensor(r)).collect::<Result<_>>()?;
        layers.push(Layer {
            kind: lt.kind,
            inputs: lt.inputs,
            weights,
            buffers,
        });
    }
    let model = ModelGraph {
        layers,
        input_shape: topo.input_shape,
        output_mode: topo.output_mode,
    };
    let stored: [u8; 32] = r.take(32)?.try_into().unwrap();
    if stored != model.param_checksum() {
        return Err(Error::Format("parameter checksum mismatch".into()));
    }
    model.validate()?;
    Ok(model)
}

/// Path of the JSON topology sidecar next to a model file.
pub fn sidecar_path(model_path: &Path) -> PathBuf {
    model_path.with_extension("json")
}

pub fn save_model(model: &ModelGraph, path: &Path) -> Result<()> {
    model.validate()?;
    let mut out = Vec::new();
    write_header(&mut out, KIND_MODEL);
    write_model_body(&mut out, model)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out)?;
    std::fs::write(
        sidecar_path(path),
        serde_json::to_vec_pretty(&topology_of(model))?,
    )?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes);
    read_header(&mut r, KIND_MODEL)?;
    let model = read_model_body(&mut r)?;
    if !r.done() {
        return Err(Error::Format("trailing bytes after model body".into()));
    }
    let sidecar = sidecar_path(path);
    if sidecar.exists() {
        let side: Topology = serde_json::from_slice(&std::fs::read(sidecar)?)?;
        if side != topology_of(&model) {
            return Err(Error::Format(
                "sidecar topology disagrees with the container".into(),
            ));
        }
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Dataset container (.tsds)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    meta: DatasetMeta,
    shape: Vec<usize>,
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    d.validate()?;
    let mut out = Vec::new();
    write_header(&mut out, KIND_DATASET);
    let head = serde_json::to_vec(&DatasetHeader {
        meta: d.meta.clone(),
        shape: d.images.shape().to_vec(),
    })?;
    put_u32(&mut out, head.len() as u32);
    out.extend_from_slice(&head);
    put_u32(&mut out, d.labels.len() as u32);
    for &l in &d.labels {
        put_u64(&mut out, l as u64);
    }
    for &v in d.images.data() {
        put_u64(&mut out, v.to_bits());
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes);
    read_header(&mut r, KIND_DATASET)?;
    let head_len = r.u32()? as usize;
    let head: DatasetHeader = serde_json::from_slice(r.take(head_len)?)?;
    let n_labels = r.u32()? as usize;
    let mut labels = Vec::with_capacity(n_labels);
    for _ in 0..n_labels {
        labels.push(r.u64()? as usize);
    }
    let n: usize = head.shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f64::from_bits(r.u64()?));
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes after dataset body".into()));
    }
    let d = Dataset {
        images: Tensor::new(head.shape, data)?,
        labels,
        meta: head.meta,
    };
    d.validate()?;
    Ok(d)
}

// ---------------------------------------------------------------------------
// Hybrid-model container (model body + slice-table extension)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct HybridExtension {
    head: Layer,
    slices: Vec<Slice>,
    backbone_checksum: [u8; 32],
}

pub fn save_hybrid(h: &HybridModel, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    write_header(&mut out, KIND_HYBRID);
    write_model_body(&mut out, &h.features)?;
    let ext = serde_json::to_vec(&HybridExtension {
        head: h.head.clone(),
        slices: h.slices.clone(),
        backbone_checksum: h.backbone_checksum(),
    })?;
    put_u32(&mut out, ext.len() as u32);
    out.extend_from_slice(&ext);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_hybrid(path: &Path) -> Result<HybridModel> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes);
    read_header(&mut r, KIND_HYBRID)?;
    let features = read_model_body(&mut r)?;
    let ext_len = r.u32()? as usize;
    let ext: HybridExtension = serde_json::from_slice(r.take(ext_len)?)?;
    if !r.done() {
        return Err(Error::Format("trailing bytes after hybrid body".into()));
    }
    HybridModel::from_parts(features, ext.head, ext.slices, ext.backbone_checksum)
}

// ---------------------------------------------------------------------------
// JSON artifacts (plans, reports, sweeps) and JSON-lines logs
// ---------------------------------------------------------------------------

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// One JSON object per line (verification logs and similar streams).
pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::nn::graph::ModelBuilder;
    use crate::offload::VerifyRecord;
    use crate::partition;

    fn tmp(name: &str) -> PathBuf {
        std::env::temp_dir().join(format!("tsdp-io-{}-{name}", std::process::id()))
    }

    fn sample_model() -> ModelGraph {
        ModelBuilder::new(vec![1, 6, 6], 3)
            .conv(1, 4, 3, 1, 1)
            .batchnorm(4)
            .relu()
            .conv(4, 4, 3, 1, 1)
            .relu()
            .linear(4 * 6 * 6, 3)
            .build(OutputMode::Logits)
            .unwrap()
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let m = sample_model();
        let p = tmp("model.tsdp");
        save_model(&m, &p).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(m, back);
        assert_eq!(m.param_checksum(), back.param_checksum());
        assert!(sidecar_path(&p).exists());
        let _ = std::fs::remove_file(&p);
        let _ = std::fs::remove_file(sidecar_path(&p));
    }

    #[test]
    fn corrupted_parameters_are_rejected() {
        let m = sample_model();
        let p = tmp("corrupt.tsdp");
        save_model(&m, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let at = bytes.len() - 100; // inside the last parameter blob
        bytes[at] ^= 0xff;
        std::fs::write(&p, bytes).unwrap();
        let err = load_model(&p).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        let _ = std::fs::remove_file(&p);
        let _ = std::fs::remove_file(sidecar_path(&p));
    }

    #[test]
    fn sidecar_mismatch_is_rejected_and_missing_sidecar_tolerated() {
        let m = sample_model();
        let p = tmp("sidecar.tsdp");
        save_model(&m, &p).unwrap();
        // Tampered sidecar.
        let other = ModelBuilder::new(vec![1, 6, 6], 0)
            .linear(36, 2)
            .build(OutputMode::Logits)
            .unwrap();
        std::fs::write(
            sidecar_path(&p),
            serde_json::to_vec(&super::topology_of(&other)).unwrap(),
        )
        .unwrap();
        assert!(load_model(&p).is_err());
        // Deleted sidecar: the container is self-contained.
        std::fs::remove_file(sidecar_path(&p)).unwrap();
        assert_eq!(load_model(&p).unwrap(), m);
        let _ = std::fs::remove_file(&p);
    }

    #[test]
    fn wrong_magic_version_and_kind_are_rejected() {
        let p = tmp("bad.tsdp");
        std::fs::write(&p, b"NOPE\x01\x00\x01\x00").unwrap();
        assert!(load_model(&p).unwrap_err().to_string().contains("magic"));
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&9u16.to_le_bytes());
        out.extend_from_slice(&KIND_MODEL.to_le_bytes());
        std::fs::write(&p, &out).unwrap();
        assert!(load_model(&p).unwrap_err().to_string().contains("version"));
        // A dataset file is not a model file.
        let d = gen_synthetic(2, 3, 4, 1).unwrap();
        save_dataset(&d, &p).unwrap();
        assert!(load_model(&p).unwrap_err().to_string().contains("kind"));
        let _ = std::fs::remove_file(&p);
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let d = gen_synthetic(3, 5, 6, 9).unwrap();
        let p = tmp("data.tsds");
        save_dataset(&d, &p).unwrap();
        let back = load_dataset(&p).unwrap();
        assert_eq!(d, back);
        let _ = std::fs::remove_file(&p);
    }

    #[test]
    fn hybrid_round_trip_preserves_backbone_invariant() {
        let backbone = ModelBuilder::new(vec![1, 4, 4], 1)
            .conv(1, 8, 3, 1, 1)
            .relu()
            .conv(8, 8, 3, 1, 1)
            .relu()
            .linear(8 * 4 * 4, 2)
            .build(OutputMode::Logits)
            .unwrap();
        let h = HybridModel::build_dense(&backbone, 2, 0).unwrap();
        let p = tmp("hybrid.tsdp");
        save_hybrid(&h, &p).unwrap();
        let back = load_hybrid(&p).unwrap();
        assert!(back.backbone_unchanged());
        assert_eq!(h.features, back.features);
        assert_eq!(h.slices, back.slices);
        assert_eq!(h.head, back.head);
        let (g1, _) = h.assemble().unwrap();
        let (g2, _) = back.assemble().unwrap();
        assert_eq!(g1.param_checksum(), g2.param_checksum());
        let _ = std::fs::remove_file(&p);
    }

    #[test]
    fn plan_json_round_trip() {
        let m = sample_model();
        let plan = partition::plan_magnitude(&m, 0.3).unwrap();
        let p = tmp("plan.json");
        save_json(&plan, &p).unwrap();
        let back: partition::PartitionPlan = load_json(&p).unwrap();
        assert_eq!(plan, back);
        let _ = std::fs::remove_file(&p);
    }

    #[test]
    fn verify_log_serializes_as_json_lines() {
        let log = vec![
            VerifyRecord {
                layer: 0,
                rounds: 2,
                pass: true,
            },
            VerifyRecord {
                layer: 3,
                rounds: 2,
                pass: false,
            },
        ];
        let s = to_jsonl(&log).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 2);
        for line in lines {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("layer").is_some());
            assert!(v.get("rounds").is_some());
            assert!(v.get("pass").is_some());
        }
    }
}
