//! On-disk formats: the LFVG matrix blob, feature stores (a manifest plus
//! blobs) and model checkpoints.
//!
//! Blob layout: `LFVG`, then little-endian u32 version, rows and cols,
//! then row-major values. Version 1 stores f32 (feature stores), version 2
//! stores f64 (checkpoints, so reloaded models are bit-exact).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::{Dataset, HiddenEvent, Provenance, QueryRecord, TemporalInterval, VideoRecord};
use crate::error::{Error, Result};
use crate::grounding::GroundingConfig;
use crate::nn::ParamStore;
use crate::tensor::{l2_norm, Tensor};
use crate::training::{TrainConfig, TrainMode, TrainedModel};

pub const MAGIC: &[u8; 4] = b"LFVG";
pub const HEADER_LEN: usize = 16;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_HEADER_FILE: &str = "header.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32 = 1,
    F64 = 2,
}

pub fn encode_blob(t: &Tensor, precision: Precision) -> Vec<u8> {
    let width = if precision == Precision::F32 { 4 } else { 8 };
    let mut out = Vec::with_capacity(HEADER_LEN + width * t.len());
    out.extend_from_slice(MAGIC);
    for x in [precision as u32, t.rows() as u32, t.cols() as u32] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for &x in t.data() {
        match precision {
            Precision::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&x.to_le_bytes()),
        }
    }
    out
}

/// Parses a blob; `record` names the owner in error messages.
pub fn decode_blob(bytes: &[u8], record: &str) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::load(record, "missing LFVG magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (version, rows, cols) = (word(4), word(8), word(12));
    let width = match version {
        1 => 4,
        2 => 8,
        v => return Err(Error::load(record, format!("unsupported blob version {v}"))),
    };
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| Error::load(record, "blob shape overflows"))?;
    if bytes.len() - HEADER_LEN != expected {
        return Err(Error::load(record, format!("{rows}×{cols} blob needs {expected} payload bytes, found {}", bytes.len() - HEADER_LEN)));
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(width)
        .map(|c| match width {
            4 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
            _ => f64::from_le_bytes(c.try_into().expect("8 bytes")),
        })
        .collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::load(record, "non-finite values"));
    }
    Tensor::from_vec(rows, cols, data)
}

/// Writes via a temporary sibling and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("{}.tmp", path.extension().and_then(|e| e.to_str()).unwrap_or("")));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_blob(path: &Path, t: &Tensor, precision: Precision) -> Result<()> {
    write_atomic(path, &encode_blob(t, precision))
}

pub fn read_blob(path: &Path, record: &str) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::load(record, format!("cannot read {}: {e}", path.display())))?;
    decode_blob(&bytes, record)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub duration_s: f64,
    pub num_segments: usize,
    pub num_frames: usize,
    pub segment_blob: String,
    pub frame_blob: String,
    pub frame_times: Vec<f64>,
    /// Annotated events, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events: Option<Vec<HiddenEvent>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub id: String,
    pub video_id: String,
    pub gt_start_s: f64,
    pub gt_end_s: f64,
    pub feature_blob: String,
    pub row: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub videos: Vec<VideoEntry>,
    #[serde(default)]
    pub queries: Vec<QueryEntry>,
}

const QUERY_BLOB: &str = "queries.lfvg";

pub fn export_feature_store(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = StoreManifest::default();
    for v in &data.videos {
        let (seg, frm) = (format!("{}.segments.lfvg", v.id), format!("{}.frames.lfvg", v.id));
        write_blob(&dir.join(&seg), &v.segment_features, Precision::F32)?;
        write_blob(&dir.join(&frm), &v.frame_features, Precision::F32)?;
        manifest.videos.push(VideoEntry {
            id: v.id.clone(),
            duration_s: v.duration_s,
            num_segments: v.num_segments(),
            num_frames: v.frame_features.rows(),
            segment_blob: seg,
            frame_blob: frm,
            frame_times: v.frame_times.clone(),
            events: v.hidden_events.clone(),
        });
    }
    if !data.queries.is_empty() {
        let rows: Vec<Vec<f64>> = data.queries.iter().map(|q| q.feature.clone()).collect();
        write_blob(&dir.join(QUERY_BLOB), &Tensor::from_rows(&rows)?, Precision::F32)?;
        for (row, q) in data.queries.iter().enumerate() {
            let duration = data
                .video_index(&q.video_id)
                .map(|i| data.videos[i].duration_s)
                .ok_or_else(|| Error::invalid(format!("query {} references unknown video {}", q.id, q.video_id)))?;
            manifest.queries.push(QueryEntry {
                id: q.id.clone(),
                video_id: q.video_id.clone(),
                gt_start_s: q.gt_interval.start * duration,
                gt_end_s: q.gt_interval.end * duration,
                feature_blob: QUERY_BLOB.into(),
                row,
            });
        }
    }
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&dir.join(MANIFEST_FILE), &json)
}

pub fn read_manifest(dir: &Path) -> Result<StoreManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::load("manifest", format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::load("manifest", e.to_string()))
}

/// Seconds to a normalized interval; overshoot from the seconds round trip
/// is clipped.
fn normalized_interval(start_s: f64, end_s: f64, duration: f64, record: &str) -> Result<TemporalInterval> {
    let clip = |x: f64| if (-1e-9..0.0).contains(&x) { 0.0 } else if (1.0..1.0 + 1e-9).contains(&x) { 1.0 } else { x };
    TemporalInterval::new(clip(start_s / duration), clip(end_s / duration)).map_err(|e| Error::load(record, e.to_string()))
}

pub fn import_feature_store(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for e in &manifest.videos {
        let record = format!("video {}", e.id);
        let seg = read_blob(&dir.join(&e.segment_blob), &record)?;
        let frames = read_blob(&dir.join(&e.frame_blob), &record)?;
        if seg.rows() != e.num_segments {
            return Err(Error::load(&record, format!("segment blob has {} rows, manifest says {}", seg.rows(), e.num_segments)));
        }
        if frames.rows() != e.num_frames {
            return Err(Error::load(&record, format!("frame blob has {} rows, manifest says {}", frames.rows(), e.num_frames)));
        }
        let v = VideoRecord {
            id: e.id.clone(),
            duration_s: e.duration_s,
            segment_features: seg,
            frame_features: frames,
            frame_times: e.frame_times.clone(),
            hidden_events: e.events.clone(),
        };
        v.validate()?;
        videos.push(v);
    }
    let mut blobs: std::collections::HashMap<&str, Tensor> = std::collections::HashMap::new();
    let mut queries = Vec::with_capacity(manifest.queries.len());
    for q in &manifest.queries {
        let record = format!("query {}", q.id);
        if !blobs.contains_key(q.feature_blob.as_str()) {
            blobs.insert(&q.feature_blob, read_blob(&dir.join(&q.feature_blob), &record)?);
        }
        let blob = &blobs[q.feature_blob.as_str()];
        if q.row >= blob.rows() {
            return Err(Error::load(&record, format!("row {} outside a {}-row blob", q.row, blob.rows())));
        }
        let duration = videos
            .iter()
            .find(|v| v.id == q.video_id)
            .map(|v| v.duration_s)
            .ok_or_else(|| Error::load(&record, format!("unknown video {}", q.video_id)))?;
        let raw = blob.row(q.row);
        let n = l2_norm(raw);
        if n == 0.0 {
            return Err(Error::load(&record, "zero feature"));
        }
        queries.push(QueryRecord {
            id: q.id.clone(),
            video_id: q.video_id.clone(),
            feature: raw.iter().map(|x| x / n).collect(),
            gt_interval: normalized_interval(q.gt_start_s, q.gt_end_s, duration, &record)?,
        });
    }
    let data = Dataset { videos, queries, provenance: Provenance::Imported };
    data.validate()?;
    Ok(data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub group: String,
    pub name: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub grounding: GroundingConfig,
    pub train_config: TrainConfig,
    pub config_hash: String,
    pub mode: TrainMode,
    pub params: Vec<ParamEntry>,
}

fn param_file(group: &str, index: usize) -> String {
    format!("{group}.{index:04}.lfvg")
}

pub fn save_checkpoint(dir: &Path, model: &TrainedModel, cfg: &TrainConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    for (group, store) in [("grounding", &model.grounding_params), ("selector", &model.selector_params)] {
        for (i, (name, value)) in store.names().iter().zip(store.values()).enumerate() {
            let file = param_file(group, i);
            write_blob(&dir.join(&file), value, Precision::F64)?;
            params.push(ParamEntry { group: group.into(), name: name.clone(), file, rows: value.rows(), cols: value.cols() });
        }
    }
    let header = CheckpointHeader {
        grounding: model.grounding.config().clone(),
        train_config: cfg.clone(),
        config_hash: cfg.hash(),
        mode: cfg.mode,
        params,
    };
    write_atomic(&dir.join(CHECKPOINT_HEADER_FILE), &serde_json::to_vec_pretty(&header)?)
}

pub fn load_checkpoint(dir: &Path) -> Result<(TrainedModel, CheckpointHeader)> {
    let path: PathBuf = dir.join(CHECKPOINT_HEADER_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::load("checkpoint header", format!("cannot read {}: {e}", path.display())))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes).map_err(|e| Error::load("checkpoint header", e.to_string()))?;
    let mut model = TrainedModel::init(header.grounding.clone(), 0)?;
    for (group, store) in [("grounding", &mut model.grounding_params), ("selector", &mut model.selector_params)] {
        let mut loaded = ParamStore::new();
        for e in header.params.iter().filter(|e| e.group == group) {
            let t = read_blob(&dir.join(&e.file), &format!("parameter {}", e.name))?;
            if t.shape() != (e.rows, e.cols) {
                return Err(Error::load(format!("parameter {}", e.name), "blob shape differs from header"));
            }
            loaded.add(e.name.clone(), t);
        }
        store.load_from(&loaded).map_err(|e| Error::load(format!("{group} parameters"), e.to_string()))?;
    }
    Ok((model, header))
}
