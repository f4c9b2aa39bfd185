//! Paired radar/LiDAR frames, their JSON file format and dataset directories.
//!
//! A frame file is one JSON document:
//! `{"frame_id", "ego_velocity": [vx, vy], "radar": [[x, y, z, vr, va, rcs], ..],
//!   "lidar": [[x, y, z, i], ..], "labels": [{"class", "center", "size", "yaw", "velocity"}]}`.
//! Numbers are stored at 32-bit precision.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boxes::{Box3D, ObjectClass};
use crate::error::{Error, Result};
use crate::pillarize::{LidarPoint, RadarPoint};

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub frame_id: u64,
    pub ego_velocity: [f64; 2],
    pub radar: Vec<RadarPoint>,
    pub lidar: Vec<LidarPoint>,
    pub labels: Vec<Box3D>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelFile {
    class: ObjectClass,
    center: [f32; 3],
    size: [f32; 3],
    yaw: f32,
    velocity: [f32; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameFile {
    frame_id: u64,
    ego_velocity: [f32; 2],
    radar: Vec<[f32; 6]>,
    lidar: Vec<[f32; 4]>,
    labels: Vec<LabelFile>,
}

fn f(v: f32) -> f64 {
    f64::from(v)
}

/// Rounds to the nearest 32-bit float, the precision frames are stored at.
pub fn q32(v: f64) -> f64 {
    f64::from(v as f32)
}

impl From<&Frame> for FrameFile {
    fn from(fr: &Frame) -> Self {
        let s = |v: f64| v as f32;
        FrameFile {
            frame_id: fr.frame_id,
            ego_velocity: fr.ego_velocity.map(s),
            radar: fr.radar.iter().map(|p| [p.x, p.y, p.z, p.v_r, p.v_a, p.rcs].map(s)).collect(),
            lidar: fr.lidar.iter().map(|p| [p.x, p.y, p.z, p.intensity].map(s)).collect(),
            labels: fr
                .labels
                .iter()
                .map(|b| LabelFile {
                    class: b.class,
                    center: [b.cx, b.cy, b.cz].map(s),
                    size: [b.l, b.w, b.h].map(s),
                    yaw: s(b.yaw),
                    velocity: b.velocity.map(s),
                })
                .collect(),
        }
    }
}

impl From<FrameFile> for Frame {
    fn from(ff: FrameFile) -> Self {
        Frame {
            frame_id: ff.frame_id,
            ego_velocity: ff.ego_velocity.map(f),
            radar: ff
                .radar
                .iter()
                .map(|r| RadarPoint { x: f(r[0]), y: f(r[1]), z: f(r[2]), v_r: f(r[3]), v_a: f(r[4]), rcs: f(r[5]) })
                .collect(),
            lidar: ff
                .lidar
                .iter()
                .map(|r| LidarPoint { x: f(r[0]), y: f(r[1]), z: f(r[2]), intensity: f(r[3]) })
                .collect(),
            labels: ff
                .labels
                .iter()
                .map(|l| Box3D {
                    cx: f(l.center[0]),
                    cy: f(l.center[1]),
                    cz: f(l.center[2]),
                    l: f(l.size[0]),
                    w: f(l.size[1]),
                    h: f(l.size[2]),
                    // Stored yaw is already normalized up to f32 rounding at +-pi.
                    yaw: f(l.yaw),
                    class: l.class,
                    velocity: l.velocity.map(f),
                })
                .collect(),
        }
    }
}

pub fn frame_to_json(frame: &Frame) -> String {
    serde_json::to_string(&FrameFile::from(frame)).expect("frame serializes")
}

pub fn frame_from_json(text: &str, path: &Path) -> Result<Frame> {
    let ff: FrameFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(ff.into())
}

pub fn write_frame(frame: &Frame, path: &Path) -> Result<()> {
    fs::write(path, frame_to_json(frame)).map_err(|e| Error::io(path, e))
}

pub fn read_frame(path: &Path) -> Result<Frame> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    frame_from_json(&text, path)
}

pub fn frame_file_name(frame_id: u64) -> String {
    format!("{frame_id:06}.json")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub frame_id: u64,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    /// Generator settings, echoed verbatim.
    pub spec: serde_json::Value,
    pub splits: BTreeMap<String, Vec<u64>>,
    pub frames: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `frames` as `NNNNNN.json` plus a manifest into `dir`, which must exist.
pub fn write_dataset(
    dir: &Path,
    seed: u64,
    spec: serde_json::Value,
    splits: BTreeMap<String, Vec<u64>>,
    frames: impl IntoIterator<Item = Frame>,
) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    for fr in frames {
        let file = frame_file_name(fr.frame_id);
        let text = frame_to_json(&fr);
        let path = dir.join(&file);
        fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry { frame_id: fr.frame_id, file, sha256: sha256_hex(text.as_bytes()) });
    }
    let manifest = DatasetManifest { seed, spec, splits, frames: entries };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A dataset directory with its manifest loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = serde_json::from_str(&text).map_err(|e| Error::Parse { path, message: e.to_string() })?;
        Ok(Self { dir: dir.to_path_buf(), manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frames.is_empty()
    }

    fn entry(&self, frame_id: u64) -> Result<&ManifestEntry> {
        self.manifest
            .frames
            .iter()
            .find(|e| e.frame_id == frame_id)
            .ok_or_else(|| Error::Config(format!("frame {frame_id} is not in {}", self.dir.display())))
    }

    /// Reads a frame and checks it against the manifest checksum.
    pub fn read(&self, frame_id: u64) -> Result<Frame> {
        let entry = self.entry(frame_id)?;
        let path = self.dir.join(&entry.file);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(text.as_bytes()) != entry.sha256 {
            return Err(Error::Parse { path, message: "checksum does not match manifest".into() });
        }
        frame_from_json(&text, &path)
    }

    /// Frame ids of a named split; `"all"` means every frame.
    pub fn split_ids(&self, split: &str) -> Result<Vec<u64>> {
        if split == "all" {
            return Ok(self.manifest.frames.iter().map(|e| e.frame_id).collect());
        }
        self.manifest.splits.get(split).cloned().ok_or_else(|| {
            Error::Config(format!(
                "unknown split {split:?}; manifest has {:?}",
                self.manifest.splits.keys().collect::<Vec<_>>()
            ))
        })
    }

    pub fn read_split(&self, split: &str) -> Result<Vec<Frame>> {
        self.split_ids(split)?.into_iter().map(|id| self.read(id)).collect()
    }
}
