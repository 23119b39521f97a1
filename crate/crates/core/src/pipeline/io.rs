//! On-disk formats: JSONL manifests, TSV matrices with JSON sidecars,
//! TSV reports and run records.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditions::VisualFeatureSeq;
use crate::cot_trace::{AgeBand, Conclusion, Emotion, Gender, SceneType};
use crate::error::{DubError, Result};
use crate::flow::FeatureSeq;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Level1,
    Level2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub video_features_path: String,
    pub transcript: String,
    pub scene: SceneType,
    pub gender: Gender,
    pub age: AgeBand,
    pub emotion: Emotion,
    pub speaker: String,
    pub features_path: String,
    pub duration_s: f64,
    pub split: Split,
    pub level: Level,
}

impl ManifestRecord {
    pub fn conclusion(&self) -> Conclusion {
        Conclusion::new(self.scene, self.gender, self.age, self.emotion)
    }
}

/// Artifact locations under a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn manifest(&self) -> PathBuf {
        self.data().join("manifest.jsonl")
    }
    pub fn traces(&self) -> PathBuf {
        self.data().join("traces.jsonl")
    }
    pub fn lexicon(&self) -> PathBuf {
        self.data().join("lexicon.json")
    }
    pub fn speakers(&self) -> PathBuf {
        self.data().join("speakers.json")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.checkpoints().join(format!("{name}.json"))
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn report(&self, name: &str) -> PathBuf {
        self.reports().join(format!("{name}.tsv"))
    }
    pub fn generated(&self, setting: &str) -> PathBuf {
        self.root.join("generated").join(setting)
    }
    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }

    /// Resolves a manifest-relative path.
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.data().join(rel)
    }
}

fn io_context(path: &Path, e: std::io::Error) -> DubError {
    DubError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_context(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_context(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DubError::Missing(path.display().to_string())
        } else {
            io_context(path, e)
        }
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| DubError::Parse(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}

pub fn read_manifest(layout: &RunLayout) -> Result<Vec<ManifestRecord>> {
    read_jsonl(&layout.manifest())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MatrixMeta {
    rate_key: String,
    rate: f64,
    dim: usize,
    frames: usize,
}

fn matrix_to_tsv(m: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
    out
}

fn tsv_to_matrix(text: &str, dim: usize, path: &Path) -> Result<Array2<f64>> {
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in text.lines().filter(|l| !l.is_empty()).enumerate() {
        let before = data.len();
        for cell in line.split('\t') {
            data.push(
                cell.parse::<f64>()
                    .map_err(|e| DubError::Parse(format!("{} row {}: {e}", path.display(), i + 1)))?,
            );
        }
        if data.len() - before != dim {
            return Err(DubError::Parse(format!("{} row {} has the wrong width", path.display(), i + 1)));
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, dim), data).map_err(|e| DubError::Parse(e.to_string()))
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn write_matrix(path: &Path, m: &Array2<f64>, rate_key: &str, rate: f64) -> Result<()> {
    write_text(path, &matrix_to_tsv(m))?;
    write_json(
        &meta_path(path),
        &MatrixMeta {
            rate_key: rate_key.into(),
            rate,
            dim: m.ncols(),
            frames: m.nrows(),
        },
    )
}

fn read_matrix(path: &Path, rate_key: &str) -> Result<(Array2<f64>, f64)> {
    let meta: MatrixMeta = read_json(&meta_path(path))?;
    if meta.rate_key != rate_key {
        return Err(DubError::Parse(format!("{} stores {} not {rate_key}", path.display(), meta.rate_key)));
    }
    let m = tsv_to_matrix(&read_text(path)?, meta.dim, path)?;
    if m.nrows() != meta.frames {
        return Err(DubError::Parse(format!("{} frame count disagrees with its metadata", path.display())));
    }
    Ok((m, meta.rate))
}

/// Feature sequence as TSV (one frame per row) plus `<path>.meta.json`.
pub fn write_features(path: &Path, f: &FeatureSeq) -> Result<()> {
    write_matrix(path, &f.frames, "frame_hop", f.frame_hop)
}

pub fn read_features(path: &Path) -> Result<FeatureSeq> {
    let (m, hop) = read_matrix(path, "frame_hop")?;
    FeatureSeq::new(m, hop)
}

pub fn write_visual(path: &Path, v: &VisualFeatureSeq) -> Result<()> {
    write_matrix(path, &v.frames, "fps", v.fps)
}

pub fn read_visual(path: &Path) -> Result<VisualFeatureSeq> {
    let (m, fps) = read_matrix(path, "fps")?;
    VisualFeatureSeq::new(m, fps)
}

/// Tab-separated table with a fixed header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(DubError::Shape(format!(
                "row has {} cells for {} columns",
                row.len(),
                self.header.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = self.header.join("\t");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| DubError::Parse("empty table".into()))?
            .split('\t')
            .map(String::from)
            .collect();
        let mut t = Table { header, rows: Vec::new() };
        for l in lines.filter(|l| !l.is_empty()) {
            t.push(l.split('\t').map(String::from).collect())?;
        }
        Ok(t)
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_tsv())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }
}

pub fn fmt4(x: f64) -> String {
    format!("{x:.4}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Content hash of a set of files (path and bytes, in the given order).
pub fn hash_files(paths: &[PathBuf], base: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        let rel = p.strip_prefix(base).unwrap_or(p);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(p).map_err(|e| io_context(p, e))?);
        h.update([0]);
    }
    let mut s = String::with_capacity(64);
    for b in h.finalize() {
        let _ = write!(s, "{b:02x}");
    }
    Ok(s)
}

/// Record written by every verb: config snapshot, seed and input hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub verb: String,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs_sha256: String,
    pub outputs: Vec<String>,
}

pub fn write_run_record(
    layout: &RunLayout,
    verb: &str,
    config_toml: &str,
    seed: u64,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<()> {
    write_text(&layout.runs().join(format!("{verb}.config.toml")), config_toml)?;
    let rec = RunRecord {
        verb: verb.into(),
        seed,
        config_sha256: sha256_hex(config_toml.as_bytes()),
        inputs_sha256: hash_files(inputs, &layout.root)?,
        outputs: outputs
            .iter()
            .map(|p| p.strip_prefix(&layout.root).unwrap_or(p).to_string_lossy().into_owned())
            .collect(),
    };
    write_json(&layout.runs().join(format!("{verb}.json")), &rec)
}
