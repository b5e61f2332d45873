//! On-disk formats: OVTF1 feature files, OVTE1 text embeddings, annotation
//! and detection JSON, evaluation reports, split files, and OVCK1 model
//! checkpoints.
//!
//! Binary layouts are little-endian throughout. Parse errors carry the byte
//! offset at which reading failed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use ovtad_core::encoder::PyramidConfig;
use ovtad_core::splits::SplitSpec;
use ovtad_core::{FeatureSequence64, Model64, Segment64, Tensor64, TextEmbeddingSet64};

use crate::data::Dataset;

// ── Binary reader ───────────────────────────────────────────────────

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &Path) -> Self {
        Reader { bytes, pos: 0, path: path.display().to_string() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            bail!(
                "{}: truncated while reading {what} at byte offset {}: expected {n} more bytes, found {}",
                self.path,
                self.pos,
                self.bytes.len() - self.pos
            );
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn magic(&mut self, expected: &[u8]) -> Result<()> {
        let offset = self.pos;
        let got = self.take(expected.len(), "magic")?;
        if got != expected {
            bail!(
                "{}: bad magic at byte offset {offset}: expected {:?}, found {:?}",
                self.path,
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(got)
            );
        }
        Ok(())
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            bail!(
                "{}: {} trailing bytes at byte offset {}",
                self.path,
                self.bytes.len() - self.pos,
                self.pos
            );
        }
        Ok(())
    }
}

// ── OVTF1 features ──────────────────────────────────────────────────

pub const FEATURE_MAGIC: &[u8; 5] = b"OVTF1";

/// Write a feature sequence: magic, u32 T, u32 D, f64 fps, then `T*D` f32
/// values row-major.
pub fn save_features(path: &Path, video: &FeatureSequence64) -> Result<()> {
    let t = video.num_frames();
    let d = video.feature_dim();
    let mut out = Vec::with_capacity(5 + 4 + 4 + 8 + t * d * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&video.frame_rate_hint.to_le_bytes());
    for &v in video.features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_atomic(path, &out)
}

/// Load an OVTF1 file; the video id is the file stem. Values are upcast to
/// f64 internally.
pub fn load_features(path: &Path) -> Result<FeatureSequence64> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut r = Reader::new(&bytes, path);
    r.magic(FEATURE_MAGIC)?;
    let t = r.u32("frame count")? as usize;
    let d = r.u32("feature dim")? as usize;
    let fps = r.f64("frame rate hint")?;
    if t == 0 || d == 0 {
        bail!("{}: empty feature matrix ({t} x {d})", path.display());
    }
    let numel = (t as u64).checked_mul(d as u64).ok_or_else(|| {
        anyhow!("{}: T*D overflows at byte offset 5 (T={t}, D={d})", path.display())
    })?;
    if numel > (1u64 << 31) {
        bail!("{}: feature matrix too large (T={t}, D={d})", path.display());
    }
    let data: Vec<f64> = r.f32_vec(t * d, "feature payload")?.into_iter().map(f64::from).collect();
    r.finish()?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| anyhow!("{}: cannot derive video id from path", path.display()))?;
    Ok(FeatureSequence64::new(stem, Tensor64::from_vec(vec![t, d], data)?, fps)?)
}

// ── OVTE1 text embeddings ───────────────────────────────────────────

pub const TEXT_MAGIC: &[u8; 5] = b"OVTE1";

pub fn save_text_embeddings(path: &Path, set: &TextEmbeddingSet64) -> Result<()> {
    let m = set.num_classes();
    let d = set.dim();
    let mut out = Vec::new();
    out.extend_from_slice(TEXT_MAGIC);
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for name in &set.class_names {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            bail!("class name too long: {name}");
        }
        out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(bytes);
    }
    for &v in set.embeddings.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_atomic(path, &out)
}

pub fn load_text_embeddings(path: &Path) -> Result<TextEmbeddingSet64> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut r = Reader::new(&bytes, path);
    r.magic(TEXT_MAGIC)?;
    let m = r.u32("class count")? as usize;
    let d = r.u32("embedding dim")? as usize;
    if m == 0 {
        bail!("{}: empty class set", path.display());
    }
    let mut names = Vec::with_capacity(m);
    for i in 0..m {
        let len = r.u16("name length")? as usize;
        let offset = r.pos;
        let raw = r.take(len, "class name")?;
        let name = std::str::from_utf8(raw).with_context(|| {
            format!("{}: class {i} name is not UTF-8 at byte offset {offset}", path.display())
        })?;
        names.push(name.to_string());
    }
    let data: Vec<f64> = r.f32_vec(m * d, "embedding payload")?.into_iter().map(f64::from).collect();
    r.finish()?;
    Ok(TextEmbeddingSet64::new(
        names,
        Tensor64::from_vec(vec![m, d], data)?,
        format!("ovte1:{}", path.display()),
    )?)
}

// ── Annotation JSON ─────────────────────────────────────────────────

pub const ANNOTATION_VERSION: &str = "1.0";

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationFile {
    version: String,
    database: BTreeMap<String, VideoEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct VideoEntry {
    duration_frames: f64,
    annotations: Vec<AnnotationEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationEntry {
    label: String,
    segment_frames: [f64; 2],
}

/// Parsed annotations: video id -> (duration, labeled segments).
pub type Annotations = BTreeMap<String, (f64, Vec<Segment64>)>;

pub fn load_annotations(path: &Path) -> Result<Annotations> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: AnnotationFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing annotation JSON {}", path.display()))?;
    if file.version != ANNOTATION_VERSION {
        bail!(
            "{}: unknown annotation schema version {:?} (expected {:?})",
            path.display(),
            file.version,
            ANNOTATION_VERSION
        );
    }
    let mut out = Annotations::new();
    let mut problems = Vec::new();
    for (vid, entry) in file.database {
        let mut segments = Vec::with_capacity(entry.annotations.len());
        for a in &entry.annotations {
            let [s, e] = a.segment_frames;
            if !(s >= 0.0 && s < e && e <= entry.duration_frames) {
                problems.push(format!(
                    "video {vid}: segment [{s}, {e}] invalid for duration {}",
                    entry.duration_frames
                ));
                continue;
            }
            segments.push(Segment64::new(vid.clone(), s, e, Some(a.label.clone()), 1.0)?);
        }
        out.insert(vid, (entry.duration_frames, segments));
    }
    if !problems.is_empty() {
        bail!("{}: invalid annotations:\n  {}", path.display(), problems.join("\n  "));
    }
    Ok(out)
}

pub fn save_annotations(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut database = BTreeMap::new();
    for video in &dataset.videos {
        let annotations = dataset
            .segments(&video.video_id)
            .iter()
            .map(|seg| AnnotationEntry {
                label: seg.label.clone().unwrap_or_default(),
                segment_frames: [seg.start, seg.end],
            })
            .collect();
        database.insert(
            video.video_id.clone(),
            VideoEntry { duration_frames: video.num_frames() as f64, annotations },
        );
    }
    let file = AnnotationFile { version: ANNOTATION_VERSION.to_string(), database };
    write_json(path, &file)
}

// ── Detection JSON ──────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub video_id: String,
    pub start_sec: f64,
    pub end_sec: f64,
    pub label: String,
    pub score: f64,
}

/// Convert labeled segments (base-frame units) to detection records in
/// seconds using the video's frame rate.
pub fn to_detection_records(segments: &[Segment64], fps: f64) -> Result<Vec<DetectionRecord>> {
    segments
        .iter()
        .map(|s| {
            let label = s
                .label
                .clone()
                .ok_or_else(|| anyhow!("unlabeled segment cannot be serialized as a detection"))?;
            Ok(DetectionRecord {
                video_id: s.video_id.clone(),
                start_sec: s.start / fps,
                end_sec: s.end / fps,
                label,
                score: s.score,
            })
        })
        .collect()
}

pub fn save_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    write_json(path, &records)
}

pub fn load_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let records: Vec<DetectionRecord> = serde_json::from_str(&text)
        .with_context(|| format!("parsing detection JSON {}", path.display()))?;
    Ok(records)
}

/// Back-convert detection records to frame-unit segments for evaluation.
pub fn detections_to_segments(records: &[DetectionRecord], fps: f64) -> Result<Vec<Segment64>> {
    records
        .iter()
        .map(|r| {
            Ok(Segment64::new(
                r.video_id.clone(),
                r.start_sec * fps,
                r.end_sec * fps,
                Some(r.label.clone()),
                r.score.clamp(0.0, 1.0),
            )?)
        })
        .collect()
}

// ── Split files ─────────────────────────────────────────────────────

pub fn save_splits(path: &Path, splits: &[SplitSpec]) -> Result<()> {
    write_json(path, &splits)
}

pub fn load_splits(path: &Path) -> Result<Vec<SplitSpec>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)
        .with_context(|| format!("parsing split JSON {}", path.display()))?)
}

// ── OVCK1 checkpoints ───────────────────────────────────────────────

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"OVCK1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: PyramidConfig,
    input_dim: usize,
}

pub fn save_checkpoint(path: &Path, model: &Model64) -> Result<()> {
    let meta = CheckpointMeta { config: model.config.clone(), input_dim: model.input_dim };
    let meta_json = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    let mut count = 0u32;
    model.visit_params(|_, _| count += 1);
    out.extend_from_slice(&count.to_le_bytes());
    model.visit_params(|name, tensor| {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    write_atomic(path, &out)
}

pub fn load_checkpoint(path: &Path) -> Result<Model64> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut r = Reader::new(&bytes, path);
    r.magic(CHECKPOINT_MAGIC)?;
    let meta_len = r.u32("metadata length")? as usize;
    let meta_offset = r.pos;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len, "metadata JSON")?).with_context(|| {
            format!("{}: parsing checkpoint metadata at byte offset {meta_offset}", path.display())
        })?;
    let count = r.u32("parameter count")? as usize;
    let mut state = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16("parameter name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
            .context("parameter name is not UTF-8")?
            .to_string();
        let ndim = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64_vec(numel, "parameter data")?;
        state.insert(name, Tensor64::from_vec(shape, data)?);
    }
    r.finish()?;
    // seed is irrelevant: every parameter is overwritten by the snapshot
    let mut model = Model64::new(meta.config, meta.input_dim, 0)?;
    model.load_state(&state)?;
    Ok(model)
}

// ── Shared writers ──────────────────────────────────────────────────

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating directory {}", parent.display()))?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f =
            fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn toy_features() -> FeatureSequence64 {
        let data = vec![1.5, -2.25, 0.0, 3.5, 4.0, -0.125];
        FeatureSequence64::new("clip", Tensor64::from_vec(vec![2, 3], data).unwrap(), 4.0).unwrap()
    }

    #[test]
    fn feature_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("clip.ovtf");
        let video = toy_features();
        save_features(&path, &video).unwrap();
        let loaded = load_features(&path).unwrap();
        assert_eq!(loaded.video_id, "clip");
        assert_eq!(loaded.frame_rate_hint, 4.0);
        assert_eq!(loaded.features.shape(), &[2, 3]);
        let original_bits: Vec<u64> = video.features.data().iter().map(|v| v.to_bits()).collect();
        let loaded_bits: Vec<u64> = loaded.features.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(original_bits, loaded_bits);
        // saving again produces identical bytes
        let bytes1 = fs::read(&path).unwrap();
        save_features(&path, &loaded).unwrap();
        assert_eq!(bytes1, fs::read(&path).unwrap());
    }

    #[test]
    fn wrong_magic_rejected_with_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ovtf");
        fs::write(&path, b"NOPE!rest").unwrap();
        let err = load_features(&path).unwrap_err().to_string();
        assert!(err.contains("bad magic") && err.contains("offset 0"), "{err}");
    }

    #[test]
    fn truncated_payload_names_expected_and_actual() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("clip.ovtf");
        save_features(&path, &toy_features()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&path, &bytes).unwrap();
        let err = load_features(&path).unwrap_err().to_string();
        assert!(err.contains("expected") && err.contains("found"), "{err}");
    }

    #[test]
    fn text_round_trip_and_rejections() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("text.ovte");
        let set = TextEmbeddingSet64::new(
            vec!["jump".into(), "run".into()],
            Tensor64::from_vec(vec![2, 4], vec![0.5, -1.0, 2.0, 0.25, 1.0, 0.0, -0.5, 3.0])
                .unwrap(),
            "unit-test".into(),
        )
        .unwrap();
        save_text_embeddings(&path, &set).unwrap();
        let loaded = load_text_embeddings(&path).unwrap();
        assert_eq!(loaded.class_names, set.class_names);
        assert_eq!(loaded.embeddings, set.embeddings);

        // M = 0 rejected
        let empty = dir.path().join("empty.ovte");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(TEXT_MAGIC);
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        fs::write(&empty, &bytes).unwrap();
        assert!(load_text_embeddings(&empty).unwrap_err().to_string().contains("empty class set"));

        // duplicate names rejected
        let dup = dir.path().join("dup.ovte");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(TEXT_MAGIC);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        for _ in 0..2 {
            bytes.extend_from_slice(&3u16.to_le_bytes());
            bytes.extend_from_slice(b"abc");
        }
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        fs::write(&dup, &bytes).unwrap();
        assert!(load_text_embeddings(&dup).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn annotation_schema_checks() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ann.json");
        fs::write(
            &path,
            r#"{"version":"1.0","database":{"v1":{"duration_frames":32,
               "annotations":[{"label":"a","segment_frames":[2,10]}]}}}"#,
        )
        .unwrap();
        let ann = load_annotations(&path).unwrap();
        assert_eq!(ann["v1"].1.len(), 1);

        fs::write(
            &path,
            r#"{"version":"1.0","database":{"v1":{"duration_frames":32,
               "annotations":[{"label":"a","segment_frames":[10,2]}]}}}"#,
        )
        .unwrap();
        let err = load_annotations(&path).unwrap_err().to_string();
        assert!(err.contains("invalid"), "{err}");

        fs::write(
            &path,
            r#"{"version":"1.0","database":{"v1":{"duration_frames":8,
               "annotations":[{"label":"a","segment_frames":[2,10]}]}}}"#,
        )
        .unwrap();
        assert!(load_annotations(&path).is_err());

        fs::write(&path, r#"{"version":"9.9","database":{}}"#).unwrap();
        let err = load_annotations(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ovck");
        let cfg = PyramidConfig {
            num_levels: 2,
            model_dim: 8,
            num_heads: 2,
            mlp_ratio: 2,
            ..Default::default()
        };
        let model = Model64::new(cfg, 4, 123).unwrap();
        save_checkpoint(&path, &model).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let mut a = Vec::new();
        model.visit_params(|_, t| a.extend(t.data().iter().map(|v| v.to_bits())));
        let mut b = Vec::new();
        loaded.visit_params(|_, t| b.extend(t.data().iter().map(|v| v.to_bits())));
        assert_eq!(a, b);
        // and the serialized bytes are stable
        let bytes1 = fs::read(&path).unwrap();
        save_checkpoint(&path, &loaded).unwrap();
        assert_eq!(bytes1, fs::read(&path).unwrap());
    }
}
