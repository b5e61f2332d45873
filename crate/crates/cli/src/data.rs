//! In-memory dataset: feature sequences plus per-video annotations.

use std::collections::BTreeMap;

use anyhow::{bail, Result};
use ovtad_core::{FeatureSequence64, Segment64};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub videos: Vec<FeatureSequence64>,
    /// video id -> ground-truth segments (base-frame units, labeled).
    pub annotations: BTreeMap<String, Vec<Segment64>>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let ids: BTreeMap<&str, usize> =
            self.videos.iter().map(|v| (v.video_id.as_str(), v.num_frames())).collect();
        if ids.len() != self.videos.len() {
            bail!("duplicate video ids in dataset");
        }
        let mut problems = Vec::new();
        for (vid, segments) in &self.annotations {
            let Some(&frames) = ids.get(vid.as_str()) else {
                problems.push(format!("annotation references unknown video {vid}"));
                continue;
            };
            for seg in segments {
                match seg.label.as_deref() {
                    Some(label) if self.class_names.iter().any(|c| c == label) => {}
                    Some(label) => {
                        problems.push(format!("video {vid}: unknown label {label}"))
                    }
                    None => problems.push(format!("video {vid}: unlabeled ground truth")),
                }
                if !(seg.start >= 0.0 && seg.start < seg.end && seg.end <= frames as f64) {
                    problems.push(format!(
                        "video {vid}: segment ({}, {}) outside [0, {frames}]",
                        seg.start, seg.end
                    ));
                }
            }
        }
        if !problems.is_empty() {
            bail!("invalid dataset:\n  {}", problems.join("\n  "));
        }
        Ok(())
    }

    pub fn video(&self, id: &str) -> Option<&FeatureSequence64> {
        self.videos.iter().find(|v| v.video_id == id)
    }

    pub fn segments(&self, id: &str) -> &[Segment64] {
        self.annotations.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Classes occurring in a video's annotations.
    pub fn video_classes(&self, id: &str) -> Vec<&str> {
        let mut classes: Vec<&str> =
            self.segments(id).iter().filter_map(|s| s.label.as_deref()).collect();
        classes.sort();
        classes.dedup();
        classes
    }

    pub fn all_ground_truths(&self) -> Vec<Segment64> {
        self.annotations.values().flatten().cloned().collect()
    }
}
