//! Detection pipeline: decode candidates, Soft-NMS, open-vocabulary
//! labeling, and per-video result assembly.

use anyhow::Result;

use ovtad_core::align::AlignmentConfig;
use ovtad_core::postprocess::{
    classify_open_vocab, decode_candidates_from, soft_nms, EvalConfig,
};
use ovtad_core::{FeatureSequence64, Model64, Segment64, TextEmbeddingSet64};

/// Run the full inference pipeline on one video. Output is sorted by score
/// (descending, ties by start/end) and capped at
/// `eval_cfg.max_detections_per_video`.
pub fn detect_video(
    model: &Model64,
    video: &FeatureSequence64,
    text: &TextEmbeddingSet64,
    align: &AlignmentConfig,
    eval_cfg: &EvalConfig,
) -> Result<Vec<Segment64>> {
    eval_cfg.validate()?;
    let inference = model.infer(video)?;
    let (candidates, diagnostics) = decode_candidates_from(&inference, video, eval_cfg);
    if diagnostics.degenerate_discarded > 0 {
        log::debug!(
            "{}: discarded {} degenerate candidates",
            video.video_id,
            diagnostics.degenerate_discarded
        );
    }
    let kept = soft_nms(&candidates, eval_cfg.softnms_sigma, eval_cfg.softnms_score_floor);
    let mut labeled = classify_open_vocab(&kept, &inference.pyramid, text, align)?;
    labeled.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.start.partial_cmp(&b.start).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.end.partial_cmp(&b.end).unwrap_or(std::cmp::Ordering::Equal))
    });
    labeled.truncate(eval_cfg.max_detections_per_video);
    Ok(labeled)
}

/// Detect over many videos, optionally fanning out across threads. Results
/// keep the input video order regardless of thread count.
pub fn detect_many(
    model: &Model64,
    videos: &[FeatureSequence64],
    text: &TextEmbeddingSet64,
    align: &AlignmentConfig,
    eval_cfg: &EvalConfig,
    threads: usize,
) -> Result<Vec<Vec<Segment64>>> {
    if threads <= 1 || videos.len() <= 1 {
        return videos.iter().map(|v| detect_video(model, v, text, align, eval_cfg)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| anyhow::anyhow!("building thread pool: {e}"))?;
    pool.install(|| {
        use rayon::prelude::*;
        videos
            .par_iter()
            .map(|v| detect_video(model, v, text, align, eval_cfg))
            .collect::<Result<Vec<_>>>()
    })
}

/// Thread count from `OVTAD_THREADS`, defaulting to 1 (fully deterministic
/// single-threaded order; results are order-stable either way).
pub fn threads_from_env() -> usize {
    std::env::var("OVTAD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}
