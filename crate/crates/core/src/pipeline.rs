//! Glue from waveforms and manifests to training examples and features.

use crate::datakit::{EmbeddingCache, Tokenizer};
use crate::error::{Error, Result};
use crate::frontend::{waveform_to_grid, LogMel, PatchGrid, Waveform, HOP_LENGTH, PATCH};
use crate::masking::MaskPartition;
use crate::network::{encode, encode_all, map_text_embedding, project_audio, Branch, ModelState};
use crate::trainer::{LabeledExample, Stage1Example, Stage2Example};

/// Frames of a `duration_s` clip rounded up to whole patches.
pub fn frames_for_duration(duration_s: f64) -> usize {
    let frames = (duration_s * crate::frontend::SAMPLE_RATE as f64 / HOP_LENGTH as f64).ceil() as usize;
    frames.div_ceil(PATCH).max(1) * PATCH
}

pub fn grids_from_waveforms(ws: &[Waveform], target_frames: usize) -> Result<Vec<PatchGrid>> {
    let logmel = LogMel::new();
    ws.iter().map(|w| waveform_to_grid(&logmel, w, target_frames, 0)).collect()
}

pub fn stage1_examples(grids: &[PatchGrid], captions: &[String], cache: &EmbeddingCache) -> Result<Vec<Stage1Example>> {
    grids
        .iter()
        .zip(captions)
        .map(|(g, c)| {
            let e = cache
                .get(c)
                .ok_or_else(|| Error::InvalidInput(format!("no cached embedding for caption {c:?}")))?;
            Ok(Stage1Example {
                grid: g.clone(),
                text_embedding: e,
            })
        })
        .collect()
}

pub fn stage2_examples(
    grids: &[PatchGrid],
    captions: &[String],
    tok: &Tokenizer,
    max_len: usize,
) -> Vec<Stage2Example> {
    grids
        .iter()
        .zip(captions)
        .map(|(g, c)| Stage2Example {
            grid: g.clone(),
            tokens: tok.encode(c, max_len),
        })
        .collect()
}

pub fn labeled_examples(grids: &[PatchGrid], classes: &[usize], n_classes: usize) -> Vec<LabeledExample> {
    grids
        .iter()
        .zip(classes)
        .map(|(g, &c)| {
            let mut labels = vec![0.0; n_classes];
            labels[c] = 1.0;
            LabeledExample {
                grid: g.clone(),
                labels,
            }
        })
        .collect()
}

/// CLAP audio feature of a whole clip (no masking).
pub fn audio_semantic(state: &ModelState, grid: &PatchGrid) -> Result<Vec<f64>> {
    let z = encode(&state.online, grid, &MaskPartition::all_visible(grid.len()), Branch::Visible)?;
    project_audio(&state.projector, &z)
}

/// Stage-1 text feature of a cached sentence embedding.
pub fn text_semantic(state: &ModelState, embedding: &[f64]) -> Result<Vec<f64>> {
    map_text_embedding(&state.text, embedding)
}

/// Clip feature `[1 × n_f·D]` of a whole grid.
pub fn clip_feature(state: &ModelState, grid: &PatchGrid) -> Result<Vec<f64>> {
    let z = encode_all(&state.online, grid)?;
    let (_, clip) = crate::frontend::summarize_features(&[z], grid.n_f, grid.n_t)?;
    Ok(clip.into_vec())
}
