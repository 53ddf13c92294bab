//! Decision margins and window-ablation dependencies.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::Result;
use crate::instance::DatasetInstance;
use crate::policy::{canonical_answer, encode_audio, prompt_id, score_tokens, PolicyParams};

pub const DEFAULT_WINDOW_SIZE: usize = 8;
pub const DEFAULT_STRIDE: usize = 8;

/// Average log-probability of every choice's canonical answer under forced decoding.
pub fn choice_scores(params: &PolicyParams, inst: &DatasetInstance, clip: &AudioClip) -> Result<Vec<f64>> {
    let h = encode_audio(params, clip)?;
    let p = prompt_id(&inst.prompt);
    (0..inst.choices.len())
        .map(|i| Ok(score_tokens(params, p, &h, &canonical_answer(i))?.avg_logprob))
        .collect()
}

/// Correct-choice score minus the best incorrect one.
pub fn margin_from_scores(scores: &[f64], target: usize) -> f64 {
    let best_other = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    scores[target] - best_other
}

pub fn decision_margin(params: &PolicyParams, inst: &DatasetInstance, clip: &AudioClip) -> Result<f64> {
    let scores = choice_scores(params, inst, clip)?;
    Ok(margin_from_scores(&scores, inst.target_index()))
}

/// Start frames of a tiling of `[0, frames)`. The last window is shifted back to
/// end at `frames`.
pub fn window_starts(frames: usize, size: usize, stride: usize) -> Vec<usize> {
    assert!(size >= 1 && size <= frames && stride >= 1);
    let count = (frames - size).div_ceil(stride) + 1;
    (0..count).map(|k| (k * stride).min(frames - size)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowEffect {
    pub start: usize,
    pub len: usize,
    pub d: f64,
}

/// `M(a) - M(a without w)` for every window, with `w` zero-filled.
pub fn window_ablation(
    params: &PolicyParams,
    inst: &DatasetInstance,
    clip: &AudioClip,
    window_size: usize,
    stride: usize,
) -> Result<Vec<WindowEffect>> {
    let base = decision_margin(params, inst, clip)?;
    window_starts(clip.frame_count(), window_size, stride)
        .into_par_iter()
        .map(|start| {
            let ablated = clip.with_window_zeroed(start, window_size);
            Ok(WindowEffect {
                start,
                len: window_size,
                d: base - decision_margin(params, inst, &ablated)?,
            })
        })
        .collect()
}

/// `M(a) - M(zero clip)`.
pub fn audio_anchor(params: &PolicyParams, inst: &DatasetInstance, clip: &AudioClip) -> Result<f64> {
    let silent = AudioClip::zeros(clip.frame_count(), clip.feature_dim());
    Ok(decision_margin(params, inst, clip)? - decision_margin(params, inst, &silent)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub id: String,
    pub margin: f64,
    pub window_size: usize,
    pub stride: usize,
    pub window_effects: Vec<WindowEffect>,
    pub audio_anchor: f64,
    /// Sum of d over the windows, reported beside g without any claimed relation.
    pub d_sum: f64,
}

pub fn grounding_report(
    params: &PolicyParams,
    inst: &DatasetInstance,
    clip: &AudioClip,
    window_size: usize,
    stride: usize,
) -> Result<GroundingReport> {
    let window_effects = window_ablation(params, inst, clip, window_size, stride)?;
    Ok(GroundingReport {
        id: inst.id.clone(),
        margin: decision_margin(params, inst, clip)?,
        window_size,
        stride,
        d_sum: window_effects.iter().map(|w| w.d).sum(),
        window_effects,
        audio_anchor: audio_anchor(params, inst, clip)?,
    })
}

/// Mean d per window start over many reports.
pub fn mean_window_effects(reports: &[GroundingReport]) -> BTreeMap<usize, f64> {
    let mut sums = BTreeMap::<usize, (f64, usize)>::new();
    for r in reports {
        for w in &r.window_effects {
            let e = sums.entry(w.start).or_default();
            e.0 += w.d;
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over the data range. A degenerate range yields one bin.
    pub fn build(values: &[f64], bins: usize) -> Self {
        assert!(bins >= 2, "histogram needs at least two bins");
        if values.is_empty() {
            return Self {
                edges: vec![0.0, 0.0],
                counts: vec![0],
            };
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            return Self {
                edges: vec![lo, hi],
                counts: vec![values.len()],
            };
        }
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|k| lo + width * k as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let k = (((v - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Self { edges, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lo,hi,count\n");
        for (k, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", self.edges[k], self.edges[k + 1], c));
        }
        s
    }
}

/// Histograms of every window's d and of every instance's g.
pub fn grounding_histogram(reports: &[GroundingReport], bins: usize) -> (Histogram, Histogram) {
    let d: Vec<f64> = reports
        .iter()
        .flat_map(|r| r.window_effects.iter().map(|w| w.d))
        .collect();
    let g: Vec<f64> = reports.iter().map(|r| r.audio_anchor).collect();
    (Histogram::build(&d, bins), Histogram::build(&g, bins))
}
