//! Audio-aware reward shaping and group-relative advantages.

use crate::error::{Error, Result};
use crate::rollout::Candidate;

pub const SHAPED_MIN: f64 = -1.0;
pub const SHAPED_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ShapedGroup {
    pub similarity: f64,
    pub raw_rewards: Vec<f64>,
    pub shaped_rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// `exp(-loss)`.
pub fn similarity_score(distill_loss: f64) -> Result<f64> {
    if distill_loss < 0.0 || distill_loss.is_nan() {
        return Err(Error::NegativeLoss(distill_loss));
    }
    Ok((-distill_loss).exp())
}

/// `clip(r + beta * [r > 0] * s, -1, 2)` for each reward.
pub fn shape_rewards(raw: &[f64], similarity: f64, beta: f64) -> Vec<f64> {
    raw.iter()
        .map(|&r| {
            let bonus = if r > 0.0 { beta * similarity } else { 0.0 };
            (r + bonus).clamp(SHAPED_MIN, SHAPED_MAX)
        })
        .collect()
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(r - mean) / (std + eps)` over the group.
pub fn group_advantages(shaped: &[f64], eps: f64) -> Vec<f64> {
    let (mean, std) = mean_std(shaped);
    shaped.iter().map(|r| (r - mean) / (std + eps)).collect()
}

/// Shapes one group's rewards and writes shaped rewards and advantages back
/// into the candidates.
pub fn shape_group(
    candidates: &mut [Candidate],
    similarity: f64,
    beta: f64,
    eps: f64,
) -> ShapedGroup {
    let raw: Vec<f64> = candidates.iter().map(|c| c.raw_reward).collect();
    let shaped = shape_rewards(&raw, similarity, beta);
    let advantages = group_advantages(&shaped, eps);
    let (mean, std) = mean_std(&shaped);
    for ((c, &s), &a) in candidates.iter_mut().zip(&shaped).zip(&advantages) {
        c.shaped_reward = s;
        c.advantage = a;
    }
    ShapedGroup {
        similarity,
        raw_rewards: raw,
        shaped_rewards: shaped,
        advantages,
        mean,
        std,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_values() {
        assert_eq!(similarity_score(0.0).unwrap(), 1.0);
        assert!((similarity_score(2f64.ln()).unwrap() - 0.5).abs() < 1e-15);
        assert!(similarity_score(50.0).unwrap() < 1e-21);
        assert!(matches!(similarity_score(-0.1), Err(Error::NegativeLoss(_))));
    }

    #[test]
    fn shaping_values() {
        assert_eq!(shape_rewards(&[1.0], 0.5, 0.5), vec![1.25]);
        assert_eq!(shape_rewards(&[0.0, -1.0], 1.0, 3.0), vec![0.0, -1.0]);
        assert_eq!(shape_rewards(&[1.0], 1.0, 2.0), vec![2.0]);
        // beta = 0 leaves rewards untouched
        assert_eq!(shape_rewards(&[1.0, 0.0, -1.0], 0.7, 0.0), vec![1.0, 0.0, -1.0]);
    }

    #[test]
    fn advantage_values() {
        let a = group_advantages(&[2.0, 0.0, 0.0, 2.0], 1e-6);
        let want = 1.0 / (1.0 + 1e-6);
        for (x, s) in a.iter().zip([1.0, -1.0, -1.0, 1.0]) {
            assert!((x - s * want).abs() < 1e-15);
        }
        assert_eq!(group_advantages(&[0.5; 5], 1e-6), vec![0.0; 5]);
    }
}
