//! Noisy-to-clean alignment: guidance selection and the masked
//! teacher-to-student KL on a shared continuation.

use crate::audio::AudioClip;
use crate::autodiff::{Tape, Var};
use crate::config::GuidanceMode;
use crate::error::{Error, Result};
use crate::instance::DatasetInstance;
use crate::policy::{
    encode_audio, greedy_decode, is_content_token, prompt_id, score_tokens, token_log_dists,
    BoundParams, Conditioning, PolicyParams, TokenDist, TokenSeq,
};
use crate::rollout::Candidate;

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceTrace {
    pub guidance: TokenSeq,
    pub mask: Vec<bool>,
    pub teacher_dists: Vec<TokenDist>,
    pub student_dists: Vec<TokenDist>,
    pub distill_loss: f64,
}

pub fn select_guidance(
    teacher: &PolicyParams,
    inst: &DatasetInstance,
    clean: &AudioClip,
    candidates: &[Candidate],
    mode: GuidanceMode,
) -> Result<TokenSeq> {
    let prompt = prompt_id(&inst.prompt);
    let audio_h = encode_audio(teacher, clean)?;
    match mode {
        GuidanceMode::TeacherGreedy => Ok(greedy_decode(teacher, prompt, &audio_h).tokens),
        GuidanceMode::TeacherLikelihoodBestCandidate => {
            let scores = candidates
                .iter()
                .map(|c| Ok(score_tokens(teacher, prompt, &audio_h, &c.tokens)?.avg_logprob))
                .collect::<Result<Vec<f64>>>()?;
            best_by_score(candidates, &scores).map(|c| c.tokens.clone())
        }
    }
}

/// First candidate with the highest score.
pub fn best_by_score<'a>(candidates: &'a [Candidate], scores: &[f64]) -> Result<&'a Candidate> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidateSet);
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(&candidates[best])
}

/// 1 on response content, 0 on BOS/EOS/PAD.
pub fn token_mask(guidance: &[usize]) -> Result<Vec<bool>> {
    let mask: Vec<bool> = guidance.iter().map(|&t| is_content_token(t)).collect();
    if mask.iter().any(|&m| m) {
        Ok(mask)
    } else {
        Err(Error::AllMasked)
    }
}

/// `KL(q || p)` in nats; zero-probability entries of `q` contribute nothing.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &pi)| qi * (qi.ln() - pi.ln()))
        .sum()
}

/// Same as [`kl_divergence`] but from log-probabilities.
fn kl_from_logs(log_q: &[f64], log_p: &[f64]) -> f64 {
    log_q
        .iter()
        .zip(log_p)
        .map(|(&lq, &lp)| {
            let q = lq.exp();
            if q > 0.0 {
                q * (lq - lp)
            } else {
                0.0
            }
        })
        .sum()
}

/// Frozen-teacher side of the distillation loss for one guidance sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillTarget {
    pub guidance: TokenSeq,
    pub mask: Vec<bool>,
    pub teacher_log_dists: Vec<Vec<f64>>,
}

impl DistillTarget {
    pub fn new(
        teacher: &PolicyParams,
        clean: &Conditioning,
        guidance: TokenSeq,
    ) -> Result<Self> {
        let mask = token_mask(&guidance)?;
        let audio_h = teacher.audio_proj.left_mul(&clean.mean_frame);
        let teacher_log_dists = token_log_dists(teacher, clean.prompt_id, &audio_h, &guidance)?;
        Ok(Self {
            guidance,
            mask,
            teacher_log_dists,
        })
    }

    fn mask_mass(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64
    }

    /// Mask-averaged KL against precomputed student log-distributions.
    pub fn loss_from(&self, student_log_dists: &[Vec<f64>]) -> f64 {
        let total: f64 = self
            .mask
            .iter()
            .zip(&self.teacher_log_dists)
            .zip(student_log_dists)
            .filter(|((&m, _), _)| m)
            .map(|((_, q), p)| kl_from_logs(q, p))
            .sum();
        total / self.mask_mass()
    }

    /// Taped loss; gradients reach only the student's bound parameters.
    pub fn taped_loss(&self, tape: &mut Tape, student: &BoundParams, noisy: &Conditioning) -> Var {
        let log_p = student.token_log_dists(tape, noisy, &self.guidance);
        let mut terms = Vec::new();
        for ((&m, log_q), &lp) in self.mask.iter().zip(&self.teacher_log_dists).zip(&log_p) {
            if !m {
                continue;
            }
            let q: Vec<f64> = log_q.iter().map(|v| v.exp()).collect();
            let neg_entropy: f64 = q
                .iter()
                .zip(log_q)
                .filter(|(&qi, _)| qi > 0.0)
                .map(|(qi, lq)| qi * lq)
                .sum();
            let qv = tape.constant_vec(q);
            let cross = tape.mul(qv, lp);
            let cross = tape.sum(cross);
            let kl = tape.scale(cross, -1.0);
            terms.push(tape.offset(kl, neg_entropy));
        }
        let total = tape.sum_of(&terms);
        tape.scale(total, 1.0 / self.mask_mass())
    }
}

/// `sum_t m_t KL(q_t || p_t) / sum_t m_t` with the teacher on clean audio and
/// the student on noisy audio, both scored along `guidance`.
pub fn distill_loss(
    teacher: &PolicyParams,
    student: &PolicyParams,
    inst: &DatasetInstance,
    clean: &AudioClip,
    noisy: &AudioClip,
    guidance: &TokenSeq,
) -> Result<(f64, GuidanceTrace)> {
    let prompt = prompt_id(&inst.prompt);
    if clean.feature_dim() != teacher.audio_proj.rows {
        return Err(Error::DimMismatch {
            expected: teacher.audio_proj.rows,
            got: clean.feature_dim(),
        });
    }
    let target = DistillTarget::new(teacher, &Conditioning::new(prompt, clean), guidance.clone())?;
    let student_h = encode_audio(student, noisy)?;
    let student_log = token_log_dists(student, prompt, &student_h, guidance)?;
    let loss = target.loss_from(&student_log);
    let to_dist = |v: &Vec<f64>| TokenDist(v.iter().map(|x| x.exp()).collect());
    let trace = GuidanceTrace {
        guidance: guidance.clone(),
        mask: target.mask.clone(),
        teacher_dists: target.teacher_log_dists.iter().map(to_dist).collect(),
        student_dists: student_log.iter().map(to_dist).collect(),
        distill_loss: loss,
    };
    Ok((loss, trace))
}
