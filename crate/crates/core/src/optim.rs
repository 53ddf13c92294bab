//! Importance ratios, the clipped group-relative loss, the combined objective,
//! the training loop, supervised warm-start and a finite-difference oracle.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{select_guidance, DistillTarget};
use crate::audio::{AudioClip, AudioLoader};
use crate::autodiff::{Tape, Var};
use crate::config::{RatioMode, TrainConfig};
use crate::error::{Error, Result};
use crate::instance::DatasetInstance;
use crate::policy::{
    canonical_answer, compute_gradients, encode_audio, prompt_id, score_tokens, token_log_dists,
    BoundParams, Conditioning, PolicyParams,
};
use crate::rng::{rng_stream, Stream};
use crate::rollout::{sample_group, Candidate};
use crate::shaping::{shape_group, similarity_score, ShapedGroup};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `exp(avg_lp_student - avg_lp_ref)`.
pub fn importance_ratio(avg_lp_student: f64, avg_lp_ref: f64) -> f64 {
    (avg_lp_student - avg_lp_ref).exp()
}

fn surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// `-(1/K) sum_k min(rho_k A_k, clip(rho_k, 1 - eps, 1 + eps) A_k)`.
pub fn policy_loss(ratios: &[f64], advantages: &[f64], clip_eps: f64) -> Result<f64> {
    if ratios.len() != advantages.len() {
        return Err(Error::LengthMismatch {
            left: ratios.len(),
            right: advantages.len(),
        });
    }
    let total: f64 = ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| surrogate(r, a, clip_eps))
        .sum();
    Ok(-total / ratios.len() as f64)
}

/// Taped [`policy_loss`]; `ratios` are scalar nodes.
pub fn taped_policy_loss(tape: &mut Tape, ratios: &[Var], advantages: &[f64], clip_eps: f64) -> Var {
    assert_eq!(ratios.len(), advantages.len());
    let terms: Vec<Var> = ratios
        .iter()
        .zip(advantages)
        .map(|(&rho, &a)| {
            let unclipped = tape.scale(rho, a);
            let clipped = tape.clamp(rho, 1.0 - clip_eps, 1.0 + clip_eps);
            let clipped = tape.scale(clipped, a);
            tape.min(unclipped, clipped)
        })
        .collect();
    let mean = tape.mean_of(&terms);
    tape.scale(mean, -1.0)
}

/// Taped ratio `exp(l_theta - sg[l_ref])`; the reference enters as a constant.
pub fn taped_importance_ratio(tape: &mut Tape, avg_lp_student: Var, avg_lp_ref: f64) -> Var {
    let diff = tape.offset(avg_lp_student, -avg_lp_ref);
    tape.exp(diff)
}

/// `lambda_policy * policy + lambda_distill * distill`.
pub fn total_loss(l_policy: f64, l_distill: f64, cfg: &TrainConfig) -> f64 {
    cfg.lambda_policy * l_policy + cfg.lambda_distill * l_distill
}

/// First-order adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: PolicyParams,
    v: PolicyParams,
    t: u64,
}

impl Adam {
    pub fn new(like: &PolicyParams) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut PolicyParams, grads: &PolicyParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let blocks = params
            .blocks_mut()
            .into_iter()
            .zip(grads.blocks())
            .zip(self.m.blocks_mut())
            .zip(self.v.blocks_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in blocks {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * gi;
                v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// An instance with both clips loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedExample {
    pub instance: DatasetInstance,
    pub prompt_id: usize,
    pub clean: AudioClip,
    pub noisy: AudioClip,
}

impl PairedExample {
    pub fn load(instance: &DatasetInstance, loader: &dyn AudioLoader) -> Result<Self> {
        Ok(Self {
            prompt_id: prompt_id(&instance.prompt),
            clean: loader.load(&instance.clean_audio_ref)?,
            noisy: loader.load(&instance.noisy_audio_ref)?,
            instance: instance.clone(),
        })
    }

    pub fn load_all(instances: &[DatasetInstance], loader: &dyn AudioLoader) -> Result<Vec<Self>> {
        instances
            .par_iter()
            .map(|inst| Self::load(inst, loader))
            .collect()
    }
}

/// Everything sampled or scored before differentiation: candidates, guidance,
/// reference scores and shaped advantages. The objective treats it as constant.
#[derive(Debug, Clone)]
pub struct InstancePlan {
    pub noisy: Conditioning,
    pub candidates: Vec<Candidate>,
    pub ref_logprobs: Vec<f64>,
    pub distill: Option<DistillTarget>,
    pub distill_value: f64,
    pub group: ShapedGroup,
}

/// Rollout, alignment and shaping for one instance under the current student.
pub fn plan_instance(
    student: &PolicyParams,
    teacher: &PolicyParams,
    ex: &PairedExample,
    cfg: &TrainConfig,
    step: u64,
) -> Result<InstancePlan> {
    let inst = &ex.instance;
    let mut stream = rng_stream(cfg.seed, &inst.id, &format!("rollout/{step}"));
    let mut candidates = sample_group(student, inst, &ex.noisy, cfg, &mut stream)?;
    let noisy = Conditioning::new(ex.prompt_id, &ex.noisy);
    let clean = Conditioning::new(ex.prompt_id, &ex.clean);

    let needs_distill = cfg.lambda_distill > 0.0 || cfg.beta > 0.0;
    let (distill, distill_value) = if needs_distill {
        let guidance = select_guidance(teacher, inst, &ex.clean, &candidates, cfg.guidance_mode)?;
        let target = DistillTarget::new(teacher, &clean, guidance)?;
        let student_h = student.audio_proj.left_mul(&noisy.mean_frame);
        let student_log = token_log_dists(student, ex.prompt_id, &student_h, &target.guidance)?;
        let value = target.loss_from(&student_log);
        (Some(target), value)
    } else {
        (None, 0.0)
    };
    let similarity = if needs_distill {
        similarity_score(distill_value)?
    } else {
        1.0
    };
    let group = shape_group(&mut candidates, similarity, cfg.beta, cfg.advantage_eps);

    let ref_logprobs = match cfg.ratio_mode {
        RatioMode::OldPolicy => candidates.iter().map(|c| c.avg_logprob_student).collect(),
        RatioMode::TeacherReference => {
            let teacher_h = encode_audio(teacher, &ex.clean)?;
            candidates
                .iter()
                .map(|c| Ok(score_tokens(teacher, ex.prompt_id, &teacher_h, &c.tokens)?.avg_logprob))
                .collect::<Result<_>>()?
        }
    };
    Ok(InstancePlan {
        noisy,
        candidates,
        ref_logprobs,
        distill,
        distill_value,
        group,
    })
}

/// Per-instance loss components as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceLoss {
    pub policy: f64,
    pub distill: f64,
    pub total: f64,
}

/// Builds `lambda_policy * L_policy + lambda_distill * L_distill` for one plan.
pub fn taped_instance_loss(
    tape: &mut Tape,
    student: &BoundParams,
    plan: &InstancePlan,
    cfg: &TrainConfig,
) -> Var {
    let mut parts = Vec::new();
    if cfg.lambda_policy > 0.0 {
        let ratios: Vec<Var> = plan
            .candidates
            .iter()
            .zip(&plan.ref_logprobs)
            .map(|(c, &r)| {
                let lp = student.avg_logprob(tape, &plan.noisy, &c.tokens);
                taped_importance_ratio(tape, lp, r)
            })
            .collect();
        let lp = taped_policy_loss(tape, &ratios, &plan.group.advantages, cfg.clip_eps);
        parts.push(tape.scale(lp, cfg.lambda_policy));
    }
    if cfg.lambda_distill > 0.0 {
        let target = plan.distill.as_ref().expect("distill target planned when lambda_distill > 0");
        let ld = target.taped_loss(tape, student, &plan.noisy);
        parts.push(tape.scale(ld, cfg.lambda_distill));
    }
    if parts.is_empty() {
        tape.constant_scalar(0.0)
    } else {
        tape.sum_of(&parts)
    }
}

/// Loss components at the plan's own student parameters, without a tape.
pub fn instance_loss_value(plan: &InstancePlan, cfg: &TrainConfig) -> Result<InstanceLoss> {
    let ratios: Vec<f64> = plan
        .candidates
        .iter()
        .zip(&plan.ref_logprobs)
        .map(|(c, &r)| importance_ratio(c.avg_logprob_student, r))
        .collect();
    let policy = policy_loss(&ratios, &plan.group.advantages, cfg.clip_eps)?;
    Ok(InstanceLoss {
        policy,
        distill: plan.distill_value,
        total: total_loss(policy, plan.distill_value, cfg),
    })
}

/// Mean objective over plans and its gradient with respect to `student`.
pub fn batch_gradient(
    student: &PolicyParams,
    plans: &[InstancePlan],
    cfg: &TrainConfig,
) -> Result<(f64, PolicyParams)> {
    let per: Vec<(f64, PolicyParams)> = plans
        .par_iter()
        .map(|plan| compute_gradients(student, |tape, b| Ok(taped_instance_loss(tape, b, plan, cfg))))
        .collect::<Result<_>>()?;
    let n = plans.len() as f64;
    let mut grads = student.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &per {
        loss += l / n;
        grads.add_scaled(g, 1.0 / n);
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(loss));
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    #[serde(rename = "L_policy")]
    pub l_policy: f64,
    #[serde(rename = "L_distill")]
    pub l_distill: f64,
    pub total: f64,
    pub mean_reward: f64,
    pub mean_similarity: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    student: PolicyParams,
    teacher: PolicyParams,
    step: u64,
    optimizer: Adam,
    config: TrainConfig,
    last_stats: Option<StepStats>,
}

impl TrainState {
    /// Freezes a copy of `warm` as the teacher; the student starts from the same weights.
    pub fn new(warm: PolicyParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            teacher: warm.clone(),
            optimizer: Adam::new(&warm),
            student: warm,
            step: 0,
            config,
            last_stats: None,
        })
    }

    pub fn student(&self) -> &PolicyParams {
        &self.student
    }

    pub fn teacher(&self) -> &PolicyParams {
        &self.teacher
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn last_stats(&self) -> Option<&StepStats> {
        self.last_stats.as_ref()
    }

    pub fn into_student(self) -> PolicyParams {
        self.student
    }

    /// One update of the student from a batch. On error nothing changes.
    pub fn train_step(&mut self, batch: &[PairedExample]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Config("train_step needs a non-empty batch".into()));
        }
        let cfg = &self.config;
        let plans: Vec<InstancePlan> = batch
            .par_iter()
            .map(|ex| plan_instance(&self.student, &self.teacher, ex, cfg, self.step))
            .collect::<Result<_>>()?;

        let (loss, grads) = batch_gradient(&self.student, &plans, cfg)?;
        if !grads.is_finite() {
            return Err(Error::NonFiniteLoss(f64::NAN));
        }

        let n = plans.len() as f64;
        let mut stats = StepStats {
            step: self.step + 1,
            l_policy: 0.0,
            l_distill: 0.0,
            total: loss,
            mean_reward: 0.0,
            mean_similarity: 0.0,
        };
        for plan in &plans {
            let parts = instance_loss_value(plan, cfg)?;
            stats.l_policy += parts.policy / n;
            stats.l_distill += parts.distill / n;
            stats.mean_reward += plan.group.raw_rewards.iter().sum::<f64>()
                / plan.group.raw_rewards.len() as f64
                / n;
            stats.mean_similarity += plan.group.similarity / n;
        }

        self.optimizer
            .update(&mut self.student, &grads, self.config.learning_rate);
        self.step += 1;
        self.last_stats = Some(stats);
        Ok(stats)
    }
}

/// Supervised cross-entropy on clean audio toward `[BOS, ANSWER, letter, EOS]`.
pub fn warmstart_supervised(
    init: &PolicyParams,
    clean_dataset: &[PairedExample],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    stream: &mut Stream,
) -> Result<PolicyParams> {
    if clean_dataset.is_empty() {
        return Err(Error::Config("warm-start needs a non-empty dataset".into()));
    }
    let mut params = init.clone();
    let mut adam = Adam::new(init);
    let mut order: Vec<usize> = (0..clean_dataset.len()).collect();
    let batch_size = batch_size.max(1);
    for _ in 0..epochs {
        order.shuffle(stream);
        for chunk in order.chunks(batch_size) {
            let per: Vec<(f64, PolicyParams)> = chunk
                .par_iter()
                .map(|&i| {
                    let ex = &clean_dataset[i];
                    let tokens = canonical_answer(ex.instance.target_index());
                    let cond = Conditioning::new(ex.prompt_id, &ex.clean);
                    compute_gradients(&params, |tape, b| {
                        let lp = b.avg_logprob(tape, &cond, &tokens);
                        Ok(tape.scale(lp, -1.0))
                    })
                })
                .collect::<Result<_>>()?;
            let mut grads = params.zeros_like();
            for (_, g) in &per {
                grads.add_scaled(g, 1.0 / per.len() as f64);
            }
            adam.update(&mut params, &grads, lr);
        }
    }
    Ok(params)
}

/// Central differences `(f(w + h) - f(w - h)) / 2h` for every parameter.
pub fn finite_diff_grad<F>(params: &PolicyParams, loss_fn: F, step_h: f64) -> PolicyParams
where
    F: Fn(&PolicyParams) -> f64 + Sync,
{
    assert!(step_h > 0.0);
    let base = params.flat();
    let values: Vec<f64> = (0..base.len())
        .into_par_iter()
        .map(|i| {
            let mut p = params.clone();
            let mut w = base.clone();
            w[i] = base[i] + step_h;
            p.set_flat(&w);
            let up = loss_fn(&p);
            w[i] = base[i] - step_h;
            p.set_flat(&w);
            let down = loss_fn(&p);
            (up - down) / (2.0 * step_h)
        })
        .collect();
    let mut out = params.zeros_like();
    out.set_flat(&values);
    out
}

/// Share of entries whose relative error is within `tol`; magnitudes below
/// `floor` are compared absolutely.
pub fn gradient_agreement(analytic: &[f64], numeric: &[f64], tol: f64, floor: f64) -> f64 {
    let ok = analytic
        .iter()
        .zip(numeric)
        .filter(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor) <= tol)
        .count();
    ok as f64 / analytic.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_values() {
        assert_eq!(importance_ratio(-1.3, -1.3), 1.0);
        assert!((importance_ratio(2f64.ln() - 0.5, -0.5) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn clipped_loss_branches() {
        assert_eq!(policy_loss(&[1.0], &[1.0], 0.2).unwrap(), -1.0);
        assert!((policy_loss(&[2.0], &[1.0], 0.2).unwrap() + 1.2).abs() < 1e-12);
        assert_eq!(policy_loss(&[2.0], &[-1.0], 0.2).unwrap(), 2.0);
        assert!(matches!(
            policy_loss(&[1.0, 1.0], &[1.0], 0.2),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn zero_advantages_zero_policy_loss() {
        assert_eq!(policy_loss(&[0.5, 1.7, 1.0], &[0.0; 3], 0.2).unwrap(), 0.0);
    }

    #[test]
    fn weighted_total() {
        let cfg = TrainConfig::default();
        assert_eq!(total_loss(0.5, 0.25, &cfg), 0.75);
        let grpo = TrainConfig {
            lambda_distill: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(0.5, 0.25, &grpo), 0.5);
        let distill = TrainConfig {
            lambda_policy: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(0.5, 0.25, &distill), 0.25);
    }

    #[test]
    fn taped_loss_matches_plain() {
        let ratios = [0.7, 1.1, 1.5, 0.95];
        let adv = [1.0, -0.5, 0.8, -1.2];
        let want = policy_loss(&ratios, &adv, 0.2).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<Var> = ratios.iter().map(|&r| tape.leaf(1, 1, vec![r])).collect();
        let l = taped_policy_loss(&mut tape, &vars, &adv, 0.2);
        assert!((tape.scalar(l) - want).abs() < 1e-15);
        let g = tape.backward(l).unwrap();
        // ratio 0.7 with A>0 is below the clip range: unclipped branch is the min
        assert!((g.of(&tape, vars[0])[0] + 0.25).abs() < 1e-15);
        // ratio 1.5 with A>0: clipped branch, flat in rho
        assert_eq!(g.of(&tape, vars[2])[0], 0.0);
    }

    #[test]
    fn finite_difference_on_quadratic() {
        let shape = crate::policy::PolicyShape {
            vocab: 8,
            hidden: 2,
            feature_dim: 2,
            prompts: 1,
        };
        let mut p = PolicyParams::zeros(shape);
        p.hidden_bias.data[0] = 3.0;
        let g = finite_diff_grad(&p, |q| q.hidden_bias.data[0].powi(2), 1e-4);
        assert!((g.hidden_bias.data[0] - 6.0).abs() < 1e-6);
        let flat = g.flat();
        assert_eq!(flat.iter().filter(|&&v| v != 0.0).count(), 1);
        let c = finite_diff_grad(&p, |_| 4.2, 1e-4);
        assert!(c.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let shape = crate::policy::PolicyShape {
            vocab: 8,
            hidden: 2,
            feature_dim: 2,
            prompts: 1,
        };
        let mut p = PolicyParams::zeros(shape);
        let mut g = p.zeros_like();
        g.output_bias.data[3] = 5.0;
        g.output_bias.data[4] = -0.1;
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &g, 0.01);
        // first bias-corrected step has magnitude lr regardless of gradient scale
        assert!((p.output_bias.data[3] + 0.01).abs() < 1e-9);
        assert!((p.output_bias.data[4] - 0.01).abs() < 1e-9);
        assert_eq!(p.output_bias.data[0], 0.0);
    }
}
