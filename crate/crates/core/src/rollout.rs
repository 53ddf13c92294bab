//! Group sampling from the noisy student and choice-matching task rewards.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::audio::AudioClip;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::instance::DatasetInstance;
use crate::policy::{
    decode, encode_audio, letter_index, prompt_id, Decoding, PolicyParams, TokenSeq, EOS,
};
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub tokens: TokenSeq,
    pub avg_logprob_student: f64,
    pub extracted_answer: Option<String>,
    pub raw_reward: f64,
    pub shaped_reward: f64,
    pub advantage: f64,
}

/// Draws `cfg.group_size` responses from the student conditioned on the noisy clip.
pub fn sample_group(
    student: &PolicyParams,
    inst: &DatasetInstance,
    noisy: &AudioClip,
    cfg: &TrainConfig,
    stream: &mut Stream,
) -> Result<Vec<Candidate>> {
    let audio_h = encode_audio(student, noisy)?;
    let prompt = prompt_id(&inst.prompt);
    let mode = Decoding::from_temperature(cfg.temperature);
    Ok((0..cfg.group_size)
        .map(|_| {
            let decoded = decode(student, prompt, &audio_h, mode, stream);
            let extracted_answer = extract_answer(&decoded.tokens, &inst.choices);
            let raw_reward = reward_for(extracted_answer.as_deref(), &inst.target);
            Candidate {
                avg_logprob_student: decoded.avg_logprob(),
                tokens: decoded.tokens,
                extracted_answer,
                raw_reward,
                shaped_reward: raw_reward,
                advantage: 0.0,
            }
        })
        .collect())
}

/// The choice named by the last letter token before the first EOS.
///
/// Letters past the end of `choices` are ignored.
pub fn extract_answer(tokens: &[usize], choices: &[String]) -> Option<String> {
    tokens
        .iter()
        .take_while(|&&t| t != EOS)
        .filter_map(|&t| letter_index(t))
        .filter(|&i| i < choices.len())
        .last()
        .map(|i| choices[i].clone())
}

fn reward_for(extracted: Option<&str>, target: &str) -> f64 {
    match extracted {
        Some(a) if a == target => 1.0,
        Some(_) => 0.0,
        None => -1.0,
    }
}

/// `1` for the target, `0` for another choice, `-1` when nothing was extracted.
///
/// `guidance` is reserved for soft-reference grading of open-ended answers and is
/// not consulted for multiple-choice items.
pub fn task_reward(
    candidate: &Candidate,
    inst: &DatasetInstance,
    _guidance: Option<&TokenSeq>,
) -> f64 {
    reward_for(candidate.extracted_answer.as_deref(), &inst.target)
}

#[derive(Debug, Serialize)]
struct RolloutRecord<'a> {
    id: &'a str,
    tokens: Vec<String>,
    raw_reward: f64,
    shaped_reward: f64,
    advantage: f64,
}

/// Debug dump: one JSON line per candidate.
pub fn write_rollout_dump<W: Write>(
    out: &mut W,
    inst: &DatasetInstance,
    candidates: &[Candidate],
) -> Result<()> {
    for c in candidates {
        let rec = RolloutRecord {
            id: &inst.id,
            tokens: c.tokens.iter().map(|&t| crate::policy::token_name(t)).collect(),
            raw_reward: c.raw_reward,
            shaped_reward: c.shaped_reward,
            advantage: c.advantage,
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")
            .map_err(|e| Error::io(Path::new("<rollout dump>"), e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{letter_token, PolicyShape, ANSWER, BOS, FIRST_FILLER};
    use crate::rng::rng_stream;
    use std::path::PathBuf;

    fn choices() -> Vec<String> {
        ["Airplane", "Motorcycle", "Train", "Sports car"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn instance() -> DatasetInstance {
        DatasetInstance {
            id: "19452".into(),
            prompt: "What is producing the sound in the audio? Please answer based on the audio.".into(),
            noisy_audio_ref: PathBuf::from("n"),
            clean_audio_ref: PathBuf::from("c"),
            choices: choices(),
            target: "Airplane".into(),
            noise_type: "water".into(),
            snr_db: 30.0,
        }
    }

    fn candidate(extracted: Option<&str>) -> Candidate {
        Candidate {
            tokens: TokenSeq(vec![BOS, EOS]),
            avg_logprob_student: 0.0,
            extracted_answer: extracted.map(str::to_string),
            raw_reward: 0.0,
            shaped_reward: 0.0,
            advantage: 0.0,
        }
    }

    #[test]
    fn extraction_reads_letter() {
        let toks = [BOS, FIRST_FILLER, ANSWER, letter_token(2), EOS];
        assert_eq!(extract_answer(&toks, &choices()).as_deref(), Some("Train"));
    }

    #[test]
    fn last_letter_wins() {
        let toks = [BOS, letter_token(0), FIRST_FILLER, letter_token(1), EOS];
        assert_eq!(extract_answer(&toks, &choices()).as_deref(), Some("Motorcycle"));
    }

    #[test]
    fn no_letter_no_answer() {
        assert_eq!(extract_answer(&[BOS, FIRST_FILLER, EOS], &choices()), None);
    }

    #[test]
    fn letters_after_eos_ignored() {
        let toks = [BOS, letter_token(0), EOS, letter_token(3)];
        assert_eq!(extract_answer(&toks, &choices()).as_deref(), Some("Airplane"));
    }

    #[test]
    fn letter_beyond_choice_list_ignored() {
        let two = choices()[..2].to_vec();
        assert_eq!(extract_answer(&[BOS, letter_token(3), EOS], &two), None);
    }

    #[test]
    fn reward_levels() {
        let inst = instance();
        assert_eq!(task_reward(&candidate(Some("Airplane")), &inst, None), 1.0);
        assert_eq!(task_reward(&candidate(Some("Train")), &inst, None), 0.0);
        assert_eq!(task_reward(&candidate(None), &inst, None), -1.0);
    }

    #[test]
    fn group_cardinality_and_determinism() {
        let params = PolicyParams::init(PolicyShape::default(), &mut rng_stream(1, "p", "init"));
        let clip = AudioClip::from_flat(16, (0..64 * 16).map(|i| (i % 7) as f32 * 0.1).collect()).unwrap();
        let cfg = TrainConfig::default();
        let a = sample_group(&params, &instance(), &clip, &cfg, &mut rng_stream(5, "19452", "rollout")).unwrap();
        let b = sample_group(&params, &instance(), &clip, &cfg, &mut rng_stream(5, "19452", "rollout")).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, b);
        for c in &a {
            assert!([-1.0, 0.0, 1.0].contains(&c.raw_reward));
            if let Some(ans) = &c.extracted_answer {
                assert!(instance().choices.contains(ans));
            }
            assert!(c.tokens.len() <= crate::policy::MAX_DECODE_LEN);
        }
    }

    #[test]
    fn greedy_group_is_identical() {
        let params = PolicyParams::init(PolicyShape::default(), &mut rng_stream(2, "p", "init"));
        let clip = AudioClip::zeros(4, 16);
        let cfg = TrainConfig {
            temperature: 0.0,
            ..Default::default()
        };
        let g = sample_group(&params, &instance(), &clip, &cfg, &mut rng_stream(0, "i", "r")).unwrap();
        assert!(g.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn dump_is_jsonl() {
        let mut buf = Vec::new();
        write_rollout_dump(&mut buf, &instance(), &[candidate(None), candidate(Some("Train"))]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["id"], "19452");
    }
}
