use echodistill::align::{distill_loss, kl_divergence};
use echodistill::audio::{AudioClip, MemoryLoader};
use echodistill::instance::validate_instance;
use echodistill::metrics::{exact_match, net_correction, valid_ids, Prediction, PredictionFile};
use echodistill::optim::policy_loss;
use echodistill::policy::{canonical_answer, PolicyParams, PolicyShape, TokenSeq, FIRST_FILLER, PAD};
use echodistill::rng::rng_stream;
use echodistill::shaping::{group_advantages, mean_std, shape_rewards};
use echodistill::Error;
use proptest::prelude::*;
use serde_json::{json, Map, Value};

fn loader() -> MemoryLoader {
    let mut l = MemoryLoader::default();
    l.insert("n.edau", AudioClip::from_flat(2, vec![0.5; 20]).unwrap());
    l.insert("c.edau", AudioClip::from_flat(2, vec![0.1; 20]).unwrap());
    l.insert("short.edau", AudioClip::from_flat(2, vec![0.1; 18]).unwrap());
    l
}

fn record(choices: &[String], target: &str, snr: f64) -> Map<String, Value> {
    json!({
        "id": "r1",
        "prompt": "Which vehicle is heard?",
        "noisy_audio_path": "n.edau",
        "clean_audio_path": "c.edau",
        "choices": choices,
        "target": target,
        "noise_type": "white",
        "snr": snr,
    })
    .as_object()
    .unwrap()
    .clone()
}

fn distinct_labels() -> impl Strategy<Value = Vec<String>> {
    prop::collection::btree_set("[a-z]{1,6}", 2..6).prop_map(|s| s.into_iter().collect())
}

#[derive(Debug, Clone)]
enum Corruption {
    DropField(&'static str),
    TargetOutside,
    DuplicateChoice,
    ShortNoisy,
    OneChoice,
}

fn corruption() -> impl Strategy<Value = Corruption> {
    prop_oneof![
        prop::sample::select(vec!["id", "prompt", "choices", "target", "snr", "noise_type"])
            .prop_map(Corruption::DropField),
        Just(Corruption::TargetOutside),
        Just(Corruption::DuplicateChoice),
        Just(Corruption::ShortNoisy),
        Just(Corruption::OneChoice),
    ]
}

proptest! {
    #[test]
    fn valid_records_round_trip(choices in distinct_labels(), pick in any::<prop::sample::Index>(), snr in -20.0f64..40.0) {
        let target = pick.get(&choices).clone();
        let inst = validate_instance(&record(&choices, &target, snr), &loader()).unwrap();
        prop_assert_eq!(&inst.choices, &choices);
        prop_assert_eq!(inst.target_index(), choices.iter().position(|c| *c == target).unwrap());
        prop_assert_eq!(inst.snr_db, snr);
    }

    #[test]
    fn corrupted_records_fail_with_the_matching_error(choices in distinct_labels(), c in corruption()) {
        let target = choices[0].clone();
        let mut raw = record(&choices, &target, 0.0);
        match &c {
            Corruption::DropField(f) => { raw.remove(*f); }
            Corruption::TargetOutside => { raw.insert("target".into(), json!("zzzzzzz")); }
            Corruption::DuplicateChoice => {
                let mut dup = choices.clone();
                dup.push(choices[1].clone());
                raw.insert("choices".into(), json!(dup));
            }
            Corruption::ShortNoisy => { raw.insert("noisy_audio_path".into(), json!("short.edau")); }
            Corruption::OneChoice => {
                raw.insert("choices".into(), json!([target.clone()]));
            }
        }
        let err = validate_instance(&raw, &loader()).unwrap_err();
        let ok = match (&c, &err) {
            (Corruption::DropField(f), Error::MissingField(g)) => f == g,
            (Corruption::TargetOutside, Error::TargetNotInChoices { .. }) => true,
            (Corruption::DuplicateChoice, Error::DuplicateChoice(_)) => true,
            (Corruption::ShortNoisy, Error::AudioMismatch { .. }) => true,
            (Corruption::OneChoice, Error::InvalidField { field, .. }) => field == "choices",
            _ => false,
        };
        prop_assert!(ok, "{:?} produced {:?}", c, err);
    }

    #[test]
    fn shaped_rewards_stay_in_range(raw in prop::collection::vec(prop::sample::select(vec![-1.0, 0.0, 1.0]), 2..12),
                                    s in 0.0f64..=1.0, beta in 0.0f64..4.0) {
        let shaped = shape_rewards(&raw, s, beta);
        for (r, v) in raw.iter().zip(&shaped) {
            prop_assert!((-1.0..=2.0).contains(v));
            if *r <= 0.0 {
                prop_assert_eq!(v, r);
            } else {
                prop_assert!(*v >= *r);
            }
        }
    }

    #[test]
    fn advantages_are_standardized(rewards in prop::collection::vec(-1.0f64..2.0, 2..16)) {
        let a = group_advantages(&rewards, 1e-6);
        let (m, sd) = mean_std(&a);
        prop_assert!(m.abs() < 1e-9);
        let (_, raw_sd) = mean_std(&rewards);
        if raw_sd > 1e-3 {
            prop_assert!((sd - raw_sd / (raw_sd + 1e-6)).abs() < 1e-9);
        } else {
            prop_assert!(sd <= 1.0);
        }
        let shifted: Vec<f64> = rewards.iter().map(|r| r + 0.75).collect();
        for (x, y) in a.iter().zip(group_advantages(&shifted, 1e-6)) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn policy_loss_ignores_clipping_inside_the_interval(ratios in prop::collection::vec(0.81f64..1.19, 1..8), seed in any::<u64>()) {
        let mut rng = rng_stream(seed, "adv", "p");
        let adv: Vec<f64> = ratios.iter().map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect();
        let clipped: Vec<f64> = ratios.iter().map(|r| r.clamp(0.8, 1.2)).collect();
        let a = policy_loss(&ratios, &adv, 0.2).unwrap();
        let b = policy_loss(&clipped, &adv, 0.2).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn kl_is_non_negative(q in prop::collection::vec(0.001f64..1.0, 2..10), p in prop::collection::vec(0.001f64..1.0, 10)) {
        let n = q.len();
        let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
        let q = norm(&q);
        let p = norm(&p[..n]);
        prop_assert!(kl_divergence(&q, &p) >= -1e-12);
        prop_assert!(kl_divergence(&q, &q).abs() < 1e-12);
    }

    #[test]
    fn distillation_is_non_negative_and_ignores_masked_tokens(seed in any::<u64>(), letter in 0usize..4, filler in FIRST_FILLER..16) {
        let shape = PolicyShape { vocab: 16, hidden: 6, feature_dim: 3, prompts: 4 };
        let teacher = PolicyParams::init(shape, &mut rng_stream(seed, "t", "init"));
        let student = PolicyParams::init(shape, &mut rng_stream(seed, "s", "init"));
        let mut rng = rng_stream(seed, "clip", "p");
        let mut clip = || {
            let data = (0..15).map(|_| rand::Rng::random_range(&mut rng, -1.0f32..1.0)).collect();
            AudioClip::from_flat(3, data).unwrap()
        };
        let (clean, noisy) = (clip(), clip());
        let inst = validate_instance(&record(&["a".into(), "b".into(), "c".into(), "d".into()], "a", 0.0), &loader()).unwrap();
        let mut guidance = canonical_answer(letter).0;
        guidance.insert(2, filler);
        let g = TokenSeq(guidance.clone());
        let (loss, trace) = distill_loss(&teacher, &student, &inst, &clean, &noisy, &g).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());

        // Appending masked tokens after EOS leaves the loss unchanged.
        let mut padded = guidance.clone();
        padded.extend([PAD, PAD]);
        let (loss_padded, _) = distill_loss(&teacher, &student, &inst, &clean, &noisy, &TokenSeq(padded)).unwrap();
        prop_assert!((loss - loss_padded).abs() < 1e-12);
        prop_assert_eq!(trace.mask.iter().filter(|&&m| m).count(), 3);
    }

    #[test]
    fn exact_match_symmetry_and_net_correction_antisymmetry(labels in prop::collection::vec(0u8..4, 1..40), a_raw in prop::collection::vec(0u8..5, 40), b_raw in prop::collection::vec(0u8..5, 40)) {
        let to_pred = |v: u8| if v == 4 { Prediction::Invalid } else { Prediction::Label(format!("L{v}")) };
        let (mut t, mut a, mut b) = (PredictionFile::new(), PredictionFile::new(), PredictionFile::new());
        for (i, &l) in labels.iter().enumerate() {
            let id = format!("{i}");
            t.insert_label(id.clone(), format!("L{l}"));
            a.insert(id.clone(), to_pred(a_raw[i]));
            b.insert(id, to_pred(b_raw[i]));
        }
        let ids: Vec<String> = (0..labels.len()).map(|i| i.to_string()).collect();
        let v = valid_ids(&a, &b, ids.iter().map(String::as_str));
        match (exact_match(&a, &b, &v), exact_match(&b, &a, &v)) {
            (Ok(x), Ok(y)) => { prop_assert_eq!(x, y); prop_assert!((0.0..=1.0).contains(&x)); }
            (Err(_), Err(_)) => prop_assert!(v.is_empty()),
            _ => prop_assert!(false, "asymmetric failure"),
        }
        let n = labels.len();
        let ab = net_correction(&a, &b, &t, n).unwrap();
        let ba = net_correction(&b, &a, &t, n).unwrap();
        prop_assert!((ab + ba).abs() < 1e-12);
    }
}
