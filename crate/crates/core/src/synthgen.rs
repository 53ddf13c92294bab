//! Synthetic paired clean/noisy datasets with controlled SNR.
//!
//! Each class owns a fixed unit template in feature space. Clean clips carry
//! their class template (in every frame, or only inside an evidence window)
//! over a low-amplitude background that is orthogonal to every template, then
//! get normalized to unit mean power. Noisy clips add isotropic Gaussian noise
//! at a requested SNR.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, FileLoader};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::instance::{read_jsonl, write_jsonl, DatasetInstance};
use crate::rng::{rng_stream, Stream};

pub const CLASS_LABELS: [&str; 4] = ["Airplane", "Motorcycle", "Train", "Sports car"];

pub const PROMPT_TEMPLATES: [&str; 4] = [
    "What is producing the sound in the audio? Please answer based on the audio.",
    "Which source best explains what you hear?",
    "Identify the sound source in this recording.",
    "Listen carefully and pick the matching sound source.",
];

pub const NOISE_TYPES: [&str; 10] = [
    "water", "wind", "babble", "traffic", "rain", "engine", "crowd", "music", "hum", "white",
];

pub const SNR_GRID: [f64; 7] = [-10.0, -5.0, 0.0, 5.0, 10.0, 20.0, 30.0];

const BACKGROUND_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub num_instances: usize,
    pub feature_dim: usize,
    pub frame_count: usize,
    pub num_classes: usize,
    pub snr_grid: Vec<f64>,
    pub noise_types: Vec<String>,
    /// `(start, length)` in frames.
    pub evidence_window: Option<(usize, usize)>,
    pub seed: u64,
    /// Prefix for generated instance ids, so several splits can share a seed space.
    pub id_prefix: String,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            num_instances: 100,
            feature_dim: 16,
            frame_count: 64,
            num_classes: 4,
            snr_grid: SNR_GRID.to_vec(),
            noise_types: NOISE_TYPES.iter().map(|s| s.to_string()).collect(),
            evidence_window: None,
            seed: 0,
            id_prefix: "syn".into(),
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.feature_dim == 0 || self.frame_count == 0 {
            return fail("feature_dim and frame_count must be positive".into());
        }
        if !(2..=CLASS_LABELS.len()).contains(&self.num_classes) {
            return fail(format!(
                "num_classes must be between 2 and {}",
                CLASS_LABELS.len()
            ));
        }
        if self.feature_dim < self.num_classes {
            return fail("feature_dim must be at least num_classes".into());
        }
        if self.snr_grid.is_empty() || self.snr_grid.iter().any(|s| !s.is_finite()) {
            return fail("snr_grid must be a non-empty list of finite values".into());
        }
        if self.noise_types.is_empty() {
            return fail("noise_types must be non-empty".into());
        }
        if let Some((start, len)) = self.evidence_window {
            if len == 0 || start + len > self.frame_count {
                return fail(format!(
                    "evidence_window ({start}, {len}) must lie within [0, {})",
                    self.frame_count
                ));
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.set("num_instances", &mut self.num_instances)?;
        kv.set("feature_dim", &mut self.feature_dim)?;
        kv.set("frame_count", &mut self.frame_count)?;
        kv.set("num_classes", &mut self.num_classes)?;
        kv.set("seed", &mut self.seed)?;
        kv.set("id_prefix", &mut self.id_prefix)?;
        if let Some(grid) = kv.list::<f64>("snr_grid")? {
            self.snr_grid = grid;
        }
        if let Some(types) = kv.list::<String>("noise_types")? {
            self.noise_types = types;
        }
        if let Some(w) = kv.list::<usize>("evidence_window")? {
            self.evidence_window = match w.as_slice() {
                [] => None,
                [start, len] => Some((*start, *len)),
                _ => return Err(Error::Config("evidence_window takes `start,length`".into())),
            };
        }
        Ok(())
    }
}

/// Orthonormal class templates; depend only on the feature dimension.
pub fn class_templates(feature_dim: usize, num_classes: usize) -> Vec<Vec<f64>> {
    let mut stream = rng_stream(0, &format!("dim{feature_dim}"), "class-templates");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    while basis.len() < num_classes {
        let mut v: Vec<f64> = (0..feature_dim)
            .map(|_| stream.sample(StandardNormal))
            .collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

fn project_out(v: &mut [f64], templates: &[Vec<f64>]) {
    for t in templates {
        let proj: f64 = v.iter().zip(t).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(t).for_each(|(x, y)| *x -= proj * y);
    }
}

pub fn synth_clean_audio(class_index: usize, spec: &GenSpec, stream: &mut Stream) -> AudioClip {
    assert!(class_index < spec.num_classes, "class index out of range");
    let templates = class_templates(spec.feature_dim, spec.num_classes);
    let template = &templates[class_index];
    let (lo, hi) = match spec.evidence_window {
        Some((start, len)) => (start, start + len),
        None => (0, spec.frame_count),
    };

    let mut data = Vec::with_capacity(spec.frame_count * spec.feature_dim);
    for t in 0..spec.frame_count {
        let mut frame: Vec<f64> = (0..spec.feature_dim)
            .map(|_| BACKGROUND_STD * stream.sample::<f64, _>(StandardNormal))
            .collect();
        project_out(&mut frame, &templates);
        if (lo..hi).contains(&t) {
            frame.iter_mut().zip(template).for_each(|(x, y)| *x += y);
        }
        data.extend(frame);
    }
    let power = data.iter().map(|x| x * x).sum::<f64>() / data.len() as f64;
    let scale = 1.0 / power.sqrt();
    let data = data.into_iter().map(|x| (x * scale) as f32).collect();
    AudioClip::from_flat(spec.feature_dim, data).expect("synthesized clip is well formed")
}

/// Adds Gaussian noise scaled so that the realized noise power matches `snr_db`.
pub fn mix_noise(clean: &AudioClip, snr_db: f64, stream: &mut Stream) -> Result<AudioClip> {
    if clean.as_flat().iter().any(|v| !v.is_finite()) || !snr_db.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let signal_power = clean.mean_power();
    if signal_power <= 0.0 {
        return Err(Error::InvalidField {
            field: "audio".into(),
            reason: "clean clip has zero power".into(),
        });
    }
    let noise: Vec<f64> = (0..clean.as_flat().len())
        .map(|_| stream.sample(StandardNormal))
        .collect();
    let realized = noise.iter().map(|x| x * x).sum::<f64>() / noise.len() as f64;
    let wanted = signal_power * 10f64.powf(-snr_db / 10.0);
    let scale = (wanted / realized).sqrt();
    let data = clean
        .as_flat()
        .iter()
        .zip(&noise)
        .map(|(&c, n)| (c as f64 + scale * n) as f32)
        .collect();
    AudioClip::from_flat(clean.feature_dim(), data)
}

/// `10 log10(P_clean / P_noise)` with the noise taken as `noisy - clean`.
pub fn realized_snr_db(clean: &AudioClip, noisy: &AudioClip) -> f64 {
    let noise_power = clean
        .as_flat()
        .iter()
        .zip(noisy.as_flat())
        .map(|(&c, &n)| (n as f64 - c as f64).powi(2))
        .sum::<f64>()
        / clean.as_flat().len() as f64;
    10.0 * (clean.mean_power() / noise_power).log10()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub jsonl: PathBuf,
    pub num_instances: usize,
    pub per_snr: BTreeMap<String, usize>,
    pub per_noise_type: BTreeMap<String, usize>,
    pub per_target: BTreeMap<String, usize>,
}

struct Generated {
    instance: DatasetInstance,
    clean: AudioClip,
    noisy: AudioClip,
}

fn generate_one(spec: &GenSpec, index: usize) -> Result<Generated> {
    let id = format!("{}-{index:05}", spec.id_prefix);
    let mut meta = rng_stream(spec.seed, &id, "synth-meta");
    let class = meta.random_range(0..spec.num_classes);
    let snr_db = spec.snr_grid[meta.random_range(0..spec.snr_grid.len())];
    let noise_type = spec.noise_types[meta.random_range(0..spec.noise_types.len())].clone();
    let prompt = PROMPT_TEMPLATES[meta.random_range(0..PROMPT_TEMPLATES.len())];

    let clean = synth_clean_audio(class, spec, &mut rng_stream(spec.seed, &id, "synth-clean"));
    let noisy = mix_noise(&clean, snr_db, &mut rng_stream(spec.seed, &id, "synth-noise"))?;

    let choices: Vec<String> = CLASS_LABELS[..spec.num_classes]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let instance = DatasetInstance {
        noisy_audio_ref: PathBuf::from("audio/noisy").join(format!("{id}.edau")),
        clean_audio_ref: PathBuf::from("audio/clean").join(format!("{id}.edau")),
        id,
        prompt: prompt.to_string(),
        target: choices[class].clone(),
        choices,
        noise_type,
        snr_db,
    };
    Ok(Generated {
        instance,
        clean,
        noisy,
    })
}

/// Writes `data.jsonl`, `manifest.json` and one clean plus one noisy clip per record.
pub fn gen_dataset(spec: &GenSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    for sub in ["audio/clean", "audio/noisy"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let generated: Vec<Generated> = (0..spec.num_instances)
        .into_par_iter()
        .map(|i| generate_one(spec, i))
        .collect::<Result<_>>()?;

    let mut manifest = Manifest {
        jsonl: out_dir.join("data.jsonl"),
        num_instances: generated.len(),
        per_snr: BTreeMap::new(),
        per_noise_type: BTreeMap::new(),
        per_target: BTreeMap::new(),
    };
    for g in &generated {
        g.clean.write(&out_dir.join(&g.instance.clean_audio_ref))?;
        g.noisy.write(&out_dir.join(&g.instance.noisy_audio_ref))?;
        *manifest.per_snr.entry(g.instance.snr_db.to_string()).or_default() += 1;
        *manifest
            .per_noise_type
            .entry(g.instance.noise_type.clone())
            .or_default() += 1;
        *manifest.per_target.entry(g.instance.target.clone()).or_default() += 1;
    }
    let instances: Vec<DatasetInstance> = generated.into_iter().map(|g| g.instance).collect();
    write_jsonl(&manifest.jsonl, &instances)?;

    let reread = read_jsonl(&manifest.jsonl, &FileLoader::new(out_dir))?;
    debug_assert_eq!(reread, instances);

    let manifest_path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::cosine;

    fn stream(tag: &str) -> Stream {
        rng_stream(3, tag, "test")
    }

    #[test]
    fn templates_are_orthonormal() {
        let t = class_templates(16, 4);
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = t[i].iter().zip(&t[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
        assert_eq!(t, class_templates(16, 4));
    }

    #[test]
    fn full_clip_correlates_everywhere() {
        let spec = GenSpec::default();
        let clip = synth_clean_audio(0, &spec, &mut stream("a"));
        let template = &class_templates(16, 4)[0];
        for frame in clip.frames() {
            assert!(cosine(frame, template) > 0.5);
        }
        assert!((clip.mean_power() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn evidence_window_is_localized() {
        let spec = GenSpec {
            evidence_window: Some((10, 5)),
            ..Default::default()
        };
        let clip = synth_clean_audio(0, &spec, &mut stream("b"));
        let template = &class_templates(16, 4)[0];
        for (t, frame) in clip.frames().enumerate() {
            let c = cosine(frame, template);
            if (10..15).contains(&t) {
                assert!(c > 0.5, "frame {t}: {c}");
            } else {
                assert!(c.abs() < 0.1, "frame {t}: {c}");
            }
        }
        assert!((clip.mean_power() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn same_stream_state_same_clip() {
        let spec = GenSpec::default();
        assert_eq!(
            synth_clean_audio(2, &spec, &mut stream("c")),
            synth_clean_audio(2, &spec, &mut stream("c"))
        );
    }

    #[test]
    fn noise_power_follows_snr() {
        let spec = GenSpec::default();
        let clean = synth_clean_audio(1, &spec, &mut stream("d"));
        for (snr, want) in [(0.0, 1.0), (10.0, 0.1), (-10.0, 10.0)] {
            let noisy = mix_noise(&clean, snr, &mut stream("noise")).unwrap();
            assert_eq!(noisy.shape(), clean.shape());
            let noise_power = clean
                .as_flat()
                .iter()
                .zip(noisy.as_flat())
                .map(|(&c, &n)| ((n - c) as f64).powi(2))
                .sum::<f64>()
                / 1024.0;
            assert!((noise_power / want - 1.0).abs() < 1e-3, "{snr}: {noise_power}");
            assert!((realized_snr_db(&clean, &noisy) - snr).abs() < 0.1);
        }
    }

    #[test]
    fn window_outside_clip_rejected() {
        let spec = GenSpec {
            evidence_window: Some((60, 5)),
            ..Default::default()
        };
        assert!(spec.validate().is_err());
        let spec = GenSpec {
            snr_grid: vec![],
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }
}
