//! Experiment orchestration: warm-start, training per variant, evaluation,
//! consistency curves and the variant grid.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::AudioLoader;
use crate::config::{KeyValues, TrainConfig};
use crate::error::{Error, Result};
use crate::instance::{Dataset, DatasetInstance};
use crate::metrics::{compute_metrics, exact_match, valid_ids, MetricInputs, Prediction, PredictionFile, RunMetrics};
use crate::optim::{warmstart_supervised, PairedExample, StepStats, TrainState};
use crate::policy::{encode_audio, greedy_decode, prompt_id, PolicyParams, PolicyShape};
use crate::rng::rng_stream;
use crate::rollout::extract_answer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Initial,
    GrpoOnly,
    DistillOnly,
    #[serde(rename = "echodistill")]
    EchoDistill,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Initial,
        Variant::GrpoOnly,
        Variant::DistillOnly,
        Variant::EchoDistill,
    ];

    /// Forces the loss weights that define the variant.
    pub fn apply(self, cfg: &mut TrainConfig) {
        match self {
            Variant::GrpoOnly => {
                cfg.lambda_distill = 0.0;
                cfg.beta = 0.0;
            }
            Variant::DistillOnly => cfg.lambda_policy = 0.0,
            Variant::Initial | Variant::EchoDistill => {}
        }
    }

    pub fn trains(self) -> bool {
        self != Variant::Initial
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Initial => "initial",
            Variant::GrpoOnly => "grpo_only",
            Variant::DistillOnly => "distill_only",
            Variant::EchoDistill => "echodistill",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub variant: Variant,
    pub train_path: PathBuf,
    pub val_path: Option<PathBuf>,
    pub test_path: PathBuf,
    pub train: TrainConfig,
    /// Test instances are restricted to these SNRs; empty keeps all.
    pub eval_snrs: Vec<f64>,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub warmstart_epochs: usize,
    pub warmstart_lr: f64,
    pub warmstart_batch: usize,
    pub hidden: usize,
    pub vocab: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            variant: Variant::EchoDistill,
            train_path: PathBuf::from("data/train/data.jsonl"),
            val_path: None,
            test_path: PathBuf::from("data/test/data.jsonl"),
            train: TrainConfig::default(),
            eval_snrs: Vec::new(),
            out_dir: PathBuf::from("runs"),
            seeds: vec![0],
            steps: 2000,
            batch_size: 16,
            checkpoint_every: 100,
            warmstart_epochs: 10,
            warmstart_lr: 1e-2,
            warmstart_batch: 16,
            hidden: 32,
            vocab: 32,
        }
    }
}

impl ExperimentSpec {
    /// Reads overrides from a key/value file. Relative dataset paths resolve
    /// against `base`.
    pub fn apply(&mut self, kv: &KeyValues, base: &Path) -> Result<()> {
        self.train.apply(kv)?;
        kv.set("variant", &mut self.variant)?;
        let path = |key: &str| kv.get(key).map(|p| base.join(p));
        if let Some(p) = path("train") {
            self.train_path = p;
        }
        if let Some(p) = path("val") {
            self.val_path = Some(p);
        }
        if let Some(p) = path("test") {
            self.test_path = p;
        }
        if let Some(p) = path("out") {
            self.out_dir = p;
        }
        if let Some(v) = kv.list("eval_snrs")? {
            self.eval_snrs = v;
        }
        if let Some(v) = kv.list("seeds")? {
            self.seeds = v;
        }
        kv.set("steps", &mut self.steps)?;
        kv.set("batch_size", &mut self.batch_size)?;
        kv.set("checkpoint_every", &mut self.checkpoint_every)?;
        kv.set("warmstart_epochs", &mut self.warmstart_epochs)?;
        kv.set("warmstart_lr", &mut self.warmstart_lr)?;
        kv.set("warmstart_batch", &mut self.warmstart_batch)?;
        kv.set("hidden", &mut self.hidden)?;
        kv.set("vocab", &mut self.vocab)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.warmstart_batch == 0 {
            return fail("batch sizes must be positive");
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be positive");
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required");
        }
        if self.hidden == 0 || self.vocab < crate::policy::FIRST_FILLER {
            return fail("hidden must be positive and vocab must hold the special tokens");
        }
        Ok(())
    }

    /// Training config for one seed with the variant's forced weights.
    pub fn config_for(&self, variant: Variant, seed: u64) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.seed = seed;
        variant.apply(&mut cfg);
        cfg
    }

    pub fn run_dir(&self, variant: Variant, seed: u64) -> PathBuf {
        self.out_dir.join(variant.to_string()).join(format!("seed-{seed}"))
    }
}

/// Which clip of a pair the model is shown.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Noisy,
    Clean,
}

/// Greedy single-student predictions. Only the requested side is loaded.
pub fn predict(
    params: &PolicyParams,
    instances: &[DatasetInstance],
    loader: &dyn AudioLoader,
    side: Side,
) -> Result<PredictionFile> {
    let preds: Vec<(String, Prediction)> = instances
        .par_iter()
        .map(|inst| {
            let path = match side {
                Side::Noisy => &inst.noisy_audio_ref,
                Side::Clean => &inst.clean_audio_ref,
            };
            let clip = loader.load(path)?;
            let h = encode_audio(params, &clip)?;
            let decoded = greedy_decode(params, prompt_id(&inst.prompt), &h);
            let answer = extract_answer(&decoded.tokens, &inst.choices);
            Ok((inst.id.clone(), Prediction::from_option(answer)))
        })
        .collect::<Result<_>>()?;
    let mut file = PredictionFile::new();
    for (id, p) in preds {
        file.insert(id, p);
    }
    Ok(file)
}

pub fn targets_file(instances: &[DatasetInstance]) -> PredictionFile {
    let mut f = PredictionFile::new();
    for inst in instances {
        f.insert_label(inst.id.clone(), inst.target.clone());
    }
    f
}

pub fn filter_snr(instances: &[DatasetInstance], snrs: &[f64]) -> Vec<DatasetInstance> {
    instances
        .iter()
        .filter(|i| snrs.is_empty() || snrs.iter().any(|s| (s - i.snr_db).abs() < 1e-9))
        .cloned()
        .collect()
}

/// Random policy followed by supervised training on the clean clips.
pub fn warm_start(spec: &ExperimentSpec, seed: u64, train: &[PairedExample]) -> Result<PolicyParams> {
    let feature_dim = train
        .first()
        .map(|ex| ex.clean.feature_dim())
        .ok_or_else(|| Error::Config("training split is empty".into()))?;
    let shape = PolicyShape {
        vocab: spec.vocab,
        hidden: spec.hidden,
        feature_dim,
        ..PolicyShape::default()
    };
    let init = PolicyParams::init(shape, &mut rng_stream(seed, "policy", "init"));
    warmstart_supervised(
        &init,
        train,
        spec.warmstart_epochs,
        spec.warmstart_lr,
        spec.warmstart_batch,
        &mut rng_stream(seed, "policy", "warmstart"),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyPoint {
    pub step: u64,
    pub consistency: f64,
    pub valid: usize,
}

/// Agreement of a model's noisy-input and clean-input predictions.
pub fn consistency(params: &PolicyParams, val: &[DatasetInstance], loader: &dyn AudioLoader) -> Result<(f64, usize)> {
    let noisy = predict(params, val, loader, Side::Noisy)?;
    let clean = predict(params, val, loader, Side::Clean)?;
    let ids = valid_ids(&noisy, &clean, val.iter().map(|i| i.id.as_str()));
    match exact_match(&noisy, &clean, &ids) {
        Ok(v) => Ok((v, ids.len())),
        Err(Error::EmptyValidSet(_)) => Ok((0.0, 0)),
        Err(e) => Err(e),
    }
}

/// Noisy-to-clean consistency at every checkpoint, in checkpoint order.
pub fn consistency_curve(
    checkpoints: &[(u64, PolicyParams)],
    val: &[DatasetInstance],
    loader: &dyn AudioLoader,
) -> Result<Vec<ConsistencyPoint>> {
    if checkpoints.len() < 2 {
        return Err(Error::Config("a consistency curve needs at least two checkpoints".into()));
    }
    checkpoints
        .iter()
        .map(|(step, p)| {
            let (c, n) = consistency(p, val, loader)?;
            Ok(ConsistencyPoint {
                step: *step,
                consistency: c,
                valid: n,
            })
        })
        .collect()
}

pub fn curve_csv(points: &[ConsistencyPoint]) -> String {
    let mut s = String::from("step,consistency,valid\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.step, p.consistency, p.valid);
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub student: PolicyParams,
    pub teacher_fingerprint: String,
    pub log: Vec<StepStats>,
    /// `(step, params)`, starting with step 0.
    pub checkpoints: Vec<(u64, PolicyParams)>,
}

/// Runs `spec.steps` updates from `warm` under the variant's config.
pub fn train_variant(
    spec: &ExperimentSpec,
    variant: Variant,
    seed: u64,
    warm: &PolicyParams,
    train: &[PairedExample],
) -> Result<TrainOutcome> {
    let cfg = spec.config_for(variant, seed);
    let mut state = TrainState::new(warm.clone(), cfg)?;
    let mut log = Vec::new();
    let mut checkpoints = vec![(0, warm.clone())];
    if variant.trains() {
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let k = spec.batch_size.min(train.len());
        for step in 0..spec.steps {
            let mut stream = rng_stream(seed, "batch", &format!("step/{step}"));
            let mut picks = index::sample(&mut stream, train.len(), k).into_vec();
            picks.sort_unstable();
            let batch: Vec<PairedExample> = picks.into_iter().map(|i| train[i].clone()).collect();
            log.push(state.train_step(&batch)?);
            let done = step + 1;
            if done % spec.checkpoint_every == 0 || done == spec.steps {
                checkpoints.push((done, state.student().clone()));
            }
        }
    }
    Ok(TrainOutcome {
        teacher_fingerprint: state.teacher().fingerprint(),
        student: state.into_student(),
        log,
        checkpoints,
    })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: RunMetrics,
    pub noisy: PredictionFile,
    pub clean: PredictionFile,
}

/// Student-only inference on both sides of the test split, scored against
/// the warm-started model's clean predictions and, for net correction, its
/// noisy predictions.
pub fn evaluate(
    student: &PolicyParams,
    base: &PolicyParams,
    test: &[DatasetInstance],
    loader: &dyn AudioLoader,
) -> Result<Evaluation> {
    let noisy = predict(student, test, loader, Side::Noisy)?;
    let clean = predict(student, test, loader, Side::Clean)?;
    let base_clean = predict(base, test, loader, Side::Clean)?;
    let base_noisy = predict(base, test, loader, Side::Noisy)?;
    let targets = targets_file(test);
    let metrics = compute_metrics(MetricInputs {
        noisy_preds: &noisy,
        clean_preds: &clean,
        base_clean_preds: &base_clean,
        targets: &targets,
        reference_noisy: Some(&base_noisy),
    })?;
    Ok(Evaluation { metrics, noisy, clean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub variant: Variant,
    pub seed: u64,
    pub steps: u64,
    pub eval_snrs: Vec<f64>,
    pub test_instances: usize,
    pub teacher_fingerprint: String,
    pub student_fingerprint: String,
    pub metrics: RunMetrics,
    pub reported: RunMetrics,
}

#[derive(Debug, Clone)]
pub struct RunBundle {
    pub record: MetricsRecord,
    pub log: Vec<StepStats>,
    pub curve: Vec<ConsistencyPoint>,
    pub dir: PathBuf,
}

/// Loaded splits shared by every variant and seed of an experiment.
pub struct Splits {
    pub train: Vec<PairedExample>,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn load(spec: &ExperimentSpec) -> Result<Self> {
        let train = Dataset::load(&spec.train_path)?;
        let train = PairedExample::load_all(&train.instances, &train.loader)?;
        let mut test = Dataset::load(&spec.test_path)?;
        test.instances = filter_snr(&test.instances, &spec.eval_snrs);
        if test.instances.is_empty() {
            return Err(Error::Config("no test instances at the requested SNRs".into()));
        }
        let val = match &spec.val_path {
            Some(p) => Dataset::load(p)?,
            None => test.clone(),
        };
        Ok(Self { train, val, test })
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// One variant and seed from a given warm start; writes its run directory.
pub fn run_from_warm(
    spec: &ExperimentSpec,
    variant: Variant,
    seed: u64,
    warm: &PolicyParams,
    splits: &Splits,
) -> Result<RunBundle> {
    let dir = spec.run_dir(variant, seed);
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let marker = dir.join("INCOMPLETE");
    write(&marker, "run did not finish\n")?;

    let outcome = train_variant(spec, variant, seed, warm, &splits.train)?;
    let mut log_text = String::new();
    for s in &outcome.log {
        log_text.push_str(&serde_json::to_string(s)?);
        log_text.push('\n');
    }
    write(&dir.join("run_log.jsonl"), log_text)?;
    for (step, p) in &outcome.checkpoints {
        p.save(&ckpt_dir.join(format!("step-{step:06}.ckpt")))?;
    }

    let curve = if outcome.checkpoints.len() >= 2 {
        consistency_curve(&outcome.checkpoints, &splits.val.instances, &splits.val.loader)?
    } else {
        Vec::new()
    };
    write(&dir.join("consistency.csv"), curve_csv(&curve))?;

    let eval = evaluate(&outcome.student, warm, &splits.test.instances, &splits.test.loader)?;
    eval.noisy.write_jsonl(&dir.join("predictions_noisy.jsonl"))?;
    eval.clean.write_jsonl(&dir.join("predictions_clean.jsonl"))?;
    let record = MetricsRecord {
        variant,
        seed,
        steps: outcome.log.len() as u64,
        eval_snrs: spec.eval_snrs.clone(),
        test_instances: splits.test.instances.len(),
        teacher_fingerprint: outcome.teacher_fingerprint.clone(),
        student_fingerprint: outcome.student.fingerprint(),
        reported: eval.metrics.reported(),
        metrics: eval.metrics,
    };
    write(&dir.join("metrics.json"), serde_json::to_string_pretty(&record)?)?;
    fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(RunBundle {
        record,
        log: outcome.log,
        curve,
        dir,
    })
}

/// Warm-start, freeze, train and evaluate `spec.variant` for one seed.
pub fn run_experiment(spec: &ExperimentSpec, seed: u64) -> Result<RunBundle> {
    spec.validate()?;
    let splits = Splits::load(spec)?;
    let warm = warm_start(spec, seed, &splits.train)?;
    run_from_warm(spec, spec.variant, seed, &warm, &splits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    /// Per-seed metrics in seed order.
    pub runs: Vec<RunMetrics>,
    pub mean: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    pub curves: BTreeMap<String, Vec<ConsistencyPoint>>,
}

fn metric_map(m: &RunMetrics) -> [(&'static str, f64); 5] {
    [
        ("acc", m.acc),
        ("noisy", m.noisy),
        ("gsr", m.gsr),
        ("crs", m.crs),
        ("f1_avg", m.f1_avg),
    ]
}

impl GridReport {
    pub fn row(&self, v: Variant) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn mean(&self, v: Variant, metric: &str) -> Option<f64> {
        self.row(v)?.mean.get(metric).copied()
    }

    /// Mean scores per variant (x100) with gains over the GRPO-only row.
    pub fn table(&self) -> String {
        let base = |m: &str| self.mean(Variant::GrpoOnly, m);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:>7} {:>7} {:>7} {:>7}   {:>9} {:>9}",
            "variant", "Acc", "Noisy", "GSR", "CRS", "dNoisy", "dGSR"
        );
        for row in &self.rows {
            let g = |m: &str| row.mean[m] * 100.0;
            let gain = |m: &str| {
                base(m).map_or("-".to_string(), |b| format!("{:+.2}", (row.mean[m] - b) * 100.0))
            };
            let _ = writeln!(
                s,
                "{:<14} {:>7.2} {:>7.2} {:>7.2} {:>7.2}   {:>9} {:>9}",
                row.variant.to_string(),
                g("acc"),
                g("noisy"),
                g("gsr"),
                g("crs"),
                gain("noisy"),
                gain("gsr")
            );
        }
        s
    }
}

/// Every variant over every seed. The warm start is shared across variants
/// of a seed.
pub fn run_variant_grid(spec: &ExperimentSpec, variants: &[Variant]) -> Result<GridReport> {
    spec.validate()?;
    let splits = Splits::load(spec)?;
    let mut runs: BTreeMap<Variant, Vec<RunMetrics>> = BTreeMap::new();
    let mut curves = BTreeMap::new();
    for &seed in &spec.seeds {
        let warm = warm_start(spec, seed, &splits.train)?;
        for &v in variants {
            let bundle = run_from_warm(spec, v, seed, &warm, &splits)?;
            curves.insert(format!("{v}/seed-{seed}"), bundle.curve);
            runs.entry(v).or_default().push(bundle.record.metrics);
        }
    }
    let rows = variants
        .iter()
        .map(|&v| {
            let list = runs.remove(&v).unwrap_or_default();
            let mut mean = BTreeMap::new();
            for m in &list {
                for (k, x) in metric_map(m) {
                    *mean.entry(k.to_string()).or_insert(0.0) += x / list.len() as f64;
                }
            }
            GridRow {
                variant: v,
                seeds: spec.seeds.clone(),
                runs: list,
                mean,
            }
        })
        .collect();
    let report = GridReport { rows, curves };
    fs::create_dir_all(&spec.out_dir).map_err(|e| Error::io(&spec.out_dir, e))?;
    write(&spec.out_dir.join("grid.json"), serde_json::to_string_pretty(&report)?)?;
    write(&spec.out_dir.join("grid.txt"), report.table())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_force_weights() {
        let mut cfg = TrainConfig::default();
        Variant::GrpoOnly.apply(&mut cfg);
        assert_eq!((cfg.lambda_distill, cfg.beta, cfg.lambda_policy), (0.0, 0.0, 1.0));
        let mut cfg = TrainConfig::default();
        Variant::DistillOnly.apply(&mut cfg);
        assert_eq!((cfg.lambda_policy, cfg.lambda_distill), (0.0, 1.0));
        assert!(!Variant::Initial.trains());
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn spec_reads_key_values() {
        let kv = KeyValues::parse(
            "variant = grpo_only\ntrain = a/train.jsonl\nseeds = 1,2,3\nsteps = 50\nbeta = 0.25\neval_snrs = -10",
        )
        .unwrap();
        let mut spec = ExperimentSpec::default();
        spec.apply(&kv, Path::new("/base")).unwrap();
        assert_eq!(spec.variant, Variant::GrpoOnly);
        assert_eq!(spec.train_path, PathBuf::from("/base/a/train.jsonl"));
        assert_eq!(spec.seeds, vec![1, 2, 3]);
        assert_eq!(spec.steps, 50);
        assert_eq!(spec.train.beta, 0.25);
        assert_eq!(spec.eval_snrs, vec![-10.0]);
        assert_eq!(spec.config_for(Variant::GrpoOnly, 7).beta, 0.0);
        assert_eq!(spec.config_for(Variant::GrpoOnly, 7).seed, 7);
    }

    #[test]
    fn curve_needs_two_checkpoints() {
        let p = PolicyParams::zeros(PolicyShape::default());
        let loader = crate::audio::MemoryLoader::default();
        assert!(consistency_curve(&[(0, p)], &[], &loader).is_err());
    }
}
