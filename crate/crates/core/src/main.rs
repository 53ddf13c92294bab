use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use echodistill::config::KeyValues;
use echodistill::experiment::{
    curve_csv, evaluate, run_experiment, run_variant_grid, warm_start, ExperimentSpec, Splits, Variant,
};
use echodistill::grounding::{self, grounding_histogram, grounding_report, GroundingReport};
use echodistill::instance::Dataset;
use echodistill::plot;
use echodistill::policy::PolicyParams;
use echodistill::synthgen::{gen_dataset, GenSpec};
use echodistill::{Error, Result};

#[derive(Parser)]
#[command(name = "echodistill", version, about = "Noisy-student GRPO with clean-teacher distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed list with a single seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset
    Gen(Common),
    /// Supervised warm start on clean clips; writes a checkpoint
    Warmstart(Common),
    /// Warm start, train one variant and evaluate it
    Train(Common),
    /// Score a checkpoint on the test split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Untreated model for the Noisy and net-correction references
        #[arg(long)]
        base: PathBuf,
    },
    /// Window-ablation grounding diagnostics for a checkpoint
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Variant grid over all seeds with tables and plots
    Report(Common),
}

fn key_values(common: &Common) -> Result<(KeyValues, PathBuf)> {
    match &common.config {
        Some(path) => {
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            Ok((KeyValues::load(path)?, base))
        }
        None => Ok((KeyValues::default(), PathBuf::new())),
    }
}

fn experiment_spec(common: &Common) -> Result<(ExperimentSpec, KeyValues)> {
    let (kv, base) = key_values(common)?;
    let mut spec = ExperimentSpec::default();
    spec.apply(&kv, &base)?;
    if let Some(seed) = common.seed {
        spec.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        spec.out_dir = out.clone();
    }
    if let Some(v) = common.variant {
        spec.variant = v;
    }
    spec.validate()?;
    Ok((spec, kv))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn gen(common: &Common) -> Result<()> {
    let (kv, _) = key_values(common)?;
    let mut spec = GenSpec::default();
    spec.apply(&kv)?;
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    let manifest = gen_dataset(&spec, &out)?;
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(())
}

fn warmstart(common: &Common) -> Result<()> {
    let (spec, _) = experiment_spec(common)?;
    let seed = spec.seeds[0];
    let splits = Splits::load(&spec)?;
    let warm = warm_start(&spec, seed, &splits.train)?;
    let path = common
        .out
        .clone()
        .unwrap_or_else(|| spec.out_dir.join(format!("warm-seed-{seed}.ckpt")));
    warm.save(&path)?;
    println!("{} {}", path.display(), warm.fingerprint());
    Ok(())
}

fn train(common: &Common) -> Result<()> {
    let (spec, _) = experiment_spec(common)?;
    for &seed in &spec.seeds {
        let bundle = run_experiment(&spec, seed)?;
        print!("{}", bundle.record.metrics.table(&format!("{}/{seed}", spec.variant)));
        println!("run directory: {}", bundle.dir.display());
    }
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, base: &Path) -> Result<()> {
    let (spec, _) = experiment_spec(common)?;
    let student = PolicyParams::load(checkpoint)?;
    let base = PolicyParams::load(base)?;
    let mut test = Dataset::load(&spec.test_path)?;
    test.instances = echodistill::experiment::filter_snr(&test.instances, &spec.eval_snrs);
    let e = evaluate(&student, &base, &test.instances, &test.loader)?;
    let out = common.out.clone().unwrap_or_else(|| spec.out_dir.join("eval"));
    e.noisy.write_jsonl(&out.join("predictions_noisy.jsonl"))?;
    e.clean.write_jsonl(&out.join("predictions_clean.jsonl"))?;
    write(&out.join("metrics.json"), serde_json::to_string_pretty(&e.metrics.reported())?)?;
    print!("{}", e.metrics.table("eval"));
    println!("{}", serde_json::to_string_pretty(&e.metrics.reported())?);
    Ok(())
}

fn ablate(common: &Common, checkpoint: &Path) -> Result<()> {
    let (spec, kv) = experiment_spec(common)?;
    let mut window_size = grounding::DEFAULT_WINDOW_SIZE;
    let mut stride = grounding::DEFAULT_STRIDE;
    let mut bins = 20usize;
    let mut side = String::from("clean");
    kv.set("window_size", &mut window_size)?;
    kv.set("stride", &mut stride)?;
    kv.set("bins", &mut bins)?;
    kv.set("ablate_audio", &mut side)?;
    if bins < 2 || window_size == 0 || stride == 0 {
        return Err(Error::Config("bins must be >= 2; window_size and stride positive".into()));
    }
    let params = PolicyParams::load(checkpoint)?;
    let test = Dataset::load(&spec.test_path)?;
    let reports: Vec<GroundingReport> = test
        .instances
        .par_iter()
        .map(|inst| {
            let path = match side.as_str() {
                "noisy" => &inst.noisy_audio_ref,
                _ => &inst.clean_audio_ref,
            };
            let clip = echodistill::audio::AudioLoader::load(&test.loader, path)?;
            if window_size > clip.frame_count() {
                return Err(Error::Config("window_size exceeds the clip length".into()));
            }
            grounding_report(&params, inst, &clip, window_size, stride)
        })
        .collect::<Result<_>>()?;
    let (d_hist, g_hist) = grounding_histogram(&reports, bins);
    let out = common.out.clone().unwrap_or_else(|| spec.out_dir.join("grounding"));
    write(&out.join("grounding.json"), serde_json::to_string_pretty(&reports)?)?;
    write(&out.join("d_hist.csv"), d_hist.to_csv())?;
    write(&out.join("g_hist.csv"), g_hist.to_csv())?;
    write(&out.join("d_hist.svg"), plot::histogram_chart("window dependency d", "d", &d_hist))?;
    write(&out.join("g_hist.svg"), plot::histogram_chart("audio anchor g", "g", &g_hist))?;
    println!("window_start mean_d");
    for (start, d) in grounding::mean_window_effects(&reports) {
        println!("{start:>12} {d:.6}");
    }
    let g = reports.iter().map(|r| r.audio_anchor).sum::<f64>() / reports.len().max(1) as f64;
    println!("mean g = {g:.6} over {} instances", reports.len());
    Ok(())
}

fn report(common: &Common) -> Result<()> {
    let (spec, _) = experiment_spec(common)?;
    let variants = [
        Variant::Initial,
        Variant::GrpoOnly,
        Variant::DistillOnly,
        Variant::EchoDistill,
    ];
    let grid = run_variant_grid(&spec, &variants)?;
    print!("{}", grid.table());
    let series: Vec<(String, Vec<(f64, f64)>)> = grid
        .curves
        .iter()
        .filter(|(name, pts)| !name.starts_with("initial") && !pts.is_empty())
        .map(|(name, pts)| {
            (
                name.clone(),
                pts.iter().map(|p| (p.step as f64, p.consistency)).collect(),
            )
        })
        .collect();
    for (name, pts) in &grid.curves {
        write(
            &spec.out_dir.join("curves").join(format!("{}.csv", name.replace('/', "_"))),
            curve_csv(pts),
        )?;
    }
    write(
        &spec.out_dir.join("consistency.svg"),
        plot::line_chart("noisy-to-clean consistency", "step", "consistency", &series),
    )?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(c) => gen(&c),
        Command::Warmstart(c) => warmstart(&c),
        Command::Train(c) => train(&c),
        Command::Eval {
            common,
            checkpoint,
            base,
        } => eval(&common, &checkpoint, &base),
        Command::Ablate { common, checkpoint } => ablate(&common, &checkpoint),
        Command::Report(c) => report(&c),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
