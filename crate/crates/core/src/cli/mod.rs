//! `higfa` command line: one subcommand per pipeline stage, all driven by a
//! single configuration file and a single seed.

mod config;
mod selftest;

pub use config::{known_keys, load_config, parse_config, render, CliConfig, ConfigError};
pub use selftest::{run_selftest, Check};

use std::error::Error;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::contour::GrayImage;
use crate::guidance::{GuidanceTrace, Phase};
use crate::harness::{
    ablation_arms, augment_seed, average_traces, averaged_csv, averaged_svg, emit_plots, fit_decoder, mixed_accuracy,
    run_experiment, seed_benchmark, train_indices, train_seed_classifier, train_seed_denoiser, trace_svg, ArmGroup,
    GuidanceMode, SeedModels,
};
use crate::models::{Classifier, Decoder, Denoiser};
use crate::synthbench::{synthetic_needed, SyntheticDataset, SyntheticSample};

type StageResult = Result<(), Box<dyn Error>>;

#[derive(Debug, Parser)]
#[command(name = "higfa", version, about = "Guided-diffusion augmentation lab on small synthetic images")]
struct Cli {
    /// Experiment configuration file; missing keys keep their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed of every random choice.
    #[arg(long, global = true, env = "HIGFA_SEED", default_value_t = 0)]
    seed: u64,
    /// Upper bound on parallel grid cells.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset directory written by gen-dataset; generated from the seed
    /// when absent.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic benchmark to PGM files and a manifest.
    GenDataset {
        #[arg(long, default_value = "higfa-out/dataset")]
        out: PathBuf,
    },
    /// Train the conditional denoiser.
    TrainDenoiser {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "higfa-out/models")]
        out: PathBuf,
    },
    /// Fit the decoder and train the guidance classifier.
    TrainClassifier {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "higfa-out/models")]
        out: PathBuf,
    },
    /// Generate synthetic training images with their guidance traces.
    Augment {
        #[command(flatten)]
        data: DataArgs,
        /// Directory with denoiser.bin (and classifier.bin, decoder.bin);
        /// models are trained from the seed when absent.
        #[arg(long, value_name = "DIR")]
        models: Option<PathBuf>,
        #[arg(long, default_value = "higfa")]
        mode: GuidanceMode,
        #[arg(long, default_value = "higfa-out/augment")]
        out: PathBuf,
    },
    /// Score a downstream classifier trained on real plus synthetic images.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Output directory of augment; real images only when absent.
        #[arg(long, value_name = "DIR")]
        synthetic: Option<PathBuf>,
        /// Synthetic share of the training mixture.
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long, default_value = "higfa-out/eval")]
        out: PathBuf,
    },
    /// Run the mode comparison and the scale and step sweeps over all seeds.
    Ablate {
        #[arg(long)]
        no_scale_sweep: bool,
        #[arg(long)]
        no_step_sweep: bool,
        #[arg(long, default_value = "higfa-out/ablate")]
        out: PathBuf,
    },
    /// Chart guidance traces (a CSV file or a directory of them).
    TracePlot {
        #[arg(long, value_name = "PATH")]
        traces: PathBuf,
        /// Activation step marked on the charts; defaults to the configured
        /// n_s.
        #[arg(long)]
        n_s: Option<usize>,
        #[arg(long, default_value = "higfa-out/trace-plot")]
        out: PathBuf,
    },
    /// Check the exactness properties and print PASS/FAIL per property.
    Selftest,
}

/// Runs the command line and returns the process exit code: 0 on success, 1
/// on a usage or configuration error, 2 when a stage fails.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{}", e.render());
                    1
                }
            };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    let mut config = match load_config(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    if let Some(j) = cli.jobs {
        config.experiment.jobs = j;
    }
    match dispatch(&cli, &config) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = e.source();
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            2
        }
    }
}

fn dispatch(cli: &Cli, config: &CliConfig) -> Result<i32, Box<dyn Error>> {
    let seed = cli.seed;
    match &cli.command {
        Command::GenDataset { out } => gen_dataset(config, seed, out)?,
        Command::TrainDenoiser { data, out } => train_denoiser_stage(config, seed, data, out)?,
        Command::TrainClassifier { data, out } => train_classifier_stage(config, seed, data, out)?,
        Command::Augment { data, models, mode, out } => augment(config, seed, data, models.as_deref(), *mode, out)?,
        Command::Eval {
            data,
            synthetic,
            ratio,
            out,
        } => eval(config, seed, data, synthetic.as_deref(), ratio.unwrap_or(config.ratio), out)?,
        Command::Ablate {
            no_scale_sweep,
            no_step_sweep,
            out,
        } => ablate(config, seed, !no_scale_sweep, !no_step_sweep, out)?,
        Command::TracePlot { traces, n_s, out } => {
            trace_plot(traces, n_s.unwrap_or(config.experiment.guidance.n_s), out)?
        }
        Command::Selftest => {
            let checks = run_selftest(seed);
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(if checks.iter().all(|c| c.passed) { 0 } else { 2 });
        }
    }
    Ok(0)
}

fn dataset(config: &CliConfig, seed: u64, data: &DataArgs) -> Result<SyntheticDataset, Box<dyn Error>> {
    Ok(match &data.data {
        Some(dir) => SyntheticDataset::load(dir).map_err(|e| format!("loading dataset {}: {e}", dir.display()))?,
        None => seed_benchmark(&config.experiment, seed)?,
    })
}

fn write_csv(path: &Path, header: &str, values: &[f64]) -> std::io::Result<()> {
    let mut out = format!("{header}\n");
    for (i, v) in values.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i + 1, crate::guidance::format_sig9(*v));
    }
    fs::write(path, out)
}

fn gen_dataset(config: &CliConfig, seed: u64, out: &Path) -> StageResult {
    let d = seed_benchmark(&config.experiment, seed)?;
    d.save(out)?;
    println!(
        "{} images ({} train, {} val, {} test) -> {}",
        d.len(),
        d.splits.train.len(),
        d.splits.val.len(),
        d.splits.test.len(),
        out.display()
    );
    Ok(())
}

fn train_denoiser_stage(config: &CliConfig, seed: u64, data: &DataArgs, out: &Path) -> StageResult {
    let d = dataset(config, seed, data)?;
    let train = train_indices(&config.experiment, &d);
    let (model, losses) = train_seed_denoiser(&config.experiment, &d, &train, seed)?;
    fs::create_dir_all(out)?;
    model.save(&out.join("denoiser.bin"))?;
    write_csv(&out.join("denoiser_loss.csv"), "epoch,loss", &losses)?;
    println!(
        "denoiser: {} parameters, final loss {:.5} -> {}",
        model.parameter_count(),
        losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn train_classifier_stage(config: &CliConfig, seed: u64, data: &DataArgs, out: &Path) -> StageResult {
    let d = dataset(config, seed, data)?;
    let train = train_indices(&config.experiment, &d);
    let decoder = fit_decoder(&config.experiment, &d, &train)?;
    let (model, losses) = train_seed_classifier(&config.experiment, &d, &train, &decoder, seed)?;
    fs::create_dir_all(out)?;
    model.save(&out.join("classifier.bin"))?;
    decoder.save(&out.join("decoder.bin"))?;
    write_csv(&out.join("classifier_loss.csv"), "epoch,loss", &losses)?;
    let val = &d.splits.val;
    let acc = model.accuracy(&decoder.decode(&d.tensor(val))?, &d.labels_of(val))?;
    println!(
        "guidance classifier ({} decoder): validation accuracy {acc:.4} -> {}",
        decoder.mode_name(),
        out.display()
    );
    Ok(())
}

fn load_models(dir: &Path) -> Result<(Denoiser, Option<Classifier>, Decoder), Box<dyn Error>> {
    let denoiser = Denoiser::load(&dir.join("denoiser.bin"))?;
    let classifier = dir
        .join("classifier.bin")
        .exists()
        .then(|| Classifier::load(&dir.join("classifier.bin")))
        .transpose()?;
    let decoder = if dir.join("decoder.bin").exists() {
        Decoder::load(&dir.join("decoder.bin"))?
    } else {
        Decoder::Identity
    };
    Ok((denoiser, classifier, decoder))
}

#[derive(Serialize)]
struct AugmentSummary {
    mode: GuidanceMode,
    seed: u64,
    sources: usize,
    per_image: usize,
    samples: usize,
    ratio: f64,
    synthetic_needed: usize,
    mean_cumulative_s_cls: f64,
    mean_classifier_evaluations: f64,
}

fn augment(
    config: &CliConfig,
    seed: u64,
    data: &DataArgs,
    models_dir: Option<&Path>,
    mode: GuidanceMode,
    out: &Path,
) -> StageResult {
    let cfg = &config.experiment;
    cfg.validate()?;
    let d = dataset(config, seed, data)?;
    let train = train_indices(cfg, &d);
    let (denoiser, classifier, decoder) = match models_dir {
        Some(dir) => {
            let (den, cls, dec) =
                load_models(dir).map_err(|e| format!("loading models from {}: {e}", dir.display()))?;
            (Some(den), cls, dec)
        }
        None => {
            let decoder = fit_decoder(cfg, &d, &train)?;
            let needs = mode.sampler_config(&cfg.guidance);
            let denoiser = match needs {
                Some(_) => Some(train_seed_denoiser(cfg, &d, &train, seed)?.0),
                None => None,
            };
            let classifier = match needs {
                Some((g, _)) if g.uses_classifier(cfg.schedule.inference_steps) => {
                    Some(train_seed_classifier(cfg, &d, &train, &decoder, seed)?.0)
                }
                _ => None,
            };
            (denoiser, classifier, decoder)
        }
    };
    let models = SeedModels {
        dataset: d,
        train,
        denoiser,
        classifier,
        decoder,
        timings: Vec::new(),
    };
    let aug = augment_seed(cfg, &models, &cfg.guidance, mode, seed)?;

    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("traces"))?;
    fs::write(out.join("config.cfg"), render(config))?;
    let mut rows = String::from("sample_id,source,label,image,cumulative_s_cls,classifier_evaluations,final_confidence\n");
    for (s, trace) in aug.samples.iter().zip(&aug.traces) {
        let source = models.train[s.sample_id / cfg.per_image];
        let rel = format!("images/{}/{:05}.pgm", s.label, s.sample_id);
        let dir = out.join("images").join(s.label.to_string());
        fs::create_dir_all(&dir)?;
        s.image.save_pgm(&out.join(&rel))?;
        fs::write(out.join("traces").join(format!("{:05}.csv", s.sample_id)), trace.to_csv())?;
        let last = trace.records.iter().rev().find_map(|r| r.confidence);
        let _ = writeln!(
            rows,
            "{},{source},{},{rel},{},{},{}",
            s.sample_id,
            s.label,
            crate::guidance::format_sig9(trace.cumulative_s_cls()),
            trace.classifier_evaluations(),
            last.map(crate::guidance::format_sig9).unwrap_or_default()
        );
    }
    fs::write(out.join("samples.csv"), rows)?;
    let n = aug.traces.len().max(1) as f64;
    let summary = AugmentSummary {
        mode,
        seed,
        sources: models.train.len(),
        per_image: cfg.per_image,
        samples: aug.samples.len(),
        ratio: config.ratio,
        synthetic_needed: synthetic_needed(models.train.len(), config.ratio),
        mean_cumulative_s_cls: aug.traces.iter().map(GuidanceTrace::cumulative_s_cls).sum::<f64>() / n,
        mean_classifier_evaluations: aug.traces.iter().map(|t| t.classifier_evaluations() as f64).sum::<f64>() / n,
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("{} {mode} samples -> {}", aug.samples.len(), out.display());
    Ok(())
}

/// Reads the samples written by `augment`.
fn load_synthetic(dir: &Path) -> Result<Vec<SyntheticSample>, Box<dyn Error>> {
    let text = fs::read_to_string(dir.join("samples.csv"))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 4 {
            return Err(format!("samples.csv line {}: expected at least 4 fields", n + 1).into());
        }
        out.push(SyntheticSample {
            image: GrayImage::load_pgm(&dir.join(f[3]))?,
            label: f[2].parse()?,
            sample_id: f[0].parse()?,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct EvalSummary {
    seed: u64,
    ratio: f64,
    real: usize,
    synthetic: usize,
    test: usize,
    accuracy: f64,
}

fn eval(config: &CliConfig, seed: u64, data: &DataArgs, synthetic: Option<&Path>, ratio: f64, out: &Path) -> StageResult {
    let d = dataset(config, seed, data)?;
    let train = train_indices(&config.experiment, &d);
    let (pool, ratio) = match synthetic {
        Some(dir) => (load_synthetic(dir)?, ratio),
        None => {
            info!("no synthetic images given: scoring the real training split alone");
            (Vec::new(), 0.0)
        }
    };
    let (accuracy, n_syn) = mixed_accuracy(&config.experiment, &d, &train, &pool, ratio, seed)?;
    fs::create_dir_all(out)?;
    let summary = EvalSummary {
        seed,
        ratio,
        real: if ratio >= 1.0 { 0 } else { train.len() },
        synthetic: n_syn,
        test: d.splits.test.len(),
        accuracy,
    };
    fs::write(out.join("eval.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("accuracy {accuracy:.4} at ratio {ratio} ({n_syn} synthetic)");
    Ok(())
}

fn ablate(config: &CliConfig, seed: u64, scales: bool, steps: bool, out: &Path) -> StageResult {
    let mut cfg = config.experiment_for(seed);
    let scale_grid: &[f64] = if scales { &config.scale_grid } else { &[] };
    let step_grid: &[usize] = if steps { &config.step_grid } else { &[] };
    cfg.extra_arms = ablation_arms(&cfg.guidance, scale_grid, step_grid);
    let report = run_experiment(&cfg)?;
    // the least and most classifier-driven sample of every guided mode
    let mut examples = Vec::new();
    for arm in report.arms.iter().filter(|a| a.group == ArmGroup::Mode) {
        let Some(traces) = report.traces.get(&arm.name) else { continue };
        let dynamic: Vec<&GuidanceTrace> = traces
            .iter()
            .filter(|t| t.records.iter().any(|r| r.phase == Phase::Dynamic))
            .collect();
        let by_cls = |a: &&&GuidanceTrace, b: &&&GuidanceTrace| a.cumulative_s_cls().total_cmp(&b.cumulative_s_cls());
        if let (Some(lo), Some(hi)) = (dynamic.iter().min_by(by_cls), dynamic.iter().max_by(by_cls)) {
            examples.push((format!("{}_easiest", arm.name), (*lo).clone(), arm.guidance.n_s));
            examples.push((format!("{}_hardest", arm.name), (*hi).clone(), arm.guidance.n_s));
        }
    }
    emit_plots(&report, &examples, out)?;
    fs::write(out.join("config.cfg"), render(config))?;
    let failed = report.failed_cells().count();
    for row in &report.medians {
        match row.median {
            Some(m) => println!("{:<16} ratio {:<4} median {m:.4} over {} seeds", row.arm, row.ratio, row.seeds),
            None => println!("{:<16} ratio {:<4} no successful seed", row.arm, row.ratio),
        }
    }
    if failed > 0 {
        log::warn!("{failed} cells failed; see report.json");
    }
    println!("report -> {}", out.display());
    Ok(())
}

fn trace_plot(path: &Path, n_s: usize, out: &Path) -> StageResult {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        v.retain(|p| p.extension().is_some_and(|e| e == "csv"));
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(format!("no trace csv files in {}", path.display()).into());
    }
    fs::create_dir_all(out)?;
    let mut traces = Vec::with_capacity(files.len());
    for (k, f) in files.iter().enumerate() {
        let trace = GuidanceTrace::from_csv(k, &fs::read_to_string(f)?)
            .map_err(|e| format!("{}: {e}", f.display()))?;
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| k.to_string());
        fs::write(out.join(format!("{stem}.svg")), trace_svg(&stem, &trace, n_s))?;
        traces.push(trace);
    }
    if traces.len() > 1 {
        let avg = average_traces("mean", n_s, &traces);
        fs::write(out.join("mean.csv"), averaged_csv(&avg))?;
        fs::write(out.join("mean.svg"), averaged_svg(&avg))?;
    }
    println!("{} traces charted -> {}", traces.len(), out.display());
    Ok(())
}
