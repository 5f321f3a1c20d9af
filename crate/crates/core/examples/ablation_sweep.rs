//! A reduced ablation: two seeds, all guidance modes, a short classifier
//! scale sweep in both strategies, with plots written to the directory given
//! as the first argument (default `ablation-out`).

use std::path::PathBuf;

use higfa::harness::{ablation_arms, emit_plots, run_experiment, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "ablation-out".into()));
    let mut cfg = ExperimentConfig {
        seeds: vec![0, 1],
        ratios: vec![0.4, 1.0],
        ..ExperimentConfig::default()
    };
    cfg.denoiser_training.epochs = 100;
    cfg.extra_arms = ablation_arms(&cfg.guidance, &[0.0, 5.0, 20.0], &[]);
    let report = run_experiment(&cfg)?;
    for row in &report.medians {
        println!("{:<14} r={:<4} median {:?}", row.arm, row.ratio, row.median);
    }
    let files = emit_plots(&report, &[], &out)?;
    println!("{} files in {}", files.len(), out.display());
    Ok(())
}
