//! Trains a denoiser and a guidance classifier on one benchmark seed, then
//! generates one image per class with and without classifier guidance and
//! prints the guidance trace of the first one.

use higfa::contour::canny;
use higfa::guidance::{higfa_sample, SamplerModels};
use higfa::harness::{
    fit_decoder, seed_benchmark, text_condition, train_indices, train_seed_classifier, train_seed_denoiser,
    ExperimentConfig, GuidanceMode,
};
use higfa::synthbench::SIDE;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ExperimentConfig::default();
    cfg.denoiser_training.epochs = 150;
    let seed = 0;
    let d = seed_benchmark(&cfg, seed)?;
    let train = train_indices(&cfg, &d);
    let decoder = fit_decoder(&cfg, &d, &train)?;
    let (denoiser, losses) = train_seed_denoiser(&cfg, &d, &train, seed)?;
    println!("denoiser loss {:.4} -> {:.4}", losses[0], losses[losses.len() - 1]);
    let (classifier, _) = train_seed_classifier(&cfg, &d, &train, &decoder, seed)?;
    let models = SamplerModels {
        denoiser: &denoiser,
        classifier: Some(&classifier),
        decoder: &decoder,
    };
    let schedule = cfg.schedule.build()?;

    for mode in [GuidanceMode::TextContour, GuidanceMode::Higfa] {
        let (g, _) = mode.sampler_config(&cfg.guidance).expect("generative mode");
        let mut hits = 0;
        for class in 0..d.classes() {
            let src = train.iter().copied().find(|&i| d.labels[i] == class).unwrap_or(train[0]);
            let edges = canny(&d.images[src], cfg.contour.canny_low, cfg.contour.canny_high)?;
            let out = higfa_sample(&models, text_condition(&d, src), Some(&edges), class, &g, &schedule, 11)?;
            let predicted = classifier.predict(&decoder.decode(&out.x0)?)?[0];
            hits += usize::from(predicted == class);
            if class == 0 && mode == GuidanceMode::Higfa {
                print!("{}", out.trace.to_csv());
                let img = out.image(SIDE, SIDE)?;
                println!("sample pixel range {:?}", (img.pixels().iter().min(), img.pixels().iter().max()));
            }
        }
        println!("{mode}: guidance classifier agrees with the target on {hits}/{} samples", d.classes());
    }
    Ok(())
}
