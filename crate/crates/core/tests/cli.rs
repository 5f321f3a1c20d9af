use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
# reduced sizes so every stage runs in about a second
[synthbench]
per_class = 16

[diffusion]
inference_steps = 10

[guidance]
n_s = 6

[models]
denoiser_epochs = 3
classifier_epochs = 5
downstream_epochs = 5
";

fn higfa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_higfa"))
        .args(args)
        .env_remove("HIGFA_SEED")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn usage_errors_exit_with_one() {
    for args in [&["frobnicate"][..], &[], &["augment", "--no-such-flag"]] {
        let o = higfa(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"), "{args:?}");
    }
    let o = higfa(&["eval", "--ratio", "lots"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lots"));
    let o = higfa(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for sub in [
        "gen-dataset",
        "train-denoiser",
        "train-classifier",
        "augment",
        "eval",
        "ablate",
        "trace-plot",
        "selftest",
    ] {
        assert!(String::from_utf8_lossy(&o.stdout).contains(sub), "{sub}");
    }
}

#[test]
fn bad_config_is_a_usage_error_and_missing_input_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "[guidance]\ns_cls = 5\nwarp_speed = 9\n").unwrap();
    let o = higfa(&["selftest", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warp_speed"));

    let missing = dir.path().join("nowhere");
    let o = higfa(&["eval", "-q", "--data", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn selftest_passes_every_property() {
    let o = higfa(&["selftest", "-q"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS ")).count(), 8, "{stdout}");
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn omitted_values_fall_back_to_defaults_and_are_logged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("partial.cfg");
    fs::write(&cfg, "[guidance]\ns_cls = 5\n").unwrap();
    let o = higfa(&["selftest", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let log = String::from_utf8_lossy(&o.stderr);
    for line in [
        "[guidance] s_cfg = 7.5",
        "[guidance] s_ctl = 1",
        "[guidance] n_s = 20",
        "[diffusion] inference_steps = 30",
        "[contour] canny_low = 120",
        "[contour] canny_high = 200",
        "[contour] binarize_threshold = 100",
        "[harness] per_image = 2",
        "[harness] ratio = 0.4",
    ] {
        assert!(log.contains(&format!("default used: {line}")), "{line}\n{log}");
    }
    assert!(!log.contains("default used: [guidance] s_cls"));
}

#[test]
fn augment_twice_gives_identical_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ref.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = higfa(&[
            "augment",
            "-q",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        tree(&out)
    };
    let a = run("a");
    let b = run("b");
    assert!(a.contains_key("summary.json") && a.contains_key("samples.csv"));
    assert_eq!(a.keys().filter(|k| k.ends_with(".pgm")).count(), 64);
    assert_eq!(a, b);

    // a different seed changes the images
    let out = dir.path().join("c");
    let o = higfa(&["augment", "-q", "--config", cfg.to_str().unwrap(), "--seed", "8", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(tree(&out)["images/0/00000.pgm"], a["images/0/00000.pgm"]);
}

#[test]
fn environment_seed_applies_only_without_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ref.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let gen = |name: &str, seed_flag: Option<&str>, env_seed: Option<&str>| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_higfa"));
        cmd.args(["gen-dataset", "-q", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        cmd.env_remove("HIGFA_SEED").stdout(std::process::Stdio::null());
        if let Some(s) = seed_flag {
            cmd.args(["--seed", s]);
        }
        if let Some(s) = env_seed {
            cmd.env("HIGFA_SEED", s);
        }
        assert!(cmd.status().unwrap().success());
        tree(&out)
    };
    let flag3 = gen("f3", Some("3"), None);
    let env3 = gen("e3", None, Some("3"));
    let both = gen("b", Some("3"), Some("4"));
    let env4 = gen("e4", None, Some("4"));
    assert_eq!(flag3, env3);
    assert_eq!(flag3, both);
    assert_ne!(flag3, env4);
}

#[test]
fn staged_pipeline_matches_single_augment_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ref.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
    let c = cfg.to_str().unwrap();
    let ok = |args: &[&str]| {
        let o = higfa(args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    ok(&["gen-dataset", "-q", "--config", c, "--seed", "5", "--out", &p("data")]);
    assert!(dir.path().join("data/manifest.json").exists());
    ok(&["train-denoiser", "-q", "--config", c, "--seed", "5", "--data", &p("data"), "--out", &p("models")]);
    ok(&["train-classifier", "-q", "--config", c, "--seed", "5", "--data", &p("data"), "--out", &p("models")]);
    for f in ["denoiser.bin", "classifier.bin", "decoder.bin"] {
        assert!(dir.path().join("models").join(f).exists(), "{f}");
    }
    let inputs = (tree(&dir.path().join("data")), tree(&dir.path().join("models")));
    ok(&["augment", "-q", "--config", c, "--seed", "5", "--data", &p("data"), "--models", &p("models"), "--out", &p("staged")]);
    ok(&["augment", "-q", "--config", c, "--seed", "5", "--out", &p("direct")]);
    assert_eq!(tree(&dir.path().join("staged")), tree(&dir.path().join("direct")));

    ok(&["eval", "-q", "--config", c, "--seed", "5", "--synthetic", &p("staged"), "--out", &p("eval")]);
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("eval/eval.json")).unwrap()).unwrap();
    assert_eq!(eval["ratio"], 0.4);
    assert_eq!(eval["real"], 32);
    assert_eq!(eval["synthetic"], 21);
    let acc = eval["accuracy"].as_f64().unwrap();
    // stages only write to their own output directory
    assert_eq!((tree(&dir.path().join("data")), tree(&dir.path().join("models"))), inputs);
    assert!((0.0..=1.0).contains(&acc));

    ok(&["trace-plot", "-q", "--config", c, "--traces", &p("staged/traces"), "--out", &p("plots")]);
    let plots = tree(&dir.path().join("plots"));
    assert!(plots.contains_key("mean.svg") && plots.contains_key("00000.svg"));
    let svg = String::from_utf8_lossy(&plots["mean.svg"]);
    assert!(svg.contains("<svg") && !svg.contains("<script"));
}

#[test]
fn ablate_writes_the_report_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ref.cfg");
    fs::write(
        &cfg,
        format!("{SMALL}\n[harness]\nseed_count = 2\nmodes = none,higfa\nscale_grid = 0,5\nstep_grid = 6\nratios = 0.4,1.0\n"),
    )
    .unwrap();
    let out = dir.path().join("ablate");
    let o = higfa(&["ablate", "-q", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let files = tree(&out);
    for f in [
        "report.json",
        "cells.csv",
        "index.json",
        "accuracy_vs_scls.csv",
        "accuracy_vs_scls.svg",
        "accuracy_vs_ratio.csv",
        "accuracy_vs_ratio.svg",
        "scales_mean_higfa.svg",
        "scales_higfa_hardest.csv",
        "config.cfg",
    ] {
        assert!(files.contains_key(f), "{f}: {:?}", files.keys().collect::<Vec<_>>());
    }
    let report: serde_json::Value = serde_json::from_slice(&files["report.json"]).unwrap();
    // none, higfa, adaptive_s0, fixed_s0, adaptive_s5, fixed_s5, ns6 over 2 ratios and 2 seeds
    assert_eq!(report["cells"].as_array().unwrap().len(), 7 * 2 * 2);
}
