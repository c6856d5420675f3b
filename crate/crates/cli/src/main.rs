use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use vblc::codec::{read_ppm, write_ppm};
use vblc::config::{parse_config, RunManifest};
use vblc::error::{Error, Result};
use vblc::eval::{evaluate, list_files};
use vblc::gradcheck::run_gradcheck;
use vblc::synth::{gen_dataset, SceneSpec};
use vblc::trainer::{train, Ablation, TrainConfig};
use vblc::vbm::{boost_with_report, VbmConfig};

const GRADCHECK_TOL: f64 = 1e-5;
const MANIFEST: &str = "run_manifest.txt";

#[derive(Parser)]
#[command(name = "vblc", version, about = "Visibility boost and logit-constrained self-training on synthetic adverse scenes")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic clean-source / adverse-target benchmark.
    Synth(SynthArgs),
    /// Boost visibility of PPM images and report per-image statistics.
    Enhance(EnhanceArgs),
    /// Self-train a model from a labeled source and unlabeled target directory.
    Train(TrainArgs),
    /// Score a checkpoint against labeled images.
    Eval(EvalArgs),
    /// Compare analytic loss gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    source_n: usize,
    #[arg(long, default_value_t = 200)]
    target_n: usize,
    /// Square scene side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct EnhanceArgs {
    /// A PPM file or a directory of them.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4.0)]
    gamma: f64,
    #[arg(long, default_value_t = 7)]
    radius: usize,
    #[arg(long, default_value_t = 0.25)]
    night_thresh: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// key=value file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `ablation` key of the config.
    #[arg(long, value_parser = ["source-only", "ce-st", "vbm-ce", "vblc"])]
    ablation: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 19)]
    classes: usize,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn settings(pairs: &[(&str, String)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn synth(args: &SynthArgs) -> Result<ExitCode> {
    let spec = SceneSpec { height: args.size, width: args.size, ..Default::default() };
    spec.validate()?;
    let manifest = RunManifest::new(
        "synth",
        settings(&[
            ("source_n", args.source_n.to_string()),
            ("target_n", args.target_n.to_string()),
            ("size", args.size.to_string()),
            ("seed", args.seed.to_string()),
        ]),
        args.seed,
    );
    manifest.write(&args.out.join(MANIFEST))?;
    let rows = gen_dataset(&spec, args.source_n, args.target_n, args.seed, &args.out)?;
    println!("wrote {} files to {}", rows.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn enhance(args: &EnhanceArgs) -> Result<ExitCode> {
    let cfg = VbmConfig {
        gamma: args.gamma,
        patch_radius: args.radius,
        night_luminance_threshold: args.night_thresh,
        ..Default::default()
    };
    cfg.validate()?;
    let inputs = if args.input.is_dir() { list_files(&args.input, "ppm")? } else { vec![args.input.clone()] };
    if inputs.is_empty() {
        return Err(Error::Invalid(format!("no .ppm images in {}", args.input.display())));
    }
    let manifest = RunManifest::new(
        "enhance",
        settings(&[
            ("in", args.input.display().to_string()),
            ("gamma", cfg.gamma.to_string()),
            ("patch_radius", cfg.patch_radius.to_string()),
            ("light_sample_count", cfg.light_sample_count.to_string()),
            ("night_luminance_threshold", cfg.night_luminance_threshold.to_string()),
            ("t_floor", cfg.t_floor.to_string()),
        ]),
        0,
    );
    manifest.write(&args.out.join(MANIFEST))?;

    let mut csv = String::from("filename,night_flag,mean_sat_before,mean_sat_after,omega_s\n");
    for path in &inputs {
        let report = boost_with_report(&read_ppm(path)?, &cfg);
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        write_ppm(&args.out.join(&name), &report.image)?;
        writeln!(
            csv,
            "{name},{},{:.6},{:.6},{:.6}",
            u8::from(report.night),
            report.mean_sat_before,
            report.mean_sat_after,
            report.omega_s
        )
        .expect("writing to a String");
    }
    let csv_path = args.out.join("enhance.csv");
    fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

fn run_train(args: &TrainArgs) -> Result<ExitCode> {
    let mut cfg = match &args.config {
        Some(path) => parse_config(path)?,
        None => TrainConfig::default(),
    };
    if let Some(a) = &args.ablation {
        cfg.ablation = a.parse::<Ablation>()?;
    }
    let state = train(&cfg, &args.source, &args.target, &args.out)?;
    println!("trained {} iterations ({}) into {}", state.iter, cfg.ablation.name(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "eval".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn run_eval(args: &EvalArgs) -> Result<ExitCode> {
    let manifest = RunManifest::new(
        "eval",
        settings(&[
            ("checkpoint", args.checkpoint.display().to_string()),
            ("images", args.images.display().to_string()),
            ("labels", args.labels.display().to_string()),
        ]),
        0,
    );
    manifest.write(&sibling(&args.out, MANIFEST))?;
    let report = evaluate(&args.checkpoint, &args.images, &args.labels, &args.out)?;
    println!("mIoU {:.4} over {} pixels", report.miou, report.confusion.total());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(args: &GradcheckArgs) -> Result<ExitCode> {
    let manifest = RunManifest::new(
        "gradcheck",
        settings(&[("classes", args.classes.to_string()), ("trials", args.trials.to_string())]),
        args.seed,
    );
    print!("{}", manifest.render());
    let report = run_gradcheck(args.classes, args.trials, args.seed)?;
    println!("ce max_rel_err {:.3e}", report.max_rel_ce);
    println!("lc max_rel_err {:.3e}", report.max_rel_lc);
    if report.passes(GRADCHECK_TOL) {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: gradient mismatch above {GRADCHECK_TOL:e}");
        Ok(ExitCode::from(1))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Enhance(a) => enhance(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
