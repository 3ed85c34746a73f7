use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mfdconv::config::RunConfig;
use mfdconv::diagnostics::{variant_grad_check, LAYER_TOLERANCE};
use mfdconv::dynconv::ConvVariant;
use mfdconv::eval::render_table;
use mfdconv::features::{synth_generate, Split, SplitCounts, SynthConfig};
use mfdconv::train::{train, TrainedModel};
use mfdconv::Error;

#[derive(Parser)]
#[command(name = "mfdconv", version, about = "Frequency dynamic convolution for sound event detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled corpus.
    SynthData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        clips_per_split: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 10.0)]
        clip_seconds: f64,
    },
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `section.key=value`, may be repeated.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a checkpoint on one split of a corpus.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "validation")]
        split: Split,
        /// Also write the summary table here.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Dump the per-frequency attention maps of one layer for one clip.
    InspectAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        /// Zero-based conv block index.
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient check of one conv variant.
    GradCheck {
        #[arg(long)]
        variant: ConvVariant,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale the layer's backward pass to test the checker itself.
        #[arg(long, hide = true)]
        inject_fault: Option<f64>,
    },
}

/// Failures that carry their own exit code.
enum Failure {
    Lib(Error),
    GradCheck,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::GradCheck) => ExitCode::from(3),
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Io(_) => 2,
                Error::Numerical(_) => 3,
                _ => 1,
            })
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::SynthData { seed, out, clips_per_split, classes, clip_seconds } => {
            let cfg = SynthConfig {
                seed,
                counts: SplitCounts::uniform(clips_per_split),
                classes,
                clip_seconds,
                ..SynthConfig::default()
            };
            let summary = synth_generate(&cfg, &out)?;
            print!("{}", summary.describe());
        }
        Command::Train { config, overrides } => {
            let text = std::fs::read_to_string(&config)?;
            let cfg = RunConfig::from_text(&text, &overrides)?;
            let outcome = train(&cfg)?;
            let last = outcome.metrics.last().map_or(f64::NAN, |m| m.loss_total);
            println!("trained {} steps, final loss {last:.6}", outcome.total_steps);
            match &outcome.best_report {
                Some(r) => {
                    let (p1, p2, f1) = r.summary();
                    println!(
                        "best validation at step {}: PSDS1-like {p1:.4}, PSDS2-like {p2:.4}, F1 {f1:.4}",
                        outcome.best_step
                    );
                }
                None => println!("no validation clips; kept the final model"),
            }
            println!("artifacts in {}", cfg.out.display());
        }
        Command::Evaluate { checkpoint, data, report, split, table } => {
            let trained = TrainedModel::load(&checkpoint)?;
            let scores = trained.evaluate(&data, split)?;
            write_file(&report, &scores.to_json()?)?;
            let name = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model").replace(' ', "_");
            let rendered = render_table(&[(&name, &scores)]);
            if let Some(path) = table {
                write_file(&path, &rendered)?;
            }
            print!("{rendered}");
        }
        Command::InspectAttn { checkpoint, clip, layer, out } => {
            let trained = TrainedModel::load(&checkpoint)?;
            let features = trained.clip_features(&clip)?;
            let maps = trained.model.attention_maps(&trained.store, &features, layer)?;
            write_file(&out, &maps.to_csv())?;
            println!("wrote {} frequency rows to {}", maps.freqs(), out.display());
        }
        Command::GradCheck { variant, seed, inject_fault } => {
            let report = variant_grad_check(variant, seed, inject_fault)?;
            let verdict = if report.passes(LAYER_TOLERANCE) { "PASS" } else { "FAIL" };
            println!(
                "{variant} seed {seed}: max relative error {:.3e} over {} coordinates (tolerance {LAYER_TOLERANCE:e}) {verdict}",
                report.max_rel_error, report.coordinates
            );
            if verdict == "FAIL" {
                let (point, index) = report.worst;
                println!(
                    "worst coordinate: tensor {point} element {index}, analytic {:.6e}, numeric {:.6e}",
                    report.worst_analytic, report.worst_numeric
                );
                return Err(Failure::GradCheck);
            }
        }
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}
