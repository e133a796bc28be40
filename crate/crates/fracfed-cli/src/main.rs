//! Command-line front end for the federated backdoor simulator.
//!
//! Exit codes: 0 on success, 2 for configuration/usage errors, 3 for
//! runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fracfed::config::ExperimentConfig;
use fracfed::error::Error;
use fracfed::plots;
use fracfed::runner::{self, SweepAxis};
use fracfed::tensor::Tensor;
use fracfed::trigger::spectral_report;

#[derive(Parser)]
#[command(name = "fracfed", version, about = "Deterministic federated backdoor simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment end to end.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the experiment once per value along one config axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// poison_client_fraction | dp_sigma | architecture
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Report the smallest value whose ASR reaches this target.
        #[arg(long)]
        target_asr: Option<f64>,
    },
    /// Probe all clients against the configured trigger; no training rounds.
    Probe {
        #[arg(long)]
        config: PathBuf,
    },
    /// Materialize the trigger: images plus a spectral report.
    Trigger {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render charts for a recorded run or sweep manifest.
    Plots {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path)?;
    ExperimentConfig::from_json(&text)
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config } => {
            let cfg = load_config(&config)?;
            let output = runner::run_experiment(&cfg)?;
            for r in &output.repeats {
                println!(
                    "seed {}: mta {:.4} asr {:.4} margin {:+.4}",
                    r.seed, r.final_mta, r.final_asr, r.feasibility_margin
                );
            }
            println!("manifest: {}", output.manifest.output_dir.join("manifest.json").display());
        }
        Command::Sweep { config, axis, values, target_asr } => {
            let cfg = load_config(&config)?;
            let axis: SweepAxis = axis.parse()?;
            let output = runner::sweep(&cfg, axis, &values, target_asr)?;
            println!("axis,value,mta,asr,retention,scc");
            for p in &output.summary.points {
                println!(
                    "{axis:?},{},{:.4},{:.4},{:.4},{:.4}",
                    p.value, p.mta, p.asr, p.retention, p.scc
                );
            }
            match (&output.summary.threshold_value, target_asr) {
                (Some(v), Some(t)) => println!("first value reaching asr {t}: {v}"),
                (None, Some(t)) => println!("no value reached asr {t}"),
                _ => {}
            }
            println!("manifest: {}", output.manifest.output_dir.join("manifest.json").display());
        }
        Command::Probe { config } => {
            let cfg = load_config(&config)?;
            println!("{}", runner::PROBES_HEADER);
            for row in runner::probe_only(&cfg)? {
                println!(
                    "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                    row.client_id,
                    row.weight,
                    row.srs_hat,
                    row.scc_hat.unwrap_or(f64::NAN),
                    row.value.unwrap_or(f64::NAN),
                    row.eps_base,
                    row.selected
                );
            }
        }
        Command::Trigger { config, out } => {
            let cfg = load_config(&config)?;
            std::fs::create_dir_all(&out)?;
            let built = cfg.trigger.build()?;
            let ext = if cfg.trigger.template.channels == 1 { "pgm" } else { "ppm" };
            plots::write_image(&built.fractal, &out.join(format!("fractal.{ext}")))?;
            plots::write_image(&built.static_counterpart, &out.join(format!("static.{ext}")))?;
            // Mid-gray reference sample makes the PSNR comparison neutral.
            let gray = Tensor::new(
                built.fractal.shape().to_vec(),
                vec![0.5; built.fractal.len()],
            )?;
            let embedded = built.embed(&gray)?;
            plots::write_image(&embedded, &out.join(format!("embedded.{ext}")))?;
            let delta = embedded.sub(&gray)?;
            let report = spectral_report(&delta, &gray)?;
            std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            println!(
                "dominant bands: {} | psnr {:.2} dB | wrote {}",
                report.dominant_band_count,
                report.psnr,
                out.display()
            );
        }
        Command::Plots { manifest } => {
            for f in plots::emit_plots(&manifest)? {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Serde(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
