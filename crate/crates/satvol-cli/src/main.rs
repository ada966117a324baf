//! Command-line surface of the volume-monitoring pipeline.
//!
//! Exit codes: 0 on full success, 2 when some dates were skipped, 1 on a
//! fatal error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use satvol::config::{parse_config, PipelineConfig};
use satvol::pipeline;
use satvol::synth::{generate_dataset, AcqParams, DatasetParams};

#[derive(Parser)]
#[command(name = "satvol", version, about = "RPC refinement, DSM reconstruction and surface volume tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Args)]
struct GlobalArgs {
    /// Configuration file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override for all stochastic stages.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for date-level parallelism (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Chattier progress output.
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Refine one date's RPCs by rotation-only bundle adjustment.
    Refine { date_dir: PathBuf },
    /// Reconstruct one date's DSM from dense pair correspondences.
    Reconstruct { date_dir: PathBuf },
    /// Align all reconstructed DSMs of a series to the first date.
    Align { root: PathBuf },
    /// Compute the volume series (and the weight regression when a
    /// weights.csv is present).
    Volume { root: PathBuf },
    /// Full run: refine + reconstruct every date, align, measure volumes.
    Pipeline { root: PathBuf },
    /// Generate a synthetic dataset with ground truth.
    Synth {
        out_dir: PathBuf,
        /// Number of acquisition dates.
        #[arg(long, default_value_t = 6)]
        dates: usize,
        /// Scenes per date.
        #[arg(long, default_value_t = 4)]
        scenes: usize,
        /// Gaussian piles in the study area.
        #[arg(long, default_value_t = 3)]
        piles: usize,
        /// Side of the square study area, meters.
        #[arg(long, default_value_t = 700.0)]
        extent: f64,
    },
}

fn load_config(global: &GlobalArgs) -> Result<PipelineConfig, String> {
    let mut config = match &global.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("{}: {e}", path.display()))?;
            parse_config(&text).map_err(|e| format!("{}: {e}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    if let Some(workers) = global.workers {
        config.workers = workers;
    }
    Ok(config)
}

fn init_workers(config: &PipelineConfig) {
    if config.workers > 0 {
        // Ignore failure: the global pool can only be set once (tests,
        // repeated calls).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(config.workers).build_global();
    }
}

fn run(cli: &Cli) -> Result<ExitCode, String> {
    let config = load_config(&cli.global)?;
    init_workers(&config);
    let verbose = cli.global.verbose;

    match &cli.command {
        Command::Refine { date_dir } => {
            let record = pipeline::run_refine(date_dir, &config).map_err(|e| e.to_string())?;
            println!(
                "{}: {} scenes, reference {}, {} tracks, RMS {:.3} -> {:.3} px ({} iterations)",
                record.date,
                record.scenes.len(),
                record.reference,
                record.tracks,
                record.initial_rms_px,
                record.final_rms_px,
                record.iterations
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Reconstruct { date_dir } => {
            let record = pipeline::run_reconstruct(date_dir, &config).map_err(|e| e.to_string())?;
            println!(
                "{}: {} pairs merged, coverage {:.1}%, median pair stddev {:.3} m",
                record.date,
                record.pairs,
                100.0 * record.coverage,
                record.median_pair_stddev_m
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Align { root } => {
            let records = pipeline::run_align(root, &config).map_err(|e| e.to_string())?;
            for r in &records {
                println!(
                    "{}: de {:.3} m, dn {:.3} m, dh {:.3} m{}",
                    r.date,
                    r.de,
                    r.dn,
                    r.dh,
                    if r.peak_on_border { " (peak on search border)" } else { "" }
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Volume { root } => {
            let volumes = pipeline::run_volume(root, &config).map_err(|e| e.to_string())?;
            for v in &volumes {
                println!("{}: {:.1} m3 (nodata fraction {:.4})", v.date, v.volume_m3, v.nodata_fraction);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Pipeline { root } => {
            let outcome = pipeline::run_series(root, &config).map_err(|e| e.to_string())?;
            if verbose {
                for d in &outcome.manifest.dates {
                    match (&d.refine, &d.skipped) {
                        (Some(r), _) => println!(
                            "{}: refined ({} tracks, RMS {:.3} px)",
                            d.date, r.tracks, r.final_rms_px
                        ),
                        (None, Some(reason)) => println!("{}: skipped: {reason}", d.date),
                        _ => {}
                    }
                }
            }
            for v in &outcome.manifest.volumes {
                println!("{}: {:.1} m3", v.date, v.volume_m3);
            }
            if let Some(reg) = &outcome.manifest.regression {
                println!("regression: a = {:.4}, b = {:.4} (test RMS {:.4} Mt)", reg.a, reg.b, reg.rms_test);
            }
            if outcome.skipped.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                for (date, reason) in &outcome.skipped {
                    eprintln!("skipped {date}: {reason}");
                }
                Ok(ExitCode::from(2))
            }
        }
        Command::Synth { out_dir, dates, scenes, piles, extent } => {
            let (scene_len_n, overlap_fraction) = satvol::synth::strip_plan(*extent, *scenes);
            let params = DatasetParams {
                seed: config.seed,
                n_dates: *dates,
                n_scenes: *scenes,
                n_piles: *piles,
                extent: *extent,
                acq: AcqParams {
                    n_scenes: *scenes,
                    scene_len_n,
                    scene_len_e: extent + 250.0,
                    overlap_fraction,
                    ..AcqParams::default()
                },
                ..DatasetParams::default()
            };
            std::fs::create_dir_all(out_dir).map_err(|e| format!("{}: {e}", out_dir.display()))?;
            let truth = generate_dataset(out_dir, &params).map_err(|e| e.to_string())?;
            println!(
                "wrote {} dates under {} (ground_truth.json, weights.csv, config.cfg included)",
                truth.dates.len(),
                out_dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
