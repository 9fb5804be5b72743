use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use matcnn::checkpoint::Checkpoint;
use matcnn::dataio::{load_gray, IMAGE_EXTENSIONS, load_pair_dir, sample_test_pairs, NormalizedImage};
use matcnn::harness::{
    emit_plots, evaluate_directory, fuse_directory, prepare_patches, run_trials, sweep, train_from_config, MethodReports,
    TrainConfig, TrialSpec, SWEEP_EPOCHS,
};
use matcnn::metrics::read_report_csv;
use matcnn::saliency::{generate_mask_or_empty, MaskMethod, DEFAULT_QUANTILE};
use matcnn::{Error, Result};

/// Infrared and visible image fusion: training, inference and evaluation.
#[derive(Parser, Debug)]
#[command(name = "matcnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MaskArg {
    Quantile,
    Otsu,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the fusion network from a TOML config (MATCNN_* overrides apply).
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fuse every pair under <in>/ir and <in>/vis.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Write 0/255 saliency masks for the infrared images in a directory.
    Mask {
        /// Directory of infrared images, or a pair directory with `ir/`.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "quantile")]
        method: MaskArg,
        #[arg(long, default_value_t = DEFAULT_QUANTILE)]
        quantile: f64,
    },
    /// Score fused images against their sources and write a metrics CSV.
    Evaluate {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        vis: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Repeated random-sampling evaluation of a checkpoint.
    Trials {
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ckpt: PathBuf,
        /// Pair directory with `ir/` and `vis/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Train over an alpha x gamma grid with beta fixed at 1.
    Sweep {
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        alpha: Vec<f64>,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        gamma: Vec<f64>,
        /// Base training config; its data directory supplies the patches.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = SWEEP_EPOCHS)]
        epochs: usize,
        /// Number of source pairs fused for the contact sheet and metrics.
        #[arg(long, default_value_t = 3)]
        eval_pairs: usize,
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Per-metric charts and the averaged table from one or more metric CSVs.
    Plot {
        /// Metric CSV per method; the file stem is the series label.
        #[arg(long, num_args = 1.., required = true)]
        csv: Vec<PathBuf>,
        #[arg(long = "out")]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config } => {
            let cfg = TrainConfig::load(&config)?;
            let s = train_from_config::<f32>(&cfg)?;
            println!(
                "trained {} steps on {} patches; mean total loss {:.6} -> {:.6}; best checkpoint {}",
                s.steps,
                s.patches,
                s.first_mean_total().unwrap_or(f64::NAN),
                s.last_mean_total().unwrap_or(f64::NAN),
                s.best_checkpoint.display()
            );
        }
        Command::Fuse { ckpt, input, output } => {
            let m = fuse_directory(&ckpt, &input, &output)?;
            println!(
                "fused {} pairs, skipped {}, in {:.1} ms",
                m.fused.len(),
                m.skipped.len(),
                m.total_runtime_ms
            );
        }
        Command::Mask {
            input,
            output,
            method,
            quantile,
        } => {
            let method = match method {
                MaskArg::Quantile => {
                    if !(quantile > 0.0 && quantile <= 1.0) {
                        return Err(Error::Config(format!("quantile must be in (0, 1], got {quantile}")));
                    }
                    MaskMethod::Quantile { q: quantile }
                }
                MaskArg::Otsu => MaskMethod::Otsu,
            };
            let n = write_masks(&input, &output, &method)?;
            println!("wrote {n} masks to {}", output.display());
        }
        Command::Evaluate { fused, ir, vis, csv } => {
            let rows = evaluate_directory(&fused, &ir, &vis, &csv)?;
            println!("scored {} images into {}", rows.len(), csv.display());
        }
        Command::Trials {
            n,
            pairs,
            seed,
            ckpt,
            data,
            csv,
        } => {
            let spec = TrialSpec {
                n_trials: n,
                pairs_per_trial: pairs,
                base_seed: seed,
            };
            spec.validate()?;
            let weights = Checkpoint::<f32>::load(&ckpt)?.msfm;
            let dataset = load_pair_dir::<f32>(&data)?;
            let table = run_trials(&dataset, &weights, &spec)?;
            table.write_csv(&csv)?;
            let o = table.overall;
            println!(
                "overall EN {:.4} SD {:.4} SF {:.4} VIF {:.4} QABF {:.4} MI {:.4}",
                o.en, o.sd, o.sf, o.vif, o.qabf, o.mi
            );
        }
        Command::Sweep {
            alpha,
            gamma,
            config,
            epochs,
            eval_pairs,
            output,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let dir = cfg
                .data_dir
                .as_ref()
                .ok_or_else(|| Error::Config("data_dir is required".into()))?;
            let pairs = load_pair_dir::<f32>(dir)?;
            let patches = prepare_patches(&pairs, &cfg)?;
            let eval = sample_test_pairs(&pairs, eval_pairs.min(pairs.len()), cfg.seed)?;
            let r = sweep(&alpha, &gamma, &cfg, &patches, &eval, epochs, &output)?;
            println!(
                "{} runs; contact sheet {}; metric grid {}",
                r.cells.len(),
                r.contact_sheet.display(),
                r.metric_grid.display()
            );
        }
        Command::Plot { csv, output } => {
            let mut reports = Vec::with_capacity(csv.len());
            for path in &csv {
                let label = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| path.display().to_string());
                reports.push(MethodReports {
                    label,
                    rows: read_report_csv(path)?,
                });
            }
            let out = emit_plots(&reports, &output)?;
            println!("wrote {} charts and {}", out.charts.len(), out.summary_csv.display());
        }
    }
    Ok(())
}

/// Masks for every image in `input` (or `input/ir`), saved as PNG by stem.
fn write_masks(input: &Path, output: &Path, method: &MaskMethod) -> Result<usize> {
    let ir_dir = if input.join("ir").is_dir() {
        input.join("ir")
    } else {
        input.to_path_buf()
    };
    let read_err = |e: std::io::Error| Error::Io {
        context: format!("listing {}", ir_dir.display()),
        source: e,
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(&ir_dir)
        .map_err(read_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyDataset);
    }
    std::fs::create_dir_all(output).map_err(|e| Error::Io {
        context: format!("creating {}", output.display()),
        source: e,
    })?;
    for f in &files {
        let ir = NormalizedImage::<f32>::from_raw(&load_gray(f)?);
        let mask = generate_mask_or_empty(&ir, method)?;
        let stem = f.file_stem().expect("listed files have names");
        mask.save(&output.join(stem).with_extension("png"))?;
    }
    Ok(files.len())
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}
