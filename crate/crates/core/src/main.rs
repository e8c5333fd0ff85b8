use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use macrecon::datagen::{build_dataset, build_dataset_from_images, ingest_image, PhantomSpec, PhantomStyle, SplitCounts};
use macrecon::harness::{run_experiment, run_unseen_sweep, train_stage, ExperimentConfig, ExperimentKind};
use macrecon::model::{load_checkpoint, ModelMode};
use macrecon::sampling::{make_mask, undersample, MaskPattern, SamplingMask};
use macrecon::tensor::{read_mact, write_mact, DType};
use macrecon::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "macrecon", version, about = "Context-conditioned cascaded MRI reconstruction")]
struct Cli {
    /// Suppress progress lines on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Style {
    Cardiac,
    Brain,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pattern {
    Cartesian,
    Gaussian,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Mac,
    Static,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset, or ingest external MACT images.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 100)]
        train: usize,
        #[arg(long, default_value_t = 20)]
        val: usize,
        #[arg(long, default_value_t = 20)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Style::Cardiac)]
        style: Style,
        /// JSON phantom spec; overrides --size, --seed and --style.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// External images to ingest instead of generating phantoms.
        #[arg(long, num_args = 1..)]
        ingest: Vec<PathBuf>,
        /// Study tag written to the manifest of an ingested dataset.
        #[arg(long, default_value = "cardiac")]
        study_tag: String,
    },
    /// Generate an undersampling mask (MACT plus JSON sidecar).
    GenMask {
        #[arg(long, value_enum)]
        pattern: Pattern,
        #[arg(long, default_value_t = 64)]
        height: usize,
        /// Defaults to the height.
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        r: f64,
        #[arg(long)]
        center_fraction: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrospectively undersample an image with a mask.
    Undersample {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Zero-filled image output.
        #[arg(long)]
        out: PathBuf,
        /// Measured k-space output, `(2, H, W)`.
        #[arg(long)]
        kspace: Option<PathBuf>,
    },
    /// Train one stage of the MAC model or of the joint STATIC model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long, value_enum, default_value_t = Mode::Mac)]
        mode: Mode,
    },
    /// Reconstruct one image from its undersampled acquisition.
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Context vector, comma separated (e.g. `4` or `4,2`); MAC models only.
        #[arg(long, value_delimiter = ',')]
        gamma: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Optional 8-bit PGM rendering of the output.
        #[arg(long)]
        preview: Option<PathBuf>,
    },
    /// Train missing models and evaluate the whole experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate existing checkpoints; never trains.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate on the unseen-acceleration sweep grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
}

fn read_image(path: &Path) -> Result<Tensor> {
    let t = read_mact(path)?;
    match t.shape() {
        [h, w] | [1, h, w] => {
            let (h, w) = (*h, *w);
            t.reshape(&[h, w])
        }
        other => Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected an (H, W) or (1, H, W) image, got {other:?}"),
        }),
    }
}

fn report(quiet: bool) -> impl FnMut(&str) {
    move |line: &str| {
        if !quiet {
            eprintln!("{line}");
        }
    }
}

fn print_json(v: serde_json::Value) {
    println!("{v}");
}

fn run(cli: Cli) -> Result<()> {
    let mut log = report(cli.quiet);
    match cli.command {
        Command::GenData {
            out,
            size,
            train,
            val,
            test,
            seed,
            style,
            spec,
            ingest,
            study_tag,
        } => {
            let counts = SplitCounts { train, val, test };
            let manifest = if ingest.is_empty() {
                let spec = match spec {
                    Some(p) => {
                        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                    }
                    None => PhantomSpec {
                        size,
                        seed,
                        style: match style {
                            Style::Cardiac => PhantomStyle::Cardiac,
                            Style::Brain => PhantomStyle::Brain,
                        },
                        ..PhantomSpec::default()
                    },
                };
                build_dataset(&spec, counts, &out)?
            } else {
                let images = ingest.iter().map(ingest_image).collect::<Result<Vec<_>>>()?;
                build_dataset_from_images(&images, counts, &study_tag, &out)?
            };
            print_json(json!({"dataset": out, "size": manifest.size, "counts": manifest.counts}));
        }
        Command::GenMask {
            pattern,
            height,
            width,
            r,
            center_fraction,
            seed,
            out,
        } => {
            let pattern = match pattern {
                Pattern::Cartesian => MaskPattern::Cartesian,
                Pattern::Gaussian => MaskPattern::Gaussian,
            };
            let cf = center_fraction.unwrap_or(pattern.default_center_fraction());
            let mask = make_mask(pattern, height, width.unwrap_or(height), r, cf, seed)?;
            mask.save(&out)?;
            print_json(json!({"mask": out, "requested_r": r, "achieved_r": mask.achieved_acceleration(), "samples": mask.count()}));
        }
        Command::Undersample {
            image,
            mask,
            out,
            kspace,
        } => {
            let img = read_image(&image)?;
            let mask = SamplingMask::load(&mask)?;
            let (y, x_u) = undersample(&img, &mask)?;
            write_mact(&out, &x_u, DType::F64)?;
            if let Some(k) = &kspace {
                write_mact(k, &y.to_tensor(), DType::F64)?;
            }
            print_json(json!({"zero_filled": out, "kspace": kspace}));
        }
        Command::Train { config, stage, mode } => {
            let cfg = ExperimentConfig::load(&config)?;
            let mode = match mode {
                Mode::Mac => ModelMode::Mac,
                Mode::Static => ModelMode::Static,
            };
            let path = train_stage(&cfg, stage, mode, &mut log)?;
            print_json(json!({"checkpoint": path, "stage": stage}));
        }
        Command::Reconstruct {
            model,
            image,
            mask,
            gamma,
            out,
            preview,
        } => {
            let model = load_checkpoint(&model)?;
            let img = read_image(&image)?;
            let mask = SamplingMask::load(&mask)?;
            let (y, x_u) = undersample(&img, &mask)?;
            let [h, w] = mask.dims();
            let gamma = match model.mode() {
                ModelMode::Mac if gamma.is_empty() => {
                    return Err(Error::InvalidArgument("MAC models need --gamma".into()));
                }
                ModelMode::Mac => Some(Tensor::from_slice(&gamma)?),
                ModelMode::Static => None,
            };
            let rec = model.forward(gamma.as_ref(), &x_u.reshape(&[1, 1, h, w])?, &[y], &mask)?;
            let rec = rec.reshape(&[1, h, w])?;
            write_mact(&out, &rec, DType::F64)?;
            if let Some(p) = &preview {
                let bytes = macrecon::harness::pgm_bytes(&rec)?;
                std::fs::write(p, bytes).map_err(|e| Error::io(p, e))?;
            }
            print_json(json!({"reconstruction": out}));
        }
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            if cfg.kind == ExperimentKind::UnseenSweep {
                let o = run_unseen_sweep(&cfg, &mut log)?;
                print_json(json!({"results": cfg.output_dir.join("results.csv"), "unseen": o.unseen, "excluded": o.excluded}));
            } else {
                let o = run_experiment(&cfg, &mut log)?;
                print_json(json!({"results": cfg.output_dir.join("results.csv"), "checkpoints": o.checkpoints}));
            }
        }
        Command::Evaluate { config } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.train_missing = false;
            let o = run_experiment(&cfg, &mut log)?;
            print_json(json!({"results": cfg.output_dir.join("results.csv"), "rows": o.table.rows.len()}));
        }
        Command::Sweep { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let o = run_unseen_sweep(&cfg, &mut log)?;
            print_json(json!({
                "results": cfg.output_dir.join("results.csv"),
                "per_image": cfg.output_dir.join("sweep.csv"),
                "unseen": o.unseen,
                "excluded": o.excluded,
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({"error": "usage", "message": e.to_string().trim_end()}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if matches!(e, Error::Config(_) | Error::InvalidArgument(_)) { 2 } else { 1 };
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::from(code)
        }
    }
}
