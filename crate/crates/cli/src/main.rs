use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shaftpose::geometry::ShaftPose;
use shaftpose::gradsuite::registered_cases;
use shaftpose_cli::{
    grad_check_report, run_eval, run_gen_data, run_infer, run_train, tune_allocator, CliError,
    InferOptions, RunConfig, VariantKey,
};

#[derive(Parser)]
#[command(name = "shaftpose", version, about = "Synthetic shaft detection and pose estimation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<u64>,
        #[arg(long)]
        first_index: Option<u64>,
        #[arg(long)]
        pose_stripped_fraction: Option<f64>,
        #[arg(long)]
        two_shaft_probability: Option<f64>,
    },
    /// Train a detector.
    Train {
        /// Dataset directory; repeat to concatenate several.
        #[arg(long = "data")]
        data: Vec<PathBuf>,
        /// Run directory for the loss log and checkpoints.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Option<VariantKey>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        base_lr: Option<f64>,
        #[arg(long)]
        checkpoint_every: Option<u64>,
        /// Disable additive pixel noise during augmentation.
        #[arg(long)]
        no_noise: bool,
        /// Continue from a checkpoint written with the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Require the checkpoint to be this variant.
        #[arg(long, value_enum)]
        variant: Option<VariantKey>,
    },
    /// Detect shafts in one image and draw an overlay.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Draw this pose instead of the model's detections: x,y,z,pitch,yaw.
        #[arg(long, value_parser = parse_pose)]
        pose_override: Option<ShaftPose>,
        /// Scale the image to the model input size.
        #[arg(long)]
        resize: bool,
    },
    /// Finite-difference check of every differentiable op and the detector loss.
    GradCheck,
}

fn parse_pose(s: &str) -> Result<ShaftPose, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let arr: [f64; 5] = v
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected 5 comma-separated values, got {}", v.len()))?;
    Ok(ShaftPose::from_array(arr))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let from_file = cli.common.config.is_some();
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.common.seed);
    match cli.command {
        Command::GenData {
            out,
            count,
            first_index,
            pose_stripped_fraction,
            two_shaft_probability,
        } => {
            set(&mut cfg.count, count);
            set(&mut cfg.first_index, first_index);
            set(&mut cfg.pose_stripped_fraction, pose_stripped_fraction);
            set(&mut cfg.two_shaft_probability, two_shaft_probability);
            let s = run_gen_data(&cfg, &out)?;
            eprintln!(
                "wrote {} images ({} shafts, {} pose-stripped) to {}",
                s.count,
                s.shafts,
                s.pose_stripped_images,
                out.display()
            );
        }
        Command::Train {
            data,
            out,
            variant,
            steps,
            batch_size,
            base_lr,
            checkpoint_every,
            no_noise,
            resume,
        } => {
            if !data.is_empty() {
                cfg.train_data = data;
            }
            set(&mut cfg.run_dir, out);
            set(&mut cfg.variant, variant);
            set(&mut cfg.steps, steps);
            set(&mut cfg.batch_size, batch_size);
            set(&mut cfg.base_lr, base_lr);
            set(&mut cfg.checkpoint_every, checkpoint_every);
            if no_noise {
                cfg.noise_probability = 0.0;
            }
            let every = (cfg.steps / 20).max(1);
            let total = cfg.steps;
            run_train(&cfg, resume.as_deref(), |r| {
                if r.step % every == 0 || r.step == total {
                    eprintln!(
                        "step {:>6}/{total}  lr {:.2e}  conf {:.4}  bbox {:.4}  pose {:.4}  total {:.4}",
                        r.step, r.lr, r.conf, r.bbox, r.pose, r.total
                    );
                }
            })?;
            eprintln!("final checkpoint: {}", cfg.run_dir.join("final.ckpt").display());
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            variant,
        } => {
            set(&mut cfg.eval_data, data);
            let explicit = from_file || variant.is_some();
            set(&mut cfg.variant, variant);
            let expected = explicit.then(|| cfg.detector());
            let report = run_eval(&cfg, &checkpoint, expected.as_ref(), &cfg.eval_data, &out)?;
            print!("{}", report.to_table());
        }
        Command::Infer {
            checkpoint,
            image,
            out,
            pose_override,
            resize,
        } => {
            let opts = InferOptions {
                checkpoint,
                pose_override,
                resize,
            };
            let f = run_infer(&cfg, &image, &opts, &out)?;
            eprintln!("{} detections written to {}", f.detections.len(), out.display());
        }
        Command::GradCheck => {
            let mut stdout = std::io::stdout();
            let ok = grad_check_report(&registered_cases(), &mut stdout).map_err(|source| {
                CliError::Io {
                    path: PathBuf::from("<stdout>"),
                    source,
                }
            })?;
            if !ok {
                return Err(CliError::GradCheck("at least one case exceeded its tolerance".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tune_allocator();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
