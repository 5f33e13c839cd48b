//! `icodoa`: dataset generation, SRP maps, training, evaluation, inference
//! and self-tests for the icosahedral DOA pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use icodoa::acoustic_sim::{generate_dataset, DatasetInfo, SceneRanges};
use icodoa::grad_engine::{AdamConfig, Curriculum};
use icodoa::harness::selftest::{run_suite, Suite};
use icodoa::harness::{self, EvalConfig, MapFormat, TrainConfig, METHOD_BASELINE, METHOD_MODEL};
use icodoa::ico_grid::IcoGrid;
use icodoa::srp_phat::{compute_maps, read_wav, FramingConfig, MapConfig, MicArray, DEFAULT_SPEED_OF_SOUND};

#[derive(Parser)]
#[command(name = "icodoa", version, about = "Sound source DOA estimation on icosahedral grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run built-in checks; exits nonzero if any fails.
    Selftest {
        #[arg(long, default_value = "all", value_parser = ["grid", "equivariance", "gradients", "srp", "all"])]
        suite: String,
    },
    /// Simulate a dataset of moving-source trajectories.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_traj: usize,
        #[arg(long, default_value_t = 20.0)]
        duration: f64,
        #[arg(long, default_value_t = 0.2)]
        t60_min: f64,
        #[arg(long, default_value_t = 1.3)]
        t60_max: f64,
        #[arg(long, default_value_t = 5.0)]
        snr_min: f64,
        #[arg(long, default_value_t = 30.0)]
        snr_max: f64,
        #[arg(long)]
        seed: u64,
        /// Microphone positions (x,y,z rows); the 12-mic LOCATA-like array by default.
        #[arg(long)]
        array: Option<PathBuf>,
    },
    /// Compute SRP-PHAT maps of a recording.
    Map {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        array: PathBuf,
        #[arg(long)]
        r: u32,
        /// A `.csv` file, or a directory of per-frame PGM images.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        r: u32,
        #[arg(long)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 5)]
        batch: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        ckpt: PathBuf,
        /// Per-epoch CSV log; next to the checkpoint by default.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Epochs at the fixed SNR before random SNRs; half the epochs by default.
        #[arg(long)]
        fixed_epochs: Option<usize>,
        #[arg(long, default_value_t = 30.0)]
        fixed_snr: f64,
        #[arg(long, default_value_t = 5.0)]
        snr_min: f64,
        #[arg(long, default_value_t = 30.0)]
        snr_max: f64,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// RMSAE of a model and the SRP-argmax baseline on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        skip_frames: usize,
        #[arg(long)]
        exclude_silent: bool,
        /// Run record (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-frame DOA estimates of a recording.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        array: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the output probability maps (`.csv` or a PGM directory).
        #[arg(long)]
        probs: Option<PathBuf>,
    },
}

struct Failure {
    kind: &'static str,
    message: String,
}

impl From<icodoa::Error> for Failure {
    fn from(e: icodoa::Error) -> Self {
        Self { kind: e.kind(), message: e.to_string() }
    }
}

fn load_array(path: &Path, fs: f64) -> Result<MicArray, Failure> {
    Ok(MicArray::from_csv(path, DEFAULT_SPEED_OF_SOUND, fs)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Selftest { suite } => {
            let results = run_suite(suite.parse::<Suite>()?)?;
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Failure { kind: "check_failed", message: failed.join(", ") });
            }
        }
        Command::GenData { out, n_traj, duration, t60_min, t60_max, snr_min, snr_max, seed, array } => {
            let ranges = SceneRanges { t60: (t60_min, t60_max), snr_db: (snr_min, snr_max), duration, ..SceneRanges::default() };
            let array = match array {
                Some(p) => MicArray::from_csv(&p, ranges.c, ranges.fs)?,
                None => MicArray::locata_like(),
            };
            let f = FramingConfig::default();
            let info = DatasetInfo { seed, n_traj, ranges, k: f.k, hop: f.hop, fft_len: f.fft_len };
            let dirs = generate_dataset(&out, &info, &array)?;
            println!("wrote {} trajectories to {}", dirs.len(), out.display());
        }
        Command::Map { wav, array, r, out } => {
            let (audio, fs) = read_wav(&wav)?;
            let array = load_array(&array, fs)?;
            let grid = IcoGrid::new(r)?;
            let maps = compute_maps(&audio, &array, &grid, &MapConfig::default())?;
            harness::export_maps(&maps.maps, &grid, &out, MapFormat::from_path(&out))?;
            println!("wrote {} maps to {}", maps.n_frames(), out.display());
        }
        Command::Train { data, r, epochs, lr, batch, seed, ckpt, log, fixed_epochs, fixed_snr, snr_min, snr_max, resume } => {
            let curriculum = Curriculum {
                total_epochs: epochs,
                fixed_until: fixed_epochs.unwrap_or(epochs / 2),
                fixed_snr_db: fixed_snr,
                random_snr_db: (snr_min, snr_max),
            };
            let cfg = TrainConfig { r, epochs, batch, seed, adam: AdamConfig { lr, ..AdamConfig::default() }, curriculum };
            let log = log.unwrap_or_else(|| ckpt.with_extension("log.csv"));
            let rows = harness::run_training(&data, &cfg, &ckpt, &log, resume)?;
            if let Some(last) = rows.last() {
                println!("epoch {}: mean loss {:.6}", last.epoch, last.mean_loss);
            }
            println!("checkpoint {}, log {}", ckpt.display(), log.display());
        }
        Command::Eval { ckpt, data, skip_frames, exclude_silent, out } => {
            let cfg = EvalConfig { skip_initial_frames: skip_frames, exclude_silent };
            let record = harness::evaluate(&ckpt, &data, &cfg)?;
            record.save(&out)?;
            for name in [METHOD_MODEL, METHOD_BASELINE] {
                if let Some(m) = record.method(name) {
                    let a = m.aggregate;
                    println!("{name}: RMSAE mean {:.2} median {:.2} std {:.2} deg", a.mean, a.median, a.std);
                }
            }
        }
        Command::Infer { ckpt, wav, array, out, probs } => {
            let (params, ctx) = harness::load_model(&ckpt)?;
            let (audio, fs) = read_wav(&wav)?;
            let array = load_array(&array, fs)?;
            let framing = FramingConfig::default();
            let (maps, est) = harness::infer(&audio, &array, &params, &ctx, framing)?;
            harness::write_doa_csv(&out, &framing, fs, &est.v, &maps.active)?;
            if let Some(p) = probs {
                let grid = ctx.grid(ctx.top());
                let pm: Vec<Vec<f64>> = est.probs.iter().map(|f| f.iter().map(|&v| v as f64).collect()).collect();
                harness::export_maps(&pm, grid, &p, MapFormat::from_path(&p))?;
            }
            println!("wrote {} frames to {}", est.v.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", serde_json::json!({ "error": f.kind, "message": f.message }));
            ExitCode::FAILURE
        }
    }
}
