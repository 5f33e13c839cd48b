//! Evaluation metrics, the training and evaluation drivers, inference,
//! map export and the self-test suites behind the CLI.

pub mod selftest;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acoustic_sim::{self, read_dataset_info, read_trajectory, simulate, DatasetInfo, ARRAY_FILE};
use crate::doa_model::{self, read_checkpoint, write_checkpoint, DoaOutput, ModelConfig, ModelParams, NamedTensor, NetContext};
use crate::grad_engine::{batch_loss_and_grads, loss_mse, AdamConfig, AdamState, Curriculum, SnrPhase};
use crate::ico_grid::{norm, IcoGrid, Vec3};
use crate::ico_nn::IcoTensor;
use crate::srp_phat::{compute_maps, map_argmax, FramingConfig, MapConfig, MicArray, SrpMapSeq};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub skip_initial_frames: usize,
    /// Count only frames the source was active in.
    pub exclude_silent: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { skip_initial_frames: 5, exclude_silent: false }
    }
}

/// Angle in degrees between the direction of `v` and `u`. An estimate
/// shorter than 1e-9 carries no direction and scores 90 degrees.
pub fn angular_error(v: Vec3, u: Vec3) -> f64 {
    let n = norm(v);
    if !(n >= 1e-9) {
        return 90.0;
    }
    let c = (v[0] * u[0] + v[1] * u[1] + v[2] * u[2]) / n;
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Root mean squared error over the counted frames.
pub fn rmsae(errors: &[f64], active: &[bool], cfg: &EvalConfig) -> Result<f64> {
    if active.len() != errors.len() {
        return Err(Error::Shape { expected: format!("{} activity flags", errors.len()), got: active.len().to_string() });
    }
    let (sum, n) = errors
        .iter()
        .zip(active)
        .skip(cfg.skip_initial_frames)
        .filter(|(_, &a)| a || !cfg.exclude_silent)
        .fold((0.0, 0usize), |(s, n), (e, _)| (s + e * e, n + 1));
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "no frames left after skipping {} of {} (exclude_silent = {})",
            cfg.skip_initial_frames,
            errors.len(),
            cfg.exclude_silent
        )));
    }
    Ok((sum / n as f64).sqrt())
}

/// `(azimuth, elevation)` in degrees: `atan2(y, x)` and `asin(z)` of the
/// normalised direction.
pub fn azimuth_elevation(v: Vec3) -> (f64, f64) {
    let n = norm(v);
    if !(n >= 1e-9) {
        return (0.0, 0.0);
    }
    (v[1].atan2(v[0]).to_degrees(), (v[2] / n).clamp(-1.0, 1.0).asin().to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("no values to aggregate".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let m = s.len() / 2;
        let median = if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) };
        Ok(Self { mean, median, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryScore {
    pub name: String,
    pub seed: u64,
    pub t60: f64,
    pub snr_db: f64,
    pub frames: usize,
    pub rmsae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub trajectories: Vec<TrajectoryScore>,
    pub aggregate: Aggregate,
}

impl MethodResult {
    pub fn new(method: &str, trajectories: Vec<TrajectoryScore>) -> Result<Self> {
        let values: Vec<f64> = trajectories.iter().map(|t| t.rmsae).collect();
        let aggregate = Aggregate::of(&values)?;
        Ok(Self { method: method.into(), trajectories, aggregate })
    }

    /// Whether the stored aggregate follows from the per-trajectory values.
    pub fn is_consistent(&self) -> bool {
        let values: Vec<f64> = self.trajectories.iter().map(|t| t.rmsae).collect();
        Aggregate::of(&values).is_ok_and(|a| a == self.aggregate)
    }
}

/// Everything needed to re-derive the numbers a command reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub results: Vec<MethodResult>,
}

impl RunRecord {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.results.iter().find(|m| m.method == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(format!("cannot serialise run record: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format { kind: "run record", path: path.into(), msg: e.to_string() })
    }
}

/// Dataset trajectories with the array and framing they were rendered with.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub array: MicArray,
    pub dirs: Vec<PathBuf>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let info = read_dataset_info(root)?;
        let array = MicArray::from_csv(&root.join(ARRAY_FILE), info.ranges.c, info.ranges.fs)?;
        let dirs = acoustic_sim::list_trajectories(root)?;
        if dirs.is_empty() {
            return Err(Error::InvalidArgument(format!("no trajectories under {}", root.display())));
        }
        Ok(Self { info, array, dirs })
    }

    pub fn map_config(&self) -> MapConfig {
        MapConfig { framing: self.info.framing(), ..MapConfig::default() }
    }
}

fn dir_name(dir: &Path) -> String {
    dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn to_f32(v: &[Vec3]) -> Vec<[f32; 3]> {
    v.iter().map(|u| [u[0] as f32, u[1] as f32, u[2] as f32]).collect()
}

fn to_f64(v: &[[f32; 3]]) -> Vec<Vec3> {
    v.iter().map(|u| [u[0] as f64, u[1] as f64, u[2] as f64]).collect()
}

/// Per-frame SRP argmax directions. Silent frames repeat the last active
/// estimate; frames before the first active one have no estimate (zero).
pub fn srp_baseline(maps: &SrpMapSeq, grid: &IcoGrid) -> Vec<Vec3> {
    let mut last = [0.0; 3];
    maps.maps
        .iter()
        .zip(&maps.active)
        .map(|(m, &on)| {
            if on {
                last = grid.coord(map_argmax(m, grid));
            }
            last
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub r: u32,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub curriculum: Curriculum,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ModelConfig::new(self.r).validate()?;
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument(format!("epochs and batch must be positive, got {} and {}", self.epochs, self.batch)));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: String,
    pub snr_min: f64,
    pub snr_max: f64,
    pub steps: usize,
    /// Mean of the per-step batch losses.
    pub mean_loss: f64,
    /// Loss of the epoch's first batch before its step and after the epoch.
    pub first_batch_before: f64,
    pub first_batch_after: f64,
}

const LOG_HEADER: &str = "epoch,phase,snr_min,snr_max,steps,mean_loss,first_batch_before,first_batch_after";

impl EpochLog {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.phase, self.snr_min, self.snr_max, self.steps, self.mean_loss, self.first_batch_before, self.first_batch_after
        )
    }

    fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return None;
        }
        Some(Self {
            epoch: f[0].parse().ok()?,
            phase: f[1].to_string(),
            snr_min: f[2].parse().ok()?,
            snr_max: f[3].parse().ok()?,
            steps: f[4].parse().ok()?,
            mean_loss: f[5].parse().ok()?,
            first_batch_before: f[6].parse().ok()?,
            first_batch_after: f[7].parse().ok()?,
        })
    }
}

pub fn read_train_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::Format { kind: "training log", path: path.into(), msg: "unexpected header".into() });
    }
    lines
        .enumerate()
        .map(|(i, l)| EpochLog::parse(l).ok_or_else(|| Error::Format { kind: "training log", path: path.into(), msg: format!("bad row {}", i + 1) }))
        .collect()
}

fn write_train_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

const EPOCH_TENSOR: &str = "train.epoch";
const SEED_TENSOR: &str = "train.seed";

fn seed_tensor(seed: u64) -> NamedTensor<f32> {
    let data = (0..4).map(|k| ((seed >> (16 * k)) & 0xffff) as f32).collect();
    NamedTensor { name: SEED_TENSOR.into(), shape: vec![4], data }
}

fn find_tensor<'a>(all: &'a [NamedTensor<f32>], name: &str) -> Result<&'a NamedTensor<f32>> {
    all.iter().find(|t| t.name == name).ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks {name}")))
}

/// Model, optimizer and progress of a training run.
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
    pub epoch: usize,
}

impl TrainState {
    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let mut all = self.params.tensors.clone();
        all.extend(self.adam.to_tensors(&self.params));
        all.push(NamedTensor { name: EPOCH_TENSOR.into(), shape: vec![1], data: vec![self.epoch as f32] });
        all.push(seed_tensor(seed));
        let tmp = path.with_extension("partial");
        write_checkpoint(&tmp, &all)?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, adam: AdamConfig, seed: u64) -> Result<Self> {
        let all = read_checkpoint(path)?;
        let params = ModelParams::from_tensors(&all)?;
        let adam = AdamState::from_tensors(adam, &params, &all)?;
        if find_tensor(&all, SEED_TENSOR)?.data != seed_tensor(seed).data {
            return Err(Error::InvalidArgument(format!("{} was trained with a different seed than {seed}", path.display())));
        }
        let epoch = find_tensor(&all, EPOCH_TENSOR)?.data.first().copied().unwrap_or(0.0) as usize;
        Ok(Self { params, adam, epoch })
    }
}

type Example = (IcoTensor<f32>, Vec<[f32; 3]>);

/// Network input and targets of trajectory `idx` rendered at `snr_db`. The
/// stored audio is used when it already has that SNR; otherwise the scene
/// is re-rendered, which reuses the job's noise stream.
fn prepare(ds: &Dataset, idx: usize, snr_db: f64, grid: &IcoGrid) -> Result<(Example, u64)> {
    let mut data = read_trajectory(&ds.dirs[idx])?;
    if data.job.snr_db != snr_db {
        data.job.snr_db = snr_db;
        data = simulate(&data.job, &ds.array, &ds.info.framing())?;
    }
    let maps = compute_maps(&data.audio, &ds.array, grid, &ds.map_config())?;
    let x = doa_model::input_tensor::<f32>(&maps, grid)?;
    if data.gt.len() != maps.n_frames() {
        return Err(Error::shape(format!("{} label frames", maps.n_frames()), data.gt.len()));
    }
    Ok(((x, to_f32(&data.gt)), data.job.seed))
}

fn batch_loss(ctx: &NetContext, params: &ModelParams<f32>, items: &[&Example]) -> Result<f64> {
    let mut total = 0.0;
    for (x, gt) in items {
        let out = doa_model::forward_tensor(x.clone(), params, ctx)?;
        total += loss_mse(&out.v, gt)? as f64;
    }
    Ok(total / items.len() as f64)
}

/// Trains on every trajectory under `data` per epoch, writing the
/// checkpoint and the log after each epoch. With `resume` an existing
/// checkpoint is continued; the result equals an uninterrupted run.
pub fn run_training(data: &Path, cfg: &TrainConfig, ckpt: &Path, log_path: &Path, resume: bool) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let ds = Dataset::open(data)?;
    let ctx = NetContext::new(cfg.r)?;
    let grid = ctx.grid(cfg.r).clone();

    let (mut state, mut rows) = if resume && ckpt.exists() {
        let s = TrainState::load(ckpt, cfg.adam, cfg.seed)?;
        if s.params.cfg.r != cfg.r {
            return Err(Error::InvalidArgument(format!("checkpoint is r={}, run asks for r={}", s.params.cfg.r, cfg.r)));
        }
        let mut rows = if log_path.exists() { read_train_log(log_path)? } else { Vec::new() };
        rows.retain(|r| r.epoch <= s.epoch);
        log::info!("resuming after epoch {}", s.epoch);
        (s, rows)
    } else {
        let params = ModelParams::<f32>::init(ModelConfig::new(cfg.r), cfg.seed)?;
        let adam = AdamState::new(cfg.adam, &params);
        (TrainState { params, adam, epoch: 0 }, Vec::new())
    };

    // Inputs at a fixed SNR do not change between epochs.
    let mut cache: HashMap<(usize, u64), (Example, u64)> = HashMap::new();
    for epoch in state.epoch + 1..=cfg.epochs {
        let phase = cfg.curriculum.phase(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..ds.dirs.len()).collect();
        order.shuffle(&mut rng);
        let snrs: Vec<f64> = order.iter().map(|_| phase.sample(&mut rng)).collect();
        if !matches!(phase, SnrPhase::Fixed(_)) {
            cache.clear();
        }

        let mut losses = Vec::new();
        let mut first: Option<(Vec<Example>, f64)> = None;
        for (chunk, snr_chunk) in order.chunks(cfg.batch).zip(snrs.chunks(cfg.batch)) {
            let mut batch = Vec::with_capacity(chunk.len());
            let mut seeds = Vec::with_capacity(chunk.len());
            for (&idx, &snr) in chunk.iter().zip(snr_chunk) {
                let key = (idx, snr.to_bits());
                let (ex, seed) = match cache.get(&key) {
                    Some(hit) => hit.clone(),
                    None => {
                        let fresh = prepare(&ds, idx, snr, &grid)?;
                        if matches!(phase, SnrPhase::Fixed(_)) {
                            cache.insert(key, fresh.clone());
                        }
                        fresh
                    }
                };
                seeds.push(seed);
                batch.push(ex);
            }
            let keep = first.is_none().then(|| batch.clone());
            let diverged = |what: &str| {
                let names: Vec<String> = chunk.iter().map(|&i| dir_name(&ds.dirs[i])).collect();
                Error::NonFinite(format!("{what} in epoch {epoch}, batch of trajectories {} (job seeds {seeds:?})", names.join(" ")))
            };
            let (loss, grads) = match batch_loss_and_grads(&ctx, &state.params, batch) {
                Ok(v) => v,
                Err(Error::NonFinite(what)) => return Err(diverged(&what)),
                Err(e) => return Err(e),
            };
            if let Some(b) = keep {
                first = Some((b, loss as f64));
            }
            match state.adam.step(&mut state.params, &grads) {
                Err(Error::NonFinite(what)) => return Err(diverged(&what)),
                other => other?,
            }
            losses.push(loss as f64);
            log::debug!("epoch {epoch} step {}: loss {loss:.5}", losses.len());
        }
        let (first_batch, before) = first.expect("at least one batch");
        let refs: Vec<&Example> = first_batch.iter().collect();
        let after = batch_loss(&ctx, &state.params, &refs)?;
        let (snr_min, snr_max) = match phase {
            SnrPhase::Fixed(s) => (s, s),
            SnrPhase::Uniform(a, b) => (a, b),
        };
        let row = EpochLog {
            epoch,
            phase: phase.label().into(),
            snr_min,
            snr_max,
            steps: losses.len(),
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            first_batch_before: before,
            first_batch_after: after,
        };
        log::info!("epoch {epoch}: mean loss {:.5}, first batch {before:.5} -> {after:.5}", row.mean_loss);
        rows.push(row);
        state.epoch = epoch;
        state.save(ckpt, cfg.seed)?;
        write_train_log(log_path, &rows)?;
    }
    Ok(rows)
}

/// Loads model parameters from a model or training checkpoint.
pub fn load_model(path: &Path) -> Result<(ModelParams<f32>, NetContext)> {
    let params = ModelParams::<f32>::load(path)?;
    let ctx = NetContext::new(params.cfg.r)?;
    Ok((params, ctx))
}

pub const METHOD_MODEL: &str = "model";
pub const METHOD_BASELINE: &str = "srp_argmax";

/// Per-frame errors of one trajectory for the model and the baseline.
#[derive(Debug, Clone)]
pub struct TrajectoryEval {
    pub name: String,
    pub seed: u64,
    pub t60: f64,
    pub snr_db: f64,
    pub active: Vec<bool>,
    pub model_errors: Vec<f64>,
    pub baseline_errors: Vec<f64>,
}

pub fn evaluate_trajectory(dir: &Path, ds: &Dataset, params: &ModelParams<f32>, ctx: &NetContext) -> Result<TrajectoryEval> {
    let data = read_trajectory(dir)?;
    let grid = ctx.grid(ctx.top());
    let maps = compute_maps(&data.audio, &ds.array, grid, &ds.map_config())?;
    if data.gt.len() != maps.n_frames() {
        return Err(Error::shape(format!("{} label frames", maps.n_frames()), data.gt.len()));
    }
    let out = doa_model::forward::<f32>(&maps, params, ctx)?;
    let est = to_f64(&out.v);
    let base = srp_baseline(&maps, grid);
    Ok(TrajectoryEval {
        name: dir_name(dir),
        seed: data.job.seed,
        t60: data.job.room.t60,
        snr_db: data.job.snr_db,
        active: data.active,
        model_errors: est.iter().zip(&data.gt).map(|(v, u)| angular_error(*v, *u)).collect(),
        baseline_errors: base.iter().zip(&data.gt).map(|(v, u)| angular_error(*v, *u)).collect(),
    })
}

/// RMSAE of the model and the SRP-argmax baseline on every trajectory.
pub fn evaluate(ckpt: &Path, data: &Path, cfg: &EvalConfig) -> Result<RunRecord> {
    let (params, ctx) = load_model(ckpt)?;
    let ds = Dataset::open(data)?;
    let evals: Vec<TrajectoryEval> = ds.dirs.par_iter().map(|d| evaluate_trajectory(d, &ds, &params, &ctx)).collect::<Result<_>>()?;
    let score = |e: &TrajectoryEval, errors: &[f64]| -> Result<TrajectoryScore> {
        Ok(TrajectoryScore {
            name: e.name.clone(),
            seed: e.seed,
            t60: e.t60,
            snr_db: e.snr_db,
            frames: errors.len(),
            rmsae: rmsae(errors, &e.active, cfg)?,
        })
    };
    let model = evals.iter().map(|e| score(e, &e.model_errors)).collect::<Result<Vec<_>>>()?;
    let base = evals.iter().map(|e| score(e, &e.baseline_errors)).collect::<Result<Vec<_>>>()?;
    Ok(RunRecord {
        command: "eval".into(),
        config: serde_json::json!({
            "checkpoint": ckpt.display().to_string(),
            "data": data.display().to_string(),
            "r": params.cfg.r,
            "eval": cfg,
            "dataset": ds.info,
        }),
        seed: ds.info.seed,
        results: vec![MethodResult::new(METHOD_MODEL, model)?, MethodResult::new(METHOD_BASELINE, base)?],
    })
}

/// Maps and network output for a recording.
pub fn infer(audio: &[Vec<f64>], array: &MicArray, params: &ModelParams<f32>, ctx: &NetContext, framing: FramingConfig) -> Result<(SrpMapSeq, DoaOutput<f32>)> {
    let grid = ctx.grid(ctx.top());
    let maps = compute_maps(audio, array, grid, &MapConfig { framing, ..MapConfig::default() })?;
    let out = doa_model::forward::<f32>(&maps, params, ctx)?;
    Ok((maps, out))
}

/// Per-frame DOA estimates as CSV with azimuth and elevation.
pub fn write_doa_csv(path: &Path, framing: &FramingConfig, fs: f64, v: &[[f32; 3]], active: &[bool]) -> Result<()> {
    let mut s = String::from("frame,time_s,x,y,z,azimuth_deg,elevation_deg,active\n");
    for (t, (e, &on)) in v.iter().zip(active).enumerate() {
        let d = [e[0] as f64, e[1] as f64, e[2] as f64];
        let (az, el) = azimuth_elevation(d);
        writeln!(s, "{t},{:.4},{},{},{},{az:.3},{el:.3},{}", framing.frame_center_time(t, fs), e[0], e[1], e[2], on as u8).expect("string write");
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapFormat {
    /// One file of `frame,cell,value` rows.
    Csv,
    /// A directory of 8-bit binary PGM images, one per frame.
    Pgm,
}

impl MapFormat {
    /// PGM for a `.pgm` suffix or a path without extension, CSV otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => MapFormat::Csv,
            _ => MapFormat::Pgm,
        }
    }
}

/// One frame as an 8-bit PGM of the planar layout. Values are scaled
/// affinely so the minimum is 0 and the maximum 255; a constant map is 128.
pub fn pgm_bytes(map: &[f64], grid: &IcoGrid) -> Result<Vec<u8>> {
    if map.len() != grid.n_cells() {
        return Err(Error::shape(grid.n_cells(), map.len()));
    }
    let (rows, cols) = grid.planar_dims();
    let (lo, hi) = map.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::NonFinite("map".into()));
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(map.iter().map(|&v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 128 }));
    Ok(out)
}

/// Writes maps (`[frame][cell]`) as CSV or as per-frame PGM files.
pub fn export_maps(maps: &[Vec<f64>], grid: &IcoGrid, path: &Path, format: MapFormat) -> Result<()> {
    match format {
        MapFormat::Csv => {
            let mut s = String::from("frame,cell,value\n");
            for (t, m) in maps.iter().enumerate() {
                if m.len() != grid.n_cells() {
                    return Err(Error::shape(grid.n_cells(), m.len()));
                }
                for (c, v) in m.iter().enumerate() {
                    writeln!(s, "{t},{c},{v}").expect("string write");
                }
            }
            std::fs::write(path, s).map_err(|e| Error::io(path, e))
        }
        MapFormat::Pgm => {
            std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
            for (t, m) in maps.iter().enumerate() {
                let p = path.join(format!("frame_{t:05}.pgm"));
                std::fs::write(&p, pgm_bytes(m, grid)?).map_err(|e| Error::io(&p, e))?;
            }
            Ok(())
        }
    }
}

/// Reads a `frame,cell,value` CSV back into `[frame][cell]`.
pub fn read_map_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Format { kind: "map csv", path: path.into(), msg };
    let mut lines = text.lines();
    if lines.next() != Some("frame,cell,value") {
        return Err(bad("unexpected header".into()));
    }
    let mut maps: Vec<Vec<f64>> = Vec::new();
    for (i, l) in lines.enumerate() {
        let f: Vec<&str> = l.split(',').collect();
        let parse = || -> Option<(usize, usize, f64)> { Some((f[0].parse().ok()?, f[1].parse().ok()?, f[2].parse().ok()?)) };
        let (t, c, v) = if f.len() == 3 { parse() } else { None }.ok_or_else(|| bad(format!("bad row {}", i + 1)))?;
        if t == maps.len() {
            maps.push(Vec::new());
        }
        if t + 1 != maps.len() || c != maps[t].len() {
            return Err(bad(format!("row {} out of order", i + 1)));
        }
        maps[t].push(v);
    }
    Ok(maps)
}
