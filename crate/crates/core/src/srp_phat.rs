//! GCC-PHAT cross-correlations and SRP-PHAT power maps on the icosahedral grid.
//!
//! Sign convention: with `R_nm = IFFT(X_n conj(X_m) / |X_n conj(X_m)|)`, a
//! signal reaching mic `m` `d` samples after mic `n` peaks at lag `-d`. A far
//! field source in direction `u` reaches mic `p` `p.u/c` seconds early, so the
//! peak sits at `fs (p_m - p_n).u / c`, which is the table entry for `(n, m)`.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::ico_grid::{dot, norm, IcoGrid, Vec3};

pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;
pub const DEFAULT_FS: f64 = 16000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MicArray {
    pub positions: Vec<Vec3>,
    pub c: f64,
    pub fs: f64,
}

impl MicArray {
    pub fn new(positions: Vec<Vec3>, c: f64, fs: f64) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an array needs at least 2 microphones, got {}",
                positions.len()
            )));
        }
        if !(fs > 0.0 && fs.is_finite()) || !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid fs {fs} or c {c}")));
        }
        if positions.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("microphone positions".into()));
        }
        let a = Self { positions, c, fs };
        if !a.is_three_dimensional() {
            return Err(Error::InvalidArgument(
                "microphone positions are coplanar; elevation would be ambiguous".into(),
            ));
        }
        Ok(a)
    }

    /// 12-microphone pseudo-spherical array modelled on the robot head array
    /// used in the LOCATA recordings, centred on its origin.
    pub fn locata_like() -> Self {
        let positions = vec![
            [0.028, 0.030, -0.040],
            [0.006, 0.057, 0.000],
            [0.022, 0.022, -0.046],
            [-0.055, -0.024, -0.025],
            [-0.031, 0.023, 0.042],
            [-0.032, 0.011, 0.046],
            [-0.025, -0.003, 0.051],
            [-0.036, -0.027, 0.038],
            [-0.035, -0.043, 0.025],
            [0.029, -0.048, -0.012],
            [0.034, -0.030, -0.031],
            [0.035, 0.025, -0.039],
        ];
        Self { positions, c: DEFAULT_SPEED_OF_SOUND, fs: DEFAULT_FS }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn max_distance(&self) -> f64 {
        let mut d: f64 = 0.0;
        for (i, a) in self.positions.iter().enumerate() {
            for b in &self.positions[i + 1..] {
                d = d.max(norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]]));
            }
        }
        d
    }

    fn is_three_dimensional(&self) -> bool {
        let p = &self.positions;
        let scale = self.max_distance().max(1e-12);
        for i in 1..p.len() {
            for j in i + 1..p.len() {
                for k in j + 1..p.len() {
                    let a = sub(p[i], p[0]);
                    let b = sub(p[j], p[0]);
                    let c = sub(p[k], p[0]);
                    let vol = a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
                        + a[2] * (b[0] * c[1] - b[1] * c[0]);
                    if vol.abs() > 1e-6 * scale.powi(3) {
                        return true;
                    }
                }
            }
        }
        false
    }

    /// Reads `x,y,z` rows (meters). A non-numeric first line is a header.
    pub fn from_csv(path: &Path, c: f64, fs: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::Format { kind: "array csv", path: path.into(), msg };
        let mut positions = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed: std::result::Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
            match parsed {
                Ok(v) if v.len() == 3 => positions.push([v[0], v[1], v[2]]),
                Ok(v) => return Err(bad(format!("line {}: expected 3 columns, got {}", ln + 1, v.len()))),
                Err(_) if ln == 0 => continue,
                Err(e) => return Err(bad(format!("line {}: {e}", ln + 1))),
            }
        }
        Self::new(positions, c, fs)
    }

    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("x,y,z\n");
        for p in &self.positions {
            out.push_str(&format!("{:?},{:?},{:?}\n", p[0], p[1], p[2]));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FramingConfig {
    pub k: usize,
    pub hop: usize,
    pub fft_len: usize,
}

impl Default for FramingConfig {
    fn default() -> Self {
        Self { k: 4096, hop: 3072, fft_len: 4096 }
    }
}

impl FramingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.k || self.k > self.fft_len {
            return Err(Error::InvalidArgument(format!(
                "framing requires 0 < hop <= K <= fft_len, got hop={} K={} fft_len={}",
                self.hop, self.k, self.fft_len
            )));
        }
        Ok(())
    }

    /// `floor((L - K) / hop) + 1`.
    pub fn frame_count(&self, len: usize) -> Result<usize> {
        self.validate()?;
        if len < self.k {
            return Err(Error::InvalidArgument(format!(
                "signal of {len} samples is shorter than one frame ({})",
                self.k
            )));
        }
        Ok((len - self.k) / self.hop + 1)
    }

    /// Time in seconds of the centre of frame `t`.
    pub fn frame_center_time(&self, t: usize, fs: f64) -> f64 {
        (t * self.hop) as f64 / fs + self.k as f64 / (2.0 * fs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GccConfig {
    pub eps: f64,
}

impl Default for GccConfig {
    fn default() -> Self {
        Self { eps: 1e-12 }
    }
}

/// Splits `signal` (channels x samples) into frames of `K` samples every
/// `hop`; the last partial frame is dropped.
pub fn frame_stream(signal: &[Vec<f64>], cfg: &FramingConfig) -> Result<Vec<Vec<Vec<f64>>>> {
    let len = check_channels(signal)?;
    let t = cfg.frame_count(len)?;
    Ok((0..t)
        .map(|i| signal.iter().map(|ch| ch[i * cfg.hop..i * cfg.hop + cfg.k].to_vec()).collect())
        .collect())
}

fn check_channels(signal: &[Vec<f64>]) -> Result<usize> {
    let len = signal.first().map_or(0, Vec::len);
    if signal.is_empty() || signal.iter().any(|c| c.len() != len) {
        return Err(Error::shape("channels of equal length", "ragged or empty signal"));
    }
    Ok(len)
}

/// Far-field TDOA of every cell for the pairs `n < m`, in fractional samples.
#[derive(Debug, Clone)]
pub struct TdoaTable {
    n_mics: usize,
    pairs: Vec<(usize, usize)>,
    /// `[cell][pair]`.
    delays: Vec<f64>,
}

pub fn mic_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect()
}

pub fn tdoa_table(array: &MicArray, grid: &IcoGrid) -> TdoaTable {
    let pairs = mic_pairs(array.len());
    let mut delays = Vec::with_capacity(grid.n_cells() * pairs.len());
    for c in 0..grid.n_cells() {
        let u = grid.coord(c);
        for &(n, m) in &pairs {
            let d = sub(array.positions[m], array.positions[n]);
            delays.push(array.fs * dot(d, u) / array.c);
        }
    }
    TdoaTable { n_mics: array.len(), pairs, delays }
}

impl TdoaTable {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn n_mics(&self) -> usize {
        self.n_mics
    }

    pub fn n_cells(&self) -> usize {
        self.delays.len() / self.pairs.len()
    }

    /// Delays of one cell, in pair order.
    pub fn cell(&self, cell: usize) -> &[f64] {
        let p = self.pairs.len();
        &self.delays[cell * p..(cell + 1) * p]
    }

    /// `Δτ_nm` for any ordered pair.
    pub fn get(&self, cell: usize, n: usize, m: usize) -> f64 {
        if n == m {
            return 0.0;
        }
        let (a, b, sign) = if n < m { (n, m, 1.0) } else { (m, n, -1.0) };
        // Index of (a, b) in the lexicographic pair list.
        let idx = a * (2 * self.n_mics - a - 1) / 2 + (b - a - 1);
        sign * self.cell(cell)[idx]
    }
}

/// PHAT-weighted circular cross-correlations of all pairs `n < m`.
#[derive(Debug, Clone)]
pub struct GccFrame {
    pub fft_len: usize,
    pub n_mics: usize,
    /// One lag function per pair, in [`mic_pairs`] order.
    pub lags: Vec<Vec<f64>>,
    /// Set when the frame had no spectral energy (all lag functions zero).
    pub degenerate: bool,
}

impl GccFrame {
    /// `R_nm` at integer lag `tau` (negative lags wrap around).
    pub fn get(&self, n: usize, m: usize, tau: isize) -> f64 {
        let len = self.fft_len as isize;
        if n == m {
            return if self.degenerate { 0.0 } else if tau.rem_euclid(len) == 0 { 1.0 } else { 0.0 };
        }
        let (a, b, t) = if n < m { (n, m, tau) } else { (m, n, -tau) };
        let idx = a * (2 * self.n_mics - a - 1) / 2 + (b - a - 1);
        self.lags[idx][t.rem_euclid(len) as usize]
    }
}

/// Reusable FFT plans for one framing configuration.
pub struct GccPhat {
    cfg: FramingConfig,
    gcc: GccConfig,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl GccPhat {
    pub fn new(cfg: FramingConfig, gcc: GccConfig) -> Result<Self> {
        cfg.validate()?;
        if !(gcc.eps > 0.0) {
            return Err(Error::InvalidArgument(format!("PHAT floor must be positive, got {}", gcc.eps)));
        }
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(cfg.fft_len);
        let inv = planner.plan_fft_inverse(cfg.fft_len);
        Ok(Self { cfg, gcc, fwd, inv })
    }

    pub fn framing(&self) -> &FramingConfig {
        &self.cfg
    }

    /// `frame` is channels x `K` samples (zero-padded to `fft_len`).
    pub fn compute(&self, frame: &[Vec<f64>]) -> Result<GccFrame> {
        let len = check_channels(frame)?;
        if len != self.cfg.k {
            return Err(Error::shape(format!("{} samples per channel", self.cfg.k), len));
        }
        if frame.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("audio frame".into()));
        }
        let nfft = self.cfg.fft_len;
        let spectra: Vec<Vec<Complex<f64>>> = frame
            .iter()
            .map(|ch| {
                let mut buf: Vec<Complex<f64>> = ch.iter().map(|&x| Complex::new(x, 0.0)).collect();
                buf.resize(nfft, Complex::new(0.0, 0.0));
                self.fwd.process(&mut buf);
                buf
            })
            .collect();
        let degenerate = frame.iter().flatten().all(|&x| x == 0.0);
        let pairs = mic_pairs(frame.len());
        let scale = 1.0 / nfft as f64;
        let lags = pairs
            .iter()
            .map(|&(n, m)| {
                if degenerate {
                    return vec![0.0; nfft];
                }
                let mut buf: Vec<Complex<f64>> = spectra[n]
                    .iter()
                    .zip(&spectra[m])
                    .map(|(a, b)| {
                        let cross = a * b.conj();
                        cross / cross.norm().max(self.gcc.eps)
                    })
                    .collect();
                self.inv.process(&mut buf);
                buf.iter().map(|z| z.re * scale).collect()
            })
            .collect();
        Ok(GccFrame { fft_len: nfft, n_mics: frame.len(), lags, degenerate })
    }
}

/// Linear interpolation of a circular lag function at a fractional lag.
pub fn interp_lag(r: &[f64], tau: f64) -> f64 {
    let len = r.len() as isize;
    let f = tau.floor();
    let frac = tau - f;
    let i0 = (f as isize).rem_euclid(len) as usize;
    let i1 = (f as isize + 1).rem_euclid(len) as usize;
    r[i0] * (1.0 - frac) + r[i1] * frac
}

/// Raw steered response power `2π Σ_{n≠m} R_nm(Δτ_nm)` per cell; vertex cells are 0.
pub fn srp_map(gcc: &GccFrame, table: &TdoaTable, grid: &IcoGrid) -> Result<Vec<f64>> {
    if gcc.n_mics != table.n_mics() || table.n_cells() != grid.n_cells() {
        return Err(Error::shape(
            format!("{} mics, {} cells", table.n_mics(), grid.n_cells()),
            format!("{} mics, {} cells", gcc.n_mics, table.n_cells()),
        ));
    }
    let mut out = vec![0.0; grid.n_cells()];
    for (c, v) in out.iter_mut().enumerate() {
        if grid.is_vertex(c) {
            continue;
        }
        // R_mn(Δτ_mn) = R_nm(Δτ_nm), so each unordered pair counts twice.
        let s: f64 = gcc.lags.iter().zip(table.cell(c)).map(|(r, &tau)| interp_lag(r, tau)).sum();
        *v = 2.0 * PI * 2.0 * s;
    }
    Ok(out)
}

/// Computed (non-vertex) cell with the largest value; ties go to the lowest
/// index.
pub fn map_argmax(map: &[f64], grid: &IcoGrid) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (c, &v) in map.iter().enumerate() {
        if !grid.is_vertex(c) && v > best.0 {
            best = (v, c);
        }
    }
    best.1
}

/// Subtracts the non-vertex mean and divides by the non-vertex max |value|.
/// Vertex cells are 0; maps with max |value| < 1e-12 become all zero.
pub fn normalize_map(map: &[f64], grid: &IcoGrid) -> Result<Vec<f64>> {
    if map.len() != grid.n_cells() {
        return Err(Error::shape(grid.n_cells(), map.len()));
    }
    let cells = || (0..map.len()).filter(|&c| !grid.is_vertex(c));
    let mean = cells().map(|c| map[c]).sum::<f64>() / grid.n_computed_cells() as f64;
    let peak = cells().map(|c| (map[c] - mean).abs()).fold(0.0, f64::max);
    let mut out = vec![0.0; map.len()];
    if peak < 1e-12 || !peak.is_finite() {
        return Ok(out);
    }
    for c in cells() {
        out[c] = (map[c] - mean) / peak;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VadConfig {
    /// Absolute mean power threshold, full-scale squared.
    pub abs: f64,
    /// Fraction of the running maximum frame power.
    pub rel: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self { abs: 1e-6, rel: 0.01 }
    }
}

/// Energy voice activity detector with a per-stream running maximum.
#[derive(Debug, Clone)]
pub struct Vad {
    cfg: VadConfig,
    running_max: f64,
}

impl Vad {
    pub fn new(cfg: VadConfig) -> Self {
        Self { cfg, running_max: 0.0 }
    }

    pub fn running_max(&self) -> f64 {
        self.running_max
    }

    /// Mean per-sample power across channels.
    pub fn frame_power(frame: &[Vec<f64>]) -> f64 {
        let n: usize = frame.iter().map(Vec::len).sum();
        if n == 0 {
            return 0.0;
        }
        frame.iter().flatten().map(|x| x * x).sum::<f64>() / n as f64
    }

    /// Classifies a frame against the maximum of the frames seen before it,
    /// then folds its power into the running maximum.
    pub fn update(&mut self, frame: &[Vec<f64>]) -> bool {
        self.update_power(Self::frame_power(frame))
    }

    pub fn update_power(&mut self, power: f64) -> bool {
        let active = power > self.cfg.abs && power > self.cfg.rel * self.running_max;
        self.running_max = self.running_max.max(power);
        active
    }
}

/// Normalised maps of a whole recording with their VAD flags.
#[derive(Debug, Clone, PartialEq)]
pub struct SrpMapSeq {
    pub r: u32,
    /// `[frame][cell]`.
    pub maps: Vec<Vec<f64>>,
    pub active: Vec<bool>,
}

impl SrpMapSeq {
    pub fn n_frames(&self) -> usize {
        self.maps.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MapConfig {
    pub framing: FramingConfig,
    pub gcc: GccConfig,
    pub vad: VadConfig,
}

/// Frames, VAD-gates and maps a multichannel recording. Frames are mapped
/// in parallel once the sequential VAD pass has assigned the flags.
pub fn compute_maps(signal: &[Vec<f64>], array: &MicArray, grid: &IcoGrid, cfg: &MapConfig) -> Result<SrpMapSeq> {
    if signal.len() != array.len() {
        return Err(Error::shape(format!("{} channels", array.len()), signal.len()));
    }
    let frames = frame_stream(signal, &cfg.framing)?;
    let mut vad = Vad::new(cfg.vad);
    let active: Vec<bool> = frames.iter().map(|f| vad.update(f)).collect();
    let gcc = GccPhat::new(cfg.framing, cfg.gcc)?;
    let table = tdoa_table(array, grid);
    let maps = frames
        .par_iter()
        .zip(&active)
        .map(|(frame, &on)| {
            if !on {
                return Ok(vec![0.0; grid.n_cells()]);
            }
            let g = gcc.compute(frame)?;
            normalize_map(&srp_map(&g, &table, grid)?, grid)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SrpMapSeq { r: grid.resolution(), maps, active })
}

/// Channels x samples, scaled to full scale 1.0, and the sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<Vec<f64>>, f64)> {
    let wav_err = |source| Error::Wav { path: path.into(), source };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let n = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => {
            reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<_, _>>().map_err(wav_err)?
        }
        (hound::SampleFormat::Int, bits @ (16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
        (fmt, bits) => {
            return Err(Error::Format {
                kind: "wav",
                path: path.into(),
                msg: format!("unsupported sample format {fmt:?} with {bits} bits"),
            })
        }
    };
    let mut channels = vec![Vec::with_capacity(interleaved.len() / n.max(1)); n];
    for (i, x) in interleaved.into_iter().enumerate() {
        channels[i % n].push(x);
    }
    Ok((channels, spec.sample_rate as f64))
}

/// Writes 32-bit float PCM.
pub fn write_wav(path: &Path, channels: &[Vec<f64>], fs: u32) -> Result<()> {
    let len = check_channels(channels)?;
    let spec = hound::WavSpec {
        channels: channels.len() as u16,
        sample_rate: fs,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let wav_err = |source| Error::Wav { path: path.into(), source };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for i in 0..len {
        for ch in channels {
            w.write_sample(ch[i] as f32).map_err(wav_err)?;
        }
    }
    w.finalize().map_err(wav_err)
}
