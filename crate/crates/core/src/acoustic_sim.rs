//! Shoebox room simulation: scene sampling, image-source impulse responses,
//! moving-source rendering, noise injection and ground-truth DOA labels.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ico_grid::{norm, Vec3};
use crate::srp_phat::{self, FramingConfig, MicArray, Vad, VadConfig};

/// Taps of the fractional-delay kernel.
pub const KERNEL_TAPS: usize = 16;
const KERNEL_PHASES: usize = 4096;
const KAISER_BETA: f64 = 6.0;

const STREAM_SOURCE: u64 = 1;
const STREAM_NOISE: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub dims: Vec3,
    /// Requested reverberation time; 0 for an anechoic room.
    pub t60: f64,
    /// Uniform wall pressure reflection coefficient.
    pub beta: f64,
}

/// Sabine absorption `0.161 V / (S T60)`.
pub fn sabine_absorption(dims: Vec3, t60: f64) -> f64 {
    let v = dims[0] * dims[1] * dims[2];
    let s = 2.0 * (dims[0] * dims[1] + dims[0] * dims[2] + dims[1] * dims[2]);
    0.161 * v / (s * t60)
}

impl RoomSpec {
    pub fn new(dims: Vec3, t60: f64) -> Result<Self> {
        check_dims(dims)?;
        if !(t60 > 0.0 && t60.is_finite()) {
            return Err(Error::InvalidArgument(format!("T60 must be positive, got {t60}")));
        }
        let alpha = sabine_absorption(dims, t60);
        if alpha >= 1.0 {
            return Err(Error::Simulation(format!(
                "T60 = {t60} s is unattainable in a {:.2} x {:.2} x {:.2} m room (absorption {alpha:.3} >= 1)",
                dims[0], dims[1], dims[2]
            )));
        }
        let gamma = decay_constant(dims, srp_phat::DEFAULT_SPEED_OF_SOUND) / t60;
        let beta = (-gamma / 2.0).exp();
        Ok(Self { dims, t60, beta })
    }

    pub fn anechoic(dims: Vec3) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self { dims, t60: 0.0, beta: 0.0 })
    }

    pub fn is_anechoic(&self) -> bool {
        self.beta == 0.0
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    /// True when `p` is at least `margin` from every wall.
    pub fn contains(&self, p: Vec3, margin: f64) -> bool {
        (0..3).all(|k| p[k] > margin && p[k] < self.dims[k] - margin)
    }
}

/// `K` such that a uniform energy reflection loss `gamma = -ln(beta^2)`
/// gives an image-source energy decay with T60 = `K / gamma`.
///
/// An image at distance `c t` in direction `u` has undergone about
/// `c t sum_k |u_k| / L_k` reflections, so the energy decay curve is the
/// direction average of `exp(-gamma c t s(u)) / (gamma c s(u))`. It depends
/// on `gamma t` only. `K` is its -5 to -25 dB slope fit at `gamma = 1`, the
/// same fit [`measure_t60`] applies to simulated responses.
pub fn decay_constant(dims: Vec3, c: f64) -> f64 {
    const DIRS: usize = 512;
    let s: Vec<f64> = (0..DIRS)
        .map(|i| {
            let z = (i as f64 + 0.5) / DIRS as f64;
            let phi = i as f64 * PI * (3.0 - 5f64.sqrt());
            let r = (1.0 - z * z).sqrt();
            c * ((r * phi.cos()).abs() / dims[0] + (r * phi.sin()).abs() / dims[1] + z / dims[2])
        })
        .collect();
    let edc = |t: f64| s.iter().map(|&si| (-t * si).exp() / si).sum::<f64>();
    let e0 = edc(0.0);
    let mean = s.iter().sum::<f64>() / DIRS as f64;
    let dt = 0.05 / mean;
    let (mut n, mut st, mut sy, mut stt, mut sty) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0.. {
        let t = i as f64 * dt;
        let db = 10.0 * (edc(t) / e0).log10();
        if db < -25.0 {
            break;
        }
        if db <= -5.0 {
            n += 1.0;
            st += t;
            sy += db;
            stt += t * t;
            sty += t * db;
        }
    }
    -60.0 * (n * stt - st * st) / (n * sty - st * sy)
}

/// Second-order Butterworth high-pass, applied in place.
fn high_pass(x: &mut [f64], fc: f64, fs: f64) {
    let w0 = 2.0 * PI * fc / fs;
    let alpha = w0.sin() / 2f64.sqrt();
    let cw = w0.cos();
    let a0 = 1.0 + alpha;
    let (b0, b1, b2) = ((1.0 + cw) / (2.0 * a0), -(1.0 + cw) / a0, (1.0 + cw) / (2.0 * a0));
    let (a1, a2) = (-2.0 * cw / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for v in x.iter_mut() {
        let x0 = *v;
        let y0 = b0 * x0 + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
        (x2, x1, y2, y1) = (x1, x0, y1, y0);
        *v = y0;
    }
}

/// Cut-off of the high-pass applied to reverberant responses. All image
/// amplitudes are positive, so dense late images otherwise pile up into a
/// slowly decaying low-frequency offset.
pub const RIR_HIGH_PASS_HZ: f64 = 40.0;

fn check_dims(dims: Vec3) -> Result<()> {
    if dims.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::InvalidArgument(format!("room dimensions must be positive, got {dims:?}")));
    }
    Ok(())
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..50 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

fn kaiser_sinc(x: f64) -> f64 {
    let half = (KERNEL_TAPS / 2) as f64;
    let r = x / half;
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
    sinc * bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / bessel_i0(KAISER_BETA)
}

/// Kaiser-windowed sinc rows: row `p` holds the 16 taps `n = -7..=8` of a
/// delay with fractional part `p / KERNEL_PHASES`.
fn kernel_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let half = (KERNEL_TAPS / 2) as f64;
        (0..KERNEL_PHASES)
            .flat_map(|p| {
                let frac = p as f64 / KERNEL_PHASES as f64;
                (0..KERNEL_TAPS).map(move |j| kaiser_sinc(j as f64 - (half - 1.0) - frac))
            })
            .collect()
    })
}

/// Adds `amp * kernel(n - delay)` to `buf` over the 16 taps around `delay`.
pub fn deposit(buf: &mut [f64], delay: f64, amp: f64) {
    deposit_with(kernel_table(), buf, delay, amp);
}

#[inline]
fn deposit_with(table: &[f64], buf: &mut [f64], delay: f64, amp: f64) {
    let scaled = (delay * KERNEL_PHASES as f64).round() as i64;
    let base = scaled.div_euclid(KERNEL_PHASES as i64);
    let phase = scaled.rem_euclid(KERNEL_PHASES as i64) as usize;
    let row = &table[phase * KERNEL_TAPS..(phase + 1) * KERNEL_TAPS];
    let first = base - (KERNEL_TAPS / 2 - 1) as i64;
    if first >= 0 && first as usize + KERNEL_TAPS <= buf.len() {
        let dst = &mut buf[first as usize..first as usize + KERNEL_TAPS];
        for (d, k) in dst.iter_mut().zip(row) {
            *d += amp * k;
        }
    } else {
        for (j, k) in row.iter().enumerate() {
            let n = first + j as i64;
            if n >= 0 && (n as usize) < buf.len() {
                buf[n as usize] += amp * k;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageSource {
    pub position: Vec3,
    pub reflections: u32,
}

/// Per-axis image coordinates `(1 - 2l) s + 2 n L` with their reflection
/// counts `|n - l| + |n|`, limited to `|coordinate - m| <= reach`.
fn axis_images(s: f64, m: f64, len: f64, reach: f64) -> Vec<(f64, u32)> {
    let nmax = (reach / (2.0 * len)).ceil() as i64 + 1;
    let mut out = Vec::new();
    for n in -nmax..=nmax {
        for l in 0..2i64 {
            let x = (1 - 2 * l) as f64 * s + 2.0 * n as f64 * len;
            if (x - m).abs() <= reach {
                out.push((x - m, ((n - l).abs() + n.abs()) as u32));
            }
        }
    }
    out
}

/// Image sources of `src` within `max_distance` of `mic`, the direct path
/// included.
pub fn image_sources(room: &RoomSpec, src: Vec3, mic: Vec3, max_distance: f64) -> Vec<ImageSource> {
    let ax: Vec<Vec<(f64, u32)>> = (0..3).map(|k| axis_images(src[k], mic[k], room.dims[k], max_distance)).collect();
    let r2 = max_distance * max_distance;
    let mut out = Vec::new();
    for &(dx, rx) in &ax[0] {
        for &(dy, ry) in &ax[1] {
            if dx * dx + dy * dy > r2 {
                continue;
            }
            for &(dz, rz) in &ax[2] {
                if dx * dx + dy * dy + dz * dz <= r2 {
                    out.push(ImageSource { position: [mic[0] + dx, mic[1] + dy, mic[2] + dz], reflections: rx + ry + rz });
                }
            }
        }
    }
    out
}

/// Room impulse response from `src` to `mic`. Images are kept up to a
/// delay of T60 (the direct path only when anechoic); each contributes
/// `beta^reflections / (4 pi d)` at delay `d / c`.
pub fn ism_rir(room: &RoomSpec, src: Vec3, mic: Vec3, fs: f64, c: f64) -> Result<Vec<f64>> {
    if !room.contains(src, 0.0) || !room.contains(mic, 0.0) {
        return Err(Error::Simulation(format!("source {src:?} or mic {mic:?} outside the room")));
    }
    let d0 = norm([src[0] - mic[0], src[1] - mic[1], src[2] - mic[2]]);
    if d0 < 1e-6 {
        return Err(Error::Simulation("source and mic coincide".into()));
    }
    let duration = if room.is_anechoic() { d0 / c } else { room.t60.max(d0 / c) };
    let reach = duration * c + 1e-6;
    let len = (duration * fs).ceil() as usize + KERNEL_TAPS;
    let mut h = vec![0.0; len];
    let max_refl = 3 * ((reach / room.dims.iter().copied().fold(f64::INFINITY, f64::min)).ceil() as usize + 3);
    let powers: Vec<f64> = (0..=max_refl).map(|k| room.beta.powi(k as i32)).collect();
    let ax: Vec<Vec<(f64, u32)>> = (0..3).map(|k| axis_images(src[k], mic[k], room.dims[k], reach)).collect();
    let r2 = reach * reach;
    let scale = fs / c;
    let table = kernel_table();
    for &(dx, rx) in &ax[0] {
        for &(dy, ry) in &ax[1] {
            let dxy = dx * dx + dy * dy;
            if dxy > r2 {
                continue;
            }
            for &(dz, rz) in &ax[2] {
                let d2 = dxy + dz * dz;
                if d2 > r2 {
                    continue;
                }
                let amp = powers[(rx + ry + rz) as usize];
                if amp == 0.0 {
                    continue;
                }
                let d = d2.sqrt();
                deposit_with(table, &mut h, d * scale, amp / (4.0 * PI * d));
            }
        }
    }
    if !room.is_anechoic() {
        high_pass(&mut h, RIR_HIGH_PASS_HZ, fs);
    }
    Ok(h)
}

/// Reverberation time from the Schroeder energy decay curve: a least-squares
/// line through the -5 to -25 dB span, extrapolated to -60 dB.
pub fn measure_t60(rir: &[f64], fs: f64) -> Result<f64> {
    let mut edc = vec![0.0; rir.len()];
    let mut acc = 0.0;
    for i in (0..rir.len()).rev() {
        acc += rir[i] * rir[i];
        edc[i] = acc;
    }
    if !(acc > 0.0) {
        return Err(Error::Simulation("silent impulse response".into()));
    }
    let start = edc.iter().position(|&e| e > 0.0).unwrap_or(0);
    let (mut n, mut st, mut sy, mut stt, mut sty) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &e) in edc.iter().enumerate().skip(start) {
        let db = 10.0 * (e / acc).log10();
        if db > -5.0 {
            continue;
        }
        if db < -25.0 {
            break;
        }
        let t = i as f64 / fs;
        n += 1.0;
        st += t;
        sy += db;
        stt += t * t;
        sty += t * db;
    }
    if n < 2.0 {
        return Err(Error::Simulation("energy decay never spans -5 to -25 dB".into()));
    }
    let slope = (n * sty - st * sy) / (n * stt - st * st);
    if !(slope < 0.0) {
        return Err(Error::Simulation("energy decay curve does not decay".into()));
    }
    Ok(-60.0 / slope)
}

/// Straight segment plus a per-axis sinusoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: Vec3,
    pub end: Vec3,
    pub amplitude: Vec3,
    /// Hz.
    pub frequency: Vec3,
    pub phase: Vec3,
    pub duration: f64,
}

impl Trajectory {
    pub fn fixed(p: Vec3, duration: f64) -> Self {
        Self { start: p, end: p, amplitude: [0.0; 3], frequency: [0.0; 3], phase: [0.0; 3], duration }
    }

    /// Position at `t` seconds; `t` is clamped to the trajectory span.
    pub fn position(&self, t: f64) -> Vec3 {
        let t = t.clamp(0.0, self.duration);
        let a = if self.duration > 0.0 { t / self.duration } else { 0.0 };
        std::array::from_fn(|k| {
            self.start[k]
                + (self.end[k] - self.start[k]) * a
                + self.amplitude[k] * (2.0 * PI * self.frequency[k] * t + self.phase[k]).sin()
        })
    }

    pub fn max_oscillations(&self) -> f64 {
        self.frequency.iter().map(|f| f * self.duration).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SourceSpec {
    Synth { seed: u64 },
    Wav { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimJob {
    pub seed: u64,
    pub room: RoomSpec,
    /// Array centre; the array orientation is the identity.
    pub array_center: Vec3,
    pub trajectory: Trajectory,
    pub source: SourceSpec,
    pub snr_db: f64,
    pub fs: f64,
    pub c: f64,
}

impl SimJob {
    pub fn duration(&self) -> f64 {
        self.trajectory.duration
    }

    pub fn n_samples(&self) -> usize {
        (self.duration() * self.fs).round() as usize
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("cannot serialise job: {e}")))
    }

    pub fn from_toml(s: &str, path: &Path) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Format { kind: "job", path: path.into(), msg: e.to_string() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneRanges {
    pub dims_min: Vec3,
    pub dims_max: Vec3,
    pub t60: (f64, f64),
    pub snr_db: (f64, f64),
    pub duration: f64,
    pub fs: f64,
    pub c: f64,
    /// Array distance from each wall as a fraction of that room dimension.
    pub array_margin: f64,
    /// Source distance from every wall, metres.
    pub source_margin: f64,
    /// Minimum source distance from the array centre, metres.
    pub min_source_distance: f64,
    pub max_oscillations: f64,
    pub max_attempts: usize,
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            dims_min: [3.0, 3.0, 2.5],
            dims_max: [10.0, 8.0, 6.0],
            t60: (0.2, 1.3),
            snr_db: (5.0, 30.0),
            duration: 20.0,
            fs: srp_phat::DEFAULT_FS,
            c: srp_phat::DEFAULT_SPEED_OF_SOUND,
            array_margin: 0.1,
            source_margin: 0.2,
            min_source_distance: 0.5,
            max_oscillations: 2.0,
            max_attempts: 1000,
        }
    }
}

impl SceneRanges {
    pub fn validate(&self) -> Result<()> {
        let ordered = |a: f64, b: f64| a.is_finite() && b.is_finite() && a <= b;
        let ok = (0..3).all(|k| self.dims_min[k] > 0.0 && ordered(self.dims_min[k], self.dims_max[k]))
            && self.t60.0 > 0.0
            && ordered(self.t60.0, self.t60.1)
            && ordered(self.snr_db.0, self.snr_db.1)
            && self.duration > 0.0
            && self.fs > 0.0
            && self.c > 0.0
            && (0.0..0.5).contains(&self.array_margin)
            && self.source_margin >= 0.0
            && self.min_source_distance >= 0.0
            && self.max_oscillations >= 0.0
            && self.max_attempts > 0;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid scene ranges {self:?}")));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo < hi {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Times at which trajectory constraints are checked: every 10 ms.
fn check_times(duration: f64) -> impl Iterator<Item = f64> {
    let n = (duration / 0.01).ceil() as usize;
    (0..=n).map(move |i| (i as f64 * 0.01).min(duration))
}

/// Draws a scene. Dimensions are redrawn (keeping T60) while the requested
/// T60 is unattainable; trajectories are redrawn until every position is
/// inside the room and far enough from the array.
pub fn sample_scene(seed: u64, ranges: &SceneRanges) -> Result<SimJob> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = |what: &str| Error::Simulation(format!("seed {seed}: no valid {what} after {} attempts", ranges.max_attempts));

    let t60 = uniform(&mut rng, ranges.t60.0, ranges.t60.1);
    let mut room = None;
    for _ in 0..ranges.max_attempts {
        let dims: Vec3 = std::array::from_fn(|k| uniform(&mut rng, ranges.dims_min[k], ranges.dims_max[k]));
        if let Ok(r) = RoomSpec::new(dims, t60) {
            room = Some(r);
            break;
        }
    }
    let room = room.ok_or_else(|| budget("room"))?;
    let d = room.dims;
    let m = ranges.array_margin;
    let array_center = [
        uniform(&mut rng, m * d[0], (1.0 - m) * d[0]),
        uniform(&mut rng, m * d[1], (1.0 - m) * d[1]),
        uniform(&mut rng, m * d[2], 0.5 * d[2]),
    ];
    let snr_db = uniform(&mut rng, ranges.snr_db.0, ranges.snr_db.1);
    let source = SourceSpec::Synth { seed: rng.random::<u64>() >> 1 };

    let sm = ranges.source_margin;
    let fmax = ranges.max_oscillations / ranges.duration;
    for _ in 0..ranges.max_attempts {
        let inside = |rng: &mut ChaCha8Rng| -> Vec3 { std::array::from_fn(|k| uniform(rng, sm, d[k] - sm)) };
        let start = inside(&mut rng);
        let end = inside(&mut rng);
        let amplitude: Vec3 = std::array::from_fn(|k| uniform(&mut rng, 0.0, d[k] / 4.0));
        let frequency: Vec3 = std::array::from_fn(|_| uniform(&mut rng, 0.0, fmax));
        let phase: Vec3 = std::array::from_fn(|_| uniform(&mut rng, 0.0, 2.0 * PI));
        let traj = Trajectory { start, end, amplitude, frequency, phase, duration: ranges.duration };
        let valid = check_times(traj.duration).all(|t| {
            let p = traj.position(t);
            let rel = [p[0] - array_center[0], p[1] - array_center[1], p[2] - array_center[2]];
            room.contains(p, sm) && norm(rel) >= ranges.min_source_distance
        });
        if valid {
            return Ok(SimJob { seed, room, array_center, trajectory: traj, source, snr_db, fs: ranges.fs, c: ranges.c });
        }
    }
    Err(budget("trajectory"))
}

/// Speech-like excitation: 100-4000 Hz noise, amplitude-modulated at
/// 2-8 Hz, with silent gaps of 0.2-1.0 s covering 10-30% of the duration,
/// peak-normalised to 1.
pub fn synth_source(rng: &mut ChaCha8Rng, duration: f64, fs: f64) -> Result<Vec<f64>> {
    Ok(synth_source_with_gaps(rng, duration, fs)?.0)
}

/// [`synth_source`] together with its silent intervals in seconds.
pub fn synth_source_with_gaps(rng: &mut ChaCha8Rng, duration: f64, fs: f64) -> Result<(Vec<f64>, Vec<(f64, f64)>)> {
    if !(duration > 0.0) {
        return Err(Error::InvalidArgument(format!("duration must be positive, got {duration}")));
    }
    let n = (duration * fs).round() as usize;
    let mut spec: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(rng.sample(StandardNormal), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut spec);
    for (k, v) in spec.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * fs / n as f64;
        if !(100.0..=4000.0).contains(&f) {
            *v = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut spec);
    let rate = rng.random_range(2.0..=8.0);
    let phi = rng.random_range(0.0..2.0 * PI);
    let mut x: Vec<f64> = spec
        .iter()
        .enumerate()
        .map(|(i, v)| v.re * 0.5 * (1.0 + (2.0 * PI * rate * i as f64 / fs + phi).sin()))
        .collect();

    let gaps = gap_intervals(rng, duration);
    for &(a, b) in &gaps {
        let (a, b) = ((a * fs).round() as usize, ((b * fs).round() as usize).min(n));
        x[a..b].iter_mut().for_each(|v| *v = 0.0);
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v /= peak);
    }
    Ok((x, gaps))
}

/// Silent intervals in seconds: lengths in [0.2, 1.0] s totalling 10-30%
/// of the duration, spread over the signal with random spacing.
pub fn gap_intervals(rng: &mut ChaCha8Rng, duration: f64) -> Vec<(f64, f64)> {
    let target = rng.random_range(0.1..=0.3) * duration;
    let mut lens = Vec::new();
    let mut total = 0.0;
    // Every draw leaves either nothing or at least 0.2 s for later gaps.
    while target - total >= 0.2 {
        let rest = target - total;
        let l = if rest <= 1.0 { rest } else { rng.random_range(0.2..=(rest - 0.2).min(1.0)) };
        lens.push(l);
        total += l;
    }
    let spare = duration - total;
    let mut cuts: Vec<f64> = (0..lens.len()).map(|_| rng.random_range(0.0..=spare)).collect();
    cuts.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(lens.len());
    let mut used = 0.0;
    for (c, l) in cuts.into_iter().zip(lens) {
        out.push((c + used, c + used + l));
        used += l;
    }
    out
}

/// The dry source signal of a job.
pub fn source_signal(job: &SimJob) -> Result<Vec<f64>> {
    match &job.source {
        SourceSpec::Synth { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            rng.set_stream(STREAM_SOURCE);
            synth_source(&mut rng, job.duration(), job.fs)
        }
        SourceSpec::Wav { path } => {
            let (ch, fs) = srp_phat::read_wav(path)?;
            if (fs - job.fs).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("{} is sampled at {fs} Hz, job expects {}", path.display(), job.fs)));
            }
            let n = job.n_samples();
            let mut x = ch.into_iter().next().ok_or_else(|| Error::InvalidArgument(format!("{} has no channels", path.display())))?;
            x.resize(n, 0.0);
            Ok(x)
        }
    }
}

fn mic_positions(job: &SimJob, array: &MicArray) -> Vec<Vec3> {
    let c = job.array_center;
    array.positions.iter().map(|p| [c[0] + p[0], c[1] + p[1], c[2] + p[2]]).collect()
}

fn fft_convolve_add(planner: &mut FftPlanner<f64>, seg: &[Complex<f64>], h: &[f64], nfft: usize, out: &mut [f64], offset: usize) {
    let mut hf: Vec<Complex<f64>> = h.iter().map(|&v| Complex::new(v, 0.0)).collect();
    hf.resize(nfft, Complex::new(0.0, 0.0));
    planner.plan_fft_forward(nfft).process(&mut hf);
    for (a, b) in hf.iter_mut().zip(seg) {
        *a *= b;
    }
    planner.plan_fft_inverse(nfft).process(&mut hf);
    let scale = 1.0 / nfft as f64;
    for (i, v) in hf.iter().enumerate() {
        let j = offset + i;
        if j >= out.len() {
            break;
        }
        out[j] += v.re * scale;
    }
}

/// Reverberant multichannel signal without noise. The source is split into
/// triangular crossfade windows of one hop centred on multiples of `hop`;
/// each piece is convolved with the RIR at the source position of its
/// centre and the pieces are overlap-added.
pub fn render_clean(job: &SimJob, array: &MicArray, source: &[f64], hop: usize) -> Result<Vec<Vec<f64>>> {
    if hop == 0 {
        return Err(Error::InvalidArgument("hop must be positive".into()));
    }
    let n = source.len();
    let mics = mic_positions(job, array);
    let n_seg = n.div_ceil(hop) + 1;
    let pieces: Vec<Vec<Vec<f64>>> = (0..n_seg)
        .into_par_iter()
        .map(|k| {
            let centre = k * hop;
            let lo = centre.saturating_sub(hop - 1);
            let hi = (centre + hop).min(n);
            let mut out = vec![Vec::new(); mics.len()];
            if lo >= hi {
                return Ok(out);
            }
            let seg: Vec<f64> = (lo..hi).map(|i| source[i] * (1.0 - (i as f64 - centre as f64).abs() / hop as f64)).collect();
            if seg.iter().all(|&v| v == 0.0) {
                return Ok(out);
            }
            let p = job.trajectory.position(centre as f64 / job.fs);
            let rirs: Vec<Vec<f64>> = mics.iter().map(|&m| ism_rir(&job.room, p, m, job.fs, job.c)).collect::<Result<_>>()?;
            let lmax = rirs.iter().map(Vec::len).max().unwrap_or(0);
            let nfft = (seg.len() + lmax - 1).next_power_of_two();
            let mut planner = FftPlanner::new();
            let mut sf: Vec<Complex<f64>> = seg.iter().map(|&v| Complex::new(v, 0.0)).collect();
            sf.resize(nfft, Complex::new(0.0, 0.0));
            planner.plan_fft_forward(nfft).process(&mut sf);
            for (o, h) in out.iter_mut().zip(&rirs) {
                let len = (seg.len() + h.len() - 1).min(n - lo);
                o.resize(len, 0.0);
                fft_convolve_add(&mut planner, &sf, h, nfft, o, 0);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut y = vec![vec![0.0; n]; mics.len()];
    for (k, piece) in pieces.into_iter().enumerate() {
        let lo = (k * hop).saturating_sub(hop - 1);
        for (ch, p) in y.iter_mut().zip(piece) {
            for (i, v) in p.into_iter().enumerate() {
                ch[lo + i] += v;
            }
        }
    }
    Ok(y)
}

/// Mean per-sample power across channels.
pub fn mean_power(x: &[Vec<f64>]) -> f64 {
    let n: usize = x.iter().map(Vec::len).sum();
    x.iter().flatten().map(|v| v * v).sum::<f64>() / n.max(1) as f64
}

/// Adds white Gaussian noise scaled so the realised SNR against the mean
/// signal power across mics equals `snr_db`.
pub fn add_noise(x: &mut [Vec<f64>], snr_db: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    let ps = mean_power(x);
    if !(ps > 0.0) {
        return Err(Error::Simulation("silent signal: SNR is undefined".into()));
    }
    if snr_db == f64::INFINITY {
        return Ok(());
    }
    let noise: Vec<Vec<f64>> = x.iter().map(|ch| (0..ch.len()).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let pn = mean_power(&noise);
    let g = (ps / 10f64.powf(snr_db / 10.0) / pn).sqrt();
    for (ch, nz) in x.iter_mut().zip(noise) {
        ch.iter_mut().zip(nz).for_each(|(a, b)| *a += g * b);
    }
    Ok(())
}

/// Noisy reverberant rendering of a job.
pub fn render_trajectory(job: &SimJob, array: &MicArray, source: &[f64], hop: usize) -> Result<Vec<Vec<f64>>> {
    if source.iter().all(|&v| v == 0.0) {
        return Err(Error::Simulation(format!("seed {}: silent source signal", job.seed)));
    }
    let mut y = render_clean(job, array, source, hop)?;
    let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
    rng.set_stream(STREAM_NOISE);
    add_noise(&mut y, job.snr_db, &mut rng)?;
    Ok(y)
}

/// Unit vectors from the array centre to the source at each frame centre.
pub fn ground_truth_doa(job: &SimJob, framing: &FramingConfig, n_frames: usize) -> Result<Vec<Vec3>> {
    (0..n_frames)
        .map(|t| {
            let p = job.trajectory.position(framing.frame_center_time(t, job.fs));
            let d = [p[0] - job.array_center[0], p[1] - job.array_center[1], p[2] - job.array_center[2]];
            let r = norm(d);
            if r < 1e-9 {
                return Err(Error::Simulation(format!("seed {}: source at the array centre in frame {t}", job.seed)));
            }
            Ok([d[0] / r, d[1] / r, d[2] / r])
        })
        .collect()
}

/// Per-frame activity of the dry source under the VAD.
pub fn source_activity(source: &[f64], framing: &FramingConfig, vad: VadConfig) -> Result<Vec<bool>> {
    let frames = srp_phat::frame_stream(&[source.to_vec()], framing)?;
    let mut v = Vad::new(vad);
    Ok(frames.iter().map(|f| v.update(f)).collect())
}

/// One rendered trajectory with its labels.
#[derive(Debug, Clone)]
pub struct TrajectoryData {
    pub job: SimJob,
    pub audio: Vec<Vec<f64>>,
    pub gt: Vec<Vec3>,
    pub active: Vec<bool>,
}

/// Renders a job and labels its frames.
pub fn simulate(job: &SimJob, array: &MicArray, framing: &FramingConfig) -> Result<TrajectoryData> {
    let source = source_signal(job)?;
    let audio = render_trajectory(job, array, &source, framing.hop)?;
    let n_frames = framing.frame_count(source.len())?;
    let gt = ground_truth_doa(job, framing, n_frames)?;
    let active = source_activity(&source, framing, VadConfig::default())?;
    Ok(TrajectoryData { job: job.clone(), audio, gt, active })
}

pub fn write_gt_csv(path: &Path, gt: &[Vec3], active: &[bool]) -> Result<()> {
    let mut s = String::from("frame,x,y,z,active\n");
    for (t, (u, a)) in gt.iter().zip(active).enumerate() {
        s.push_str(&format!("{t},{:.17e},{:.17e},{:.17e},{}\n", u[0], u[1], u[2], u8::from(*a)));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_gt_csv(path: &Path) -> Result<(Vec<Vec3>, Vec<bool>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: &str| Error::Format { kind: "gt", path: path.into(), msg: format!("line {}: {msg}", line + 1) };
    let mut gt = Vec::new();
    let mut active = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(bad(i, "expected 5 fields"));
        }
        if f[0].parse::<usize>().ok() != Some(gt.len()) {
            return Err(bad(i, "frames must be consecutive from 0"));
        }
        let v: Vec<f64> = f[1..4].iter().map(|s| s.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| bad(i, &e.to_string()))?;
        gt.push([v[0], v[1], v[2]]);
        active.push(match f[4] {
            "1" => true,
            "0" => false,
            _ => return Err(bad(i, "active flag must be 0 or 1")),
        });
    }
    Ok((gt, active))
}

pub const AUDIO_FILE: &str = "audio.wav";
pub const GT_FILE: &str = "gt.csv";
pub const JOB_FILE: &str = "job.toml";
pub const ARRAY_FILE: &str = "array.csv";
pub const DATASET_FILE: &str = "dataset.toml";

pub fn write_trajectory(dir: &Path, data: &TrajectoryData) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    srp_phat::write_wav(&dir.join(AUDIO_FILE), &data.audio, data.job.fs.round() as u32)?;
    write_gt_csv(&dir.join(GT_FILE), &data.gt, &data.active)?;
    let p = dir.join(JOB_FILE);
    std::fs::write(&p, data.job.to_toml()?).map_err(|e| Error::io(&p, e))
}

pub fn read_trajectory(dir: &Path) -> Result<TrajectoryData> {
    let p = dir.join(JOB_FILE);
    let job = SimJob::from_toml(&std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?, &p)?;
    let (audio, fs) = srp_phat::read_wav(&dir.join(AUDIO_FILE))?;
    if (fs - job.fs).abs() > 1e-9 {
        return Err(Error::Format { kind: "wav", path: dir.join(AUDIO_FILE), msg: format!("sample rate {fs} differs from job {}", job.fs) });
    }
    let (gt, active) = read_gt_csv(&dir.join(GT_FILE))?;
    Ok(TrajectoryData { job, audio, gt, active })
}

/// Dataset-level settings stored next to the trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub seed: u64,
    pub n_traj: usize,
    pub ranges: SceneRanges,
    pub k: usize,
    pub hop: usize,
    pub fft_len: usize,
}

impl DatasetInfo {
    pub fn framing(&self) -> FramingConfig {
        FramingConfig { k: self.k, hop: self.hop, fft_len: self.fft_len }
    }
}

/// Seed of job `index` under `master`. Seeds are kept below 2^63 so they
/// fit TOML integers.
pub fn job_seed(master: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index as u64 + 1);
    rng.random::<u64>() >> 1
}

pub fn trajectory_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("traj_{index:05}"))
}

/// Samples, renders and writes `info.n_traj` trajectories under `root`.
pub fn generate_dataset(root: &Path, info: &DatasetInfo, array: &MicArray) -> Result<Vec<PathBuf>> {
    info.ranges.validate()?;
    info.framing().validate()?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    array.to_csv(&root.join(ARRAY_FILE))?;
    let p = root.join(DATASET_FILE);
    let text = toml::to_string(info).map_err(|e| Error::InvalidArgument(format!("cannot serialise dataset info: {e}")))?;
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    let mut dirs = Vec::with_capacity(info.n_traj);
    for i in 0..info.n_traj {
        let job = sample_scene(job_seed(info.seed, i), &info.ranges)?;
        let data = simulate(&job, array, &info.framing())?;
        let dir = trajectory_dir(root, i);
        write_trajectory(&dir, &data)?;
        log::info!("trajectory {i}: T60 {:.2} s, SNR {:.1} dB", job.room.t60, job.snr_db);
        dirs.push(dir);
    }
    Ok(dirs)
}

pub fn read_dataset_info(root: &Path) -> Result<DatasetInfo> {
    let p = root.join(DATASET_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    toml::from_str(&text).map_err(|e| Error::Format { kind: "dataset", path: p, msg: e.to_string() })
}

/// Trajectory directories under `root`, sorted by name.
pub fn list_trajectories(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(JOB_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}
