//! Self-test suites: grid counts, rotation equivariance, finite-difference
//! gradient checks and the free-field SRP oracle.

use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::doa_model::{forward_tensor, ModelConfig, ModelParams, NetContext};
use crate::grad_engine::{central_difference, loss_mse, record, rel_error};
use crate::ico_grid::{dot, mat_vec, nearest_cell, quantization_angle_deg, GridPyramid, IcoGrid, Vec3, ORIENTATIONS};
use crate::ico_nn::*;
use crate::srp_phat::{map_argmax, normalize_map, srp_map, tdoa_table, FramingConfig, GccConfig, GccPhat, MicArray};
use crate::{Error, Result};

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.into(), passed, detail }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Grid,
    Equivariance,
    Gradients,
    Srp,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Suite::Grid),
            "equivariance" => Ok(Suite::Equivariance),
            "gradients" => Ok(Suite::Gradients),
            "srp" => Ok(Suite::Srp),
            "all" => Ok(Suite::All),
            _ => Err(Error::InvalidArgument(format!("unknown suite {s:?}; expected grid, equivariance, gradients, srp or all"))),
        }
    }
}

/// Runs a suite with its default sizes.
pub fn run_suite(suite: Suite) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Grid | Suite::All) {
        out.extend(grid_counts()?);
    }
    if matches!(suite, Suite::Equivariance | Suite::All) {
        let rep = equivariance(3, &[1, 2], 1)?;
        out.push(CheckResult::new("layer equivariance", rep.layer_max_rel < LAYER_TOL, format!("max rel err {:.2e}", rep.layer_max_rel)));
        out.push(CheckResult::new(
            "end-to-end equivariance",
            rep.model_max_rel < MODEL_TOL,
            format!("max rel err {:.2e}", rep.model_max_rel),
        ));
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        out.extend(gradient_checks(1, 20)?.iter().map(GradCheck::result));
    }
    if matches!(suite, Suite::Srp | Suite::All) {
        let rep = srp_oracle(&MicArray::locata_like(), 2, 20, 1)?;
        out.push(CheckResult::new(
            "srp free-field oracle (r=2)",
            rep.mean_error_deg < rep.quantization_deg + 1.0,
            format!(
                "{}/{} argmax on nearest cell, mean error {:.2} deg, quantization {:.2} deg",
                rep.hits, rep.total, rep.mean_error_deg, rep.quantization_deg
            ),
        ));
    }
    Ok(out)
}

/// Planar and computed cell counts for r = 1..4.
pub fn grid_counts() -> Result<Vec<CheckResult>> {
    let start = Instant::now();
    let grids = (1..=4).map(IcoGrid::new).collect::<Result<Vec<_>>>()?;
    let secs = start.elapsed().as_secs_f64();
    let planar: Vec<usize> = grids.iter().map(|g| g.n_cells()).collect();
    let computed: Vec<usize> = grids.iter().map(|g| g.n_cells() - g.vertex_cells().count()).collect();
    Ok(vec![
        CheckResult::new("planar cells", planar == [40, 160, 640, 2560], format!("{planar:?} in {secs:.3} s")),
        CheckResult::new("computed cells", computed == [30, 150, 630, 2550], format!("{computed:?}")),
    ])
}

pub const LAYER_TOL: f64 = 1e-5;
pub const MODEL_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivarianceReport {
    /// Largest `|f(g x) - g f(x)| / max |f(x)|` over layers, in f32.
    pub layer_max_rel: f64,
    /// Largest `|v(g x) - g v(x)| / max |v(x)|` of the network output.
    pub model_max_rel: f64,
    pub cases: usize,
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, t: usize, c: usize, o: usize, g: &IcoGrid) -> IcoTensor<f32> {
    IcoTensor::from_vec(t, c, o, g, rand_vec(rng, t * c * o * g.n_cells())).expect("consistent shape")
}

/// Relative difference over non-vertex cells.
fn rel_diff(a: &IcoTensor<f32>, b: &IcoTensor<f32>, grid: &IcoGrid) -> f64 {
    let mut diff = 0f64;
    let mut scale = 0f64;
    for (i, (x, y)) in a.data.iter().zip(&b.data).enumerate() {
        if !grid.is_vertex(i % a.n) {
            diff = diff.max((x - y).abs() as f64);
            scale = scale.max(y.abs() as f64);
        }
    }
    diff / scale.max(f64::MIN_POSITIVE)
}

/// Every layer and the whole network under all 60 rotations, for `draws`
/// random weight draws at each resolution in `rs`.
pub fn equivariance(draws: usize, rs: &[u32], seed: u64) -> Result<EquivarianceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = EquivarianceReport { layer_max_rel: 0.0, model_max_rel: 0.0, cases: 0 };
    for &r in rs {
        let ctx = NetContext::new(r)?;
        let pyr = &ctx.pyramid;
        let g = pyr.grid(r);
        let rot = pyr.rotations(r);
        for _ in 0..draws {
            let (cin, cout, t) = (2, 3, 3);
            let x1 = rand_tensor(&mut rng, t, cin, 1, g);
            let x6 = rand_tensor(&mut rng, t, cin, ORIENTATIONS, g);
            let w1 = rand_vec(&mut rng, cout * cin * 7);
            let w6 = rand_vec(&mut rng, cout * cin * ORIENTATIONS * 7);
            let b = rand_vec(&mut rng, cout);
            let tw = rand_vec(&mut rng, cout * cin * TEMPORAL_KERNEL);
            let (ls, lb) = (rand_vec(&mut rng, cin), rand_vec(&mut rng, cin));
            let layers: Vec<(&IcoTensor<f32>, Box<dyn Fn(&IcoTensor<f32>) -> IcoTensor<f32>>)> = vec![
                (&x1, Box::new(|x| ico_conv(x, &w1, &b, cout, g, ctx.gather(r, 1)).expect("conv"))),
                (&x6, Box::new(|x| ico_conv(x, &w6, &b, cout, g, ctx.gather(r, ORIENTATIONS)).expect("conv"))),
                (&x6, Box::new(|x| temporal_conv(x, &tw, &b, cout).expect("tconv"))),
                (&x6, Box::new(|x| layer_norm(x, &ls, &lb, g).expect("ln").0)),
                (&x6, Box::new(relu)),
                (&x6, Box::new(|x| orientation_maxpool(x).expect("max").0)),
            ];
            let params = ModelParams::<f32>::init(ModelConfig::new(r), rng.random())?;
            let x = rand_tensor(&mut rng, t, 1, 1, g);
            let base = forward_tensor(x.clone(), &params, &ctx)?;
            let vscale = base.v.iter().flatten().fold(0f64, |m, v| m.max(v.abs() as f64)).max(f64::MIN_POSITIVE);
            for k in 0..rot.len() {
                for (input, f) in &layers {
                    let a = f(&rotate_tensor(input, g, rot, k));
                    let bb = rotate_tensor(&f(input), g, rot, k);
                    rep.layer_max_rel = rep.layer_max_rel.max(rel_diff(&a, &bb, g));
                }
                if r > 1 {
                    let coarse = pyr.grid(r - 1);
                    let a = ico_pool(&rotate_tensor(&x6, g, rot, k), g, coarse)?;
                    let bb = rotate_tensor(&ico_pool(&x6, g, coarse)?, coarse, pyr.rotations(r - 1), k);
                    rep.layer_max_rel = rep.layer_max_rel.max(rel_diff(&a, &bb, coarse));
                }
                let y = forward_tensor(rotate_tensor(&x, g, rot, k), &params, &ctx)?;
                let m = rot.matrix(k);
                for (vy, vb) in y.v.iter().zip(&base.v) {
                    let want = mat_vec(m, [vb[0] as f64, vb[1] as f64, vb[2] as f64]);
                    for c in 0..3 {
                        rep.model_max_rel = rep.model_max_rel.max((vy[c] as f64 - want[c]).abs() / vscale);
                    }
                }
                rep.cases += 1;
            }
        }
    }
    Ok(rep)
}

/// Step and tolerance of the finite-difference checks.
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Smaller steps tried where an activation switches within the step.
pub const FD_REFINED_STEPS: [f64; 2] = [1e-6, 1e-7];

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    /// Largest relative error over the points within tolerance.
    pub max_rel: f64,
    /// Points that needed a smaller step because a ReLU or max switched
    /// within the default one.
    pub refined: usize,
    /// Points that miss the tolerance at every step, and their largest error.
    pub unresolved: usize,
    pub worst_unresolved: f64,
}

impl GradCheck {
    fn new(name: &str) -> Self {
        Self { name: name.into(), checked: 0, max_rel: 0.0, refined: 0, unresolved: 0, worst_unresolved: 0.0 }
    }

    pub fn passed(&self) -> bool {
        self.max_rel < FD_TOL && self.unresolved == 0
    }

    pub fn result(&self) -> CheckResult {
        CheckResult::new(
            &format!("gradient {}", self.name),
            self.passed(),
            format!(
                "{} points, max rel err {:.2e}, {} at a smaller step, {} unresolved (worst {:.2e})",
                self.checked, self.max_rel, self.refined, self.unresolved, self.worst_unresolved
            ),
        )
    }

    /// Central differences of `f` at `idx` against `analytic`. A ReLU or
    /// max that switches within the step makes the quotient meaningless, so
    /// a miss is probed again with smaller steps.
    fn probe(&mut self, x: &mut [f64], analytic: &[f64], idx: &[usize], f: &mut dyn FnMut(&[f64]) -> f64) {
        for &i in idx {
            self.checked += 1;
            let mut best = f64::INFINITY;
            for (k, h) in std::iter::once(FD_STEP).chain(FD_REFINED_STEPS).enumerate() {
                let e = rel_error(analytic[i], central_difference(x, i, h, f));
                best = best.min(e);
                if e < FD_TOL {
                    self.refined += (k > 0) as usize;
                    break;
                }
            }
            if best < FD_TOL {
                self.max_rel = self.max_rel.max(best);
            } else {
                self.unresolved += 1;
                self.worst_unresolved = self.worst_unresolved.max(best);
            }
        }
    }

    /// Plain central differences, for smooth functions.
    fn probe_smooth(&mut self, x: &mut [f64], analytic: &[f64], idx: &[usize], f: &mut dyn FnMut(&[f64]) -> f64) {
        for &i in idx {
            let num = central_difference(x, i, FD_STEP, f);
            self.checked += 1;
            self.max_rel = self.max_rel.max(rel_error(analytic[i], num));
        }
    }
}

fn rand64(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn tensor64(rng: &mut ChaCha8Rng, t: usize, c: usize, o: usize, g: &IcoGrid) -> IcoTensor<f64> {
    IcoTensor::from_vec(t, c, o, g, rand64(rng, t * c * o * g.n_cells())).expect("consistent shape")
}

fn sample(rng: &mut ChaCha8Rng, len: usize, k: usize) -> Vec<usize> {
    if len <= k {
        return (0..len).collect();
    }
    (0..k).map(|_| rng.random_range(0..len)).collect()
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Finite-difference checks in f64 of every op's backward, on random
/// projections of its output, and of the whole r=1 network under the MSE
/// loss. `samples` bounds the probed entries per tensor.
pub fn gradient_checks(seed: u64, samples: usize) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let pyr = GridPyramid::new(2)?;
    let (fine, coarse) = (pyr.grid(2), pyr.grid(1));

    for oin in [1, ORIENTATIONS] {
        let g = fine;
        let (cin, cout) = (2, 3);
        let gather = ConvGather::new(g, oin);
        let x = tensor64(&mut rng, 2, cin, oin, g);
        let w = rand64(&mut rng, cout * cin * oin * 7);
        let b = rand64(&mut rng, cout);
        let y = ico_conv(&x, &w, &b, cout, g, &gather)?;
        let proj = rand64(&mut rng, y.data.len());
        let dy = IcoTensor::from_vec(y.t, y.c, y.o, g, proj.clone())?;
        let gr = ico_conv_backward(&x, &w, cout, &dy, g, &gather);
        let mut c = GradCheck::new(if oin == 1 { "ico conv (scalar input)" } else { "ico conv (regular input)" });
        let mut xd = x.data.clone();
        let idx = sample(&mut rng, xd.len(), samples);
        c.probe_smooth(&mut xd, &gr.dx.data, &idx, &mut |v| {
            let xt = IcoTensor::from_vec(x.t, cin, oin, g, v.to_vec()).expect("shape");
            dotv(&ico_conv(&xt, &w, &b, cout, g, &gather).expect("conv").data, &proj)
        });
        let mut wd = w.clone();
        let idx = sample(&mut rng, wd.len(), samples);
        c.probe_smooth(&mut wd, &gr.dw, &idx, &mut |v| dotv(&ico_conv(&x, v, &b, cout, g, &gather).expect("conv").data, &proj));
        let mut bd = b.clone();
        c.probe_smooth(&mut bd, &gr.db, &[0, 1, 2], &mut |v| dotv(&ico_conv(&x, &w, v, cout, g, &gather).expect("conv").data, &proj));
        out.push(c);
    }

    {
        let (cin, cout) = (3, 2);
        let x = tensor64(&mut rng, 7, cin, ORIENTATIONS, coarse);
        let w = rand64(&mut rng, cout * cin * TEMPORAL_KERNEL);
        let b = rand64(&mut rng, cout);
        let y = temporal_conv(&x, &w, &b, cout)?;
        let proj = rand64(&mut rng, y.data.len());
        let dy = IcoTensor::from_vec(y.t, y.c, y.o, coarse, proj.clone())?;
        let gr = temporal_conv_backward(&x, &w, cout, &dy);
        let mut c = GradCheck::new("temporal conv");
        let mut xd = x.data.clone();
        let idx = sample(&mut rng, xd.len(), samples);
        c.probe_smooth(&mut xd, &gr.dx.data, &idx, &mut |v| {
            let xt = IcoTensor::from_vec(x.t, cin, ORIENTATIONS, coarse, v.to_vec()).expect("shape");
            dotv(&temporal_conv(&xt, &w, &b, cout).expect("tconv").data, &proj)
        });
        let mut wd = w.clone();
        let idx: Vec<usize> = (0..wd.len()).collect();
        c.probe_smooth(&mut wd, &gr.dw, &idx, &mut |v| dotv(&temporal_conv(&x, v, &b, cout).expect("tconv").data, &proj));
        let mut bd = b.clone();
        c.probe_smooth(&mut bd, &gr.db, &[0, 1], &mut |v| dotv(&temporal_conv(&x, &w, v, cout).expect("tconv").data, &proj));
        out.push(c);
    }

    {
        let ch = 3;
        let x = tensor64(&mut rng, 2, ch, ORIENTATIONS, fine);
        let s = rand64(&mut rng, ch);
        let b = rand64(&mut rng, ch);
        let (y, stats) = layer_norm(&x, &s, &b, fine)?;
        let proj = rand64(&mut rng, y.data.len());
        let dy = IcoTensor::from_vec(y.t, y.c, y.o, fine, proj.clone())?;
        let gr = layer_norm_backward(&x, &s, &stats, &dy, fine);
        let mut c = GradCheck::new("layer norm");
        let mut xd = x.data.clone();
        let idx = sample(&mut rng, xd.len(), samples);
        c.probe_smooth(&mut xd, &gr.dx.data, &idx, &mut |v| {
            let xt = IcoTensor::from_vec(x.t, ch, ORIENTATIONS, fine, v.to_vec()).expect("shape");
            dotv(&layer_norm(&xt, &s, &b, fine).expect("ln").0.data, &proj)
        });
        let mut sd = s.clone();
        c.probe_smooth(&mut sd, &gr.dscale, &[0, 1, 2], &mut |v| dotv(&layer_norm(&x, v, &b, fine).expect("ln").0.data, &proj));
        let mut bd = b.clone();
        c.probe_smooth(&mut bd, &gr.dbias, &[0, 1, 2], &mut |v| dotv(&layer_norm(&x, &s, v, fine).expect("ln").0.data, &proj));
        out.push(c);
    }

    {
        let x = tensor64(&mut rng, 2, 2, ORIENTATIONS, fine);
        let y = ico_pool(&x, fine, coarse)?;
        let proj = rand64(&mut rng, y.data.len());
        let dy = IcoTensor::from_vec(y.t, y.c, y.o, coarse, proj.clone())?;
        let dx = ico_pool_backward(&x, &dy, fine, coarse);
        let mut c = GradCheck::new("ico pool");
        let mut xd = x.data.clone();
        let idx = sample(&mut rng, xd.len(), samples);
        c.probe(&mut xd, &dx.data, &idx, &mut |v| {
            let xt = IcoTensor::from_vec(x.t, 2, ORIENTATIONS, fine, v.to_vec()).expect("shape");
            dotv(&ico_pool(&xt, fine, coarse).expect("pool").data, &proj)
        });
        out.push(c);

        let (y, arg) = orientation_maxpool(&x)?;
        let proj = rand64(&mut rng, y.data.len());
        let dy = IcoTensor::from_vec(y.t, y.c, y.o, fine, proj.clone())?;
        let dx = orientation_maxpool_backward(&x, &arg, &dy);
        let mut c = GradCheck::new("orientation max");
        let mut xd = x.data.clone();
        let idx = sample(&mut rng, xd.len(), samples);
        c.probe(&mut xd, &dx.data, &idx, &mut |v| {
            let xt = IcoTensor::from_vec(x.t, 2, ORIENTATIONS, fine, v.to_vec()).expect("shape");
            dotv(&orientation_maxpool(&xt).expect("max").0.data, &proj)
        });
        out.push(c);

        let proj = rand64(&mut rng, x.data.len());
        let dy = IcoTensor::from_vec(x.t, x.c, x.o, fine, proj.clone())?;
        let dx = relu_backward(&x, &dy);
        let mut c = GradCheck::new("relu");
        let mut xd = x.data.clone();
        let idx = sample(&mut rng, xd.len(), samples);
        c.probe(&mut xd, &dx.data, &idx, &mut |v| {
            let xt = IcoTensor::from_vec(x.t, 2, ORIENTATIONS, fine, v.to_vec()).expect("shape");
            dotv(&relu(&xt).data, &proj)
        });
        out.push(c);
    }

    out.push(model_gradient_check(&mut rng, ModelConfig::new(1), samples.min(6))?);
    Ok(out)
}

/// The whole network, soft-argmax head and MSE loss: every parameter
/// tensor and the input, `per_tensor` entries each.
pub fn model_gradient_check(rng: &mut ChaCha8Rng, cfg: ModelConfig, per_tensor: usize) -> Result<GradCheck> {
    let ctx = NetContext::new(cfg.r)?;
    let p = ModelParams::<f64>::init(cfg, rng.random())?;
    let t = 3;
    let grid = ctx.grid(cfg.r);
    let x = tensor64(rng, t, 1, 1, grid);
    let gt: Vec<[f64; 3]> = (0..t)
        .map(|_| {
            let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let n = dot(v, v).sqrt();
            [v[0] / n, v[1] / n, v[2] / n]
        })
        .collect();
    let loss = |q: &ModelParams<f64>, x: &IcoTensor<f64>| -> f64 {
        loss_mse(&forward_tensor(x.clone(), q, &ctx).expect("forward").v, &gt).expect("loss")
    };

    let (mut tape, out) = record(&ctx, &p, x.clone())?;
    let l = tape.mse(out, &gt)?;
    let grads = tape.backward(l)?;
    let pg = grads.params(&p);
    let mut c = GradCheck::new(&format!("r={} model", cfg.r));
    for i in 0..p.tensors.len() {
        let idx = sample(rng, p.tensors[i].len(), per_tensor);
        let mut data = p.tensors[i].data.clone();
        let mut q = p.clone();
        c.probe(&mut data, &pg[i], &idx, &mut |v| {
            q.tensors[i].data.copy_from_slice(v);
            loss(&q, &x)
        });
    }
    let dx = grads.node(p.tensors.len()).ok_or_else(|| Error::InvalidArgument("input gradient missing".into()))?.to_vec();
    let mut xd = x.data.clone();
    let idx = sample(rng, xd.len(), 5 * per_tensor);
    c.probe(&mut xd, &dx, &idx, &mut |v| loss(&p, &IcoTensor::from_vec(t, 1, 1, grid, v.to_vec()).expect("shape")));
    Ok(c)
}

/// Plane wave from direction `u` on every microphone, built as an exact
/// linear phase on a periodic signal three frames long and cropped to the
/// middle `k` samples.
pub fn plane_wave(src: &[f64], array: &MicArray, u: Vec3, k: usize) -> Vec<Vec<f64>> {
    let n = src.len();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut spec: Vec<Complex<f64>> = src.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fwd.process(&mut spec);
    array
        .positions
        .iter()
        .map(|p| {
            let adv = array.fs * dot(*p, u) / array.c;
            let mut s = spec.clone();
            for (i, z) in s.iter_mut().enumerate() {
                let f = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
                *z *= Complex::from_polar(1.0, 2.0 * std::f64::consts::PI * f * adv / n as f64);
            }
            s[n / 2] = Complex::new(0.0, 0.0);
            inv.process(&mut s);
            let start = (n - k) / 2;
            s[start..start + k].iter().map(|z| z.re / n as f64).collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SrpOracleReport {
    pub hits: usize,
    pub total: usize,
    /// Mean angle between the argmax cell and the true direction.
    pub mean_error_deg: f64,
    pub quantization_deg: f64,
}

impl SrpOracleReport {
    pub fn hit_rate(&self) -> f64 {
        self.hits as f64 / self.total as f64
    }
}

/// Free-field white-noise plane waves from `n` uniformly random directions.
pub fn srp_oracle(array: &MicArray, r: u32, n: usize, seed: u64) -> Result<SrpOracleReport> {
    let grid = IcoGrid::new(r)?;
    let cfg = FramingConfig::default();
    let gcc = GccPhat::new(cfg, GccConfig::default())?;
    let table = tdoa_table(array, &grid);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hits, mut total_err) = (0, 0.0);
    for _ in 0..n {
        let u = loop {
            let v: Vec3 = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let l = dot(v, v).sqrt();
            if l > 1e-3 && l <= 1.0 {
                break [v[0] / l, v[1] / l, v[2] / l];
            }
        };
        let src: Vec<f64> = (0..3 * cfg.k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let frame = plane_wave(&src, array, u, cfg.k);
        let map = normalize_map(&srp_map(&gcc.compute(&frame)?, &table, &grid)?, &grid)?;
        let best = map_argmax(&map, &grid);
        if best == nearest_cell(&grid, u)? {
            hits += 1;
        }
        total_err += dot(grid.coord(best), u).clamp(-1.0, 1.0).acos().to_degrees();
    }
    Ok(SrpOracleReport { hits, total: n, mean_error_deg: total_err / n as f64, quantization_deg: quantization_angle_deg(&grid) })
}
