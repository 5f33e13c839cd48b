//! The icosahedral DOA network: `(r - 1)` down-sampling stages of two conv
//! units and a pooling layer, five more conv units, orientation max pooling
//! and a soft-argmax over the resolution-1 grid.
//!
//! A conv unit is `ico_conv -> temporal_conv -> layer_norm -> relu`; the last
//! one stops after a single-channel temporal convolution.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ico_grid::{GridPyramid, IcoGrid, ORIENTATIONS};
use crate::ico_nn::{self, ConvGather, IcoTensor, Real, TEMPORAL_KERNEL};
use crate::srp_phat::{FramingConfig, SrpMapSeq};

pub const CHECKPOINT_MAGIC: &str = "ICODOA1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub r: u32,
    pub channels: usize,
    pub n_final_units: usize,
}

impl ModelConfig {
    pub fn new(r: u32) -> Self {
        Self { r, channels: 32, n_final_units: 5 }
    }

    pub fn n_downsampling(&self) -> usize {
        self.r.saturating_sub(1) as usize
    }

    pub fn n_units(&self) -> usize {
        2 * self.n_downsampling() + self.n_final_units
    }

    pub fn validate(&self) -> Result<()> {
        if self.r < 1 || self.channels == 0 || self.n_final_units == 0 {
            return Err(Error::InvalidArgument(format!("invalid model config {self:?}")));
        }
        Ok(())
    }
}

/// Parameter indices of one conv unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnitLayout {
    pub conv_w: usize,
    pub conv_b: usize,
    pub tconv_w: usize,
    pub tconv_b: usize,
    /// `(scale, bias)`; absent on the final unit.
    pub ln: Option<(usize, usize)>,
    pub cin: usize,
    pub oin: usize,
    pub cout: usize,
    pub tout: usize,
    /// Resolution the unit runs at.
    pub r: u32,
    /// Pool after this unit.
    pub pool_after: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T> NamedTensor<T> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Parameter shapes and names of a config, in checkpoint order.
pub fn layout(cfg: &ModelConfig) -> (Vec<UnitLayout>, Vec<(String, Vec<usize>)>) {
    let c = cfg.channels;
    let mut units = Vec::new();
    let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| {
        shapes.push((name, shape));
        shapes.len() - 1
    };
    let n = cfg.n_units();
    let mut r = cfg.r;
    for u in 0..n {
        let (cin, oin) = if u == 0 { (1, 1) } else { (c, ORIENTATIONS) };
        let last = u + 1 == n;
        let tout = if last { 1 } else { c };
        let name = if u < 2 * cfg.n_downsampling() { format!("down{}.{}", u / 2, u % 2) } else { format!("unit{}", u - 2 * cfg.n_downsampling()) };
        let conv_w = push(format!("{name}.conv.weight"), vec![c, cin, oin, 7]);
        let conv_b = push(format!("{name}.conv.bias"), vec![c]);
        let tconv_w = push(format!("{name}.tconv.weight"), vec![tout, c, TEMPORAL_KERNEL]);
        let tconv_b = push(format!("{name}.tconv.bias"), vec![tout]);
        let ln = (!last).then(|| (push(format!("{name}.ln.scale"), vec![c]), push(format!("{name}.ln.bias"), vec![c])));
        let pool_after = u < 2 * cfg.n_downsampling() && u % 2 == 1;
        units.push(UnitLayout { conv_w, conv_b, tconv_w, tconv_b, ln, cin, oin, cout: c, tout, r, pool_after });
        if pool_after {
            r -= 1;
        }
    }
    (units, shapes)
}

/// Number of trainable scalars.
pub fn param_count(cfg: &ModelConfig) -> usize {
    layout(cfg).1.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

/// Temporal receptive field in frames and seconds.
pub fn receptive_field(cfg: &ModelConfig, framing: &FramingConfig, fs: f64) -> (usize, f64) {
    let frames = 1 + (TEMPORAL_KERNEL - 1) * cfg.n_units();
    let seconds = ((frames - 1) * framing.hop) as f64 / fs + framing.k as f64 / fs;
    (frames, seconds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub cfg: ModelConfig,
    pub tensors: Vec<NamedTensor<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Uniform in `±sqrt(1/fan_in)` for convolution weights and biases,
    /// scale 1 and bias 0 for layer norms.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (units, shapes) = layout(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors: Vec<NamedTensor<T>> =
            shapes.into_iter().map(|(name, shape)| NamedTensor { data: vec![T::zero(); shape.iter().product()], name, shape }).collect();
        for u in &units {
            let conv_fan = (u.cin * u.oin * 7) as f64;
            let t_fan = (u.cout * TEMPORAL_KERNEL) as f64;
            for (idx, fan) in [(u.conv_w, conv_fan), (u.conv_b, conv_fan), (u.tconv_w, t_fan), (u.tconv_b, t_fan)] {
                let bound = (1.0 / fan).sqrt();
                for v in &mut tensors[idx].data {
                    *v = T::of(rng.random_range(-bound..bound));
                }
            }
            if let Some((s, _)) = u.ln {
                tensors[s].data.fill(T::one());
            }
        }
        Ok(Self { cfg, tensors })
    }

    pub fn units(&self) -> Vec<UnitLayout> {
        layout(&self.cfg).0
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(NamedTensor::len).sum()
    }

    pub fn get(&self, idx: usize) -> &[T] {
        &self.tensors[idx].data
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            cfg: self.cfg,
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor { name: t.name.clone(), shape: t.shape.clone(), data: t.data.iter().map(|v| U::of(Real::to_f64(*v))).collect() })
                .collect(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for t in &self.tensors {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {}", t.name)));
            }
        }
        Ok(())
    }
}

/// Writes tensors in the checkpoint format: the magic line, the tensor
/// count, one `name rank d0 d1 ...` line per tensor, then all values as
/// little-endian f32 in header order.
pub fn write_checkpoint(path: &Path, tensors: &[NamedTensor<f32>]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{CHECKPOINT_MAGIC}").expect("vec write");
    writeln!(out, "{}", tensors.len()).expect("vec write");
    for t in tensors {
        let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
        writeln!(out, "{} {} {}", t.name, t.shape.len(), dims.join(" ")).expect("vec write");
    }
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<NamedTensor<f32>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let bad = |msg: String| Error::Format { kind: "checkpoint", path: path.into(), msg };
    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<std::fs::File>| -> Result<String> {
        line.clear();
        reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut reader)? != CHECKPOINT_MAGIC {
        return Err(bad("missing magic line".into()));
    }
    let count: usize = next_line(&mut reader)?.trim().parse().map_err(|e| bad(format!("tensor count: {e}")))?;
    let mut headers = Vec::with_capacity(count);
    for i in 0..count {
        let l = next_line(&mut reader)?;
        let mut parts = l.split_whitespace();
        let name = parts.next().ok_or_else(|| bad(format!("header {i} is empty")))?.to_string();
        let rank: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad(format!("header {i}: bad rank")))?;
        let shape: Vec<usize> = parts.map(|s| s.parse().map_err(|e| bad(format!("header {i}: {e}")))).collect::<Result<_>>()?;
        if shape.len() != rank {
            return Err(bad(format!("header {i}: rank {rank} with {} dims", shape.len())));
        }
        headers.push((name, shape));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in headers {
        let len: usize = shape.iter().product();
        let mut bytes = vec![0u8; len * 4];
        reader.read_exact(&mut bytes).map_err(|e| bad(format!("tensor {name}: {e}")))?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        tensors.push(NamedTensor { name, shape, data });
    }
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok(tensors)
}

impl ModelParams<f32> {
    /// Rebuilds parameters from checkpoint tensors; the resolution is
    /// inferred from the number of units, other tensors are ignored.
    pub fn from_tensors(all: &[NamedTensor<f32>]) -> Result<Self> {
        let is_conv = |t: &&NamedTensor<f32>| (t.name.starts_with("down") || t.name.starts_with("unit")) && t.name.ends_with(".conv.weight");
        let first = all.iter().find(is_conv).ok_or_else(|| Error::InvalidArgument("no conv weights in checkpoint".into()))?;
        let channels = first.shape[0];
        let units = all.iter().filter(is_conv).count();
        let downs = all.iter().filter(|t| t.name.starts_with("down") && t.name.ends_with(".conv.weight")).count();
        if downs % 2 != 0 || units <= downs {
            return Err(Error::InvalidArgument(format!("inconsistent unit counts {units}/{downs}")));
        }
        let cfg = ModelConfig { r: (downs / 2 + 1) as u32, channels, n_final_units: units - downs };
        let (_, shapes) = layout(&cfg);
        let mut tensors = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let t = all.iter().find(|t| t.name == name).ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks {name}")))?;
            if t.shape != shape {
                return Err(Error::shape(format!("{name} {shape:?}"), format!("{:?}", t.shape)));
            }
            tensors.push(t.clone());
        }
        let p = Self { cfg, tensors };
        p.check_finite()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&read_checkpoint(path)?)
    }
}

/// Grids and gather tables for every resolution a model touches.
#[derive(Debug, Clone)]
pub struct NetContext {
    pub pyramid: GridPyramid,
    scalar_gather: ConvGather,
    regular_gather: Vec<ConvGather>,
}

impl NetContext {
    pub fn new(r: u32) -> Result<Self> {
        let pyramid = GridPyramid::new(r)?;
        let scalar_gather = ConvGather::new(pyramid.grid(r), 1);
        let regular_gather = (1..=r).map(|l| ConvGather::new(pyramid.grid(l), ORIENTATIONS)).collect();
        Ok(Self { pyramid, scalar_gather, regular_gather })
    }

    pub fn top(&self) -> u32 {
        self.pyramid.top()
    }

    pub fn grid(&self, r: u32) -> &IcoGrid {
        self.pyramid.grid(r)
    }

    pub fn gather(&self, r: u32, oin: usize) -> &ConvGather {
        if oin == 1 {
            assert_eq!(r, self.top(), "scalar inputs only enter at the top resolution");
            &self.scalar_gather
        } else {
            &self.regular_gather[r as usize - 1]
        }
    }
}

/// Operations the architecture is written against; implemented by direct
/// evaluation here and by the recording tape of the gradient engine.
pub trait Graph<T: Real> {
    type H;

    fn ico_conv(&mut self, x: Self::H, w: usize, b: usize, cout: usize, r: u32) -> Result<Self::H>;
    fn temporal_conv(&mut self, x: Self::H, w: usize, b: usize, cout: usize) -> Result<Self::H>;
    fn layer_norm(&mut self, x: Self::H, scale: usize, bias: usize, r: u32) -> Result<Self::H>;
    fn relu(&mut self, x: Self::H) -> Result<Self::H>;
    fn ico_pool(&mut self, x: Self::H, r_fine: u32) -> Result<Self::H>;
    fn orientation_maxpool(&mut self, x: Self::H) -> Result<Self::H>;
    fn zero_vertices(&mut self, x: Self::H, r: u32) -> Result<Self::H>;
    fn soft_argmax(&mut self, x: Self::H, r: u32) -> Result<Self::H>;
}

/// Wires the architecture for `params.cfg` on graph `g`, starting from the
/// input handle (a `[T][1][1][cells]` tensor at resolution `r`).
pub fn build<T: Real, G: Graph<T>>(g: &mut G, params: &ModelParams<T>, input: G::H) -> Result<G::H> {
    let mut h = input;
    for u in params.units() {
        h = g.ico_conv(h, u.conv_w, u.conv_b, u.cout, u.r)?;
        h = g.temporal_conv(h, u.tconv_w, u.tconv_b, u.tout)?;
        if let Some((s, b)) = u.ln {
            h = g.layer_norm(h, s, b, u.r)?;
            h = g.relu(h)?;
        }
        if u.pool_after {
            h = g.ico_pool(h, u.r)?;
        }
    }
    h = g.orientation_maxpool(h)?;
    h = g.zero_vertices(h, 1)?;
    g.soft_argmax(h, 1)
}

/// Per-frame DOA vectors and the probability maps they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct DoaOutput<T> {
    /// `[t][3]`.
    pub v: Vec<[T; 3]>,
    /// `[t][cell]` over the resolution-1 grid.
    pub probs: Vec<Vec<T>>,
}

impl<T: Real> DoaOutput<T> {
    pub fn confidence(&self, t: usize) -> T {
        let v = self.v[t];
        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
    }
}

/// Softmax (max-subtracted) of per-cell logits and the expected cell
/// coordinate.
pub fn soft_argmax<T: Real>(logits: &[T], grid: &IcoGrid) -> Result<([T; 3], Vec<T>)> {
    if logits.len() != grid.n_cells() {
        return Err(Error::shape(grid.n_cells(), logits.len()));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("soft-argmax logits".into()));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: T = e.iter().copied().sum();
    let probs: Vec<T> = e.into_iter().map(|v| v / z).collect();
    let mut v = [T::zero(); 3];
    for (c, &p) in probs.iter().enumerate() {
        let x = grid.coord(c);
        for k in 0..3 {
            v[k] += p * T::of(x[k]);
        }
    }
    Ok((v, probs))
}

/// Value flowing through [`Eval`].
pub enum EvalValue<T> {
    Tensor(IcoTensor<T>),
    Doa(DoaOutput<T>),
}

/// Direct evaluation without recording.
pub struct Eval<'a, T> {
    pub ctx: &'a NetContext,
    pub params: &'a ModelParams<T>,
}

fn tensor<T>(h: EvalValue<T>) -> Result<IcoTensor<T>> {
    match h {
        EvalValue::Tensor(t) => Ok(t),
        EvalValue::Doa(_) => Err(Error::InvalidArgument("operation applied after soft-argmax".into())),
    }
}

fn check_finite<T: Real>(x: &IcoTensor<T>, what: &str) -> Result<()> {
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} activations")));
    }
    Ok(())
}

impl<T: Real> Graph<T> for Eval<'_, T> {
    type H = EvalValue<T>;

    fn ico_conv(&mut self, x: Self::H, w: usize, b: usize, cout: usize, r: u32) -> Result<Self::H> {
        let x = tensor(x)?;
        let y = ico_nn::ico_conv(&x, self.params.get(w), self.params.get(b), cout, self.ctx.grid(r), self.ctx.gather(r, x.o))?;
        check_finite(&y, &self.params.tensors[w].name)?;
        Ok(EvalValue::Tensor(y))
    }

    fn temporal_conv(&mut self, x: Self::H, w: usize, b: usize, cout: usize) -> Result<Self::H> {
        let y = ico_nn::temporal_conv(&tensor(x)?, self.params.get(w), self.params.get(b), cout)?;
        check_finite(&y, &self.params.tensors[w].name)?;
        Ok(EvalValue::Tensor(y))
    }

    fn layer_norm(&mut self, x: Self::H, scale: usize, bias: usize, r: u32) -> Result<Self::H> {
        let (y, _) = ico_nn::layer_norm(&tensor(x)?, self.params.get(scale), self.params.get(bias), self.ctx.grid(r))?;
        Ok(EvalValue::Tensor(y))
    }

    fn relu(&mut self, x: Self::H) -> Result<Self::H> {
        Ok(EvalValue::Tensor(ico_nn::relu(&tensor(x)?)))
    }

    fn ico_pool(&mut self, x: Self::H, r_fine: u32) -> Result<Self::H> {
        let y = ico_nn::ico_pool(&tensor(x)?, self.ctx.grid(r_fine), self.ctx.grid(r_fine - 1))?;
        Ok(EvalValue::Tensor(y))
    }

    fn orientation_maxpool(&mut self, x: Self::H) -> Result<Self::H> {
        Ok(EvalValue::Tensor(ico_nn::orientation_maxpool(&tensor(x)?)?.0))
    }

    fn zero_vertices(&mut self, x: Self::H, r: u32) -> Result<Self::H> {
        Ok(EvalValue::Tensor(ico_nn::zero_vertices(&tensor(x)?, self.ctx.grid(r))))
    }

    fn soft_argmax(&mut self, x: Self::H, r: u32) -> Result<Self::H> {
        let x = tensor(x)?;
        if x.c != 1 || x.o != 1 {
            return Err(Error::shape("one scalar channel", format!("{} channels x {} orientations", x.c, x.o)));
        }
        let grid = self.ctx.grid(r);
        let mut out = DoaOutput { v: Vec::with_capacity(x.t), probs: Vec::with_capacity(x.t) };
        for t in 0..x.t {
            let (v, p) = soft_argmax(x.frame(t), grid)?;
            out.v.push(v);
            out.probs.push(p);
        }
        Ok(EvalValue::Doa(out))
    }
}

/// Converts normalised maps to the network input tensor.
pub fn input_tensor<T: Real>(maps: &SrpMapSeq, grid: &IcoGrid) -> Result<IcoTensor<T>> {
    if maps.r != grid.resolution() {
        return Err(Error::shape(format!("maps at resolution {}", grid.resolution()), format!("resolution {}", maps.r)));
    }
    let data = maps.maps.iter().flat_map(|m| m.iter().map(|&v| T::of(v))).collect();
    IcoTensor::from_vec(maps.n_frames(), 1, 1, grid, data)
}

/// Runs the network on an input tensor.
pub fn forward_tensor<T: Real>(x: IcoTensor<T>, params: &ModelParams<T>, ctx: &NetContext) -> Result<DoaOutput<T>> {
    if x.r != params.cfg.r || ctx.top() != params.cfg.r {
        return Err(Error::shape(format!("input at resolution {}", params.cfg.r), format!("resolution {}", x.r)));
    }
    let mut g = Eval { ctx, params };
    match build(&mut g, params, EvalValue::Tensor(x))? {
        EvalValue::Doa(d) => Ok(d),
        EvalValue::Tensor(_) => unreachable!("the architecture ends with soft-argmax"),
    }
}

/// Runs the network on a map sequence.
pub fn forward<T: Real>(maps: &SrpMapSeq, params: &ModelParams<T>, ctx: &NetContext) -> Result<DoaOutput<T>> {
    forward_tensor(input_tensor(maps, ctx.grid(params.cfg.r))?, params, ctx)
}
