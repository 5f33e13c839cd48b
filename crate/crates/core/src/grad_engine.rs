//! Reverse-mode differentiation over the fixed operation set of the DOA
//! network, the MSE loss, Adam and the SNR curriculum.

use crate::doa_model::{self, Graph, ModelParams, NamedTensor, NetContext};
use crate::error::{Error, Result};
use crate::ico_nn::{self, IcoTensor, LnStats, Real};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Value<T> {
    /// Parameter leaf; the value lives in the parameter set.
    Param(usize),
    Tensor(IcoTensor<T>),
    /// `[t][3]` flattened DOA vectors.
    Vectors(Vec<T>),
    Scalar(T),
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    IcoConv { x: NodeId, w: NodeId, b: NodeId, cout: usize, r: u32 },
    TemporalConv { x: NodeId, w: NodeId, b: NodeId, cout: usize },
    LayerNorm { x: NodeId, scale: NodeId, bias: NodeId, r: u32, stats: LnStats<T> },
    Relu { x: NodeId },
    IcoPool { x: NodeId, r_fine: u32 },
    OrientMax { x: NodeId, arg: Vec<u8> },
    ZeroVertices { x: NodeId, r: u32 },
    SoftArgmax { x: NodeId, r: u32, probs: Vec<T> },
    Mse { est: NodeId, target: Vec<T> },
    Sum { x: NodeId },
}

struct Node<T> {
    op: Op<T>,
    value: Value<T>,
}

/// Operation graph of one forward pass. Parameters occupy node ids
/// `0..params.tensors.len()`.
pub struct Tape<'a, T> {
    ctx: &'a NetContext,
    params: &'a ModelParams<T>,
    nodes: Vec<Node<T>>,
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new(ctx: &'a NetContext, params: &'a ModelParams<T>) -> Self {
        let nodes = (0..params.tensors.len()).map(|i| Node { op: Op::Leaf, value: Value::Param(i) }).collect();
        Self { ctx, params, nodes }
    }

    pub fn param(&self, idx: usize) -> NodeId {
        assert!(idx < self.params.tensors.len());
        idx
    }

    /// Records an input leaf; its gradient is available after backward.
    pub fn input(&mut self, x: IcoTensor<T>) -> NodeId {
        self.push(Op::Leaf, Value::Tensor(x))
    }

    fn push(&mut self, op: Op<T>, value: Value<T>) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn flat(&self, id: NodeId) -> &[T] {
        match &self.nodes[id].value {
            Value::Param(i) => self.params.get(*i),
            Value::Tensor(t) => &t.data,
            Value::Vectors(v) => v,
            Value::Scalar(s) => std::slice::from_ref(s),
        }
    }

    pub fn tensor(&self, id: NodeId) -> Result<&IcoTensor<T>> {
        match &self.nodes[id].value {
            Value::Tensor(t) => Ok(t),
            _ => Err(Error::InvalidArgument(format!("node {id} is not a tensor"))),
        }
    }

    /// DOA vectors `[t][3]` of a soft-argmax node.
    pub fn vectors(&self, id: NodeId) -> Result<Vec<[T; 3]>> {
        match &self.nodes[id].value {
            Value::Vectors(v) => Ok(v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()),
            _ => Err(Error::InvalidArgument(format!("node {id} is not a DOA sequence"))),
        }
    }

    pub fn probs(&self, id: NodeId) -> Option<&[T]> {
        match &self.nodes[id].op {
            Op::SoftArgmax { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn scalar(&self, id: NodeId) -> Result<T> {
        match &self.nodes[id].value {
            Value::Scalar(s) => Ok(*s),
            _ => Err(Error::InvalidArgument(format!("node {id} is not a scalar"))),
        }
    }

    /// Mean over frames and coordinates of `(v - target)^2`.
    pub fn mse(&mut self, est: NodeId, target: &[[T; 3]]) -> Result<NodeId> {
        let v = self.flat(est);
        if v.len() != 3 * target.len() {
            return Err(Error::shape(format!("{} frames", v.len() / 3), format!("{} targets", target.len())));
        }
        let flat: Vec<T> = target.iter().flatten().copied().collect();
        let n = T::of(v.len() as f64);
        let loss = v.iter().zip(&flat).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        Ok(self.push(Op::Mse { est, target: flat }, Value::Scalar(loss)))
    }

    /// Sum of every element of a node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.flat(x).iter().copied().sum();
        self.push(Op::Sum { x }, Value::Scalar(s))
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if !matches!(self.nodes[loss].value, Value::Scalar(_)) {
            return Err(Error::InvalidArgument("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![T::one()]);
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, n_params: self.params.tensors.len() })
    }

    fn backprop(&self, id: NodeId, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let like = |x: &IcoTensor<T>, data: &[T]| IcoTensor { data: data.to_vec(), ..*x };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::IcoConv { x, w, b, cout, r } => {
                let xt = self.tensor(*x)?;
                let dy = like(self.tensor(id)?, g);
                let gr = ico_nn::ico_conv_backward(xt, self.flat(*w), *cout, &dy, self.ctx.grid(*r), self.ctx.gather(*r, xt.o));
                accumulate(grads, *x, &gr.dx.data);
                accumulate(grads, *w, &gr.dw);
                accumulate(grads, *b, &gr.db);
            }
            Op::TemporalConv { x, w, b, cout } => {
                let xt = self.tensor(*x)?;
                let dy = like(self.tensor(id)?, g);
                let gr = ico_nn::temporal_conv_backward(xt, self.flat(*w), *cout, &dy);
                accumulate(grads, *x, &gr.dx.data);
                accumulate(grads, *w, &gr.dw);
                accumulate(grads, *b, &gr.db);
            }
            Op::LayerNorm { x, scale, bias, r, stats } => {
                let xt = self.tensor(*x)?;
                let dy = like(xt, g);
                let gr = ico_nn::layer_norm_backward(xt, self.flat(*scale), stats, &dy, self.ctx.grid(*r));
                accumulate(grads, *x, &gr.dx.data);
                accumulate(grads, *scale, &gr.dscale);
                accumulate(grads, *bias, &gr.dbias);
            }
            Op::Relu { x } => {
                let xt = self.tensor(*x)?;
                accumulate(grads, *x, &ico_nn::relu_backward(xt, &like(xt, g)).data);
            }
            Op::IcoPool { x, r_fine } => {
                let xt = self.tensor(*x)?;
                let dy = like(self.tensor(id)?, g);
                let dx = ico_nn::ico_pool_backward(xt, &dy, self.ctx.grid(*r_fine), self.ctx.grid(r_fine - 1));
                accumulate(grads, *x, &dx.data);
            }
            Op::OrientMax { x, arg } => {
                let xt = self.tensor(*x)?;
                let dy = like(self.tensor(id)?, g);
                accumulate(grads, *x, &ico_nn::orientation_maxpool_backward(xt, arg, &dy).data);
            }
            Op::ZeroVertices { x, r } => {
                let xt = self.tensor(*x)?;
                accumulate(grads, *x, &ico_nn::zero_vertices(&like(xt, g), self.ctx.grid(*r)).data);
            }
            Op::SoftArgmax { x, r, probs } => {
                let grid = self.ctx.grid(*r);
                let n = grid.n_cells();
                let v = self.flat(id);
                let mut dx = vec![T::zero(); probs.len()];
                for t in 0..probs.len() / n {
                    let dv = &g[3 * t..3 * t + 3];
                    let vdv = v[3 * t] * dv[0] + v[3 * t + 1] * dv[1] + v[3 * t + 2] * dv[2];
                    for c in 0..n {
                        let p = grid.coord(c);
                        let cdv = T::of(p[0]) * dv[0] + T::of(p[1]) * dv[1] + T::of(p[2]) * dv[2];
                        dx[t * n + c] = probs[t * n + c] * (cdv - vdv);
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::Mse { est, target } => {
                let v = self.flat(*est);
                let scale = T::of(2.0 / v.len() as f64) * g[0];
                let d: Vec<T> = v.iter().zip(target).map(|(&a, &b)| scale * (a - b)).collect();
                accumulate(grads, *est, &d);
            }
            Op::Sum { x } => {
                let d = vec![g[0]; self.flat(*x).len()];
                accumulate(grads, *x, &d);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: NodeId, g: &[T]) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        slot => *slot = Some(g.to_vec()),
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    n_params: usize,
}

impl<T: Real> Gradients<T> {
    /// Gradient of any node (zeros if the loss does not depend on it).
    pub fn node(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id].as_deref()
    }

    /// Parameter gradients in parameter order, zero-filled where unused.
    pub fn params(&self, params: &ModelParams<T>) -> Vec<Vec<T>> {
        (0..self.n_params)
            .map(|i| self.grads[i].clone().unwrap_or_else(|| vec![T::zero(); params.tensors[i].len()]))
            .collect()
    }
}

impl<T: Real> Graph<T> for Tape<'_, T> {
    type H = NodeId;

    fn ico_conv(&mut self, x: NodeId, w: usize, b: usize, cout: usize, r: u32) -> Result<NodeId> {
        let xt = self.tensor(x)?;
        let y = ico_nn::ico_conv(xt, self.params.get(w), self.params.get(b), cout, self.ctx.grid(r), self.ctx.gather(r, xt.o))?;
        finite(&y.data, &self.params.tensors[w].name)?;
        Ok(self.push(Op::IcoConv { x, w, b, cout, r }, Value::Tensor(y)))
    }

    fn temporal_conv(&mut self, x: NodeId, w: usize, b: usize, cout: usize) -> Result<NodeId> {
        let y = ico_nn::temporal_conv(self.tensor(x)?, self.params.get(w), self.params.get(b), cout)?;
        finite(&y.data, &self.params.tensors[w].name)?;
        Ok(self.push(Op::TemporalConv { x, w, b, cout }, Value::Tensor(y)))
    }

    fn layer_norm(&mut self, x: NodeId, scale: usize, bias: usize, r: u32) -> Result<NodeId> {
        let (y, stats) = ico_nn::layer_norm(self.tensor(x)?, self.params.get(scale), self.params.get(bias), self.ctx.grid(r))?;
        Ok(self.push(Op::LayerNorm { x, scale, bias, r, stats }, Value::Tensor(y)))
    }

    fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let y = ico_nn::relu(self.tensor(x)?);
        Ok(self.push(Op::Relu { x }, Value::Tensor(y)))
    }

    fn ico_pool(&mut self, x: NodeId, r_fine: u32) -> Result<NodeId> {
        let y = ico_nn::ico_pool(self.tensor(x)?, self.ctx.grid(r_fine), self.ctx.grid(r_fine - 1))?;
        Ok(self.push(Op::IcoPool { x, r_fine }, Value::Tensor(y)))
    }

    fn orientation_maxpool(&mut self, x: NodeId) -> Result<NodeId> {
        let (y, arg) = ico_nn::orientation_maxpool(self.tensor(x)?)?;
        Ok(self.push(Op::OrientMax { x, arg }, Value::Tensor(y)))
    }

    fn zero_vertices(&mut self, x: NodeId, r: u32) -> Result<NodeId> {
        let y = ico_nn::zero_vertices(self.tensor(x)?, self.ctx.grid(r));
        Ok(self.push(Op::ZeroVertices { x, r }, Value::Tensor(y)))
    }

    fn soft_argmax(&mut self, x: NodeId, r: u32) -> Result<NodeId> {
        let xt = self.tensor(x)?;
        if xt.c != 1 || xt.o != 1 {
            return Err(Error::shape("one scalar channel", format!("{} channels x {} orientations", xt.c, xt.o)));
        }
        let grid = self.ctx.grid(r);
        let mut v = Vec::with_capacity(3 * xt.t);
        let mut probs = Vec::with_capacity(xt.data.len());
        for t in 0..xt.t {
            let (vt, p) = doa_model::soft_argmax(xt.frame(t), grid)?;
            v.extend_from_slice(&vt);
            probs.extend(p);
        }
        Ok(self.push(Op::SoftArgmax { x, r, probs }, Value::Vectors(v)))
    }
}

fn finite<T: Real>(v: &[T], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("{what} activations")));
    }
    Ok(())
}

/// Forward pass with recording; returns the tape and the DOA node.
pub fn record<'a, T: Real>(ctx: &'a NetContext, params: &'a ModelParams<T>, x: IcoTensor<T>) -> Result<(Tape<'a, T>, NodeId)> {
    let mut tape = Tape::new(ctx, params);
    let input = tape.input(x);
    let out = doa_model::build(&mut tape, params, input)?;
    Ok((tape, out))
}

/// Loss and parameter gradients of one sequence.
pub fn loss_and_grads<T: Real>(
    ctx: &NetContext,
    params: &ModelParams<T>,
    x: IcoTensor<T>,
    target: &[[T; 3]],
) -> Result<(T, Vec<Vec<T>>)> {
    let (mut tape, out) = record(ctx, params, x)?;
    let loss = tape.mse(out, target)?;
    let value = tape.scalar(loss)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grads = tape.backward(loss)?;
    Ok((value, grads.params(params)))
}

/// Mean loss and mean gradients over a batch. Sequences run in parallel;
/// the reduction is sequential in batch order so results do not depend on
/// the thread count.
pub fn batch_loss_and_grads<T: Real>(
    ctx: &NetContext,
    params: &ModelParams<T>,
    batch: Vec<(IcoTensor<T>, Vec<[T; 3]>)>,
) -> Result<(T, Vec<Vec<T>>)> {
    use rayon::prelude::*;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = batch.len();
    let each: Vec<(T, Vec<Vec<T>>)> =
        batch.into_par_iter().map(|(x, gt)| loss_and_grads(ctx, params, x, &gt)).collect::<Result<_>>()?;
    let inv = T::of(1.0 / n as f64);
    let mut it = each.into_iter();
    let (mut loss, mut grads) = it.next().expect("non-empty batch");
    for (l, g) in it {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
    }
    grads.iter_mut().flatten().for_each(|v| *v *= inv);
    Ok((loss * inv, grads))
}

/// Mean squared error over frames and coordinates.
pub fn loss_mse<T: Real>(est: &[[T; 3]], gt: &[[T; 3]]) -> Result<T> {
    if est.len() != gt.len() || est.is_empty() {
        return Err(Error::shape(format!("{} frames", gt.len()), est.len()));
    }
    let s: T = est.iter().zip(gt).flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]) * (a[k] - b[k]))).sum();
    Ok(s / T::of((3 * est.len()) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub cfg: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(cfg: AdamConfig, params: &ModelParams<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect();
        Self { cfg, m: zeros.clone(), v: zeros, step: 0 }
    }

    /// Bias-corrected Adam update. Non-finite gradients abort the step
    /// before anything is modified.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != params.tensors.len() {
            return Err(Error::shape(format!("{} gradient tensors", params.tensors.len()), grads.len()));
        }
        for (t, g) in params.tensors.iter().zip(grads) {
            if g.len() != t.len() {
                return Err(Error::shape(format!("{} {}", t.name, t.len()), g.len()));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {} at element {i}", t.name)));
            }
        }
        self.step += 1;
        let c = self.cfg;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for (((t, g), m), v) in params.tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                t.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

impl AdamState<f32> {
    /// Moments and step as extra checkpoint tensors.
    pub fn to_tensors(&self, params: &ModelParams<f32>) -> Vec<NamedTensor<f32>> {
        let mut out = Vec::new();
        for (i, t) in params.tensors.iter().enumerate() {
            out.push(NamedTensor { name: format!("adam.m.{}", t.name), shape: t.shape.clone(), data: self.m[i].clone() });
            out.push(NamedTensor { name: format!("adam.v.{}", t.name), shape: t.shape.clone(), data: self.v[i].clone() });
        }
        // The step count is split into two exactly representable halves.
        let (hi, lo) = ((self.step >> 16) as f32, (self.step & 0xffff) as f32);
        out.push(NamedTensor { name: "adam.step".into(), shape: vec![2], data: vec![hi, lo] });
        out
    }

    pub fn from_tensors(cfg: AdamConfig, params: &ModelParams<f32>, all: &[NamedTensor<f32>]) -> Result<Self> {
        let find = |name: &str| all.iter().find(|t| t.name == name).ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks {name}")));
        let mut m = Vec::new();
        let mut v = Vec::new();
        for t in &params.tensors {
            let a = find(&format!("adam.m.{}", t.name))?;
            let b = find(&format!("adam.v.{}", t.name))?;
            if a.len() != t.len() || b.len() != t.len() {
                return Err(Error::shape(t.len(), a.len()));
            }
            m.push(a.data.clone());
            v.push(b.data.clone());
        }
        let s = find("adam.step")?;
        if s.len() != 2 {
            return Err(Error::shape(2, s.len()));
        }
        let step = ((s.data[0] as u64) << 16) | s.data[1] as u64;
        Ok(Self { cfg, m, v, step })
    }
}

/// SNR schedule: a fixed-SNR phase, then uniformly random SNR.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Curriculum {
    pub total_epochs: usize,
    /// Last epoch (1-based) of the fixed phase.
    pub fixed_until: usize,
    pub fixed_snr_db: f64,
    pub random_snr_db: (f64, f64),
}

impl Default for Curriculum {
    fn default() -> Self {
        Self { total_epochs: 50, fixed_until: 25, fixed_snr_db: 30.0, random_snr_db: (5.0, 30.0) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnrPhase {
    Fixed(f64),
    Uniform(f64, f64),
}

impl SnrPhase {
    pub fn label(&self) -> &'static str {
        match self {
            SnrPhase::Fixed(_) => "fixed",
            SnrPhase::Uniform(..) => "random",
        }
    }

    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            SnrPhase::Fixed(s) => s,
            SnrPhase::Uniform(a, b) if a < b => rng.random_range(a..=b),
            SnrPhase::Uniform(a, _) => a,
        }
    }
}

impl Curriculum {
    /// Phase of a 1-based epoch.
    pub fn phase(&self, epoch: usize) -> SnrPhase {
        if epoch <= self.fixed_until {
            SnrPhase::Fixed(self.fixed_snr_db)
        } else {
            SnrPhase::Uniform(self.random_snr_db.0, self.random_snr_db.1)
        }
    }
}

/// Relative error used by the finite-difference checks.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite difference of `f` with respect to `x[i]`.
pub fn central_difference(x: &mut [f64], i: usize, h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        let u = [[1.0f64, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(loss_mse(&u, &u).unwrap(), 0.0);
        let z = [[0.0f64; 3]; 2];
        assert!((loss_mse(&z, &u).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let mut off = u;
        off[1][0] += 0.3;
        assert!((loss_mse(&off, &u).unwrap() - 0.09 / 6.0).abs() < 1e-15);
        assert!(loss_mse(&u[..1], &u).is_err());
    }

    #[test]
    fn curriculum_phases() {
        let c = Curriculum::default();
        assert_eq!(c.phase(1), SnrPhase::Fixed(30.0));
        assert_eq!(c.phase(25), SnrPhase::Fixed(30.0));
        assert_eq!(c.phase(26), SnrPhase::Uniform(5.0, 30.0));
        assert_eq!(c.phase(50), SnrPhase::Uniform(5.0, 30.0));
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1.0, 1.0001) - 0.0001 / 1.0001).abs() < 1e-15);
    }
}
