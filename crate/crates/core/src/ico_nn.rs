//! Rotation-equivariant layers on the icosahedral planar representation.
//!
//! Tensors are `[t][c][o][cell]` with `o` in `{1, 6}`. Regular fields carry
//! one channel per hexagonal kernel orientation; orientation `s` of an
//! `ico_conv` output is the response of the kernel rotated by `60° * s`.
//!
//! Every layer that reads a neighbourhood first *fills* the 12 icosahedron
//! vertices (10 vertex cells and the 2 poles) with the mean of their 5
//! neighbours. Regular fields are filled isotropically, averaging over the
//! 6 orientations as well, because a 5-valent point has no consistent
//! orientation frame.
//!
//! # Hexagonal kernel taps
//!
//! `HexKernel` weights are `[c_out][c_in][o_in][7]`: tap 0 is the centre and
//! tap `1 + q` is hexagonal direction `q` (see [`crate::ico_grid::HEX_OFFSETS`]).
//! In the 3×3 planar stencil direction `q` sits at `(1, 1) + HEX_OFFSETS[q]`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};
use crate::ico_grid::{IcoGrid, PadSource, Pole, HEX_OFFSETS, ORIENTATIONS};

pub const TEMPORAL_KERNEL: usize = 5;
pub const LN_EPS: f64 = 1e-5;

/// Floating point type the layers run in: `f32` for training, `f64` for
/// gradient checks.
pub trait Real:
    Float + Sum + AddAssign + SubAssign + MulAssign + Default + Send + Sync + Debug + Display + 'static
{
    fn of(x: f64) -> Self;

    fn to_f64(self) -> f64;

    /// `C <- alpha A B + beta C` with explicit row/column strides.
    ///
    /// # Safety
    /// Every index reachable through the given dims and strides must lie
    /// within the corresponding slice; [`gemm`] checks this.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row/column strides of a matrix operand.
#[derive(Debug, Clone, Copy)]
pub struct Strides(pub usize, pub usize);

fn span(rows: usize, cols: usize, s: Strides) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * s.0 + (cols - 1) * s.1 + 1
    }
}

/// Bounds-checked `C <- alpha A B + beta C`; `A` is m×k, `B` k×n, `C` m×n.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    sa: Strides,
    b: &[T],
    sb: Strides,
    beta: T,
    c: &mut [T],
    sc: Strides,
) {
    assert!(span(m, k, sa) <= a.len() && span(k, n, sb) <= b.len() && span(m, n, sc) <= c.len());
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the assertion above bounds every element the kernel touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcoTensor<T> {
    pub t: usize,
    pub c: usize,
    pub o: usize,
    pub r: u32,
    pub n: usize,
    pub data: Vec<T>,
}

impl<T: Real> IcoTensor<T> {
    pub fn zeros(t: usize, c: usize, o: usize, grid: &IcoGrid) -> Self {
        Self { t, c, o, r: grid.resolution(), n: grid.n_cells(), data: vec![T::zero(); t * c * o * grid.n_cells()] }
    }

    pub fn from_vec(t: usize, c: usize, o: usize, grid: &IcoGrid, data: Vec<T>) -> Result<Self> {
        if o != 1 && o != ORIENTATIONS {
            return Err(Error::InvalidArgument(format!("orientation extent must be 1 or 6, got {o}")));
        }
        let n = grid.n_cells();
        if data.len() != t * c * o * n {
            return Err(Error::shape(format!("{t}x{c}x{o}x{n}"), data.len()));
        }
        Ok(Self { t, c, o, r: grid.resolution(), n, data })
    }

    /// Values of one `(t, c)` pair, `o * n` long.
    pub fn slab(&self, t: usize, c: usize) -> &[T] {
        let s = self.o * self.n;
        &self.data[(t * self.c + c) * s..(t * self.c + c + 1) * s]
    }

    /// Values of frame `t`, `c * o * n` long.
    pub fn frame(&self, t: usize) -> &[T] {
        let s = self.c * self.o * self.n;
        &self.data[t * s..(t + 1) * s]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [T] {
        let s = self.c * self.o * self.n;
        &mut self.data[t * s..(t + 1) * s]
    }

    pub fn at(&self, t: usize, c: usize, o: usize, cell: usize) -> T {
        self.data[((t * self.c + c) * self.o + o) * self.n + cell]
    }

    pub fn same_shape(&self) -> Self {
        Self { data: vec![T::zero(); self.data.len()], ..*self }
    }

    pub fn check(&self, grid: &IcoGrid, what: &str) -> Result<()> {
        if self.n != grid.n_cells() || self.r != grid.resolution() {
            return Err(Error::shape(
                format!("{what} at resolution {}", grid.resolution()),
                format!("resolution {}", self.r),
            ));
        }
        Ok(())
    }
}

// Filling ---------------------------------------------------------------

/// The 12 fill points (vertex cells then poles) with their 5 neighbours.
fn fill_points(grid: &IcoGrid) -> Vec<(usize, [usize; 5])> {
    let mut pts: Vec<usize> = grid.vertex_cells().collect();
    pts.push(grid.pole_index(Pole::North));
    pts.push(grid.pole_index(Pole::South));
    pts.into_iter()
        .map(|p| {
            let nb = grid.neighbors(p);
            (p, [nb[0], nb[1], nb[2], nb[3], nb[4]])
        })
        .collect()
}

/// Extends an `o x n` slab to `o x (n + 2)` (poles appended) with vertex and
/// pole values replaced by the fill.
pub fn fill_ext<T: Real>(x: &[T], o: usize, grid: &IcoGrid, out: &mut [T]) {
    let n = grid.n_cells();
    let ne = n + 2;
    debug_assert_eq!(x.len(), o * n);
    for oo in 0..o {
        out[oo * ne..oo * ne + n].copy_from_slice(&x[oo * n..(oo + 1) * n]);
    }
    let inv = T::of(1.0 / (5 * o) as f64);
    for (p, nb) in fill_points(grid) {
        let mut s = T::zero();
        for oo in 0..o {
            for &q in &nb {
                s += x[oo * n + q];
            }
        }
        let v = s * inv;
        for oo in 0..o {
            out[oo * ne + p] = v;
        }
    }
}

/// Gradient of [`fill_ext`]: folds `dext` (`o x (n + 2)`) back onto `dx`.
pub fn fill_ext_backward<T: Real>(dext: &[T], o: usize, grid: &IcoGrid, dx: &mut [T]) {
    let n = grid.n_cells();
    let ne = n + 2;
    for oo in 0..o {
        for c in 0..n {
            if !grid.is_vertex(c) {
                dx[oo * n + c] += dext[oo * ne + c];
            }
        }
    }
    let inv = T::of(1.0 / (5 * o) as f64);
    for (p, nb) in fill_points(grid) {
        let mut g = T::zero();
        for oo in 0..o {
            g += dext[oo * ne + p];
        }
        let g = g * inv;
        for oo in 0..o {
            for &q in &nb {
                dx[oo * n + q] += g;
            }
        }
    }
}

// Icosahedral convolution ----------------------------------------------

/// Source offset inside a filled `o_in x (n + 2)` slab for patch row
/// `(o, q)` and column `(s, p)`.
#[inline]
fn patch_source(grid: &IcoGrid, oin: usize, o: usize, q: usize, s: usize, p: usize) -> usize {
    let ne = grid.n_cells() + 2;
    let tap = if q == 0 { grid.hex_taps(p)[0] } else { grid.hex_taps(p)[1 + (q - 1 + s) % 6] };
    let oo = if oin == 1 { 0 } else { (o + s + tap.shift as usize) % ORIENTATIONS };
    oo * ne + tap.point
}

/// Precomputed gather offsets for one grid and input orientation extent,
/// `[(o, q)][(s, p)]`.
#[derive(Debug, Clone)]
pub struct ConvGather {
    oin: usize,
    n: usize,
    idx: Vec<u32>,
}

impl ConvGather {
    pub fn new(grid: &IcoGrid, oin: usize) -> Self {
        let n = grid.n_cells();
        let mut idx = Vec::with_capacity(oin * 7 * 6 * n);
        for o in 0..oin {
            for q in 0..7 {
                for s in 0..ORIENTATIONS {
                    for p in 0..n {
                        idx.push(patch_source(grid, oin, o, q, s, p) as u32);
                    }
                }
            }
        }
        Self { oin, n, idx }
    }

    fn rows(&self) -> usize {
        self.oin * 7
    }
}

/// Builds the `(cin * oin * 7) x (6 n)` patch matrix of one frame.
fn build_patches<T: Real>(x: &IcoTensor<T>, t: usize, grid: &IcoGrid, g: &ConvGather, ext: &mut [T], patches: &mut [T]) {
    let ne = grid.n_cells() + 2;
    let cols = 6 * g.n;
    let rows_per_c = g.rows();
    for ci in 0..x.c {
        let e = &mut ext[..x.o * ne];
        fill_ext(x.slab(t, ci), x.o, grid, e);
        for row in 0..rows_per_c {
            let dst = &mut patches[(ci * rows_per_c + row) * cols..(ci * rows_per_c + row + 1) * cols];
            let src = &g.idx[row * cols..(row + 1) * cols];
            for (d, &i) in dst.iter_mut().zip(src) {
                *d = e[i as usize];
            }
        }
    }
}

fn check_kernel(w_len: usize, b_len: usize, cout: usize, cin: usize, oin: usize) -> Result<()> {
    if w_len != cout * cin * oin * 7 || b_len != cout {
        return Err(Error::shape(
            format!("kernel {cout}x{cin}x{oin}x7 and bias {cout}"),
            format!("kernel of {w_len} and bias of {b_len}"),
        ));
    }
    Ok(())
}

/// Icosahedral convolution: fill, hexagonal gather with seam orientation
/// shifts, and one GEMM per frame against the 6 rotated kernel copies.
/// Output vertex cells hold the degenerate-stencil response; the next layer
/// refills them.
pub fn ico_conv<T: Real>(x: &IcoTensor<T>, w: &[T], b: &[T], cout: usize, grid: &IcoGrid, g: &ConvGather) -> Result<IcoTensor<T>> {
    x.check(grid, "ico_conv input")?;
    check_kernel(w.len(), b.len(), cout, x.c, x.o)?;
    if g.oin != x.o || g.n != x.n {
        return Err(Error::shape(format!("gather for o_in={}", x.o), format!("o_in={}", g.oin)));
    }
    let n = grid.n_cells();
    let kdim = x.c * g.rows();
    let cols = 6 * n;
    let mut y = IcoTensor::zeros(x.t, cout, ORIENTATIONS, grid);
    let mut ext = vec![T::zero(); x.o * (n + 2)];
    let mut patches = vec![T::zero(); kdim * cols];
    for t in 0..x.t {
        build_patches(x, t, grid, g, &mut ext, &mut patches);
        let yt = y.frame_mut(t);
        for (co, &bias) in b.iter().enumerate() {
            yt[co * cols..(co + 1) * cols].fill(bias);
        }
        gemm(cout, kdim, cols, T::one(), w, Strides(kdim, 1), &patches, Strides(cols, 1), T::one(), yt, Strides(cols, 1));
    }
    Ok(y)
}

pub struct ConvGrads<T> {
    pub dx: IcoTensor<T>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn ico_conv_backward<T: Real>(
    x: &IcoTensor<T>,
    w: &[T],
    cout: usize,
    dy: &IcoTensor<T>,
    grid: &IcoGrid,
    g: &ConvGather,
) -> ConvGrads<T> {
    let n = grid.n_cells();
    let ne = n + 2;
    let kdim = x.c * g.rows();
    let cols = 6 * n;
    let mut dx = x.same_shape();
    let mut dw = vec![T::zero(); cout * kdim];
    let mut db = vec![T::zero(); cout];
    let mut ext = vec![T::zero(); x.o * ne];
    let mut patches = vec![T::zero(); kdim * cols];
    let mut dpatches = vec![T::zero(); kdim * cols];
    let mut dext = vec![T::zero(); x.o * ne];
    for t in 0..x.t {
        let dyt = dy.frame(t);
        for (co, d) in db.iter_mut().enumerate() {
            *d += dyt[co * cols..(co + 1) * cols].iter().copied().sum::<T>();
        }
        build_patches(x, t, grid, g, &mut ext, &mut patches);
        // dW += dY P^T
        gemm(cout, cols, kdim, T::one(), dyt, Strides(cols, 1), &patches, Strides(1, cols), T::one(), &mut dw, Strides(kdim, 1));
        // dP = W^T dY
        gemm(kdim, cout, cols, T::one(), w, Strides(1, kdim), dyt, Strides(cols, 1), T::zero(), &mut dpatches, Strides(cols, 1));
        let rows_per_c = g.rows();
        let s = x.o * n;
        for ci in 0..x.c {
            dext.fill(T::zero());
            for row in 0..rows_per_c {
                let src = &dpatches[(ci * rows_per_c + row) * cols..(ci * rows_per_c + row + 1) * cols];
                let idx = &g.idx[row * cols..(row + 1) * cols];
                for (&v, &i) in src.iter().zip(idx) {
                    dext[i as usize] += v;
                }
            }
            let off = (t * x.c + ci) * s;
            fill_ext_backward(&dext, x.o, grid, &mut dx.data[off..off + s]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Stencil position `(row, col)` of tap `q` (0 = centre, `1 + d` = direction `d`).
pub fn stencil_position(q: usize) -> (usize, usize) {
    if q == 0 {
        return (1, 1);
    }
    let (dr, dc) = HEX_OFFSETS[q - 1];
    ((1 + dr) as usize, (1 + dc) as usize)
}

/// Expands a hexagonal kernel into the bank of 3×3 planar kernels
/// `[c_out][6][c_in][o_in][3][3]`: orientation `s` rotates the ring taps by
/// `s` positions and shifts the input orientation by `s`.
pub fn expand_kernel<T: Real>(w: &[T], cout: usize, cin: usize, oin: usize) -> Vec<T> {
    let mut bank = vec![T::zero(); cout * 6 * cin * oin * 9];
    for co in 0..cout {
        for s in 0..ORIENTATIONS {
            for ci in 0..cin {
                for op in 0..oin {
                    let o_src = if oin == 1 { 0 } else { (op + ORIENTATIONS - s) % ORIENTATIONS };
                    for q in 0..7 {
                        let pos = if q == 0 { 0 } else { 1 + (q - 1 + s) % 6 };
                        let (sr, sc) = stencil_position(pos);
                        let dst = ((((co * 6 + s) * cin + ci) * oin + op) * 3 + sr) * 3 + sc;
                        bank[dst] = w[((co * cin + ci) * oin + o_src) * 7 + q];
                    }
                }
            }
        }
    }
    bank
}

/// Pads one filled slab into the planar padded layout `o x (5(H+2)) x (W+2)`.
pub fn planar_pad_oriented<T: Real>(x: &[T], o: usize, grid: &IcoGrid) -> Vec<T> {
    let n = grid.n_cells();
    let ne = n + 2;
    let mut ext = vec![T::zero(); o * ne];
    fill_ext(x, o, grid, &mut ext);
    let src = grid.pad_source();
    let mut out = vec![T::zero(); o * src.len()];
    for oo in 0..o {
        for (slot, s) in src.iter().enumerate() {
            out[oo * src.len() + slot] = match *s {
                PadSource::Cell { cell, shift } => {
                    let os = if o == 1 { 0 } else { (oo + shift as usize) % ORIENTATIONS };
                    ext[os * ne + cell]
                }
                PadSource::Pole(p) => ext[oo * ne + grid.pole_index(p)],
                PadSource::Unused => T::zero(),
            };
        }
    }
    out
}

/// Reference route: planar padding plus dense 3×3 convolution with the
/// expanded kernel bank. Matches [`ico_conv`] on non-vertex cells.
pub fn ico_conv_planar<T: Real>(x: &IcoTensor<T>, w: &[T], b: &[T], cout: usize, grid: &IcoGrid) -> Result<IcoTensor<T>> {
    x.check(grid, "ico_conv input")?;
    check_kernel(w.len(), b.len(), cout, x.c, x.o)?;
    let bank = expand_kernel(w, cout, x.c, x.o);
    let (h, wd) = (grid.chart_height(), grid.chart_width());
    let (ph, pw) = (h + 2, wd + 2);
    let mut y = IcoTensor::zeros(x.t, cout, ORIENTATIONS, grid);
    for t in 0..x.t {
        let padded: Vec<Vec<T>> = (0..x.c).map(|ci| planar_pad_oriented(x.slab(t, ci), x.o, grid)).collect();
        let plane = 5 * ph * pw;
        for co in 0..cout {
            for s in 0..ORIENTATIONS {
                for cell in 0..grid.n_cells() {
                    let (k, row, col) = grid.chart_position(cell);
                    let mut acc = b[co];
                    for (ci, pad) in padded.iter().enumerate() {
                        for op in 0..x.o {
                            for sr in 0..3 {
                                for sc in 0..3 {
                                    let kv = bank[((((co * 6 + s) * x.c + ci) * x.o + op) * 3 + sr) * 3 + sc];
                                    let slot = (k * ph + row + sr) * pw + col + sc;
                                    acc += kv * pad[op * plane + slot];
                                }
                            }
                        }
                    }
                    y.data[((t * cout + co) * ORIENTATIONS + s) * grid.n_cells() + cell] = acc;
                }
            }
        }
    }
    Ok(y)
}

// Pooling ----------------------------------------------------------------

/// Hexagonal mean pooling from `fine` (resolution r) onto `coarse` (r - 1).
/// A non-vertex coarse cell averages its co-located fine cell and its 6
/// neighbours; a vertex coarse cell takes the fill of its fine vertex, the
/// neighbour mean.
pub fn ico_pool<T: Real>(x: &IcoTensor<T>, fine: &IcoGrid, coarse: &IcoGrid) -> Result<IcoTensor<T>> {
    x.check(fine, "ico_pool input")?;
    if fine.resolution() < 2 || coarse.resolution() + 1 != fine.resolution() {
        return Err(Error::InvalidArgument(format!(
            "pooling needs r >= 2 onto r - 1, got {} onto {}",
            fine.resolution(),
            coarse.resolution()
        )));
    }
    let (o, nf, nc) = (x.o, fine.n_cells(), coarse.n_cells());
    let ne = nf + 2;
    let mut y = IcoTensor::zeros(x.t, x.c, o, coarse);
    let mut ext = vec![T::zero(); o * ne];
    let seventh = T::of(1.0 / 7.0);
    for t in 0..x.t {
        for c in 0..x.c {
            fill_ext(x.slab(t, c), o, fine, &mut ext);
            let off = (t * x.c + c) * o * nc;
            let out = &mut y.data[off..off + o * nc];
            for cc in 0..nc {
                let f = fine.colocated_fine_cell(coarse, cc);
                for oo in 0..o {
                    out[oo * nc + cc] = if coarse.is_vertex(cc) {
                        ext[oo * ne + f]
                    } else {
                        let mut s = T::zero();
                        for tap in fine.hex_taps(f) {
                            let os = if o == 1 { 0 } else { (oo + tap.shift as usize) % ORIENTATIONS };
                            s += ext[os * ne + tap.point];
                        }
                        s * seventh
                    };
                }
            }
        }
    }
    Ok(y)
}

pub fn ico_pool_backward<T: Real>(x: &IcoTensor<T>, dy: &IcoTensor<T>, fine: &IcoGrid, coarse: &IcoGrid) -> IcoTensor<T> {
    let (o, nf, nc) = (x.o, fine.n_cells(), coarse.n_cells());
    let ne = nf + 2;
    let mut dx = x.same_shape();
    let mut dext = vec![T::zero(); o * ne];
    let seventh = T::of(1.0 / 7.0);
    for t in 0..x.t {
        for c in 0..x.c {
            dext.fill(T::zero());
            let off = (t * x.c + c) * o * nc;
            let g = &dy.data[off..off + o * nc];
            for cc in 0..nc {
                let f = fine.colocated_fine_cell(coarse, cc);
                for oo in 0..o {
                    let v = g[oo * nc + cc];
                    if coarse.is_vertex(cc) {
                        dext[oo * ne + f] += v;
                    } else {
                        for tap in fine.hex_taps(f) {
                            let os = if o == 1 { 0 } else { (oo + tap.shift as usize) % ORIENTATIONS };
                            dext[os * ne + tap.point] += v * seventh;
                        }
                    }
                }
            }
            let off = (t * x.c + c) * o * nf;
            fill_ext_backward(&dext, o, fine, &mut dx.data[off..off + o * nf]);
        }
    }
    dx
}

// Temporal convolution ---------------------------------------------------

fn check_temporal(x: &IcoTensor<impl Real>, w_len: usize, b_len: usize, cout: usize) -> Result<()> {
    if w_len != cout * x.c * TEMPORAL_KERNEL || b_len != cout {
        return Err(Error::shape(
            format!("temporal kernel {cout}x{}x{TEMPORAL_KERNEL} and bias {cout}", x.c),
            format!("kernel of {w_len} and bias of {b_len}"),
        ));
    }
    Ok(())
}

/// Causal convolution over frames with kernel `[c_out][c_in][5]`; tap 4 is
/// the current frame. Shared across orientations and cells.
pub fn temporal_conv<T: Real>(x: &IcoTensor<T>, w: &[T], b: &[T], cout: usize) -> Result<IcoTensor<T>> {
    check_temporal(x, w.len(), b.len(), cout)?;
    let on = x.o * x.n;
    let cin = x.c;
    let mut y = IcoTensor { c: cout, data: vec![T::zero(); x.t * cout * on], ..*x };
    for t in 0..x.t {
        let yt = &mut y.data[t * cout * on..(t + 1) * cout * on];
        for (co, &bias) in b.iter().enumerate() {
            yt[co * on..(co + 1) * on].fill(bias);
        }
        for k in 0..TEMPORAL_KERNEL {
            let Some(src) = (t + k).checked_sub(TEMPORAL_KERNEL - 1) else { continue };
            gemm(cout, cin, on, T::one(), &w[k..], Strides(cin * TEMPORAL_KERNEL, TEMPORAL_KERNEL), x.frame(src), Strides(on, 1), T::one(), yt, Strides(on, 1));
        }
    }
    Ok(y)
}

pub fn temporal_conv_backward<T: Real>(x: &IcoTensor<T>, w: &[T], cout: usize, dy: &IcoTensor<T>) -> ConvGrads<T> {
    let on = x.o * x.n;
    let cin = x.c;
    let mut dx = x.same_shape();
    let mut dw = vec![T::zero(); cout * cin * TEMPORAL_KERNEL];
    let mut db = vec![T::zero(); cout];
    for t in 0..x.t {
        let dyt = dy.frame(t);
        for (co, d) in db.iter_mut().enumerate() {
            *d += dyt[co * on..(co + 1) * on].iter().copied().sum::<T>();
        }
        for k in 0..TEMPORAL_KERNEL {
            let Some(src) = (t + k).checked_sub(TEMPORAL_KERNEL - 1) else { continue };
            gemm(cin, cout, on, T::one(), &w[k..], Strides(TEMPORAL_KERNEL, cin * TEMPORAL_KERNEL), dyt, Strides(on, 1), T::one(), dx.frame_mut(src), Strides(on, 1));
            gemm(cout, on, cin, T::one(), dyt, Strides(on, 1), x.frame(src), Strides(1, on), T::one(), &mut dw[k..], Strides(cin * TEMPORAL_KERNEL, TEMPORAL_KERNEL));
        }
    }
    ConvGrads { dx, dw, db }
}

// Layer normalization ----------------------------------------------------

/// Per-frame statistics saved for the backward pass.
#[derive(Debug, Clone)]
pub struct LnStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Layer norm over channels, orientations and non-vertex cells of each
/// frame, with per-channel scale and bias. Vertex cells output zero.
pub fn layer_norm<T: Real>(x: &IcoTensor<T>, scale: &[T], bias: &[T], grid: &IcoGrid) -> Result<(IcoTensor<T>, LnStats<T>)> {
    x.check(grid, "layer_norm input")?;
    if scale.len() != x.c || bias.len() != x.c {
        return Err(Error::shape(format!("{} scale/bias", x.c), format!("{}/{}", scale.len(), bias.len())));
    }
    let count = T::of((x.c * x.o * grid.n_computed_cells()) as f64);
    let mut y = x.same_shape();
    let mut stats = LnStats { mean: Vec::with_capacity(x.t), rstd: Vec::with_capacity(x.t) };
    let n = x.n;
    for t in 0..x.t {
        let xt = x.frame(t);
        let mut sum = T::zero();
        for chunk in xt.chunks(n) {
            sum += chunk.iter().enumerate().filter(|(c, _)| !grid.is_vertex(*c)).map(|(_, &v)| v).sum::<T>();
        }
        let mean = sum / count;
        let mut var = T::zero();
        for chunk in xt.chunks(n) {
            var += chunk
                .iter()
                .enumerate()
                .filter(|(c, _)| !grid.is_vertex(*c))
                .map(|(_, &v)| (v - mean) * (v - mean))
                .sum::<T>();
        }
        let rstd = T::one() / (var / count + T::of(LN_EPS)).sqrt();
        let yt = y.frame_mut(t);
        for (i, (dst, &v)) in yt.iter_mut().zip(xt).enumerate() {
            let cell = i % n;
            if !grid.is_vertex(cell) {
                let c = i / (x.o * n);
                *dst = scale[c] * (v - mean) * rstd + bias[c];
            }
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((y, stats))
}

pub struct LnGrads<T> {
    pub dx: IcoTensor<T>,
    pub dscale: Vec<T>,
    pub dbias: Vec<T>,
}

pub fn layer_norm_backward<T: Real>(x: &IcoTensor<T>, scale: &[T], stats: &LnStats<T>, dy: &IcoTensor<T>, grid: &IcoGrid) -> LnGrads<T> {
    let n = x.n;
    let count = T::of((x.c * x.o * grid.n_computed_cells()) as f64);
    let mut dx = x.same_shape();
    let mut dscale = vec![T::zero(); x.c];
    let mut dbias = vec![T::zero(); x.c];
    for t in 0..x.t {
        let (mean, rstd) = (stats.mean[t], stats.rstd[t]);
        let (xt, dyt) = (x.frame(t), dy.frame(t));
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for (i, (&v, &d)) in xt.iter().zip(dyt).enumerate() {
            if grid.is_vertex(i % n) {
                continue;
            }
            let c = i / (x.o * n);
            let xhat = (v - mean) * rstd;
            dscale[c] += d * xhat;
            dbias[c] += d;
            let g = d * scale[c];
            sum_g += g;
            sum_gx += g * xhat;
        }
        let (mg, mgx) = (sum_g / count, sum_gx / count);
        let dxt = dx.frame_mut(t);
        for (i, (dst, (&v, &d))) in dxt.iter_mut().zip(xt.iter().zip(dyt)).enumerate() {
            if grid.is_vertex(i % n) {
                continue;
            }
            let c = i / (x.o * n);
            let xhat = (v - mean) * rstd;
            *dst = rstd * (d * scale[c] - mg - xhat * mgx);
        }
    }
    LnGrads { dx, dscale, dbias }
}

// Pointwise layers -------------------------------------------------------

pub fn relu<T: Real>(x: &IcoTensor<T>) -> IcoTensor<T> {
    IcoTensor { data: x.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(), ..*x }
}

/// Subgradient 0 at 0.
pub fn relu_backward<T: Real>(x: &IcoTensor<T>, dy: &IcoTensor<T>) -> IcoTensor<T> {
    IcoTensor {
        data: x.data.iter().zip(&dy.data).map(|(&v, &d)| if v > T::zero() { d } else { T::zero() }).collect(),
        ..*x
    }
}

/// Max over orientations; ties go to the lowest orientation index, which
/// also receives the gradient.
pub fn orientation_maxpool<T: Real>(x: &IcoTensor<T>) -> Result<(IcoTensor<T>, Vec<u8>)> {
    if x.o != ORIENTATIONS {
        return Err(Error::shape("6 orientations", x.o));
    }
    let n = x.n;
    let mut y = IcoTensor { o: 1, data: vec![T::zero(); x.t * x.c * n], ..*x };
    let mut arg = vec![0u8; x.t * x.c * n];
    for tc in 0..x.t * x.c {
        let src = &x.data[tc * 6 * n..(tc + 1) * 6 * n];
        for cell in 0..n {
            let mut best = (src[cell], 0u8);
            for o in 1..ORIENTATIONS {
                let v = src[o * n + cell];
                if v > best.0 {
                    best = (v, o as u8);
                }
            }
            y.data[tc * n + cell] = best.0;
            arg[tc * n + cell] = best.1;
        }
    }
    Ok((y, arg))
}

pub fn orientation_maxpool_backward<T: Real>(x: &IcoTensor<T>, arg: &[u8], dy: &IcoTensor<T>) -> IcoTensor<T> {
    let n = x.n;
    let mut dx = x.same_shape();
    for tc in 0..x.t * x.c {
        for cell in 0..n {
            let o = arg[tc * n + cell] as usize;
            dx.data[(tc * 6 + o) * n + cell] = dy.data[tc * n + cell];
        }
    }
    dx
}

/// Sets vertex cells to zero.
pub fn zero_vertices<T: Real>(x: &IcoTensor<T>, grid: &IcoGrid) -> IcoTensor<T> {
    let mut y = x.clone();
    for (i, v) in y.data.iter_mut().enumerate() {
        if grid.is_vertex(i % x.n) {
            *v = T::zero();
        }
    }
    y
}

/// Rotates a `[t][c][o][cell]` tensor by rotation `g` of `rot`, filling cells
/// whose pre-image is a pole with the pole fill.
pub fn rotate_tensor<T: Real>(x: &IcoTensor<T>, grid: &IcoGrid, rot: &crate::ico_grid::RotationSet, g: usize) -> IcoTensor<T> {
    let n = x.n;
    let ne = n + 2;
    let perm = rot.perm(g);
    let mut y = x.same_shape();
    let mut ext = vec![T::zero(); x.o * ne];
    for t in 0..x.t {
        for c in 0..x.c {
            fill_ext(x.slab(t, c), x.o, grid, &mut ext);
            let off = (t * x.c + c) * x.o * n;
            let out = &mut y.data[off..off + x.o * n];
            for i in 0..ne {
                let j = perm[i];
                if j >= n {
                    continue;
                }
                let d = if i < n && !grid.is_vertex(i) { rot.orient_shift(g, i) } else { 0 };
                for o in 0..x.o {
                    let od = if x.o == 1 { 0 } else { (o + d) % ORIENTATIONS };
                    out[od * n + j] = ext[o * ne + i];
                }
            }
        }
    }
    y
}
