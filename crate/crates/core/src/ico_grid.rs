//! Icosahedral sampling grid, its planar chart layout and the icosahedral
//! rotation group acting on it.
//!
//! # Layout
//!
//! The icosahedron has its two polar vertices at `±z`. The upper ring vertex
//! `U_k` sits at longitude `72k°`, the lower ring vertex `L_k` at `72k + 36°`.
//! Chart `k` (0..5) is the flat parallelogram formed by the faces
//! `(N, U_k, U_{k+1})`, `(U_k, U_{k+1}, L_k)`, `(L_k, L_{k+1}, U_{k+1})` and
//! `(L_k, L_{k+1}, S)`. Its lattice point `(i, j)`, `0 <= i <= H`,
//! `0 <= j <= 2H`, `H = 2^r`, is `N + (i/H)(U_k - N) + (j/H)(U_{k+1} - N)`
//! on the flattened net. A chart owns the points with `1 <= i <= H` and
//! `0 <= j < 2H`; they are stored at planar row `H - i`, column `j`. Every
//! sphere point except the two poles is owned by exactly one chart, and the
//! ten non-polar icosahedron vertices are at row 0, columns 0 (`U_k`) and `H`
//! (`L_k`) of each chart.
//!
//! Planar cell index: `(chart * H + row) * W + col` with `W = 2H`. The two
//! poles are extra points with indices `n_cells` (north) and `n_cells + 1`
//! (south); they have coordinates and neighbours but no planar cell.
//!
//! # Hexagonal directions
//!
//! Direction `q` of a cell is the planar offset `HEX_OFFSETS[q]`
//! (row, col); consecutive directions are 60° apart counter-clockwise when the
//! sphere is viewed from outside. The two 3×3 stencil corners `(-1, +1)` and
//! `(+1, -1)` are not hexagonal neighbours.
//!
//! Neighbours across a chart seam live in another chart whose frame is
//! rotated by a multiple of 60°. [`HexTap::shift`] records that rotation: an
//! orientation channel `o` expressed in the reading cell's frame is channel
//! `(o + shift) % 6` in the frame of the cell that owns the value.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Planar (row, col) offsets of the six hexagonal directions, counter-clockwise.
pub const HEX_OFFSETS: [(isize, isize); 6] = [(0, 1), (1, 1), (1, 0), (0, -1), (-1, -1), (-1, 0)];

/// Number of kernel orientations carried by regular feature fields.
pub const ORIENTATIONS: usize = 6;

/// Tolerance used when matching rotated coordinates to grid points.
pub const MATCH_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pole {
    North,
    South,
}

/// One tap of the hexagonal stencil of a cell: the point whose value is read
/// (a cell or a pole) and the orientation frame shift between the reader and
/// the owner of that value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HexTap {
    pub point: usize,
    pub shift: u8,
}

/// Where a position of the padded planar layout takes its value from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadSource {
    Cell { cell: usize, shift: u8 },
    Pole(Pole),
    /// Padding position never read by a non-vertex stencil; holds zero.
    Unused,
}

#[derive(Debug, Clone)]
pub struct IcoGrid {
    r: u32,
    h: usize,
    w: usize,
    n_cells: usize,
    coords: Vec<Vec3>,
    vertex_mask: Vec<bool>,
    neighbors: Vec<Vec<usize>>,
    hex: Vec<[HexTap; 7]>,
    pad_source: Vec<PadSource>,
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// The 12 icosahedron vertices: `[N, U_0..U_4, L_0..L_4, S]`.
pub fn icosahedron_vertices() -> [Vec3; 12] {
    let z0 = 1.0 / 5f64.sqrt();
    let rho = 2.0 / 5f64.sqrt();
    let mut v = [[0.0; 3]; 12];
    v[0] = [0.0, 0.0, 1.0];
    v[11] = [0.0, 0.0, -1.0];
    for k in 0..5 {
        let up = (72.0 * k as f64).to_radians();
        let lo = (72.0 * k as f64 + 36.0).to_radians();
        v[1 + k] = [rho * up.cos(), rho * up.sin(), z0];
        v[6 + k] = [rho * lo.cos(), rho * lo.sin(), -z0];
    }
    v
}

/// Closed chart lattice `(H+1) x (2H+1)` by recursive midpoint subdivision,
/// each midpoint re-projected onto the sphere.
fn chart_lattice(r: u32, verts: &[Vec3; 12], k: usize) -> Vec<Vec3> {
    let u = |k: usize| verts[1 + k % 5];
    let l = |k: usize| verts[6 + k % 5];
    let (n, s) = (verts[0], verts[11]);
    let mut h = 1usize;
    let mut pts = vec![n, u(k + 1), l(k + 1), u(k), l(k), s];
    let mid = |a: Vec3, b: Vec3| normalize(add(a, b));
    for _ in 0..r {
        let old_w = 2 * h + 1;
        let nh = 2 * h;
        let nw = 2 * nh + 1;
        let at = |i: usize, j: usize| pts[i * old_w + j];
        let mut next = Vec::with_capacity((nh + 1) * nw);
        for i in 0..=nh {
            for j in 0..nw {
                let p = match (i % 2, j % 2) {
                    (0, 0) => at(i / 2, j / 2),
                    (1, 0) => mid(at((i - 1) / 2, j / 2), at((i + 1) / 2, j / 2)),
                    (0, 1) => mid(at(i / 2, (j - 1) / 2), at(i / 2, (j + 1) / 2)),
                    _ => mid(at((i - 1) / 2, (j + 1) / 2), at((i + 1) / 2, (j - 1) / 2)),
                };
                next.push(p);
            }
        }
        pts = next;
        h = nh;
    }
    pts
}

fn key(p: Vec3) -> [u64; 3] {
    [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()]
}

/// Index over a point set for tolerance-based coordinate lookup.
struct PointIndex {
    exact: HashMap<[u64; 3], usize>,
    by_z: Vec<(f64, usize)>,
}

impl PointIndex {
    fn new(points: &[Vec3]) -> Self {
        let exact = points.iter().enumerate().map(|(i, &p)| (key(p), i)).collect();
        let mut by_z: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (p[2], i)).collect();
        by_z.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self { exact, by_z }
    }

    fn find(&self, points: &[Vec3], p: Vec3, tol: f64) -> Option<usize> {
        if let Some(&i) = self.exact.get(&key(p)) {
            return Some(i);
        }
        let start = self.by_z.partition_point(|e| e.0 < p[2] - tol);
        let mut best: Option<(f64, usize)> = None;
        for &(z, i) in &self.by_z[start..] {
            if z > p[2] + tol {
                break;
            }
            let d = norm(sub(points[i], p));
            if d < tol && best.is_none_or(|b| d < b.0) {
                best = Some((d, i));
            }
        }
        best.map(|b| b.1)
    }
}

fn tangent_angle(p: Vec3, q: Vec3) -> f64 {
    let axis = if p[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let t1 = normalize(cross(p, axis));
    let t2 = cross(p, t1);
    let v = sub(q, p);
    dot(v, t2).atan2(dot(v, t1))
}

impl IcoGrid {
    /// Builds the grid at resolution `r >= 1`.
    pub fn new(r: u32) -> Result<Self> {
        if r < 1 {
            return Err(Error::InvalidArgument(format!(
                "grid resolution must be >= 1, got {r}"
            )));
        }
        if r > 8 {
            return Err(Error::InvalidArgument(format!("grid resolution {r} is too large")));
        }
        let h = 1usize << r;
        let w = 2 * h;
        let n_cells = 5 * h * w;
        let lw = w + 1;
        let verts = icosahedron_vertices();
        let lattices: Vec<Vec<Vec3>> = (0..5).map(|k| chart_lattice(r, &verts, k)).collect();

        let mut coords = vec![[0.0; 3]; n_cells + 2];
        for (k, lat) in lattices.iter().enumerate() {
            for i in 1..=h {
                for j in 0..w {
                    coords[(k * h + (h - i)) * w + j] = lat[i * lw + j];
                }
            }
        }
        coords[n_cells] = verts[0];
        coords[n_cells + 1] = verts[11];

        // Every closed-lattice point resolved to a global point id.
        let index = PointIndex::new(&coords);
        let mut lattice_ids = vec![vec![0usize; (h + 1) * lw]; 5];
        for (k, lat) in lattices.iter().enumerate() {
            for (slot, &p) in lat.iter().enumerate() {
                lattice_ids[k][slot] = index.find(&coords, p, 1e-9).ok_or_else(|| {
                    Error::Grid(format!("lattice point {slot} of chart {k} has no owner"))
                })?;
            }
        }

        let mut vertex_mask = vec![false; n_cells];
        for k in 0..5 {
            vertex_mask[k * h * w] = true;
            vertex_mask[k * h * w + h] = true;
        }
        let is_vertex_point = |p: usize| p >= n_cells || vertex_mask[p];

        // Adjacency from lattice edges; every mesh edge lies in some chart.
        let n_points = n_cells + 2;
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n_points];
        for ids in &lattice_ids {
            for i in 0..=h as isize {
                for j in 0..=w as isize {
                    let a = ids[i as usize * lw + j as usize];
                    for &(dr, dc) in &HEX_OFFSETS {
                        let (ni, nj) = (i - dr, j + dc);
                        if ni < 0 || nj < 0 || ni > h as isize || nj > w as isize {
                            continue;
                        }
                        let b = ids[ni as usize * lw + nj as usize];
                        if !adj[a].contains(&b) {
                            adj[a].push(b);
                        }
                    }
                }
            }
        }
        for (p, list) in adj.iter().enumerate() {
            let expected = if is_vertex_point(p) { 5 } else { 6 };
            if list.len() != expected {
                return Err(Error::Grid(format!(
                    "point {p} has {} neighbours, expected {expected}",
                    list.len()
                )));
            }
        }

        // Counter-clockwise order, anchored on direction 0 of the owning chart.
        let mut neighbors = adj;
        for (p, list) in neighbors.iter_mut().enumerate() {
            let c = coords[p];
            list.sort_by(|&a, &b| tangent_angle(c, coords[a]).total_cmp(&tangent_angle(c, coords[b])));
            if p >= n_cells {
                continue;
            }
            let (k, row, col) = (p / (h * w), (p / w) % h, p % w);
            let i = h - row;
            let dir_id = |q: usize| {
                let (dr, dc) = HEX_OFFSETS[q];
                let (ni, nj) = (i as isize - dr, col as isize + dc);
                lattice_ids[k][ni as usize * lw + nj as usize]
            };
            let anchor = dir_id(0);
            let pos = list.iter().position(|&x| x == anchor).ok_or_else(|| {
                Error::Grid(format!("direction 0 of cell {p} is not a neighbour"))
            })?;
            list.rotate_left(pos);
            // Directions 1 and 2 always stay inside the closed chart lattice.
            if list[1] != dir_id(1) || list[2] != dir_id(2) {
                return Err(Error::Grid(format!(
                    "cell {p}: chart directions are not counter-clockwise"
                )));
            }
        }

        let position_in = |owner: usize, x: usize| neighbors[owner].iter().position(|&y| y == x);

        let mut hex = Vec::with_capacity(n_cells);
        for p in 0..n_cells {
            let mut taps = [HexTap { point: p, shift: 0 }; 7];
            if !vertex_mask[p] {
                for q in 0..6 {
                    let nb = neighbors[p][q];
                    let shift = if is_vertex_point(nb) {
                        0
                    } else {
                        let back = position_in(nb, p).ok_or_else(|| {
                            Error::Grid(format!("asymmetric neighbours {p} / {nb}"))
                        })?;
                        ((back + 6 - (q + 3) % 6) % 6) as u8
                    };
                    taps[1 + q] = HexTap { point: nb, shift };
                }
            }
            hex.push(taps);
        }

        let (ph, pw) = (h + 2, w + 2);
        let mut pad_source = vec![PadSource::Unused; 5 * ph * pw];
        for k in 0..5 {
            for pr in 0..ph {
                for pc in 0..pw {
                    let (row, col) = (pr as isize - 1, pc as isize - 1);
                    let inside = |r: isize, c: isize| r >= 0 && c >= 0 && r < h as isize && c < w as isize;
                    let slot = (k * ph + pr) * pw + pc;
                    if inside(row, col) {
                        let cell = (k * h + row as usize) * w + col as usize;
                        pad_source[slot] = PadSource::Cell { cell, shift: 0 };
                        continue;
                    }
                    let mut found: Option<HexTap> = None;
                    for (q, &(dr, dc)) in HEX_OFFSETS.iter().enumerate() {
                        let (rr, rc) = (row - dr, col - dc);
                        if !inside(rr, rc) {
                            continue;
                        }
                        let reader = (k * h + rr as usize) * w + rc as usize;
                        if vertex_mask[reader] {
                            continue;
                        }
                        let tap = hex[reader][1 + q];
                        match found {
                            None => found = Some(tap),
                            Some(prev) if prev != tap => {
                                return Err(Error::Grid(format!(
                                    "inconsistent padding at chart {k} ({row}, {col})"
                                )));
                            }
                            _ => {}
                        }
                    }
                    pad_source[slot] = match found {
                        None => PadSource::Unused,
                        Some(t) if t.point == n_cells => PadSource::Pole(Pole::North),
                        Some(t) if t.point == n_cells + 1 => PadSource::Pole(Pole::South),
                        Some(t) => PadSource::Cell { cell: t.point, shift: t.shift },
                    };
                }
            }
        }

        Ok(Self {
            r,
            h,
            w,
            n_cells,
            coords,
            vertex_mask,
            neighbors,
            hex,
            pad_source,
        })
    }

    pub fn resolution(&self) -> u32 {
        self.r
    }

    /// Rows per chart, `2^r`.
    pub fn chart_height(&self) -> usize {
        self.h
    }

    /// Columns per chart, `2^(r+1)`.
    pub fn chart_width(&self) -> usize {
        self.w
    }

    /// Planar cells, `5 * 2^(2r+1)`.
    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    /// Sphere points including the two poles.
    pub fn n_points(&self) -> usize {
        self.n_cells + 2
    }

    pub fn pole_index(&self, pole: Pole) -> usize {
        match pole {
            Pole::North => self.n_cells,
            Pole::South => self.n_cells + 1,
        }
    }

    /// Unit vector of a cell or pole.
    pub fn coord(&self, point: usize) -> Vec3 {
        self.coords[point]
    }

    /// Coordinates of all points; the last two entries are the poles.
    pub fn coords(&self) -> &[Vec3] {
        &self.coords
    }

    pub fn is_vertex(&self, cell: usize) -> bool {
        self.vertex_mask[cell]
    }

    pub fn vertex_mask(&self) -> &[bool] {
        &self.vertex_mask
    }

    pub fn vertex_cells(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_cells).filter(|&c| self.vertex_mask[c])
    }

    /// Whether a point id (cell or pole) is one of the 12 icosahedron vertices.
    pub fn is_vertex_point(&self, point: usize) -> bool {
        point >= self.n_cells || self.vertex_mask[point]
    }

    /// Cells that are not icosahedron vertices; the cells an SRP map computes.
    pub fn n_computed_cells(&self) -> usize {
        self.n_cells - 10
    }

    /// Neighbour point ids (cells or poles), counter-clockwise. For non-vertex
    /// cells entry `q` is hexagonal direction `q` of the owning chart.
    pub fn neighbors(&self, point: usize) -> &[usize] {
        &self.neighbors[point]
    }

    /// Hexagonal stencil of a cell: centre tap then directions 0..6.
    /// Vertex cells carry a degenerate stencil (all taps on themselves).
    pub fn hex_taps(&self, cell: usize) -> &[HexTap; 7] {
        &self.hex[cell]
    }

    /// `(chart, row, col)` of a planar cell.
    pub fn chart_position(&self, cell: usize) -> (usize, usize, usize) {
        (cell / (self.h * self.w), (cell / self.w) % self.h, cell % self.w)
    }

    pub fn cell_at(&self, chart: usize, row: usize, col: usize) -> usize {
        (chart * self.h + row) * self.w + col
    }

    /// Dimensions `(rows, cols)` of the planar layout.
    pub fn planar_dims(&self) -> (usize, usize) {
        (5 * self.h, self.w)
    }

    /// Dimensions `(rows, cols)` of the padded planar layout.
    pub fn padded_dims(&self) -> (usize, usize) {
        (5 * (self.h + 2), self.w + 2)
    }

    /// Source of each padded position, row-major over [`Self::padded_dims`].
    pub fn pad_source(&self) -> &[PadSource] {
        &self.pad_source
    }

    /// Fine cell co-located with a cell of the grid one level coarser.
    pub fn colocated_fine_cell(&self, coarse: &IcoGrid, coarse_cell: usize) -> usize {
        let (k, row, col) = coarse.chart_position(coarse_cell);
        self.cell_at(k, 2 * row, 2 * col)
    }

    /// Mean over the five neighbours of a vertex or pole, reading `value(point)`.
    pub fn vertex_mean(&self, point: usize, value: impl Fn(usize) -> f64) -> f64 {
        let nb = &self.neighbors[point];
        nb.iter().map(|&n| value(n)).sum::<f64>() / nb.len() as f64
    }

    /// Writes `cell_index,x,y,z,is_vertex` rows for every planar cell.
    pub fn dump_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("cell_index,x,y,z,is_vertex\n");
        for c in 0..self.n_cells {
            let [x, y, z] = self.coords[c];
            writeln!(out, "{c},{x:.17e},{y:.17e},{z:.17e},{}", u8::from(self.vertex_mask[c]))
                .expect("writing to a string");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Replaces every vertex cell with the mean of its 5 neighbours.
pub fn vertex_fill(field: &[f64], grid: &IcoGrid) -> Result<Vec<f64>> {
    check_len(field.len(), grid.n_cells())?;
    let mut out = field.to_vec();
    for v in grid.vertex_cells() {
        out[v] = grid.vertex_mean(v, |n| field[n]);
    }
    Ok(out)
}

/// Value a pole takes when it is read by a stencil: the mean of its
/// neighbours, the same rule used for the represented vertices.
pub fn pole_value(field: &[f64], grid: &IcoGrid, pole: Pole) -> f64 {
    grid.vertex_mean(grid.pole_index(pole), |n| field[n])
}

fn check_len(got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::shape(format!("{expected} cells"), format!("{got} values")));
    }
    Ok(())
}

/// Pads every chart of a scalar field by one ring copied from the
/// topologically adjacent cells. Output is row-major over
/// [`IcoGrid::padded_dims`].
pub fn planar_pad(field: &[f64], grid: &IcoGrid) -> Result<Vec<f64>> {
    check_len(field.len(), grid.n_cells())?;
    let north = pole_value(field, grid, Pole::North);
    let south = pole_value(field, grid, Pole::South);
    Ok(grid
        .pad_source()
        .iter()
        .map(|src| match *src {
            PadSource::Cell { cell, .. } => field[cell],
            PadSource::Pole(Pole::North) => north,
            PadSource::Pole(Pole::South) => south,
            PadSource::Unused => 0.0,
        })
        .collect())
}

/// Cell whose direction maximises `coords . u`; ties (within 1e-12) go to the
/// lowest index. Inputs within 1e-3 of unit norm are normalised.
pub fn nearest_cell(grid: &IcoGrid, u: Vec3) -> Result<usize> {
    let n = norm(u);
    if !n.is_finite() || (n - 1.0).abs() > 1e-3 {
        return Err(Error::InvalidArgument(format!(
            "direction must be a unit vector, got norm {n}"
        )));
    }
    if (n - 1.0).abs() > 1e-6 {
        log::warn!("nearest_cell: normalising direction with norm {n}");
    }
    let u = normalize(u);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for c in 0..grid.n_cells() {
        let d = dot(grid.coord(c), u);
        if d > best.0 + 1e-12 {
            best = (d, c);
        }
    }
    Ok(best.1)
}

/// Largest angle (degrees) between any point of the sphere and its nearest
/// grid cell, estimated by dense sampling.
pub fn quantization_angle_deg(grid: &IcoGrid) -> f64 {
    // The worst point is a face centroid of the subdivided mesh; sample the
    // centroids of all triangles around every cell plus the poles.
    let mut worst: f64 = 0.0;
    for p in 0..grid.n_points() {
        let nb = grid.neighbors(p);
        for i in 0..nb.len() {
            let (a, b) = (nb[i], nb[(i + 1) % nb.len()]);
            let c = normalize(add(add(grid.coord(p), grid.coord(a)), grid.coord(b)));
            let best = (0..grid.n_cells())
                .map(|x| dot(grid.coord(x), c))
                .fold(f64::NEG_INFINITY, f64::max);
            worst = worst.max(best.clamp(-1.0, 1.0).acos());
        }
    }
    worst.to_degrees()
}

pub type Mat3 = [[f64; 3]; 3];

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            *x = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let [x, y, z] = normalize(axis);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

fn mat_close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
    (0..3).all(|i| (0..3).all(|j| (a[i][j] - b[i][j]).abs() < tol))
}

/// The 60 proper rotations of the icosahedron, identity first. Axes come from
/// the 6 vertex axes (order 5), 10 face axes (order 3) and 15 edge axes
/// (order 2).
pub fn icosahedral_rotations() -> Vec<Mat3> {
    let v = icosahedron_vertices();
    let edge_len = norm(sub(v[0], v[1]));
    let mut edges = Vec::new();
    let mut faces = Vec::new();
    for a in 0..12 {
        for b in a + 1..12 {
            if (norm(sub(v[a], v[b])) - edge_len).abs() > 1e-9 {
                continue;
            }
            edges.push(add(v[a], v[b]));
            for c in b + 1..12 {
                if (norm(sub(v[a], v[c])) - edge_len).abs() < 1e-9
                    && (norm(sub(v[b], v[c])) - edge_len).abs() < 1e-9
                {
                    faces.push(add(add(v[a], v[b]), v[c]));
                }
            }
        }
    }
    let mut axes: Vec<(Vec3, u32)> = Vec::new();
    let groups: [(&[Vec3], u32); 3] = [(&v, 5), (&faces, 3), (&edges, 2)];
    for (points, order) in groups {
        for &p in points {
            let a = normalize(p);
            if axes.iter().all(|(b, _)| dot(a, *b).abs() < 1.0 - 1e-9) {
                axes.push((a, order));
            }
        }
    }
    let mut rots = vec![[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]];
    for (axis, order) in axes {
        for m in 1..order {
            rots.push(axis_angle(axis, std::f64::consts::TAU * m as f64 / order as f64));
        }
    }
    rots
}

/// The icosahedral rotation group acting on the points of one grid.
#[derive(Debug, Clone)]
pub struct RotationSet {
    matrices: Vec<Mat3>,
    /// `perm[g][p]`: point id of `g . coords[p]` (cells and poles).
    perm: Vec<Vec<usize>>,
    /// Orientation shift carried by regular features of non-vertex cells.
    orient_shift: Vec<Vec<u8>>,
    n_cells: usize,
}

impl RotationSet {
    pub fn new(grid: &IcoGrid) -> Result<Self> {
        let matrices = icosahedral_rotations();
        if matrices.len() != 60 {
            return Err(Error::Grid(format!("found {} rotations, expected 60", matrices.len())));
        }
        let index = PointIndex::new(grid.coords());
        let mut perm = Vec::with_capacity(60);
        let mut orient_shift = Vec::with_capacity(60);
        for (g, m) in matrices.iter().enumerate() {
            let mut p = Vec::with_capacity(grid.n_points());
            for i in 0..grid.n_points() {
                let target = mat_vec(m, grid.coord(i));
                let j = index.find(grid.coords(), target, MATCH_TOL).ok_or_else(|| {
                    Error::Grid(format!("rotation {g}: point {i} has no image within tolerance"))
                })?;
                p.push(j);
            }
            let mut shifts = vec![0u8; grid.n_cells()];
            for c in 0..grid.n_cells() {
                if grid.is_vertex(c) {
                    continue;
                }
                let image_nb = grid.neighbors(p[c]);
                let first = p[grid.neighbors(c)[0]];
                let d = image_nb.iter().position(|&x| x == first).ok_or_else(|| {
                    Error::Grid(format!("rotation {g} breaks the neighbourhood of cell {c}"))
                })?;
                for q in 0..6 {
                    if p[grid.neighbors(c)[q]] != image_nb[(q + d) % 6] {
                        return Err(Error::Grid(format!(
                            "rotation {g} does not preserve orientation at cell {c}"
                        )));
                    }
                }
                shifts[c] = d as u8;
            }
            perm.push(p);
            orient_shift.push(shifts);
        }
        Ok(Self {
            matrices,
            perm,
            orient_shift,
            n_cells: grid.n_cells(),
        })
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn matrix(&self, g: usize) -> &Mat3 {
        &self.matrices[g]
    }

    pub fn matrices(&self) -> &[Mat3] {
        &self.matrices
    }

    /// Point permutation of rotation `g` over cells and poles.
    pub fn perm(&self, g: usize) -> &[usize] {
        &self.perm[g]
    }

    pub fn orient_shift(&self, g: usize, cell: usize) -> usize {
        self.orient_shift[g][cell] as usize
    }

    /// Index of the rotation equal to `m`, if any.
    pub fn find(&self, m: &Mat3) -> Option<usize> {
        self.matrices.iter().position(|x| mat_close(x, m, 1e-9))
    }

    /// Rotates a scalar field: `out[perm(i)] = field[i]`. Cells whose
    /// pre-image is a pole receive `pole_fill`.
    pub fn rotate_scalar<T: Copy>(&self, g: usize, field: &[T], pole_fill: T) -> Vec<T> {
        let mut out = vec![pole_fill; self.n_cells];
        for (i, &v) in field.iter().enumerate().take(self.n_cells) {
            let j = self.perm[g][i];
            if j < self.n_cells {
                out[j] = v;
            }
        }
        out
    }

    /// Rotates a regular field stored as `[orientation][cell]`, shifting the
    /// orientation axis by the frame rotation of each cell.
    pub fn rotate_oriented<T: Copy>(&self, g: usize, field: &[T], pole_fill: T) -> Vec<T> {
        let n = self.n_cells;
        let mut out = vec![pole_fill; ORIENTATIONS * n];
        for i in 0..n {
            let j = self.perm[g][i];
            if j >= n {
                continue;
            }
            let d = self.orient_shift[g][i] as usize;
            for o in 0..ORIENTATIONS {
                out[((o + d) % ORIENTATIONS) * n + j] = field[o * n + i];
            }
        }
        out
    }
}

/// Grids and rotation sets for every level from `r` down to 1, so that
/// pooled fields can be rotated at each resolution.
#[derive(Debug, Clone)]
pub struct GridPyramid {
    /// Index 0 is resolution 1.
    levels: Vec<(IcoGrid, RotationSet)>,
}

impl GridPyramid {
    pub fn new(r: u32) -> Result<Self> {
        let levels = (1..=r)
            .map(|l| {
                let g = IcoGrid::new(l)?;
                let rot = RotationSet::new(&g)?;
                Ok((g, rot))
            })
            .collect::<Result<Vec<_>>>()?;
        if levels.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "grid resolution must be >= 1, got {r}"
            )));
        }
        Ok(Self { levels })
    }

    pub fn top(&self) -> u32 {
        self.levels.len() as u32
    }

    pub fn grid(&self, r: u32) -> &IcoGrid {
        &self.levels[r as usize - 1].0
    }

    pub fn rotations(&self, r: u32) -> &RotationSet {
        &self.levels[r as usize - 1].1
    }

    /// Permutation of rotation `g` restricted to the cells of level `r`.
    pub fn coarse_perm(&self, g: usize, r: u32) -> &[usize] {
        self.rotations(r).perm(g)
    }
}
