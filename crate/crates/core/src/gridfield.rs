//! Control-grid geometry, gridded displacement fields, and upsampling to
//! dense per-voxel fields.
//!
//! A control grid is an axis-aligned lattice spanning the image inclusively:
//! along each axis the g points sit at `linspace(0, dim-1, g)`. Displacements
//! are stored in voxel units. Upsampling is a separable linear operator; the
//! per-axis weight tables are precomputed once per (grid, kernel) pair, which
//! also yields the exact transpose needed for gradient accumulation.
//!
//! Kernels:
//! - `trilinear`: hat basis `(1 - |x - x_i|/h)₊`; interpolates control values.
//! - `bspline3`: cubic B-spline with an open-uniform knot vector over the
//!   normalized parameter `x/(dim-1)`; control values act as coefficients,
//!   so grid nodes are NOT interpolated.
//! - `gaussian`: Gaussian bumps of width `sigma` (in control-cell units),
//!   normalized per voxel so the weights sum to 1.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to softplus(eta) so the variance never vanishes.
pub const SIGMA2_FLOOR: f64 = 1e-6;

/// Axis-aligned control lattice spanning `[0, dim-1]` inclusively.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlGrid {
    grid_dims: [usize; 3],
    image_dims: [usize; 3],
}

impl ControlGrid {
    pub fn new(image_dims: [usize; 3], grid_dims: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if grid_dims[a] < 2 {
                return Err(Error::GridTooCoarse { got: grid_dims[a] });
            }
            if image_dims[a] < 2 {
                return Err(Error::InvalidArg(format!(
                    "image_dim must be ≥ 2, got {image_dims:?}"
                )));
            }
            if grid_dims[a] > image_dims[a] {
                return Err(Error::GridTooFine {
                    grid: grid_dims[a],
                    image: image_dims[a],
                });
            }
        }
        Ok(ControlGrid {
            grid_dims,
            image_dims,
        })
    }

    pub fn grid_dims(&self) -> [usize; 3] {
        self.grid_dims
    }

    pub fn image_dims(&self) -> [usize; 3] {
        self.image_dims
    }

    /// Number of control points G.
    pub fn num_points(&self) -> usize {
        self.grid_dims.iter().product()
    }

    /// Control-point coordinates along one axis: `linspace(0, dim-1, g)`.
    pub fn axis_coords(&self, axis: usize) -> Vec<f64> {
        let g = self.grid_dims[axis];
        let h = self.cell_width(axis);
        (0..g).map(|i| i as f64 * h).collect()
    }

    /// Control-cell width along one axis, in voxels.
    pub fn cell_width(&self, axis: usize) -> f64 {
        (self.image_dims[axis] - 1) as f64 / (self.grid_dims[axis] - 1) as f64
    }

    /// All G control-point coordinates, x-fastest.
    pub fn coords(&self) -> Vec<[f64; 3]> {
        let xs = self.axis_coords(0);
        let ys = self.axis_coords(1);
        let zs = self.axis_coords(2);
        let mut out = Vec::with_capacity(self.num_points());
        for &z in &zs {
            for &y in &ys {
                for &x in &xs {
                    out.push([x, y, z]);
                }
            }
        }
        out
    }
}

/// Three scalar components on a control grid, x-fastest within each.
#[derive(Debug, Clone, PartialEq)]
pub struct GridVec3 {
    pub dims: [usize; 3],
    pub comps: [Vec<f64>; 3],
}

impl GridVec3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        let n = dims.iter().product();
        GridVec3 {
            dims,
            comps: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }

    pub fn num_points(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn is_finite(&self) -> bool {
        self.comps.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridVec3 {
        GridVec3 {
            dims: self.dims,
            comps: [
                self.comps[0].iter().map(|&v| f(v)).collect(),
                self.comps[1].iter().map(|&v| f(v)).collect(),
                self.comps[2].iter().map(|&v| f(v)).collect(),
            ],
        }
    }

    pub fn zip_with(&self, other: &GridVec3, f: impl Fn(f64, f64) -> f64) -> GridVec3 {
        assert_eq!(self.dims, other.dims);
        let comp = |c: usize| -> Vec<f64> {
            self.comps[c]
                .iter()
                .zip(&other.comps[c])
                .map(|(&a, &b)| f(a, b))
                .collect()
        };
        GridVec3 {
            dims: self.dims,
            comps: [comp(0), comp(1), comp(2)],
        }
    }
}

/// A scalar field over the voxel domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(dims: [usize; 3]) -> Self {
        ScalarField {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }
}

/// Per-voxel displacement field in voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseField {
    pub dims: [usize; 3],
    pub comps: [Vec<f64>; 3],
}

impl DenseField {
    pub fn zeros(dims: [usize; 3]) -> Self {
        let n = dims.iter().product();
        DenseField {
            dims,
            comps: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Displacement vector at an integer voxel.
    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let i = self.index(x, y, z);
        [self.comps[0][i], self.comps[1][i], self.comps[2][i]]
    }

    /// Trilinear sample at a continuous voxel coordinate (clamped to bounds).
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        let [w, h, d] = self.dims;
        let clamp = |v: f64, n: usize| v.max(0.0).min((n - 1) as f64);
        let x = clamp(p[0], w);
        let y = clamp(p[1], h);
        let z = clamp(p[2], d);
        let x0 = (x.floor() as usize).min(w.saturating_sub(2));
        let y0 = (y.floor() as usize).min(h.saturating_sub(2));
        let z0 = (z.floor() as usize).min(d.saturating_sub(2));
        let (fx, fy, fz) = (x - x0 as f64, y - y0 as f64, z - z0 as f64);
        for c in 0..3 {
            let v = &self.comps[c];
            let f = |i, j, k| v[self.index(i, j, k)];
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let z1 = (z0 + 1).min(d - 1);
            let c00 = f(x0, y0, z0) * (1.0 - fx) + f(x1, y0, z0) * fx;
            let c10 = f(x0, y1, z0) * (1.0 - fx) + f(x1, y1, z0) * fx;
            let c01 = f(x0, y0, z1) * (1.0 - fx) + f(x1, y0, z1) * fx;
            let c11 = f(x0, y1, z1) * (1.0 - fx) + f(x1, y1, z1) * fx;
            let c0 = c00 * (1.0 - fy) + c10 * fy;
            let c1 = c01 * (1.0 - fy) + c11 * fy;
            out[c] = c0 * (1.0 - fz) + c1 * fz;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.comps.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }
}

/// Basis-function family used to lift a gridded field to voxel resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InterpKernel {
    Trilinear,
    Bspline3,
    Gaussian { sigma_cells: f64 },
}

/// Control-point displacement means, with optional raw variance parameters
/// (present iff the field is Bayesian).
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedField {
    pub grid: ControlGrid,
    pub mu: GridVec3,
    pub eta: Option<GridVec3>,
}

impl GriddedField {
    pub fn new(grid: ControlGrid, mu: GridVec3, eta: Option<GridVec3>) -> Result<Self> {
        if mu.dims != grid.grid_dims() {
            return Err(Error::DimsMismatch {
                what: "gridded field mu".into(),
                lhs: mu.dims,
                rhs: grid.grid_dims(),
            });
        }
        if !mu.is_finite() {
            return Err(Error::NonFinite { what: "mu".into() });
        }
        if let Some(e) = &eta {
            if e.dims != grid.grid_dims() {
                return Err(Error::DimsMismatch {
                    what: "gridded field eta".into(),
                    lhs: e.dims,
                    rhs: grid.grid_dims(),
                });
            }
            if !e.is_finite() {
                return Err(Error::NonFinite { what: "eta".into() });
            }
        }
        Ok(GriddedField { grid, mu, eta })
    }

    /// Zero-displacement (identity) field.
    pub fn identity(grid: ControlGrid, bayesian: bool) -> Self {
        let dims = grid.grid_dims();
        let eta = bayesian.then(|| GridVec3::zeros(dims));
        GriddedField {
            grid,
            mu: GridVec3::zeros(dims),
            eta,
        }
    }

    pub fn is_bayesian(&self) -> bool {
        self.eta.is_some()
    }

    /// Per-control-point variance: softplus(eta) floored at `SIGMA2_FLOOR`.
    pub fn sigma2(&self) -> Option<GridVec3> {
        self.eta
            .as_ref()
            .map(|e| e.map(|v| softplus(v).max(SIGMA2_FLOOR)))
    }
}

/// Numerically stable softplus.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// d softplus / dx, i.e. the logistic sigmoid.
pub fn softplus_prime(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Per-axis weight tables
// ---------------------------------------------------------------------------

/// Weights of the contributing control points for one output coordinate.
#[derive(Debug, Clone)]
struct AxisRow {
    start: usize,
    weights: Vec<f64>,
}

#[derive(Debug, Clone)]
struct AxisTable {
    rows: Vec<AxisRow>,
    grid_len: usize,
}

fn trilinear_axis(dim: usize, g: usize) -> AxisTable {
    let h = (dim - 1) as f64 / (g - 1) as f64;
    let rows = (0..dim)
        .map(|x| {
            let pos = x as f64 / h;
            let i0 = (pos.floor() as usize).min(g - 2);
            let f = pos - i0 as f64;
            AxisRow {
                start: i0,
                weights: vec![1.0 - f, f],
            }
        })
        .collect();
    AxisTable { rows, grid_len: g }
}

/// Open-uniform cubic knot vector: three repeated end knots around a linear
/// interior ramp, `[0,0,0, linspace(0,1,g-2), 1,1,1]`, g+4 knots in total.
pub fn open_uniform_knots(g: usize) -> Vec<f64> {
    let mut t = vec![0.0; 3];
    for i in 0..(g - 2) {
        t.push(i as f64 / (g - 3) as f64);
    }
    t.extend_from_slice(&[1.0, 1.0, 1.0]);
    t
}

/// The four nonzero cubic basis values at parameter `t`, via the iterative
/// triangular scheme. Returns (first control index, weights).
fn bspline_basis(knots: &[f64], g: usize, t: f64) -> (usize, [f64; 4]) {
    // Find span: largest s in [3, g-1] with knots[s] <= t.
    let span = if t >= 1.0 {
        g - 1
    } else {
        let mut s = 3;
        while s + 1 < g && knots[s + 1] <= t {
            s += 1;
        }
        s
    };
    let mut n = [0.0f64; 4];
    let mut left = [0.0f64; 4];
    let mut right = [0.0f64; 4];
    n[0] = 1.0;
    for j in 1..=3 {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    (span - 3, n)
}

fn bspline_axis(dim: usize, g: usize) -> Result<AxisTable> {
    if g < 4 {
        return Err(Error::BsplineSupport { got: g });
    }
    let knots = open_uniform_knots(g);
    let rows = (0..dim)
        .map(|x| {
            let t = x as f64 / (dim - 1) as f64;
            let (start, w) = bspline_basis(&knots, g, t);
            AxisRow {
                start,
                weights: w.to_vec(),
            }
        })
        .collect();
    Ok(AxisTable { rows, grid_len: g })
}

fn gaussian_axis(dim: usize, g: usize, sigma_cells: f64) -> Result<AxisTable> {
    if !(sigma_cells > 0.0) {
        return Err(Error::InvalidArg(format!(
            "gaussian sigma must be > 0, got {sigma_cells}"
        )));
    }
    let h = (dim - 1) as f64 / (g - 1) as f64;
    let sigma = sigma_cells * h;
    let rows = (0..dim)
        .map(|x| {
            let mut weights: Vec<f64> = (0..g)
                .map(|i| {
                    let d = x as f64 - i as f64 * h;
                    (-d * d / (2.0 * sigma * sigma)).exp()
                })
                .collect();
            let sum: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= sum;
            }
            AxisRow { start: 0, weights }
        })
        .collect();
    Ok(AxisTable { rows, grid_len: g })
}

// ---------------------------------------------------------------------------
// Upsampler
// ---------------------------------------------------------------------------

/// Precomputed separable upsampling operator for one (grid, kernel) pair.
///
/// `apply` maps grid-resolution data to voxel resolution; `transpose` is its
/// exact adjoint, used to pull per-voxel gradients back onto the grid.
#[derive(Debug, Clone)]
pub struct Upsampler {
    grid_dims: [usize; 3],
    image_dims: [usize; 3],
    tables: [AxisTable; 3],
}

impl Upsampler {
    pub fn new(grid: &ControlGrid, kernel: &InterpKernel) -> Result<Self> {
        let gd = grid.grid_dims();
        let id = grid.image_dims();
        let table = |axis: usize| -> Result<AxisTable> {
            match kernel {
                InterpKernel::Trilinear => Ok(trilinear_axis(id[axis], gd[axis])),
                InterpKernel::Bspline3 => bspline_axis(id[axis], gd[axis]),
                InterpKernel::Gaussian { sigma_cells } => {
                    gaussian_axis(id[axis], gd[axis], *sigma_cells)
                }
            }
        };
        Ok(Upsampler {
            grid_dims: gd,
            image_dims: id,
            tables: [table(0)?, table(1)?, table(2)?],
        })
    }

    pub fn image_dims(&self) -> [usize; 3] {
        self.image_dims
    }

    pub fn grid_dims(&self) -> [usize; 3] {
        self.grid_dims
    }

    /// One separable pass along `axis`: contract the grid index against the
    /// axis table, leaving the other two extents untouched.
    fn pass(table: &AxisTable, input: &[f64], in_dims: [usize; 3], axis: usize) -> Vec<f64> {
        let mut out_dims = in_dims;
        out_dims[axis] = table.rows.len();
        let mut out = vec![0.0; out_dims.iter().product()];
        let idx = |d: [usize; 3], x: usize, y: usize, z: usize| x + d[0] * (y + d[1] * z);
        for z in 0..out_dims[2] {
            for y in 0..out_dims[1] {
                for x in 0..out_dims[0] {
                    let row = match axis {
                        0 => &table.rows[x],
                        1 => &table.rows[y],
                        _ => &table.rows[z],
                    };
                    let mut acc = 0.0;
                    for (o, w) in row.weights.iter().enumerate() {
                        let s = row.start + o;
                        let src = match axis {
                            0 => idx(in_dims, s, y, z),
                            1 => idx(in_dims, x, s, z),
                            _ => idx(in_dims, x, y, s),
                        };
                        acc += w * input[src];
                    }
                    out[idx(out_dims, x, y, z)] = acc;
                }
            }
        }
        out
    }

    /// Adjoint of `pass`: scatter voxel-resolution values back to the grid.
    fn pass_t(table: &AxisTable, input: &[f64], in_dims: [usize; 3], axis: usize) -> Vec<f64> {
        let mut out_dims = in_dims;
        out_dims[axis] = table.grid_len;
        let mut out = vec![0.0; out_dims.iter().product()];
        let idx = |d: [usize; 3], x: usize, y: usize, z: usize| x + d[0] * (y + d[1] * z);
        for z in 0..in_dims[2] {
            for y in 0..in_dims[1] {
                for x in 0..in_dims[0] {
                    let (row, val) = match axis {
                        0 => (&table.rows[x], input[idx(in_dims, x, y, z)]),
                        1 => (&table.rows[y], input[idx(in_dims, x, y, z)]),
                        _ => (&table.rows[z], input[idx(in_dims, x, y, z)]),
                    };
                    for (o, w) in row.weights.iter().enumerate() {
                        let s = row.start + o;
                        let dst = match axis {
                            0 => idx(out_dims, s, y, z),
                            1 => idx(out_dims, x, s, z),
                            _ => idx(out_dims, x, y, s),
                        };
                        out[dst] += w * val;
                    }
                }
            }
        }
        out
    }

    pub fn apply_scalar(&self, grid_data: &[f64]) -> Vec<f64> {
        let [gx, gy, gz] = self.grid_dims;
        let [w, h, _d] = self.image_dims;
        let a = Self::pass(&self.tables[0], grid_data, [gx, gy, gz], 0);
        let b = Self::pass(&self.tables[1], &a, [w, gy, gz], 1);
        Self::pass(&self.tables[2], &b, [w, h, gz], 2)
    }

    pub fn transpose_scalar(&self, dense_data: &[f64]) -> Vec<f64> {
        let [w, h, d] = self.image_dims;
        let [_, gy, gz] = self.grid_dims;
        let a = Self::pass_t(&self.tables[2], dense_data, [w, h, d], 2);
        let b = Self::pass_t(&self.tables[1], &a, [w, h, gz], 1);
        Self::pass_t(&self.tables[0], &b, [w, gy, gz], 0)
    }

    pub fn apply(&self, grid: &GridVec3) -> DenseField {
        assert_eq!(grid.dims, self.grid_dims);
        DenseField {
            dims: self.image_dims,
            comps: [
                self.apply_scalar(&grid.comps[0]),
                self.apply_scalar(&grid.comps[1]),
                self.apply_scalar(&grid.comps[2]),
            ],
        }
    }

    pub fn transpose(&self, dense: &DenseField) -> GridVec3 {
        assert_eq!(dense.dims, self.image_dims);
        GridVec3 {
            dims: self.grid_dims,
            comps: [
                self.transpose_scalar(&dense.comps[0]),
                self.transpose_scalar(&dense.comps[1]),
                self.transpose_scalar(&dense.comps[2]),
            ],
        }
    }
}

fn check_dims(f: &GriddedField, dims: [usize; 3]) -> Result<()> {
    if f.grid.image_dims() != dims {
        return Err(Error::DimsMismatch {
            what: "upsample target".into(),
            lhs: f.grid.image_dims(),
            rhs: dims,
        });
    }
    Ok(())
}

/// Upsample the mean displacements with the given kernel.
pub fn upsample(f: &GriddedField, kernel: &InterpKernel) -> Result<DenseField> {
    let up = Upsampler::new(&f.grid, kernel)?;
    Ok(up.apply(&f.mu))
}

pub fn upsample_trilinear(f: &GriddedField, dims: [usize; 3]) -> Result<DenseField> {
    check_dims(f, dims)?;
    upsample(f, &InterpKernel::Trilinear)
}

pub fn upsample_bspline(f: &GriddedField, dims: [usize; 3]) -> Result<DenseField> {
    check_dims(f, dims)?;
    upsample(f, &InterpKernel::Bspline3)
}

pub fn upsample_gaussian(f: &GriddedField, dims: [usize; 3], sigma_cells: f64) -> Result<DenseField> {
    check_dims(f, dims)?;
    upsample(f, &InterpKernel::Gaussian { sigma_cells })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldHeader {
    pub grid_dims: [usize; 3],
    pub image_dims: [usize; 3],
    pub bayesian: bool,
}

/// Serialize to (JSON header, payload). The payload is raw little-endian f32,
/// component-major: all x, then y, then z of mu, then the same for eta when
/// Bayesian.
pub fn field_to_bytes(f: &GriddedField) -> (String, Vec<u8>) {
    let header = FieldHeader {
        grid_dims: f.grid.grid_dims(),
        image_dims: f.grid.image_dims(),
        bayesian: f.is_bayesian(),
    };
    let mut payload = Vec::new();
    let push = |g: &GridVec3, payload: &mut Vec<u8>| {
        for c in 0..3 {
            for &v in &g.comps[c] {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    };
    push(&f.mu, &mut payload);
    if let Some(eta) = &f.eta {
        push(eta, &mut payload);
    }
    (serde_json::to_string_pretty(&header).unwrap(), payload)
}

pub fn field_from_bytes(header_json: &str, payload: &[u8]) -> Result<GriddedField> {
    let header: FieldHeader = serde_json::from_str(header_json).map_err(|e| Error::Header {
        path: "<bytes>".into(),
        reason: e.to_string(),
    })?;
    let grid = ControlGrid::new(header.image_dims, header.grid_dims)?;
    let g = grid.num_points();
    let blocks = if header.bayesian { 6 } else { 3 };
    if payload.len() != blocks * g * 4 {
        return Err(Error::PayloadSize {
            expected: blocks * g,
            actual: payload.len() / 4,
        });
    }
    let floats: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let take = |b: usize| -> GridVec3 {
        GridVec3 {
            dims: header.grid_dims,
            comps: [
                floats[b * g..(b + 1) * g].to_vec(),
                floats[(b + 1) * g..(b + 2) * g].to_vec(),
                floats[(b + 2) * g..(b + 3) * g].to_vec(),
            ],
        }
    };
    let mu = take(0);
    let eta = header.bayesian.then(|| take(3));
    GriddedField::new(grid, mu, eta)
}

fn field_stem_paths(path: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    (stem.with_extension("json"), stem.with_extension("raw"))
}

pub fn save_field(f: &GriddedField, path: impl AsRef<Path>) -> Result<()> {
    let (hp, rp) = field_stem_paths(path.as_ref());
    let (header, payload) = field_to_bytes(f);
    fs::write(&hp, header).map_err(|e| Error::io(&hp, e))?;
    fs::write(&rp, payload).map_err(|e| Error::io(&rp, e))?;
    Ok(())
}

pub fn load_field(path: impl AsRef<Path>) -> Result<GriddedField> {
    let (hp, rp) = field_stem_paths(path.as_ref());
    let header = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let payload = fs::read(&rp).map_err(|e| Error::io(&rp, e))?;
    field_from_bytes(&header, &payload)
}

/// Dense-field file pair: JSON header + raw f32 payload, component-major
/// within the same x-fastest order as volumes.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DenseFieldHeader {
    dims: [usize; 3],
    components: usize,
    dtype: String,
    order: String,
}

pub fn save_dense_field(f: &DenseField, path: impl AsRef<Path>) -> Result<()> {
    let (hp, rp) = field_stem_paths(path.as_ref());
    let header = DenseFieldHeader {
        dims: f.dims,
        components: 3,
        dtype: "f32".into(),
        order: "component-major x-fastest".into(),
    };
    let text = serde_json::to_string_pretty(&header).unwrap();
    fs::write(&hp, text).map_err(|e| Error::io(&hp, e))?;
    let mut bytes = Vec::with_capacity(f.num_voxels() * 12);
    for c in 0..3 {
        for &v in &f.comps[c] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(&rp, bytes).map_err(|e| Error::io(&rp, e))?;
    Ok(())
}

pub fn load_dense_field(path: impl AsRef<Path>) -> Result<DenseField> {
    let (hp, rp) = field_stem_paths(path.as_ref());
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: DenseFieldHeader = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: hp.clone(),
        reason: e.to_string(),
    })?;
    let bytes = fs::read(&rp).map_err(|e| Error::io(&rp, e))?;
    let n: usize = header.dims.iter().product();
    if bytes.len() != n * 3 * 4 {
        return Err(Error::PayloadSize {
            expected: n * 3,
            actual: bytes.len() / 4,
        });
    }
    let floats: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Ok(DenseField {
        dims: header.dims,
        comps: [
            floats[0..n].to_vec(),
            floats[n..2 * n].to_vec(),
            floats[2 * n..3 * n].to_vec(),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_field(grid: ControlGrid, bayesian: bool, seed: u64) -> GriddedField {
        let mut rng = crate::rng::stream(seed, "gridfield.test", 0);
        let dims = grid.grid_dims();
        let n: usize = dims.iter().product();
        let mut rand_vec3 = || GridVec3 {
            dims,
            comps: [
                (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            ],
        };
        let mu = rand_vec3();
        let eta = bayesian.then(rand_vec3);
        GriddedField::new(grid, mu, eta).unwrap()
    }

    #[test]
    fn lattice_spacing_and_counts() {
        let g = ControlGrid::new([128, 128, 128], [5, 5, 5]).unwrap();
        assert_eq!(g.cell_width(0), 127.0 / 4.0); // 31.75
        assert_eq!(g.axis_coords(0)[0], 0.0);
        assert_eq!(g.axis_coords(0)[4], 127.0);

        let g = ControlGrid::new([16, 16, 16], [5, 8, 10]).unwrap();
        assert_eq!(g.num_points(), 400);

        let g = ControlGrid::new([9, 9, 9], [2, 2, 2]).unwrap();
        let pts = g.coords();
        assert_eq!(pts.len(), 8);
        assert!(pts.iter().all(|p| p.iter().all(|&c| c == 0.0 || c == 8.0)));
    }

    #[test]
    fn grid_construction_errors() {
        assert!(matches!(
            ControlGrid::new([16, 16, 16], [1, 5, 5]),
            Err(Error::GridTooCoarse { got: 1 })
        ));
        assert!(matches!(
            ControlGrid::new([4, 4, 4], [5, 2, 2]),
            Err(Error::GridTooFine { .. })
        ));
    }

    #[test]
    fn zero_field_upsamples_to_zero_for_all_kernels() {
        let grid = ControlGrid::new([8, 8, 8], [4, 4, 4]).unwrap();
        let f = GriddedField::identity(grid, false);
        for kernel in [
            InterpKernel::Trilinear,
            InterpKernel::Bspline3,
            InterpKernel::Gaussian { sigma_cells: 0.5 },
        ] {
            let u = upsample(&f, &kernel).unwrap();
            assert!(u.comps.iter().flatten().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn constant_field_maps_to_constant() {
        let grid = ControlGrid::new([9, 7, 8], [4, 5, 6]).unwrap();
        let mut f = GriddedField::identity(grid, false);
        let n = f.mu.num_points();
        f.mu.comps[0] = vec![1.0; n];
        for kernel in [
            InterpKernel::Trilinear,
            InterpKernel::Bspline3,
            InterpKernel::Gaussian { sigma_cells: 0.5 },
        ] {
            let u = upsample(&f, &kernel).unwrap();
            for &v in &u.comps[0] {
                assert!((v - 1.0).abs() <= 1e-6, "{kernel:?}: {v}");
            }
            assert!(u.comps[1].iter().all(|&v| v.abs() <= 1e-6));
        }
    }

    #[test]
    fn trilinear_interpolates_at_coinciding_voxels() {
        // Image 9 with grid 5 puts control points exactly on voxels 0,2,4,6,8.
        let grid = ControlGrid::new([9, 9, 9], [5, 5, 5]).unwrap();
        let f = random_field(grid, false, 3);
        let u = upsample(&f, &InterpKernel::Trilinear).unwrap();
        for k in 0..5 {
            for j in 0..5 {
                for i in 0..5 {
                    let gidx = f.mu.index(i, j, k);
                    let vidx = u.index(2 * i, 2 * j, 2 * k);
                    for c in 0..3 {
                        assert!(
                            (u.comps[c][vidx] - f.mu.comps[c][gidx]).abs() < 1e-12,
                            "node ({i},{j},{k}) comp {c}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn linearity_of_upsampling() {
        let grid = ControlGrid::new([10, 9, 8], [4, 4, 5]).unwrap();
        let f1 = random_field(grid.clone(), false, 10);
        let f2 = random_field(grid.clone(), false, 11);
        let (a, b) = (0.7, -1.3);
        let combo = GriddedField::new(
            grid,
            f1.mu.zip_with(&f2.mu, |x, y| a * x + b * y),
            None,
        )
        .unwrap();
        for kernel in [
            InterpKernel::Trilinear,
            InterpKernel::Bspline3,
            InterpKernel::Gaussian { sigma_cells: 0.7 },
        ] {
            let u1 = upsample(&f1, &kernel).unwrap();
            let u2 = upsample(&f2, &kernel).unwrap();
            let uc = upsample(&combo, &kernel).unwrap();
            for c in 0..3 {
                for i in 0..uc.comps[c].len() {
                    let want = a * u1.comps[c][i] + b * u2.comps[c][i];
                    assert!((uc.comps[c][i] - want).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn bspline_needs_four_points_per_axis() {
        let grid = ControlGrid::new([8, 8, 8], [3, 4, 4]).unwrap();
        let f = GriddedField::identity(grid, false);
        match upsample(&f, &InterpKernel::Bspline3) {
            Err(Error::BsplineSupport { got: 3 }) => {}
            other => panic!("expected BsplineSupport, got {other:?}"),
        }
    }

    #[test]
    fn gaussian_bump_peaks_at_its_control_point() {
        // Single nonzero control point in the middle of a 5^3 grid on 9^3.
        let grid = ControlGrid::new([9, 9, 9], [5, 5, 5]).unwrap();
        let mut f = GriddedField::identity(grid, false);
        let center = f.mu.index(2, 2, 2);
        f.mu.comps[0][center] = 1.0;
        let u = upsample(&f, &InterpKernel::Gaussian { sigma_cells: 0.5 }).unwrap();
        // Peak of the normalized bump is at the control point's voxel (4,4,4).
        let peak = u.comps[0][u.index(4, 4, 4)];
        for z in 0..9 {
            for y in 0..9 {
                for x in 0..9 {
                    assert!(u.comps[0][u.index(x, y, z)] <= peak + 1e-12);
                }
            }
        }
        assert!(peak > 0.3);
        // All weights positive and bounded by 1 (normalization).
        assert!(u.comps[0].iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn transpose_is_adjoint_of_apply() {
        let grid = ControlGrid::new([10, 8, 9], [4, 5, 4]).unwrap();
        let mut rng = crate::rng::stream(5, "gridfield.adjoint", 0);
        for kernel in [
            InterpKernel::Trilinear,
            InterpKernel::Bspline3,
            InterpKernel::Gaussian { sigma_cells: 0.5 },
        ] {
            let up = Upsampler::new(&grid, &kernel).unwrap();
            let g: Vec<f64> = (0..grid.num_points()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n: usize = grid.image_dims().iter().product();
            let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ug = up.apply_scalar(&g);
            let utd = up.transpose_scalar(&d);
            let lhs: f64 = ug.iter().zip(&d).map(|(a, b)| a * b).sum();
            let rhs: f64 = g.iter().zip(&utd).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0),
                "{kernel:?}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn serialization_round_trip_and_payload_sizes() {
        let grid = ControlGrid::new([12, 12, 12], [5, 5, 5]).unwrap();
        // Values sourced from f32 so the f64 -> f32 -> f64 trip is lossless.
        let f32_field = |seed| {
            let f = random_field(ControlGrid::new([12, 12, 12], [5, 5, 5]).unwrap(), true, seed);
            GriddedField::new(
                f.grid.clone(),
                f.mu.map(|v| f64::from(v as f32)),
                f.eta.map(|e| e.map(|v| f64::from(v as f32))),
            )
            .unwrap()
        };
        let f = f32_field(21);
        let (header, payload) = field_to_bytes(&f);
        assert_eq!(payload.len(), 4 * 3 * 125 * 2, "Bayesian 5^3 payload bytes");
        let g = field_from_bytes(&header, &payload).unwrap();
        assert_eq!(f, g);
        let (h2, p2) = field_to_bytes(&g);
        assert_eq!(header, h2);
        assert_eq!(payload, p2);

        let plain = GriddedField::new(grid, f.mu.clone(), None).unwrap();
        let (_, payload) = field_to_bytes(&plain);
        assert_eq!(payload.len(), 4 * 3 * 125);
    }

    #[test]
    fn serialization_detects_payload_mismatch() {
        let grid = ControlGrid::new([8, 8, 8], [4, 4, 4]).unwrap();
        let f = GriddedField::identity(grid, false);
        let (header, mut payload) = field_to_bytes(&f);
        payload.truncate(payload.len() - 4);
        assert!(matches!(
            field_from_bytes(&header, &payload),
            Err(Error::PayloadSize { .. })
        ));
    }

    #[test]
    fn sigma2_applies_softplus_with_floor() {
        let grid = ControlGrid::new([8, 8, 8], [4, 4, 4]).unwrap();
        let mut f = GriddedField::identity(grid, true);
        f.eta.as_mut().unwrap().comps[0][0] = 0.0;
        f.eta.as_mut().unwrap().comps[0][1] = -40.0;
        let s2 = f.sigma2().unwrap();
        assert!((s2.comps[0][0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(s2.comps[0][1], SIGMA2_FLOOR);
        assert!(s2.comps.iter().flatten().all(|&v| v > 0.0));
    }

    #[test]
    fn dense_field_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = crate::rng::stream(9, "gridfield.dense", 0);
        let mut d = DenseField::zeros([5, 4, 3]);
        for c in 0..3 {
            for v in &mut d.comps[c] {
                *v = f64::from(rng.gen_range(-2.0f32..2.0));
            }
        }
        let p = dir.path().join("f.dense");
        save_dense_field(&d, &p).unwrap();
        let e = load_dense_field(&p).unwrap();
        assert_eq!(d, e);
    }

    #[test]
    fn open_uniform_knots_shape() {
        let t = open_uniform_knots(4);
        assert_eq!(t, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let t = open_uniform_knots(6);
        assert_eq!(t.len(), 10);
        assert!(t.windows(2).all(|w| w[0] <= w[1]));
    }
}
