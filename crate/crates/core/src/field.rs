//! Vector-field mathematics on voxel grids: affine maps, trilinear warping,
//! composition, scaling-and-squaring exponentiation and Jacobian statistics.
//!
//! Displacements are in voxel units and map `x -> x + u(x)`. A field is stored
//! channel-major: all of `u_x`, then `u_y`, then `u_z`. Samples falling outside
//! the grid are clamped to the border.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::{check_finite, read_volr, write_volr, Dims, Spacing, Volume};

/// Default number of squaring steps when exponentiating a velocity field.
pub const DEFAULT_INTEGRATION_STEPS: u32 = 7;

/// Twelve affine parameters: row-major 3x4 `[A | t]` acting on coordinates
/// normalised to `[-1, 1]` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams(pub [f64; 12]);

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams([
        1.0, 0.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 0.0,
    ]);

    pub fn new(values: [f64; 12]) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: i,
                value: values[i],
            });
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; 12] = values
            .try_into()
            .map_err(|_| Error::InvalidArgument(format!("expected 12 affine parameters, got {}", values.len())))?;
        Self::new(arr)
    }

    /// Builds parameters from a linear part and a translation (both normalised).
    pub fn from_parts(a: [[f64; 3]; 3], t: [f64; 3]) -> Self {
        let mut p = [0.0; 12];
        for r in 0..3 {
            p[4 * r..4 * r + 3].copy_from_slice(&a[r]);
            p[4 * r + 3] = t[r];
        }
        Self(p)
    }

    pub fn values(&self) -> &[f64; 12] {
        &self.0
    }
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Velocity,
    Displacement,
}

/// Three-channel vector field on a voxel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    dims: Dims,
    kind: FieldKind,
    data: Vec<f32>,
}

impl VectorField {
    pub fn new(dims: Dims, kind: FieldKind, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * dims.len() {
            return Err(Error::LengthMismatch {
                expected: 3 * dims.len(),
                found: data.len(),
                dims: dims.as_array(),
            });
        }
        check_finite(&data)?;
        Ok(Self { dims, kind, data })
    }

    pub fn zeros(dims: Dims, kind: FieldKind) -> Self {
        Self {
            dims,
            kind,
            data: vec![0.0; 3 * dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, kind: FieldKind, mut f: impl FnMut(usize, usize, usize) -> [f32; 3]) -> Result<Self> {
        let n = dims.len();
        let mut data = vec![0.0; 3 * n];
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let i = dims.index(x, y, z);
                    let u = f(x, y, z);
                    data[i] = u[0];
                    data[n + i] = u[1];
                    data[2 * n + i] = u[2];
                }
            }
        }
        Self::new(dims, kind, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: FieldKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> [f32; 3] {
        let n = self.dims.len();
        let i = self.dims.index(x, y, z);
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    pub fn scaled(&self, s: f32) -> Self {
        Self {
            dims: self.dims,
            kind: self.kind,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn save(&self, path: impl AsRef<Path>, spacing: Spacing) -> Result<()> {
        write_volr(path.as_ref(), self.dims, spacing, 3, &self.data)
    }

    /// Loads a three-channel `.volr` field; the kind is not stored on disk.
    pub fn load(path: impl AsRef<Path>, kind: FieldKind) -> Result<Self> {
        let raw = read_volr(path.as_ref())?;
        if raw.channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "vector field must have 3 channels, found {}",
                raw.channels
            )));
        }
        Self::new(raw.dims, kind, raw.data)
    }
}

// ---------------------------------------------------------------------------
// Sampling kernels

/// Clamped linear interpolation weights along one axis.
///
/// Returns `(i0, i1, frac, inside)`; `inside` is false when the coordinate was
/// clamped, in which case the sample does not depend on it.
#[inline(always)]
pub(crate) fn axis_weights<T: Real>(s: T, n: usize) -> (usize, usize, T, bool) {
    if n == 1 {
        return (0, 0, T::zero(), false);
    }
    let maxc = T::lit((n - 1) as f64);
    let inside = s >= T::zero() && s <= maxc;
    let c = s.max(T::zero()).min(maxc);
    let i0 = c.floor().to_usize().unwrap_or(0).min(n - 2);
    let f = c - T::lit(i0 as f64);
    (i0, i0 + 1, f, inside)
}

/// Trilinear sample of a scalar grid at a continuous voxel position with
/// border clamping.
pub fn sample_trilinear(data: &[f32], dims: Dims, x: f64, y: f64, z: f64) -> f64 {
    let (x0, x1, fx, _) = axis_weights(x, dims.nx);
    let (y0, y1, fy, _) = axis_weights(y, dims.ny);
    let (z0, z1, fz, _) = axis_weights(z, dims.nz);
    let v = |x, y, z| data[dims.index(x, y, z)] as f64;
    let c00 = v(x0, y0, z0) * (1.0 - fx) + v(x1, y0, z0) * fx;
    let c10 = v(x0, y1, z0) * (1.0 - fx) + v(x1, y1, z0) * fx;
    let c01 = v(x0, y0, z1) * (1.0 - fx) + v(x1, y0, z1) * fx;
    let c11 = v(x0, y1, z1) * (1.0 - fx) + v(x1, y1, z1) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    c0 * (1.0 - fz) + c1 * fz
}

#[inline(always)]
fn corner_weights<T: Real>(fx: T, fy: T, fz: T) -> [T; 8] {
    let one = T::one();
    let (gx, gy, gz) = (one - fx, one - fy, one - fz);
    [
        gx * gy * gz,
        fx * gy * gz,
        gx * fy * gz,
        fx * fy * gz,
        gx * gy * fz,
        fx * gy * fz,
        gx * fy * fz,
        fx * fy * fz,
    ]
}

#[inline(always)]
fn corner_offsets(dims: Dims, x0: usize, x1: usize, y0: usize, y1: usize, z0: usize, z1: usize) -> [usize; 8] {
    [
        dims.index(x0, y0, z0),
        dims.index(x1, y0, z0),
        dims.index(x0, y1, z0),
        dims.index(x1, y1, z0),
        dims.index(x0, y0, z1),
        dims.index(x1, y0, z1),
        dims.index(x0, y1, z1),
        dims.index(x1, y1, z1),
    ]
}

/// `out[c](x) = src[c](x + u(x))` with trilinear interpolation, for one sample.
///
/// `src` and `out` hold `channels` scalar grids; `disp` is channel-major.
pub fn warp_linear_kernel<T: Real>(src: &[T], channels: usize, dims: Dims, disp: &[T], out: &mut [T]) {
    let n = dims.len();
    debug_assert_eq!(src.len(), channels * n);
    debug_assert_eq!(disp.len(), 3 * n);
    debug_assert_eq!(out.len(), channels * n);
    let (ux, rest) = disp.split_at(n);
    let (uy, uz) = rest.split_at(n);
    let mut i = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let sx = T::lit(x as f64) + ux[i];
                let sy = T::lit(y as f64) + uy[i];
                let sz = T::lit(z as f64) + uz[i];
                let (x0, x1, fx, _) = axis_weights(sx, dims.nx);
                let (y0, y1, fy, _) = axis_weights(sy, dims.ny);
                let (z0, z1, fz, _) = axis_weights(sz, dims.nz);
                let w = corner_weights(fx, fy, fz);
                let o = corner_offsets(dims, x0, x1, y0, y1, z0, z1);
                for c in 0..channels {
                    let s = &src[c * n..(c + 1) * n];
                    let mut acc = T::zero();
                    for k in 0..8 {
                        acc += w[k] * s[o[k]];
                    }
                    out[c * n + i] = acc;
                }
                i += 1;
            }
        }
    }
}

/// Adjoint of [`warp_linear_kernel`]; accumulates into `dsrc` and/or `ddisp`.
pub fn warp_linear_backward<T: Real>(
    src: &[T],
    channels: usize,
    dims: Dims,
    disp: &[T],
    dout: &[T],
    mut dsrc: Option<&mut [T]>,
    mut ddisp: Option<&mut [T]>,
) {
    let n = dims.len();
    let one = T::one();
    let mut i = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let sx = T::lit(x as f64) + disp[i];
                let sy = T::lit(y as f64) + disp[n + i];
                let sz = T::lit(z as f64) + disp[2 * n + i];
                let (x0, x1, fx, inx) = axis_weights(sx, dims.nx);
                let (y0, y1, fy, iny) = axis_weights(sy, dims.ny);
                let (z0, z1, fz, inz) = axis_weights(sz, dims.nz);
                let o = corner_offsets(dims, x0, x1, y0, y1, z0, z1);
                if let Some(ds) = dsrc.as_deref_mut() {
                    let w = corner_weights(fx, fy, fz);
                    for c in 0..channels {
                        let g = dout[c * n + i];
                        if g == T::zero() {
                            continue;
                        }
                        let d = &mut ds[c * n..(c + 1) * n];
                        for k in 0..8 {
                            d[o[k]] += w[k] * g;
                        }
                    }
                }
                if let Some(du) = ddisp.as_deref_mut() {
                    let (gx, gy, gz) = (one - fx, one - fy, one - fz);
                    let mut acc = [T::zero(); 3];
                    for c in 0..channels {
                        let g = dout[c * n + i];
                        if g == T::zero() {
                            continue;
                        }
                        let s = &src[c * n..(c + 1) * n];
                        let v = |k: usize| s[o[k]];
                        // d/dfx
                        let dx = gy * gz * (v(1) - v(0)) + fy * gz * (v(3) - v(2)) + gy * fz * (v(5) - v(4)) + fy * fz * (v(7) - v(6));
                        let dy = gx * gz * (v(2) - v(0)) + fx * gz * (v(3) - v(1)) + gx * fz * (v(6) - v(4)) + fx * fz * (v(7) - v(5));
                        let dz = gx * gy * (v(4) - v(0)) + fx * gy * (v(5) - v(1)) + gx * fy * (v(6) - v(2)) + fx * fy * (v(7) - v(3));
                        acc[0] += g * dx;
                        acc[1] += g * dy;
                        acc[2] += g * dz;
                    }
                    if inx {
                        du[i] += acc[0];
                    }
                    if iny {
                        du[n + i] += acc[1];
                    }
                    if inz {
                        du[2 * n + i] += acc[2];
                    }
                }
                i += 1;
            }
        }
    }
}

/// Nearest-neighbour warp with border clamping (ties round half away from zero).
pub fn warp_nearest_kernel<T: Real>(src: &[T], channels: usize, dims: Dims, disp: &[T], out: &mut [T]) {
    let n = dims.len();
    let clamp_round = |s: T, len: usize| -> usize {
        let c = s.round().max(T::zero()).min(T::lit((len - 1) as f64));
        c.to_usize().unwrap_or(0)
    };
    let mut i = 0;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let sx = clamp_round(T::lit(x as f64) + disp[i], dims.nx);
                let sy = clamp_round(T::lit(y as f64) + disp[n + i], dims.ny);
                let sz = clamp_round(T::lit(z as f64) + disp[2 * n + i], dims.nz);
                let j = dims.index(sx, sy, sz);
                for c in 0..channels {
                    out[c * n + i] = src[c * n + j];
                }
                i += 1;
            }
        }
    }
}

/// Half-extent `(n - 1) / 2` of each axis, the scale between normalised and
/// voxel coordinates.
#[inline]
fn half_extent(dims: Dims) -> [f64; 3] {
    [
        (dims.nx as f64 - 1.0) / 2.0,
        (dims.ny as f64 - 1.0) / 2.0,
        (dims.nz as f64 - 1.0) / 2.0,
    ]
}

#[inline]
fn normalized(i: usize, half: f64) -> f64 {
    if half > 0.0 {
        i as f64 / half - 1.0
    } else {
        0.0
    }
}

/// Dense displacement of an affine map for one sample.
///
/// `u_i(x) = h_i * (sum_j (A_ij - delta_ij) q_j(x) + t_i)` with `q` the
/// normalised coordinate and `h` the half extent, which is algebraically
/// `denorm(A q + t) - x` and exactly zero for the identity.
pub fn affine_displacement_kernel<T: Real>(p: &[T], dims: Dims, out: &mut [T]) {
    assert_eq!(p.len(), 12);
    let n = dims.len();
    let h = half_extent(dims);
    let mut m = [[T::zero(); 4]; 3];
    for r in 0..3 {
        for c in 0..4 {
            let delta = if r == c { T::one() } else { T::zero() };
            m[r][c] = p[4 * r + c] - delta;
        }
    }
    let mut i = 0;
    for z in 0..dims.nz {
        let qz = T::lit(normalized(z, h[2]));
        for y in 0..dims.ny {
            let qy = T::lit(normalized(y, h[1]));
            for x in 0..dims.nx {
                let qx = T::lit(normalized(x, h[0]));
                for r in 0..3 {
                    let v = m[r][0] * qx + m[r][1] * qy + m[r][2] * qz + m[r][3];
                    out[r * n + i] = T::lit(h[r]) * v;
                }
                i += 1;
            }
        }
    }
}

/// Adjoint of [`affine_displacement_kernel`] with respect to the 12 parameters.
pub fn affine_displacement_backward<T: Real>(dims: Dims, dout: &[T], dp: &mut [T]) {
    let n = dims.len();
    let h = half_extent(dims);
    let mut acc = [[0.0f64; 4]; 3];
    let mut i = 0;
    for z in 0..dims.nz {
        let qz = normalized(z, h[2]);
        for y in 0..dims.ny {
            let qy = normalized(y, h[1]);
            for x in 0..dims.nx {
                let qx = normalized(x, h[0]);
                for r in 0..3 {
                    let g = dout[r * n + i].as_f64() * h[r];
                    acc[r][0] += g * qx;
                    acc[r][1] += g * qy;
                    acc[r][2] += g * qz;
                    acc[r][3] += g;
                }
                i += 1;
            }
        }
    }
    for r in 0..3 {
        for c in 0..4 {
            dp[4 * r + c] += T::lit(acc[r][c]);
        }
    }
}

// ---------------------------------------------------------------------------
// Public field operations

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    #[default]
    Linear,
    Nearest,
}

pub fn affine_to_displacement(p: &AffineParams, dims: Dims) -> VectorField {
    let mut out = vec![0.0f64; 3 * dims.len()];
    affine_displacement_kernel(&p.0, dims, &mut out);
    VectorField {
        dims,
        kind: FieldKind::Displacement,
        data: out.into_iter().map(|v| v as f32).collect(),
    }
}

/// Resamples `v` at `x + u(x)`.
pub fn warp(v: &Volume, u: &VectorField, mode: Interp) -> Result<Volume> {
    if v.dims() != u.dims {
        return Err(Error::DimMismatch(format!("volume {} vs field {}", v.dims(), u.dims)));
    }
    let mut out = vec![0.0f32; v.dims().len()];
    match mode {
        Interp::Linear => warp_linear_kernel(v.data(), 1, v.dims(), &u.data, &mut out),
        Interp::Nearest => warp_nearest_kernel(v.data(), 1, v.dims(), &u.data, &mut out),
    }
    Volume::new(v.dims(), v.spacing(), out)
}

/// Displacement of `(id + u1) o (id + u2)`: `u2(x) + u1(x + u2(x))`.
pub fn compose(u1: &VectorField, u2: &VectorField) -> Result<VectorField> {
    if u1.dims != u2.dims {
        return Err(Error::DimMismatch(format!("fields {} vs {}", u1.dims, u2.dims)));
    }
    let mut out = vec![0.0f32; u1.data.len()];
    warp_linear_kernel(&u1.data, 3, u1.dims, &u2.data, &mut out);
    for (o, &b) in out.iter_mut().zip(&u2.data) {
        *o += b;
    }
    Ok(VectorField {
        dims: u1.dims,
        kind: FieldKind::Displacement,
        data: out,
    })
}

/// Scaling-and-squaring exponential of a stationary velocity field.
pub fn exponentiate(v: &VectorField, steps: u32) -> VectorField {
    let scale = 0.5f32.powi(steps as i32);
    let mut u = VectorField {
        dims: v.dims,
        kind: FieldKind::Displacement,
        data: v.data.iter().map(|&x| x * scale).collect(),
    };
    for _ in 0..steps {
        u = compose(&u, &u).expect("same dims");
    }
    u
}

/// Non-positive Jacobian determinant summary of a displacement field.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianStats {
    pub nonpos_count: usize,
    pub nonpos_percent: f64,
    pub det_map: Volume,
}

/// Per-axis derivative of one channel: central inside, one-sided at faces.
#[inline]
fn axis_derivative(c: &[f32], i: usize, pos: usize, len: usize, stride: usize) -> f64 {
    if len < 2 {
        0.0
    } else if pos == 0 {
        c[i + stride] as f64 - c[i] as f64
    } else if pos == len - 1 {
        c[i] as f64 - c[i - stride] as f64
    } else {
        (c[i + stride] as f64 - c[i - stride] as f64) / 2.0
    }
}

pub fn det3(m: [[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn jacobian_stats(u: &VectorField, spacing: Spacing) -> JacobianStats {
    let d = u.dims;
    let n = d.len();
    let strides = [1, d.nx, d.nx * d.ny];
    let lens = [d.nx, d.ny, d.nz];
    let mut det = Vec::with_capacity(n);
    let mut count = 0usize;
    for z in 0..d.nz {
        for y in 0..d.ny {
            for x in 0..d.nx {
                let i = d.index(x, y, z);
                let pos = [x, y, z];
                let mut j = [[0.0f64; 3]; 3];
                for (r, row) in j.iter_mut().enumerate() {
                    let c = &u.data[r * n..(r + 1) * n];
                    for a in 0..3 {
                        row[a] = axis_derivative(c, i, pos[a], lens[a], strides[a]) + if r == a { 1.0 } else { 0.0 };
                    }
                }
                let v = det3(j);
                if v <= 0.0 {
                    count += 1;
                }
                det.push(v as f32);
            }
        }
    }
    JacobianStats {
        nonpos_count: count,
        nonpos_percent: 100.0 * count as f64 / n as f64,
        det_map: Volume::new(d, spacing, det).expect("finite determinant map"),
    }
}
