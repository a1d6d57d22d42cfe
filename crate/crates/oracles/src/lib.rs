//! Slow, literal reference implementations for cross-checking `svfreg`.
//!
//! Nothing here depends on the main crate. Volumes are flat slices in
//! x-fastest order (`x + nx * (y + ny * z)`), matrices are `Vec` rows.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("{what} exceeds the oracle size guard ({got} > {max})")]
    TooLarge { what: &'static str, got: usize, max: usize },

    #[error("bad input: {0}")]
    BadInput(String),
}

pub type Result<T> = std::result::Result<T, OracleError>;

fn guard(what: &'static str, got: usize, max: usize) -> Result<()> {
    if got > max {
        Err(OracleError::TooLarge { what, got, max })
    } else {
        Ok(())
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(OracleError::BadInput(format!("{what} has {got} values, expected {want}")))
    }
}

fn index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

pub const MAX_TOKENS: usize = 16;
pub const MAX_WIDTH: usize = 32;
pub const MAX_VOXELS: usize = 32 * 32 * 32;

/// Logit scaling of [`oracle_attention`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scaling {
    /// `1 / sqrt(k)` with `k` the full token width.
    SqrtWidth,
    /// `1 / sqrt(k / heads)`.
    SqrtHead,
}

/// Multi-head attention of the token rows `e` (`l x k`) with projection
/// matrices stored `[in][out]`; head outputs are concatenated column-wise.
pub fn oracle_attention(
    e: &[Vec<f64>],
    wq: &[Vec<f64>],
    wk: &[Vec<f64>],
    wv: &[Vec<f64>],
    heads: usize,
    scaling: Scaling,
) -> Result<Vec<Vec<f64>>> {
    let l = e.len();
    guard("sequence length", l, MAX_TOKENS)?;
    let k = e.first().map_or(0, |r| r.len());
    guard("token width", k, MAX_WIDTH)?;
    if l == 0 || k == 0 || heads == 0 || k % heads != 0 {
        return Err(OracleError::BadInput(format!("l={l}, k={k}, heads={heads}")));
    }
    for w in [wq, wk, wv] {
        if w.len() != k || w.iter().any(|r| r.len() != k) {
            return Err(OracleError::BadInput("projection must be k x k".into()));
        }
    }
    if e.iter().any(|r| r.len() != k) {
        return Err(OracleError::BadInput("ragged token rows".into()));
    }
    let project = |w: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; k]; l];
        for t in 0..l {
            for j in 0..k {
                for i in 0..k {
                    out[t][j] += e[t][i] * w[i][j];
                }
            }
        }
        out
    };
    let (q, kk, v) = (project(wq), project(wk), project(wv));
    let dh = k / heads;
    let scale = match scaling {
        Scaling::SqrtWidth => 1.0 / (k as f64).sqrt(),
        Scaling::SqrtHead => 1.0 / (dh as f64).sqrt(),
    };
    let mut out = vec![vec![0.0; k]; l];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..l {
            let mut logits = vec![0.0; l];
            for (j, logit) in logits.iter_mut().enumerate() {
                let mut s = 0.0;
                for c in cols.clone() {
                    s += q[i][c] * kk[j][c];
                }
                *logit = s * scale;
            }
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|a| (a - top).exp()).collect();
            let total: f64 = weights.iter().sum();
            for c in cols.clone() {
                let mut s = 0.0;
                for j in 0..l {
                    s += weights[j] / total * v[j][c];
                }
                out[i][c] = s;
            }
        }
    }
    Ok(out)
}

/// Mean over voxels of the squared local correlation in cubic windows of
/// side `n`. Samples outside the volume count as zeros and every window has
/// `n^3` samples.
pub fn oracle_lncc(f: &[f64], w: &[f64], dims: [usize; 3], n: usize, eps: f64) -> Result<f64> {
    let len = dims.iter().product::<usize>();
    guard("voxel count", len, MAX_VOXELS)?;
    check_len("f", f.len(), len)?;
    check_len("w", w.len(), len)?;
    if n % 2 == 0 || len == 0 {
        return Err(OracleError::BadInput(format!("window {n} must be odd")));
    }
    let r = (n / 2) as isize;
    let at = |img: &[f64], x: isize, y: isize, z: isize| -> f64 {
        let inside = (0..dims[0] as isize).contains(&x) && (0..dims[1] as isize).contains(&y) && (0..dims[2] as isize).contains(&z);
        if inside {
            img[index(dims, x as usize, y as usize, z as usize)]
        } else {
            0.0
        }
    };
    let count = (n * n * n) as f64;
    let mut total = 0.0;
    for z in 0..dims[2] as isize {
        for y in 0..dims[1] as isize {
            for x in 0..dims[0] as isize {
                let mut window = Vec::with_capacity(n * n * n);
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            window.push((at(f, x + dx, y + dy, z + dz), at(w, x + dx, y + dy, z + dz)));
                        }
                    }
                }
                let mf = window.iter().map(|p| p.0).sum::<f64>() / count;
                let mw = window.iter().map(|p| p.1).sum::<f64>() / count;
                let mut cross = 0.0;
                let mut vf = 0.0;
                let mut vw = 0.0;
                for &(a, b) in &window {
                    cross += (a - mf) * (b - mw);
                    vf += (a - mf) * (a - mf);
                    vw += (b - mw) * (b - mw);
                }
                total += cross * cross / (vf * vw + eps);
            }
        }
    }
    Ok(total / len as f64)
}

/// Voxels of the mask with a face neighbour outside the mask or outside the
/// volume.
pub fn oracle_surface(mask: &[bool], dims: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if !mask[index(dims, x, y, z)] {
                    continue;
                }
                let p = [x as isize, y as isize, z as isize];
                let exposed = (0..3).any(|axis| {
                    [-1isize, 1].iter().any(|&step| {
                        let mut q = p;
                        q[axis] += step;
                        if q.iter().zip(dims).any(|(&c, n)| c < 0 || c >= n as isize) {
                            return true;
                        }
                        !mask[index(dims, q[0] as usize, q[1] as usize, q[2] as usize)]
                    })
                });
                if exposed {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Average symmetric surface distance by comparing every pair of surface
/// voxels. Per-voxel distances are summed in linear-index order.
pub fn oracle_assd(a: &[bool], b: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Result<f64> {
    let len = dims.iter().product::<usize>();
    guard("voxel count", len, MAX_VOXELS)?;
    check_len("a", a.len(), len)?;
    check_len("b", b.len(), len)?;
    let (sa, sb) = (oracle_surface(a, dims), oracle_surface(b, dims));
    if sa.is_empty() || sb.is_empty() {
        return Err(OracleError::BadInput("empty mask".into()));
    }
    let nearest = |p: &[usize; 3], others: &[[usize; 3]]| -> f64 {
        others
            .iter()
            .map(|q| {
                (0..3)
                    .map(|i| {
                        let d = (p[i] as f64 - q[i] as f64) * spacing[i];
                        d * d
                    })
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    };
    let sum_a: f64 = sa.iter().map(|p| nearest(p, &sb)).sum();
    let sum_b: f64 = sb.iter().map(|p| nearest(p, &sa)).sum();
    Ok((sum_a + sum_b) / (sa.len() + sb.len()) as f64)
}

/// Trilinear value at a continuous voxel position, as the hat-function
/// weighted sum over all grid points. The position is clamped to the grid.
pub fn oracle_trilinear(v: &[f64], dims: [usize; 3], point: [f64; 3]) -> Result<f64> {
    let len = dims.iter().product::<usize>();
    guard("voxel count", len, MAX_VOXELS)?;
    check_len("v", v.len(), len)?;
    let p: Vec<f64> = (0..3).map(|i| point[i].clamp(0.0, (dims[i] - 1) as f64)).collect();
    let mut s = 0.0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let w: f64 = [x, y, z]
                    .iter()
                    .zip(&p)
                    .map(|(&c, &pc)| (1.0 - (pc - c as f64).abs()).max(0.0))
                    .product();
                s += w * v[index(dims, x, y, z)];
            }
        }
    }
    Ok(s)
}

pub type Mat3 = [[f64; 3]; 3];

/// `exp(M)` from the power series, summed until terms vanish.
pub fn oracle_expm(m: Mat3) -> Result<Mat3> {
    let norm: f64 = m.iter().flatten().map(|v| v.abs()).sum();
    if norm > 20.0 || !norm.is_finite() {
        return Err(OracleError::BadInput(format!("matrix norm {norm} too large for the series")));
    }
    let mut sum = [[0.0; 3]; 3];
    let mut term = [[0.0; 3]; 3];
    for i in 0..3 {
        sum[i][i] = 1.0;
        term[i][i] = 1.0;
    }
    for k in 1..200 {
        let mut next = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for l in 0..3 {
                    next[i][j] += term[i][l] * m[l][j];
                }
                next[i][j] /= k as f64;
            }
        }
        term = next;
        let size: f64 = term.iter().flatten().map(|v| v.abs()).sum();
        for i in 0..3 {
            for j in 0..3 {
                sum[i][j] += term[i][j];
            }
        }
        if size < 1e-18 {
            break;
        }
    }
    Ok(sum)
}

/// Settings of a central-difference gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FiniteDiffSpec {
    /// Step relative to `max(1, |p|)`.
    pub h: f64,
    /// Relative error bound on coordinates above `mask_threshold`.
    pub tolerance: f64,
    /// Coordinates with analytic `|g|` at or below this are compared absolutely.
    pub mask_threshold: f64,
    pub abs_tolerance: f64,
}

impl Default for FiniteDiffSpec {
    /// Bounds for 32-bit analytic gradients.
    fn default() -> Self {
        Self {
            h: 1e-3,
            tolerance: 1e-2,
            mask_threshold: 1e-6,
            abs_tolerance: 1e-4,
        }
    }
}

impl FiniteDiffSpec {
    pub fn validate(&self) -> Result<()> {
        if self.h > 0.0 && self.tolerance > 0.0 && self.abs_tolerance > 0.0 && self.mask_threshold >= 0.0 {
            Ok(())
        } else {
            Err(OracleError::BadInput(format!("{self:?}")))
        }
    }

    fn step(&self, p: f64) -> f64 {
        self.h * p.abs().max(1.0)
    }
}

/// `(f(p + h e_i) - f(p - h e_i)) / 2h` for every coordinate `i`.
pub fn oracle_grad(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], spec: &FiniteDiffSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        let h = spec.step(orig);
        p[i] = orig + h;
        let up = f(&p);
        p[i] = orig - h;
        let down = f(&p);
        p[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Worst coordinate of a gradient comparison.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub max_abs_small: f64,
    /// Indices that broke their bound.
    pub failures: Vec<usize>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn compare_gradients(analytic: &[f64], numeric: &[f64], spec: &FiniteDiffSpec) -> Result<GradReport> {
    check_len("numeric gradient", numeric.len(), analytic.len())?;
    let mut r = GradReport {
        checked: analytic.len(),
        ..Default::default()
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        if a.abs() > spec.mask_threshold {
            let rel = (a - n).abs() / a.abs().max(n.abs());
            r.max_rel = r.max_rel.max(rel);
            if !(rel <= spec.tolerance) {
                r.failures.push(i);
            }
        } else {
            let d = (a - n).abs();
            r.max_abs_small = r.max_abs_small.max(d);
            if !(d <= spec.abs_tolerance) {
                r.failures.push(i);
            }
        }
    }
    Ok(r)
}
