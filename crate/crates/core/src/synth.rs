//! Seeded synthetic vertebra-like volume pairs with a known deformation.
//!
//! The moving image is a soft union of ellipsoids (a body, pedicles, a
//! spinous process and transverse processes, each jittered per seed). The
//! ground-truth displacement composes a random affine map with the
//! exponential of a smoothed random velocity, and the fixed image is the
//! moving image evaluated analytically at `x + u(x)`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{
    affine_to_displacement, compose, exponentiate, jacobian_stats, AffineParams, FieldKind, VectorField, DEFAULT_INTEGRATION_STEPS,
};
use crate::volume::{load_mask, load_volume, save_mask, save_volume, Dims, SegMask, Spacing, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Ellipsoids per shape; the first six follow a vertebra template,
    /// further ones are small random lobes.
    pub blobs: usize,
    /// Relative jitter of blob radii and centres.
    pub shape_jitter: f64,
    pub max_rotation_deg: f64,
    /// Maximum translation as a fraction of each axis extent.
    pub max_translation: f64,
    /// Per-axis scale range `[lo, hi]`.
    pub scale_range: [f64; 2],
    /// Largest velocity component, in voxels.
    pub deform_amplitude: f64,
    /// Gaussian smoothing width of the velocity noise, in voxels.
    pub deform_smoothness: f64,
    pub integration_steps: u32,
    /// Attempts at drawing a fold-free deformation.
    pub max_retries: usize,
    /// Edge steepness of the intensity profile (per voxel).
    pub edge_sharpness: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            blobs: 6,
            shape_jitter: 0.15,
            max_rotation_deg: 15.0,
            max_translation: 0.1,
            scale_range: [0.9, 1.1],
            deform_amplitude: 2.0,
            deform_smoothness: 4.0,
            integration_steps: DEFAULT_INTEGRATION_STEPS,
            max_retries: 20,
            edge_sharpness: 1.5,
        }
    }
}

impl SynthConfig {
    /// No affine motion and no deformation.
    pub fn zero_amplitude() -> Self {
        Self {
            max_rotation_deg: 0.0,
            max_translation: 0.0,
            scale_range: [1.0, 1.0],
            deform_amplitude: 0.0,
            ..Self::default()
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.blobs == 0 {
            p.push("synth.blobs must be at least 1".into());
        }
        for (name, v) in [
            ("synth.shape_jitter", self.shape_jitter),
            ("synth.max_rotation_deg", self.max_rotation_deg),
            ("synth.max_translation", self.max_translation),
            ("synth.deform_amplitude", self.deform_amplitude),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                p.push(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            p.push(format!("synth.scale_range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"));
        }
        if !(self.deform_smoothness > 0.0 && self.deform_smoothness.is_finite()) {
            p.push(format!("synth.deform_smoothness must be positive, got {}", self.deform_smoothness));
        }
        if !(self.edge_sharpness > 0.0 && self.edge_sharpness.is_finite()) {
            p.push(format!("synth.edge_sharpness must be positive, got {}", self.edge_sharpness));
        }
        if self.max_retries == 0 {
            p.push("synth.max_retries must be at least 1".into());
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub fixed: Volume,
    pub moving: Volume,
    pub fixed_mask: SegMask,
    pub moving_mask: SegMask,
    /// Displacement with `fixed(x) ~ moving(x + u(x))`.
    pub ground_truth_field: VectorField,
    pub seed: u64,
}

/// Mixes a run seed and an index into an independent per-item seed.
pub fn pair_seed(run_seed: u64, index: u64) -> u64 {
    let mut z = run_seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

/// Template in fractions of the extent: `(center, radii)`.
const TEMPLATE: [([f64; 3], [f64; 3]); 6] = [
    // body
    ([0.50, 0.36, 0.50], [0.25, 0.20, 0.34]),
    // pedicles
    ([0.36, 0.58, 0.50], [0.11, 0.15, 0.30]),
    ([0.64, 0.58, 0.50], [0.11, 0.15, 0.30]),
    // spinous process
    ([0.50, 0.75, 0.50], [0.10, 0.16, 0.30]),
    // transverse processes
    ([0.27, 0.62, 0.50], [0.15, 0.10, 0.30]),
    ([0.73, 0.62, 0.50], [0.15, 0.10, 0.30]),
];

fn shape<R: Rng>(dims: Dims, cfg: &SynthConfig, rng: &mut R) -> Vec<Ellipsoid> {
    let ext = [dims.nx as f64, dims.ny as f64, dims.nz as f64];
    let jit = |rng: &mut R| 1.0 + cfg.shape_jitter * rng.random_range(-1.0..=1.0);
    (0..cfg.blobs)
        .map(|b| {
            let (c, r) = if b < TEMPLATE.len() {
                TEMPLATE[b]
            } else {
                let c = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), 0.5];
                (c, [0.09, 0.09, 0.2])
            };
            let mut center = [0.0; 3];
            let mut radii = [0.0; 3];
            for a in 0..3 {
                center[a] = (c[a] + 0.1 * (jit(rng) - 1.0)) * (ext[a] - 1.0);
                radii[a] = (r[a] * jit(rng) * ext[a]).max(2.0);
            }
            Ellipsoid { center, radii }
        })
        .collect()
}

/// Soft union of the ellipsoids at a point; the 0.5 level set is the union
/// of their surfaces.
fn intensity(blobs: &[Ellipsoid], p: [f64; 3], sharpness: f64) -> f64 {
    blobs
        .iter()
        .map(|e| {
            let r = (0..3).map(|a| ((p[a] - e.center[a]) / e.radii[a]).powi(2)).sum::<f64>().sqrt();
            let mean_radius = (e.radii[0] + e.radii[1] + e.radii[2]) / 3.0;
            1.0 / (1.0 + (-sharpness * mean_radius * (1.0 - r)).exp())
        })
        .fold(0.0, f64::max)
}

fn render(blobs: &[Ellipsoid], dims: Dims, spacing: Spacing, sharpness: f64, disp: Option<&VectorField>) -> Result<Volume> {
    let n = dims.len();
    Volume::from_fn(dims, spacing, |x, y, z| {
        let mut p = [x as f64, y as f64, z as f64];
        if let Some(u) = disp {
            let i = dims.index(x, y, z);
            for (a, pa) in p.iter_mut().enumerate() {
                *pa += u.data()[a * n + i] as f64;
            }
        }
        intensity(blobs, p, sharpness) as f32
    })
}

/// Random sign times a magnitude in `[0.4, 1]`, so every draw moves the shape.
fn signed_fraction<R: Rng>(rng: &mut R) -> f64 {
    let m = rng.random_range(0.4..=1.0);
    if rng.random_bool(0.5) {
        m
    } else {
        -m
    }
}

/// Random affine map about the grid centre, expressed in normalised coordinates.
pub fn random_affine<R: Rng>(dims: Dims, cfg: &SynthConfig, rng: &mut R) -> AffineParams {
    let h = [
        (dims.nx as f64 - 1.0) / 2.0,
        (dims.ny as f64 - 1.0) / 2.0,
        (dims.nz as f64 - 1.0) / 2.0,
    ];
    // rotation about a random unit axis (Rodrigues)
    let axis: [f64; 3] = loop {
        let v: [f64; 3] = [0, 1, 2].map(|_| StandardNormal.sample(rng));
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-6 {
            break v.map(|c| c / norm);
        }
    };
    let angle = cfg.max_rotation_deg.to_radians() * signed_fraction(rng);
    let (s, c) = angle.sin_cos();
    let [kx, ky, kz] = axis;
    let k = [[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]];
    let mut rot = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let k2: f64 = (0..3).map(|m| k[i][m] * k[m][j]).sum();
            rot[i][j] = if i == j { 1.0 } else { 0.0 } + s * k[i][j] + (1.0 - c) * k2;
        }
    }
    let [lo, hi] = cfg.scale_range;
    let scale: [f64; 3] = [0, 1, 2].map(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo });
    let ext = [dims.nx as f64, dims.ny as f64, dims.nz as f64];
    let t_vox: [f64; 3] = [0, 1, 2].map(|a| cfg.max_translation * ext[a] * signed_fraction(rng));
    let mut a = [[0.0; 3]; 3];
    let mut t = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            a[i][j] = rot[i][j] * scale[j] * h[j] / h[i];
        }
        t[i] = t_vox[i] / h[i];
    }
    AffineParams::from_parts(a, t)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of one channel with border clamping.
fn blur(data: &mut [f64], dims: Dims, kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    let lens = [dims.nx, dims.ny, dims.nz];
    let strides = [1, dims.nx, dims.nx * dims.ny];
    let mut line = Vec::new();
    for axis in 0..3 {
        let (len, stride) = (lens[axis], strides[axis]);
        for start in 0..dims.len() {
            if (start / stride) % len != 0 {
                continue;
            }
            line.clear();
            line.extend((0..len).map(|p| data[start + p * stride]));
            for p in 0..len {
                let mut acc = 0.0;
                for (j, &w) in kernel.iter().enumerate() {
                    let q = (p as isize + j as isize - r).clamp(0, len as isize - 1) as usize;
                    acc += w * line[q];
                }
                data[start + p * stride] = acc;
            }
        }
    }
}

/// Gaussian-smoothed white noise rescaled so the largest component equals
/// `amplitude` voxels.
pub fn smooth_velocity<R: Rng>(dims: Dims, amplitude: f64, sigma: f64, rng: &mut R) -> VectorField {
    let n = dims.len();
    let kernel = gaussian_kernel(sigma);
    let mut data = vec![0.0f64; 3 * n];
    for c in 0..3 {
        let ch = &mut data[c * n..(c + 1) * n];
        for v in ch.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        blur(ch, dims, &kernel);
    }
    let peak = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { amplitude / peak } else { 0.0 };
    VectorField::new(dims, FieldKind::Velocity, data.iter().map(|&v| (v * scale) as f32).collect()).expect("finite velocity")
}

/// Pure function of `(seed, dims, cfg)`.
pub fn generate_pair(seed: u64, dims: Dims, cfg: &SynthConfig) -> Result<SyntheticPair> {
    if dims.min_axis() < 8 {
        return Err(Error::InvalidArgument(format!(
            "synthetic dims must be at least 8 per axis, got {dims}"
        )));
    }
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::InvalidArgument(problems.join("; ")));
    }
    let spacing = [1.0; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs = shape(dims, cfg, &mut rng);
    let affine = affine_to_displacement(&random_affine(dims, cfg, &mut rng), dims);
    let mut field = None;
    for _ in 0..cfg.max_retries {
        let v = smooth_velocity(dims, cfg.deform_amplitude, cfg.deform_smoothness, &mut rng);
        let phi = exponentiate(&v, cfg.integration_steps);
        let u = compose(&affine, &phi)?;
        if jacobian_stats(&u, spacing).nonpos_count == 0 {
            field = Some(u);
            break;
        }
    }
    let u = field.ok_or(Error::GenerationFailed(cfg.max_retries))?;
    let moving = render(&blobs, dims, spacing, cfg.edge_sharpness, None)?;
    let fixed = render(&blobs, dims, spacing, cfg.edge_sharpness, Some(&u))?;
    Ok(SyntheticPair {
        fixed_mask: SegMask::threshold(fixed.data(), dims, spacing, 0.5)?,
        moving_mask: SegMask::threshold(moving.data(), dims, spacing, 0.5)?,
        fixed,
        moving,
        ground_truth_field: u,
        seed,
    })
}

/// File names of one stored pair, relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub id: String,
    pub seed: u64,
    pub fixed: String,
    pub moving: String,
    pub fixed_mask: String,
    pub moving_mask: String,
    pub field: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub dims: Dims,
    pub seed: u64,
    pub config: SynthConfig,
    pub pairs: Vec<PairEntry>,
}

pub const INDEX_FILE: &str = "index.json";

impl SyntheticPair {
    /// Writes the five `.volr` datasets of this pair under `dir`.
    pub fn save(&self, dir: &Path, id: &str) -> Result<PairEntry> {
        let name = |part: &str| format!("{id}_{part}.volr");
        let e = PairEntry {
            id: id.to_string(),
            seed: self.seed,
            fixed: name("fixed"),
            moving: name("moving"),
            fixed_mask: name("fixed_mask"),
            moving_mask: name("moving_mask"),
            field: name("field"),
        };
        save_volume(&self.fixed, dir.join(&e.fixed))?;
        save_volume(&self.moving, dir.join(&e.moving))?;
        save_mask(&self.fixed_mask, dir.join(&e.fixed_mask))?;
        save_mask(&self.moving_mask, dir.join(&e.moving_mask))?;
        self.ground_truth_field.save(dir.join(&e.field), self.fixed.spacing())?;
        Ok(e)
    }

    pub fn load(dir: &Path, e: &PairEntry) -> Result<Self> {
        Ok(Self {
            fixed: load_volume(dir.join(&e.fixed))?,
            moving: load_volume(dir.join(&e.moving))?,
            fixed_mask: load_mask(dir.join(&e.fixed_mask))?,
            moving_mask: load_mask(dir.join(&e.moving_mask))?,
            ground_truth_field: VectorField::load(dir.join(&e.field), FieldKind::Displacement)?,
            seed: e.seed,
        })
    }
}

/// Generates `count` pairs with seeds `pair_seed(seed, i)` and writes them
/// with an index file.
pub fn write_dataset(dir: &Path, count: usize, seed: u64, dims: Dims, cfg: &SynthConfig) -> Result<DatasetIndex> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let s = pair_seed(seed, i as u64);
        let pair = generate_pair(s, dims, cfg)?;
        pairs.push(pair.save(dir, &format!("pair_{i:04}"))?);
    }
    let index = DatasetIndex {
        dims,
        seed,
        config: cfg.clone(),
        pairs,
    };
    let path = dir.join(INDEX_FILE);
    fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

pub fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let path: PathBuf = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Metadata {
        path,
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{warp, Interp};
    use crate::metrics::overlap_metrics;

    const DESK: Dims = Dims::new(32, 32, 16);

    #[test]
    fn same_seed_same_pair() {
        let cfg = SynthConfig::default();
        assert_eq!(generate_pair(5, DESK, &cfg).unwrap(), generate_pair(5, DESK, &cfg).unwrap());
        assert_ne!(
            generate_pair(5, DESK, &cfg).unwrap().fixed,
            generate_pair(6, DESK, &cfg).unwrap().fixed
        );
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let p = generate_pair(3, DESK, &SynthConfig::zero_amplitude()).unwrap();
        assert_eq!(p.fixed, p.moving);
        assert!(p.ground_truth_field.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_pairs_are_misaligned_but_recoverable() {
        let cfg = SynthConfig::default();
        for i in 0..10 {
            let p = generate_pair(pair_seed(7, i), DESK, &cfg).unwrap();
            let d = overlap_metrics(&p.fixed_mask, &p.moving_mask).unwrap().dice;
            assert!((0.3..=0.9).contains(&d), "pair {i}: initial dice {d}");
            let w = warp(&p.moving_mask.to_volume(), &p.ground_truth_field, Interp::Linear).unwrap();
            let wm = SegMask::threshold(w.data(), DESK, [1.0; 3], 0.5).unwrap();
            let d = overlap_metrics(&p.fixed_mask, &wm).unwrap().dice;
            assert!(d >= 0.95, "pair {i}: recovered dice {d}");
        }
    }

    #[test]
    fn warped_moving_reproduces_fixed() {
        let p = generate_pair(11, DESK, &SynthConfig::default()).unwrap();
        let w = warp(&p.moving, &p.ground_truth_field, Interp::Linear).unwrap();
        let mut err = 0.0;
        let mut n = 0;
        for z in 2..DESK.nz - 2 {
            for y in 2..DESK.ny - 2 {
                for x in 2..DESK.nx - 2 {
                    let i = DESK.index(x, y, z);
                    err += (w.data()[i] - p.fixed.data()[i]).abs() as f64;
                    n += 1;
                }
            }
        }
        assert!(err / (n as f64) < 0.02, "mean abs error {}", err / n as f64);
    }

    #[test]
    fn pair_seeds_are_distinct() {
        let s: std::collections::HashSet<u64> = (0..1000).map(|i| pair_seed(7, i)).collect();
        assert_eq!(s.len(), 1000);
    }
}
