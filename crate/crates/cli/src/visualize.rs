//! PNG figures of displacement fields: colour-coded components, warped
//! grids and intensity montages on the middle transversal and sagittal
//! planes.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;
use svfreg::field::VectorField;
use svfreg::volume::{Dims, Volume};

use crate::error::{CliError, Result};

/// Spacing of grid lines in voxels.
pub const GRID_EVERY: usize = 4;
pub const DEFAULT_UPSCALE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    /// `z = nz / 2`; columns follow x, rows follow y.
    Transversal,
    /// `x = nx / 2`; columns follow y, rows follow z.
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 2] = [Plane::Transversal, Plane::Sagittal];

    pub fn name(&self) -> &'static str {
        match self {
            Plane::Transversal => "transversal",
            Plane::Sagittal => "sagittal",
        }
    }

    /// In-plane size `(columns, rows)`.
    pub fn size(&self, d: Dims) -> (usize, usize) {
        match self {
            Plane::Transversal => (d.nx, d.ny),
            Plane::Sagittal => (d.ny, d.nz),
        }
    }

    /// Field components along the column and row axes.
    pub fn axes(&self) -> (usize, usize) {
        match self {
            Plane::Transversal => (0, 1),
            Plane::Sagittal => (1, 2),
        }
    }

    pub fn index(&self, d: Dims, a: usize, b: usize) -> usize {
        match self {
            Plane::Transversal => d.index(a, b, d.nz / 2),
            Plane::Sagittal => d.index(d.nx / 2, a, b),
        }
    }
}

/// 8-bit raster, row-major, `channels` samples per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0; width * height * channels],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(if self.channels == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| CliError::Png {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut w = enc.write_header().map_err(png_err)?;
        w.write_image_data(&self.data).map_err(png_err)?;
        w.finish().map_err(png_err)
    }
}

/// 99th percentile of the absolute displacement components.
pub fn clamp_range(u: &VectorField) -> f32 {
    let mut mags: Vec<f32> = u.data().iter().map(|v| v.abs()).collect();
    if mags.is_empty() {
        return 0.0;
    }
    mags.sort_by(f32::total_cmp);
    let k = ((0.99 * mags.len() as f64).ceil() as usize).clamp(1, mags.len()) - 1;
    mags[k]
}

fn to_byte(v: f64) -> u8 {
    (127.5 + 127.5 * v.clamp(-1.0, 1.0)).round() as u8
}

/// Components x, y, z as red, green, blue; zero maps to 128 and `±clamp`
/// to the ends of the range.
pub fn rgb_slice(u: &VectorField, plane: Plane, clamp: f32, upscale: usize) -> Image {
    let d = u.dims();
    let (w, h) = plane.size(d);
    let mut img = Image::new(w * upscale, h * upscale, 3);
    for py in 0..h * upscale {
        for px in 0..w * upscale {
            let i = plane.index(d, px / upscale, py / upscale);
            let px_out = img.pixel_mut(px, py);
            for c in 0..3 {
                let v = if clamp > 0.0 { (u.channel(c)[i] / clamp) as f64 } else { 0.0 };
                px_out[c] = to_byte(v);
            }
        }
    }
    img
}

/// Bilinear in-plane sample of component `c` at continuous `(a, b)`.
fn sample_plane(u: &VectorField, plane: Plane, c: usize, a: f64, b: f64) -> f64 {
    let (w, h) = plane.size(u.dims());
    let ch = u.channel(c);
    let split = |t: f64, n: usize| -> (usize, usize, f64) {
        if n < 2 {
            return (0, 0, 0.0);
        }
        let t = t.clamp(0.0, (n - 1) as f64);
        let i0 = (t.floor() as usize).min(n - 2);
        (i0, i0 + 1, t - i0 as f64)
    };
    let (a0, a1, fa) = split(a, w);
    let (b0, b1, fb) = split(b, h);
    let v = |a, b| ch[plane.index(u.dims(), a, b)] as f64;
    (v(a0, b0) * (1.0 - fa) + v(a1, b0) * fa) * (1.0 - fb) + (v(a0, b1) * (1.0 - fa) + v(a1, b1) * fa) * fb
}

/// Regular grid (a line every [`GRID_EVERY`] voxels) pulled back through the
/// in-plane displacement: pixel `p` is dark when `p + u(p)` lies on a line.
pub fn grid_slice(u: &VectorField, plane: Plane, upscale: usize) -> Image {
    let (w, h) = plane.size(u.dims());
    let (ca, cb) = plane.axes();
    let s = upscale as f64;
    let half = 0.5 / s;
    let on_line = |q: f64| {
        let g = GRID_EVERY as f64;
        (q - g * (q / g).round()).abs() < half
    };
    let mut img = Image::new(w * upscale, h * upscale, 1);
    for py in 0..h * upscale {
        for px in 0..w * upscale {
            let (a, b) = (px as f64 / s, py as f64 / s);
            let qa = a + sample_plane(u, plane, ca, a, b);
            let qb = b + sample_plane(u, plane, cb, a, b);
            img.pixel_mut(px, py)[0] = if on_line(qa) || on_line(qb) { 0 } else { 255 };
        }
    }
    img
}

/// Side-by-side grey slices of `vols`, sharing one intensity window.
pub fn montage(vols: &[&Volume], plane: Plane, upscale: usize) -> Image {
    let d = vols[0].dims();
    let (w, h) = plane.size(d);
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for v in vols {
        for &x in v.data() {
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = Image::new(vols.len() * w * upscale, h * upscale, 1);
    for (k, v) in vols.iter().enumerate() {
        for py in 0..h * upscale {
            for px in 0..w * upscale {
                let x = v.data()[plane.index(d, px / upscale, py / upscale)];
                img.pixel_mut(k * w * upscale + px, py)[0] = (255.0 * (x - lo) / span).round() as u8;
            }
        }
    }
    img
}

#[derive(Serialize)]
struct Legend {
    clamp: f32,
    unit: &'static str,
    mapping: &'static str,
    grid_every: usize,
    upscale: usize,
    montage_order: Option<[&'static str; 4]>,
}

/// Moving, fixed, affinely warped and deformably warped images.
pub struct MontageInputs {
    pub moving: Volume,
    pub fixed: Volume,
    pub m_a: Volume,
    pub m_d: Volume,
}

/// Writes every figure for `u` into `out_dir` and returns the paths.
pub fn render(u: &VectorField, volumes: Option<&MontageInputs>, out_dir: &Path, upscale: usize) -> Result<Vec<PathBuf>> {
    if upscale == 0 {
        return Err(CliError::invalid(vec!["upscale must be at least 1".into()]));
    }
    if let Some(m) = volumes {
        for v in [&m.moving, &m.fixed, &m.m_a, &m.m_d] {
            if v.dims() != u.dims() {
                return Err(CliError::invalid(vec![format!(
                    "volume {} does not match field {}",
                    v.dims(),
                    u.dims()
                )]));
            }
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let clamp = clamp_range(u);
    let mut written = Vec::new();
    let mut emit = |name: String, img: Image| -> Result<()> {
        let p = out_dir.join(name);
        img.write_png(&p)?;
        written.push(p);
        Ok(())
    };
    for plane in Plane::ALL {
        emit(format!("phi_rgb_{}.png", plane.name()), rgb_slice(u, plane, clamp, upscale))?;
        emit(format!("phi_grid_{}.png", plane.name()), grid_slice(u, plane, upscale))?;
        if let Some(m) = volumes {
            emit(
                format!("montage_{}.png", plane.name()),
                montage(&[&m.moving, &m.fixed, &m.m_a, &m.m_d], plane, upscale),
            )?;
        }
    }
    let legend = Legend {
        clamp,
        unit: "voxels",
        mapping: "R=x G=y B=z; 128 is zero, 0 and 255 are -clamp and +clamp",
        grid_every: GRID_EVERY,
        upscale,
        montage_order: volumes.map(|_| ["moving", "fixed", "m_a", "m_d"]),
    };
    let p = out_dir.join("legend.json");
    std::fs::write(&p, serde_json::to_string_pretty(&legend).expect("legend serializes")).map_err(|e| CliError::io(&p, e))?;
    written.push(p);
    Ok(written)
}
