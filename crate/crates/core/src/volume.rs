//! Scalar volumes, binary masks, the `.volr` file format and preprocessing.
//!
//! A `.volr` dataset is a JSON sidecar (`<name>.json`) next to a raw payload
//! (`<name>.raw`) of little-endian binary32 values, x fastest, then y, then z.
//! Multi-channel payloads (vector fields) store whole channels one after the
//! other and carry `"channels"` in the sidecar.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::sample_trilinear;

/// Grid extent `(nx, ny, nz)`; linear index is `x + nx * (y + ny * z)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub const fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.nx;
        let y = (i / self.nx) % self.ny;
        let z = i / (self.nx * self.ny);
        (x, y, z)
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn min_axis(&self) -> usize {
        self.nx.min(self.ny).min(self.nz)
    }

    /// Extent after one stride-2, padding-1, kernel-3 convolution.
    pub fn halved(&self) -> Self {
        Self::new(self.nx.div_ceil(2), self.ny.div_ceil(2), self.nz.div_ceil(2))
    }

    /// Tensor shape `[batch, channels, nz, ny, nx]`.
    pub fn shape(&self, batch: usize, channels: usize) -> [usize; 5] {
        [batch, channels, self.nz, self.ny, self.nx]
    }

    /// Reads the spatial part of a `[b, c, nz, ny, nx]` shape.
    pub fn from_shape(shape: &[usize]) -> Self {
        assert_eq!(shape.len(), 5, "expected a [b, c, z, y, x] shape, got {shape:?}");
        Self::new(shape[4], shape[3], shape[2])
    }
}

impl From<[usize; 3]> for Dims {
    fn from(d: [usize; 3]) -> Self {
        Self::new(d[0], d[1], d[2])
    }
}

impl From<Dims> for [usize; 3] {
    fn from(d: Dims) -> Self {
        d.as_array()
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

impl FromStr for Dims {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(['x', 'X', ',']).collect();
        if parts.len() != 3 {
            return Err(Error::InvalidArgument(format!("dims `{s}` must look like 32x32x16")));
        }
        let mut out = [0usize; 3];
        for (o, p) in out.iter_mut().zip(&parts) {
            *o = p
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad dimension `{p}` in `{s}`")))?;
            if *o == 0 {
                return Err(Error::InvalidArgument(format!("zero dimension in `{s}`")));
            }
        }
        Ok(out.into())
    }
}

/// Millimetres per voxel along x, y, z.
pub type Spacing = [f64; 3];

/// A 3D scalar image.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        check_header(dims, spacing, 1, data.len())?;
        check_finite(&data)?;
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        Self {
            dims,
            spacing,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, spacing: Spacing, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }
}

/// A binary segmentation aligned with a [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct SegMask {
    dims: Dims,
    spacing: Spacing,
    data: Vec<bool>,
}

impl SegMask {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<bool>) -> Result<Self> {
        check_header(dims, spacing, 1, data.len())?;
        Ok(Self { dims, spacing, data })
    }

    /// Thresholds a soft mask: voxels strictly above `level` are set.
    pub fn threshold(values: &[f32], dims: Dims, spacing: Spacing, level: f32) -> Result<Self> {
        Self::new(dims, spacing, values.iter().map(|&v| v > level).collect())
    }

    pub fn from_volume(v: &Volume) -> Result<Self> {
        let mut data = Vec::with_capacity(v.data.len());
        for (i, &x) in v.data.iter().enumerate() {
            if x == 0.0 {
                data.push(false);
            } else if x == 1.0 {
                data.push(true);
            } else {
                return Err(Error::InvalidArgument(format!("mask value {x} at voxel {i} is not 0 or 1")));
            }
        }
        Self::new(v.dims, v.spacing, data)
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.as_f32(),
        }
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Inclusive bounding box `(min, max)` of the set voxels.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (i, &b) in self.data.iter().enumerate() {
            if b {
                any = true;
                let (x, y, z) = self.dims.coords(i);
                for (a, c) in [x, y, z].into_iter().enumerate() {
                    lo[a] = lo[a].min(c);
                    hi[a] = hi[a].max(c);
                }
            }
        }
        any.then_some((lo, hi))
    }
}

fn check_header(dims: Dims, spacing: Spacing, channels: usize, len: usize) -> Result<()> {
    if dims.is_empty() {
        return Err(Error::InvalidArgument(format!("dims {dims} contain a zero extent")));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(format!("spacing {spacing:?} must be strictly positive")));
    }
    if channels * dims.len() != len {
        return Err(Error::LengthMismatch {
            expected: channels * dims.len(),
            found: len,
            dims: dims.as_array(),
        });
    }
    Ok(())
}

pub(crate) fn check_finite(data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: data[index] as f64,
        }),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// `.volr` I/O

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct Sidecar {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    pub data: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
}

/// Resolves `name`, `name.volr` or `name.json` to the sidecar path.
pub fn sidecar_path(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => path.to_path_buf(),
        Some("volr") | Some("raw") => path.with_extension("json"),
        _ => {
            let mut p = path.as_os_str().to_owned();
            p.push(".json");
            PathBuf::from(p)
        }
    }
}

pub(crate) struct RawVolr {
    pub dims: Dims,
    pub spacing: Spacing,
    pub channels: usize,
    pub data: Vec<f32>,
}

pub(crate) fn read_volr(path: &Path) -> Result<RawVolr> {
    let json_path = sidecar_path(path);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let meta: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Metadata {
        path: json_path.clone(),
        message: e.to_string(),
    })?;
    if meta.dtype != "f32le" {
        return Err(Error::Metadata {
            path: json_path,
            message: format!("unsupported dtype `{}`", meta.dtype),
        });
    }
    let dims = Dims::from(meta.dims);
    let channels = meta.channels.unwrap_or(1);
    let raw_path = json_path.parent().unwrap_or(Path::new(".")).join(&meta.data);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::LengthMismatch {
            expected: channels * dims.len(),
            found: bytes.len() / 4,
            dims: dims.as_array(),
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    check_header(dims, meta.spacing, channels, data.len())?;
    check_finite(&data)?;
    Ok(RawVolr {
        dims,
        spacing: meta.spacing,
        channels,
        data,
    })
}

pub(crate) fn write_volr(path: &Path, dims: Dims, spacing: Spacing, channels: usize, data: &[f32]) -> Result<()> {
    check_header(dims, spacing, channels, data.len())?;
    check_finite(data)?;
    let json_path = sidecar_path(path);
    let stem = json_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad output path {}", path.display())))?
        .to_string();
    let raw_name = format!("{stem}.raw");
    let raw_path = json_path.parent().unwrap_or(Path::new(".")).join(&raw_name);
    let meta = Sidecar {
        dims: dims.as_array(),
        spacing,
        dtype: "f32le".into(),
        data: raw_name,
        channels: (channels != 1).then_some(channels),
    };
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    let text = serde_json::to_string_pretty(&meta)?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let raw = read_volr(path)?;
    if raw.channels != 1 {
        return Err(Error::Metadata {
            path: sidecar_path(path),
            message: format!("expected a scalar volume, found {} channels", raw.channels),
        });
    }
    Volume::new(raw.dims, raw.spacing, raw.data)
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_volr(path.as_ref(), v.dims, v.spacing, 1, &v.data)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<SegMask> {
    SegMask::from_volume(&load_volume(path)?)
}

pub fn save_mask(m: &SegMask, path: impl AsRef<Path>) -> Result<()> {
    save_volume(&m.to_volume(), path)
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Resamples to isotropic `target_spacing` by trilinear interpolation.
///
/// Voxel `i` sits at physical position `i * spacing`; output extent along an
/// axis is `ceil(n * s / t)`. Samples past the last input voxel clamp to it.
pub fn resample_isotropic(v: &Volume, target_spacing: f64) -> Result<Volume> {
    if !(target_spacing > 0.0 && target_spacing.is_finite()) {
        return Err(Error::InvalidArgument(format!("target spacing {target_spacing} must be positive")));
    }
    let src = v.dims.as_array();
    if v.spacing.iter().all(|&s| s == target_spacing) {
        return Ok(v.clone());
    }
    if src.iter().any(|&n| n < 2) {
        return Err(Error::InvalidArgument(format!("cannot interpolate a volume with dims {}", v.dims)));
    }
    let mut out_dims = [0usize; 3];
    let mut ratio = [0f64; 3];
    for a in 0..3 {
        out_dims[a] = ((src[a] as f64 * v.spacing[a] / target_spacing) - 1e-9).ceil().max(1.0) as usize;
        ratio[a] = target_spacing / v.spacing[a];
    }
    let out_dims = Dims::from(out_dims);
    Volume::from_fn(out_dims, [target_spacing; 3], |x, y, z| {
        sample_trilinear(&v.data, v.dims, x as f64 * ratio[0], y as f64 * ratio[1], z as f64 * ratio[2]) as f32
    })
}

/// Zeroes intensities outside the mask and crops both to `out_dims`, with
/// the window centred on the mask's bounding box and clamped to the grid.
pub fn mask_and_crop(v: &Volume, m: &SegMask, out_dims: Dims) -> Result<(Volume, SegMask)> {
    if v.dims != m.dims {
        return Err(Error::DimMismatch(format!("volume {} vs mask {}", v.dims, m.dims)));
    }
    let src = v.dims.as_array();
    let dst = out_dims.as_array();
    if (0..3).any(|a| dst[a] > src[a] || dst[a] == 0) {
        return Err(Error::InvalidArgument(format!("crop {out_dims} does not fit inside {}", v.dims)));
    }
    let (lo, hi) = m
        .bounding_box()
        .ok_or_else(|| Error::EmptyMask("cannot centre a crop on an empty mask".into()))?;
    let start = crop_window(lo, hi, src, dst);
    let mut data = Vec::with_capacity(out_dims.len());
    let mut mask = Vec::with_capacity(out_dims.len());
    for z in 0..dst[2] {
        for y in 0..dst[1] {
            for x in 0..dst[0] {
                let i = v.dims.index(x + start[0], y + start[1], z + start[2]);
                let keep = m.data[i];
                data.push(if keep { v.data[i] } else { 0.0 });
                mask.push(keep);
            }
        }
    }
    Ok((Volume::new(out_dims, v.spacing, data)?, SegMask::new(out_dims, v.spacing, mask)?))
}

/// Start corner of a crop of extent `dst` centred on the box `[lo, hi]`.
pub fn crop_window(lo: [usize; 3], hi: [usize; 3], src: [usize; 3], dst: [usize; 3]) -> [usize; 3] {
    let mut start = [0usize; 3];
    for a in 0..3 {
        let center = (lo[a] + hi[a] + 1) / 2;
        let s = center as isize - (dst[a] / 2) as isize;
        start[a] = s.clamp(0, (src[a] - dst[a]) as isize) as usize;
    }
    start
}

/// Linear min/max rescale to `[0, 1]`; constant volumes become zero.
pub fn normalize_intensity(v: &Volume) -> Volume {
    let (lo, hi) = v
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    let data = if range > 0.0 {
        v.data.iter().map(|&x| ((x - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; v.data.len()]
    };
    Volume {
        dims: v.dims,
        spacing: v.spacing,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_parse_and_index() {
        let d: Dims = "32x32x16".parse().unwrap();
        assert_eq!(d, Dims::new(32, 32, 16));
        assert_eq!(d.coords(d.index(3, 5, 7)), (3, 5, 7));
        assert!("32x32".parse::<Dims>().is_err());
        assert_eq!(Dims::new(9, 8, 1).halved(), Dims::new(5, 4, 1));
    }

    #[test]
    fn zero_payload_loads_as_zero_volume() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::zeros(Dims::new(2, 2, 2), [1.0; 3]);
        save_volume(&v, dir.path().join("z")).unwrap();
        let back = load_volume(dir.path().join("z.json")).unwrap();
        assert!(back.data().iter().all(|&x| x == 0.0));
        assert_eq!(back.dims(), Dims::new(2, 2, 2));
    }

    #[test]
    fn short_payload_is_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::zeros(Dims::new(2, 2, 2), [1.0; 3]);
        save_volume(&v, dir.path().join("a.volr")).unwrap();
        std::fs::write(dir.path().join("a.raw"), vec![0u8; 7 * 4]).unwrap();
        match load_volume(dir.path().join("a.volr")) {
            Err(Error::LengthMismatch { expected: 8, found: 7, .. }) => {}
            other => panic!("expected length mismatch, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_payload_names_the_voxel() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::zeros(Dims::new(2, 2, 2), [1.0; 3]);
        save_volume(&v, dir.path().join("a")).unwrap();
        let mut bytes = vec![0u8; 32];
        bytes[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(dir.path().join("a.raw"), bytes).unwrap();
        match load_volume(dir.path().join("a")) {
            Err(Error::NonFinite { index: 5, .. }) => {}
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_volume(dir.path().join("nope")), Err(Error::Io { .. })));
    }

    #[test]
    fn nan_volume_is_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume {
            dims: Dims::new(1, 1, 2),
            spacing: [1.0; 3],
            data: vec![0.0, f32::NAN],
        };
        assert!(matches!(
            save_volume(&v, dir.path().join("n")),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(!dir.path().join("n.raw").exists());
    }

    #[test]
    fn single_voxel_payload_is_four_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new(Dims::new(1, 1, 1), [1.0; 3], vec![3.5]).unwrap();
        save_volume(&v, dir.path().join("one")).unwrap();
        assert_eq!(std::fs::metadata(dir.path().join("one.raw")).unwrap().len(), 4);
    }

    #[test]
    fn resample_identity_and_ramp() {
        let d = Dims::new(4, 3, 2);
        let ramp = Volume::from_fn(d, [1.0; 3], |x, _, _| x as f32).unwrap();
        assert_eq!(resample_isotropic(&ramp, 1.0).unwrap(), ramp);
        let fine = resample_isotropic(&ramp, 0.5).unwrap();
        assert_eq!(fine.dims(), Dims::new(8, 6, 4));
        assert_eq!(fine.spacing(), [0.5; 3]);
        for x in 0..7 {
            assert!((fine.get(x, 1, 1) - 0.5 * x as f32).abs() < 1e-6);
        }
    }

    #[test]
    fn resample_rejects_degenerate_axes() {
        let v = Volume::zeros(Dims::new(1, 4, 4), [1.0; 3]);
        assert!(resample_isotropic(&v, 0.5).is_err());
        assert!(resample_isotropic(&v, 1.0).is_ok());
        assert!(resample_isotropic(&v, 0.0).is_err());
    }

    #[test]
    fn crop_of_full_mask_is_identity() {
        let d = Dims::new(6, 5, 4);
        let v = Volume::from_fn(d, [1.0; 3], |x, y, z| (x + 10 * y + 100 * z) as f32).unwrap();
        let m = SegMask::new(d, [1.0; 3], vec![true; d.len()]).unwrap();
        let (cv, cm) = mask_and_crop(&v, &m, d).unwrap();
        assert_eq!(cv, v);
        assert_eq!(cm, m);
    }

    #[test]
    fn crop_centres_on_single_voxel() {
        let d = Dims::new(16, 16, 16);
        let mut bits = vec![false; d.len()];
        bits[d.index(5, 5, 5)] = true;
        let m = SegMask::new(d, [1.0; 3], bits).unwrap();
        let (lo, hi) = m.bounding_box().unwrap();
        assert_eq!(crop_window(lo, hi, [16; 3], [8; 3]), [1, 1, 1]);
        let v = Volume::from_fn(d, [1.0; 3], |_, _, _| 2.0).unwrap();
        let (cv, cm) = mask_and_crop(&v, &m, Dims::new(8, 8, 8)).unwrap();
        assert_eq!(cm.count(), 1);
        assert!(cm.data()[Dims::new(8, 8, 8).index(4, 4, 4)]);
        assert_eq!(cv.data().iter().filter(|&&x| x != 0.0).count(), 1);
    }

    #[test]
    fn crop_rejects_empty_mask() {
        let d = Dims::new(4, 4, 4);
        let m = SegMask::new(d, [1.0; 3], vec![false; d.len()]).unwrap();
        let v = Volume::zeros(d, [1.0; 3]);
        assert!(matches!(mask_and_crop(&v, &m, d), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn normalize_rescales_and_handles_constants() {
        let d = Dims::new(3, 1, 1);
        let v = Volume::new(d, [1.0; 3], vec![-100.0, 100.0, 300.0]).unwrap();
        let n = normalize_intensity(&v);
        assert_eq!(n.data(), &[0.0, 0.5, 1.0]);
        assert_eq!(normalize_intensity(&n), n);
        let c = Volume::new(d, [1.0; 3], vec![7.0; 3]).unwrap();
        assert_eq!(normalize_intensity(&c).data(), &[0.0; 3]);
    }
}
