//! 3x3x3 convolution with padding 1.
//!
//! Stride 1 multiplies the weights against the input first (`Z = W' * X`,
//! one row per kernel tap and output channel) and then sums shifted rows of
//! `Z`. Stride 2 uses an explicit column matrix. Batch items are processed in
//! order and weight gradients accumulate in that same order.

use crate::graph::{Graph, Var};
use crate::real::{gemm, MatMut, MatRef, Real};
use crate::tensor::Tensor;
use crate::volume::Dims;

pub(crate) const TAPS: usize = 27;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ConvAlgo {
    Gather,
    Im2col,
}

/// Output size of a padded 3-wide window at `stride`.
pub(crate) fn conv_out_dims(d: Dims, stride: usize) -> Dims {
    match stride {
        1 => d,
        2 => d.halved(),
        _ => panic!("unsupported stride {stride}"),
    }
}

fn tap_offsets(k: usize) -> (isize, isize, isize) {
    let dx = (k % 3) as isize - 1;
    let dy = ((k / 3) % 3) as isize - 1;
    let dz = (k / 9) as isize - 1;
    (dx, dy, dz)
}

/// Valid output range along one axis for a shift `d` (so `o + d` stays inside).
fn shift_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

/// `out[co, p] += sum_k z[k * cout + co, off + p + shift_k]` on a stride-1
/// grid, where `z` rows are `ld` long.
fn gather_taps<T: Real>(z: &[T], ld: usize, off: usize, cout: usize, dims: Dims, out: &mut [T]) {
    let n = dims.len();
    let (nx, ny, nz) = (dims.nx, dims.ny, dims.nz);
    for k in 0..TAPS {
        let (dx, dy, dz) = tap_offsets(k);
        let (x0, x1) = shift_range(nx, dx);
        let (y0, y1) = shift_range(ny, dy);
        let (z0, z1) = shift_range(nz, dz);
        if x0 >= x1 {
            continue;
        }
        for co in 0..cout {
            let zrow = &z[(k * cout + co) * ld + off..(k * cout + co) * ld + off + n];
            let orow = &mut out[co * n..(co + 1) * n];
            for zz in z0..z1 {
                for yy in y0..y1 {
                    let base = nx * (yy + ny * zz);
                    let s0 = ((base + x0) as isize + dx + nx as isize * (dy + ny as isize * dz)) as usize;
                    let o = &mut orow[base + x0..base + x1];
                    let s = &zrow[s0..s0 + (x1 - x0)];
                    for (a, &b) in o.iter_mut().zip(s) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// Adjoint of [`gather_taps`]. Writes only valid positions; the caller zeroes `dz`.
fn scatter_taps<T: Real>(dout: &[T], cout: usize, dims: Dims, dz: &mut [T], ld: usize, off: usize) {
    let n = dims.len();
    let (nx, ny, nz) = (dims.nx, dims.ny, dims.nz);
    for k in 0..TAPS {
        let (dx, dy, dzo) = tap_offsets(k);
        let (x0, x1) = shift_range(nx, dx);
        let (y0, y1) = shift_range(ny, dy);
        let (z0, z1) = shift_range(nz, dzo);
        if x0 >= x1 {
            continue;
        }
        for co in 0..cout {
            let zrow = &mut dz[(k * cout + co) * ld + off..(k * cout + co) * ld + off + n];
            let grow = &dout[co * n..(co + 1) * n];
            for zz in z0..z1 {
                for yy in y0..y1 {
                    let base = nx * (yy + ny * zz);
                    let s0 = ((base + x0) as isize + dx + nx as isize * (dy + ny as isize * dzo)) as usize;
                    zrow[s0..s0 + (x1 - x0)].copy_from_slice(&grow[base + x0..base + x1]);
                }
            }
        }
    }
}

/// Column block for one sample: rows `ci * 27 + k` of a matrix whose rows
/// are `ld` long, starting at column `off`. Out-of-range taps are left as is.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], cin: usize, src: Dims, dst: Dims, stride: usize, cols: &mut [T], ld: usize, off: usize) {
    let no = dst.len();
    for ci in 0..cin {
        let xs = &x[ci * src.len()..(ci + 1) * src.len()];
        for k in 0..TAPS {
            let (dx, dy, dz) = tap_offsets(k);
            let row = &mut cols[(ci * TAPS + k) * ld + off..(ci * TAPS + k) * ld + off + no];
            for oz in 0..dst.nz {
                let iz = (oz * stride) as isize + dz;
                if iz < 0 || iz >= src.nz as isize {
                    continue;
                }
                for oy in 0..dst.ny {
                    let iy = (oy * stride) as isize + dy;
                    if iy < 0 || iy >= src.ny as isize {
                        continue;
                    }
                    let ibase = src.nx * (iy as usize + src.ny * iz as usize);
                    let obase = dst.nx * (oy + dst.ny * oz);
                    for ox in 0..dst.nx {
                        let ix = (ox * stride) as isize + dx;
                        if ix >= 0 && ix < src.nx as isize {
                            row[obase + ox] = xs[ibase + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulating into `dx_out`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], cin: usize, src: Dims, dst: Dims, stride: usize, dx_out: &mut [T], ld: usize, off: usize) {
    let no = dst.len();
    for ci in 0..cin {
        let xs = &mut dx_out[ci * src.len()..(ci + 1) * src.len()];
        for k in 0..TAPS {
            let (dx, dy, dz) = tap_offsets(k);
            let row = &cols[(ci * TAPS + k) * ld + off..(ci * TAPS + k) * ld + off + no];
            for oz in 0..dst.nz {
                let iz = (oz * stride) as isize + dz;
                if iz < 0 || iz >= src.nz as isize {
                    continue;
                }
                for oy in 0..dst.ny {
                    let iy = (oy * stride) as isize + dy;
                    if iy < 0 || iy >= src.ny as isize {
                        continue;
                    }
                    let ibase = src.nx * (iy as usize + src.ny * iz as usize);
                    let obase = dst.nx * (oy + dst.ny * oz);
                    for ox in 0..dst.nx {
                        let ix = (ox * stride) as isize + dx;
                        if ix >= 0 && ix < src.nx as isize {
                            xs[ibase + ix as usize] += row[obase + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Reorders `[cout, cin, 27]` weights to `[27 * cout, cin]`.
fn tap_major<T: Real>(w: &[T], cout: usize, cin: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for k in 0..TAPS {
                out[(k * cout + co) * cin + ci] = w[(co * cin + ci) * TAPS + k];
            }
        }
    }
    out
}

fn tap_major_back<T: Real>(wt: &[T], cout: usize, cin: usize, w: &mut [T]) {
    for co in 0..cout {
        for ci in 0..cin {
            for k in 0..TAPS {
                w[(co * cin + ci) * TAPS + k] += wt[(k * cout + co) * cin + ci];
            }
        }
    }
}

/// Copies samples `b0..b0 + cb` of a `[b, c, n]` tensor into a `[c, cb * n]`
/// matrix, or back (`to_matrix == false`, accumulating).
fn pack_channels<T: Real>(t: &mut [T], m: &mut [T], c: usize, n: usize, b0: usize, cb: usize, to_matrix: bool) {
    let ld = cb * n;
    for j in 0..cb {
        for ch in 0..c {
            let ts = &mut t[((b0 + j) * c + ch) * n..((b0 + j) * c + ch + 1) * n];
            let ms = &mut m[ch * ld + j * n..ch * ld + (j + 1) * n];
            if to_matrix {
                ms.copy_from_slice(ts);
            } else {
                for (a, &v) in ts.iter_mut().zip(ms.iter()) {
                    *a += v;
                }
            }
        }
    }
}

fn pack_from<T: Real>(t: &[T], m: &mut [T], c: usize, n: usize, b0: usize, cb: usize) {
    let ld = cb * n;
    for j in 0..cb {
        for ch in 0..c {
            m[ch * ld + j * n..ch * ld + (j + 1) * n].copy_from_slice(&t[((b0 + j) * c + ch) * n..((b0 + j) * c + ch + 1) * n]);
        }
    }
}

/// Elements of scratch memory allowed per batch chunk.
const CHUNK_ELEMS: usize = 1 << 22;

fn chunk_size(batch: usize, per_item: usize, limit: usize) -> usize {
    (limit / per_item.max(1)).clamp(1, batch.max(1))
}

/// Strategy for a stride-1 convolution: the tap-gather form writes
/// `27 * cout` rows of scratch, the column form `27 * cin`. Tiny grids favour
/// columns since most taps fall outside.
pub(crate) fn pick_algo(cin: usize, cout: usize, stride: usize, voxels: usize) -> ConvAlgo {
    if stride != 1 || 2 * cin <= cout || voxels < TAPS {
        ConvAlgo::Im2col
    } else {
        ConvAlgo::Gather
    }
}

impl<T: Real> Graph<T> {
    /// `x [b, cin, nz, ny, nx]`, `w [cout, cin, 3, 3, 3]`, `b [cout]`.
    pub fn conv3d(&self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Var {
        let xs = self.shape(x);
        let voxels = Dims::from_shape(&xs).len();
        self.conv3d_with(x, w, b, stride, pick_algo(xs[1], self.shape(w)[0], stride, voxels))
    }

    pub(crate) fn conv3d_with(&self, x: Var, w: Var, b: Option<Var>, stride: usize, algo: ConvAlgo) -> Var {
        self.conv3d_chunked(x, w, b, stride, algo, CHUNK_ELEMS)
    }

    /// `chunk_elems` bounds the scratch memory of one group of samples.
    fn conv3d_chunked(&self, x: Var, w: Var, b: Option<Var>, stride: usize, algo: ConvAlgo, chunk_elems: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let xs = vx.shape().to_vec();
        let ws = vw.shape().to_vec();
        assert_eq!(xs.len(), 5, "conv3d input must be [b, c, z, y, x], got {xs:?}");
        assert_eq!(ws.len(), 5);
        assert_eq!(&ws[2..], &[3, 3, 3], "conv3d kernel must be 3x3x3");
        let (batch, cin, cout) = (xs[0], xs[1], ws[0]);
        assert_eq!(ws[1], cin, "conv3d channels: input {cin}, weight {ws:?}");
        assert!(algo == ConvAlgo::Im2col || stride == 1);
        let src = Dims::from_shape(&xs);
        let dst = conv_out_dims(src, stride);
        let (ni, no) = (src.len(), dst.len());
        let bias = b.map(|b| self.value(b));
        let ck = cin * TAPS;

        let mut out = Tensor::zeros(&dst.shape(batch, cout));
        if let Some(bias) = &bias {
            for (i, row) in out.data_mut().chunks_exact_mut(no).enumerate() {
                row.fill(bias.data()[i % cout]);
            }
        }
        let wt = (algo == ConvAlgo::Gather).then(|| tap_major(vw.data(), cout, cin));
        let cb = match algo {
            ConvAlgo::Gather => chunk_size(batch, (TAPS * cout + cin) * ni, chunk_elems),
            ConvAlgo::Im2col => chunk_size(batch, (ck + cout) * no, chunk_elems),
        };
        match algo {
            ConvAlgo::Gather => {
                let wt = wt.as_ref().unwrap();
                let mut xm = vec![T::zero(); cin * cb * ni];
                let mut z = vec![T::zero(); TAPS * cout * cb * ni];
                for b0 in (0..batch).step_by(cb) {
                    let nb = cb.min(batch - b0);
                    let ld = nb * ni;
                    pack_from(vx.data(), &mut xm, cin, ni, b0, nb);
                    gemm(
                        T::one(),
                        MatRef::new(wt, TAPS * cout, cin),
                        MatRef::new(&xm[..cin * ld], cin, ld),
                        T::zero(),
                        MatMut::new(&mut z[..TAPS * cout * ld], TAPS * cout, ld),
                    );
                    for j in 0..nb {
                        let ob = &mut out.data_mut()[(b0 + j) * cout * no..(b0 + j + 1) * cout * no];
                        gather_taps(&z, ld, j * ni, cout, src, ob);
                    }
                }
            }
            ConvAlgo::Im2col => {
                let mut cols = vec![T::zero(); ck * cb * no];
                let mut om = vec![T::zero(); cout * cb * no];
                for b0 in (0..batch).step_by(cb) {
                    let nb = cb.min(batch - b0);
                    let ld = nb * no;
                    cols[..ck * ld].fill(T::zero());
                    for j in 0..nb {
                        let xin = &vx.data()[(b0 + j) * cin * ni..(b0 + j + 1) * cin * ni];
                        im2col(xin, cin, src, dst, stride, &mut cols, ld, j * no);
                    }
                    gemm(
                        T::one(),
                        MatRef::new(vw.data(), cout, ck),
                        MatRef::new(&cols[..ck * ld], ck, ld),
                        T::zero(),
                        MatMut::new(&mut om[..cout * ld], cout, ld),
                    );
                    pack_channels(out.data_mut(), &mut om, cout, no, b0, nb, false);
                }
            }
        }

        let mut parents = vec![x, w];
        parents.extend(b);
        self.op(
            out,
            &parents,
            Box::new(move |g, needs| {
                let gd = g.data();
                let mut dx = needs[0].then(|| Tensor::zeros(&xs));
                let mut dw = needs[1].then(|| Tensor::zeros(&ws));
                match algo {
                    ConvAlgo::Gather => {
                        let wt = wt.as_ref().unwrap();
                        let mut dz = vec![T::zero(); TAPS * cout * cb * ni];
                        let mut xm = vec![T::zero(); cin * cb * ni];
                        let mut dwt = dw.as_ref().map(|_| vec![T::zero(); TAPS * cout * cin]);
                        for b0 in (0..batch).step_by(cb) {
                            let nb = cb.min(batch - b0);
                            let ld = nb * ni;
                            dz[..TAPS * cout * ld].fill(T::zero());
                            for j in 0..nb {
                                scatter_taps(&gd[(b0 + j) * cout * no..(b0 + j + 1) * cout * no], cout, src, &mut dz, ld, j * ni);
                            }
                            if let Some(dx) = dx.as_mut() {
                                gemm(
                                    T::one(),
                                    MatRef::new(wt, TAPS * cout, cin).t(),
                                    MatRef::new(&dz[..TAPS * cout * ld], TAPS * cout, ld),
                                    T::zero(),
                                    MatMut::new(&mut xm[..cin * ld], cin, ld),
                                );
                                pack_channels(dx.data_mut(), &mut xm, cin, ni, b0, nb, false);
                            }
                            if let Some(dwt) = dwt.as_mut() {
                                pack_from(vx.data(), &mut xm, cin, ni, b0, nb);
                                gemm(
                                    T::one(),
                                    MatRef::new(&dz[..TAPS * cout * ld], TAPS * cout, ld),
                                    MatRef::new(&xm[..cin * ld], cin, ld).t(),
                                    T::one(),
                                    MatMut::new(dwt, TAPS * cout, cin),
                                );
                            }
                        }
                        if let (Some(dw), Some(dwt)) = (dw.as_mut(), dwt) {
                            tap_major_back(&dwt, cout, cin, dw.data_mut());
                        }
                    }
                    ConvAlgo::Im2col => {
                        let mut cols = vec![T::zero(); ck * cb * no];
                        let mut gm = vec![T::zero(); cout * cb * no];
                        for b0 in (0..batch).step_by(cb) {
                            let nb = cb.min(batch - b0);
                            let ld = nb * no;
                            pack_from(gd, &mut gm, cout, no, b0, nb);
                            if let Some(dw) = dw.as_mut() {
                                cols[..ck * ld].fill(T::zero());
                                for j in 0..nb {
                                    let xin = &vx.data()[(b0 + j) * cin * ni..(b0 + j + 1) * cin * ni];
                                    im2col(xin, cin, src, dst, stride, &mut cols, ld, j * no);
                                }
                                gemm(
                                    T::one(),
                                    MatRef::new(&gm[..cout * ld], cout, ld),
                                    MatRef::new(&cols[..ck * ld], ck, ld).t(),
                                    T::one(),
                                    MatMut::new(dw.data_mut(), cout, ck),
                                );
                            }
                            if let Some(dx) = dx.as_mut() {
                                gemm(
                                    T::one(),
                                    MatRef::new(vw.data(), cout, ck).t(),
                                    MatRef::new(&gm[..cout * ld], cout, ld),
                                    T::zero(),
                                    MatMut::new(&mut cols[..ck * ld], ck, ld),
                                );
                                for j in 0..nb {
                                    let dxb = &mut dx.data_mut()[(b0 + j) * cin * ni..(b0 + j + 1) * cin * ni];
                                    col2im(&cols, cin, src, dst, stride, dxb, ld, j * no);
                                }
                            }
                        }
                    }
                }
                let mut res = vec![dx, dw];
                if needs.len() == 3 {
                    res.push(needs[2].then(|| {
                        let mut db = vec![T::zero(); cout];
                        for (i, row) in gd.chunks_exact(no).enumerate() {
                            db[i % cout] += row.iter().copied().sum::<T>();
                        }
                        Tensor::from_vec(&[cout], db).unwrap()
                    }));
                }
                res
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct seven-loop convolution.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize) -> Tensor<f64> {
        let xs = x.shape();
        let (batch, cin, cout) = (xs[0], xs[1], w.shape()[0]);
        let src = Dims::from_shape(xs);
        let dst = conv_out_dims(src, stride);
        let mut out = Tensor::zeros(&dst.shape(batch, cout));
        for bi in 0..batch {
            for co in 0..cout {
                for oz in 0..dst.nz {
                    for oy in 0..dst.ny {
                        for ox in 0..dst.nx {
                            let mut s = b[co];
                            for ci in 0..cin {
                                for kz in 0..3 {
                                    for ky in 0..3 {
                                        for kx in 0..3 {
                                            let iz = (oz * stride + kz) as isize - 1;
                                            let iy = (oy * stride + ky) as isize - 1;
                                            let ix = (ox * stride + kx) as isize - 1;
                                            if iz < 0 || iy < 0 || ix < 0 {
                                                continue;
                                            }
                                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                            if iz >= src.nz || iy >= src.ny || ix >= src.nx {
                                                continue;
                                            }
                                            s += w.at(&[co, ci, kz, ky, kx]) * x.at(&[bi, ci, iz, iy, ix]);
                                        }
                                    }
                                }
                            }
                            let off = out.offset(&[bi, co, oz, oy, ox]);
                            out.data_mut()[off] = s;
                        }
                    }
                }
            }
        }
        out
    }

    fn check_forward(stride: usize, algo: ConvAlgo, dims: Dims) {
        for chunk in [1, CHUNK_ELEMS] {
            check_forward_chunked(stride, algo, dims, chunk);
        }
    }

    fn check_forward_chunked(stride: usize, algo: ConvAlgo, dims: Dims, chunk: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&dims.shape(3, 3), &mut rng);
        let w = rand_tensor(&[4, 3, 3, 3, 3], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let expected = naive(&x, &w, b.data(), stride);
        let g = Graph::<f64>::new();
        let (vx, vw, vb) = (g.constant(x), g.constant(w), g.constant(b));
        let y = g.conv3d_chunked(vx, vw, Some(vb), stride, algo, chunk);
        let got = g.value(y);
        assert_eq!(got.shape(), expected.shape());
        for (a, e) in got.data().iter().zip(expected.data()) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn forward_matches_naive() {
        let dims = Dims::new(5, 4, 3);
        check_forward(1, ConvAlgo::Gather, dims);
        check_forward(1, ConvAlgo::Im2col, dims);
        check_forward(2, ConvAlgo::Im2col, dims);
        check_forward(2, ConvAlgo::Im2col, Dims::new(6, 7, 2));
        check_forward(1, ConvAlgo::Gather, Dims::new(1, 1, 1));
    }

    fn check_grad(stride: usize, algo: ConvAlgo) {
        for chunk in [1, CHUNK_ELEMS] {
            check_grad_chunked(stride, algo, chunk);
        }
    }

    fn check_grad_chunked(stride: usize, algo: ConvAlgo, chunk: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = Dims::new(4, 3, 3);
        let x = rand_tensor(&dims.shape(3, 2), &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let probe = rand_tensor(&conv_out_dims(dims, stride).shape(3, 3), &mut rng);
        let eval = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let out = naive(x, w, b.data(), stride);
            out.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum()
        };
        let g = Graph::<f64>::new();
        let (vx, vw, vb) = (g.input(x.clone(), true), g.input(w.clone(), true), g.input(b.clone(), true));
        let y = g.conv3d_chunked(vx, vw, Some(vb), stride, algo, chunk);
        let p = g.constant(probe.clone());
        let l = g.sum(g.mul(y, p));
        let grads = g.backward(l);
        let h = 1e-6;
        for (which, t) in [(0usize, &x), (1, &w), (2, &b)] {
            let an = grads.wrt([vx, vw, vb][which]).unwrap();
            for i in 0..t.len() {
                let mut tp = t.clone();
                tp.data_mut()[i] += h;
                let mut tm = t.clone();
                tm.data_mut()[i] -= h;
                let (fp, fm) = match which {
                    0 => (eval(&tp, &w, &b), eval(&tm, &w, &b)),
                    1 => (eval(&x, &tp, &b), eval(&x, &tm, &b)),
                    _ => (eval(&x, &w, &tp), eval(&x, &w, &tm)),
                };
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - an.data()[i]).abs() < 1e-6, "input {which} idx {i}: {fd} vs {}", an.data()[i]);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_grad(1, ConvAlgo::Gather);
        check_grad(1, ConvAlgo::Im2col);
        check_grad(2, ConvAlgo::Im2col);
    }
}
