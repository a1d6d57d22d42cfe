//! Loss kernels (evaluated in f64) and their graph operations.

use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::volume::Dims;

/// Zero-padded box sum of width `n` (odd) along every axis.
pub(crate) fn box_sum(src: &[f64], dims: Dims, n: usize) -> Vec<f64> {
    let r = n / 2;
    let mut a = src.to_vec();
    let mut line = Vec::new();
    let mut prefix = Vec::new();
    let strides = [1, dims.nx, dims.nx * dims.ny];
    let lens = [dims.nx, dims.ny, dims.nz];
    for axis in 0..3 {
        let (len, stride) = (lens[axis], strides[axis]);
        if r == 0 {
            break;
        }
        for start in 0..dims.len() {
            let pos = (start / stride) % len;
            if pos != 0 {
                continue;
            }
            line.clear();
            line.extend((0..len).map(|i| a[start + i * stride]));
            prefix.clear();
            prefix.push(0.0);
            let mut s = 0.0;
            for &v in &line {
                s += v;
                prefix.push(s);
            }
            for i in 0..len {
                let lo = i.saturating_sub(r);
                let hi = (i + r + 1).min(len);
                a[start + i * stride] = prefix[hi] - prefix[lo];
            }
        }
    }
    a
}

/// Squared local correlation averaged over voxels, plus optional gradients
/// with respect to both images.
pub(crate) fn lncc_kernel(f: &[f64], w: &[f64], dims: Dims, n: usize, eps: f64, grads: bool) -> (f64, Option<(Vec<f64>, Vec<f64>)>) {
    let len = dims.len();
    let win = (n * n * n) as f64;
    let sq = |a: &[f64]| a.iter().map(|v| v * v).collect::<Vec<_>>();
    let prod: Vec<f64> = f.iter().zip(w).map(|(a, b)| a * b).collect();
    let si = box_sum(f, dims, n);
    let sj = box_sum(w, dims, n);
    let si2 = box_sum(&sq(f), dims, n);
    let sj2 = box_sum(&sq(w), dims, n);
    let sij = box_sum(&prod, dims, n);
    let mut total = 0.0;
    let mut alpha = vec![0.0; if grads { len } else { 0 }];
    let mut beta = alpha.clone();
    let mut gamma = alpha.clone();
    for q in 0..len {
        let cross = sij[q] - si[q] * sj[q] / win;
        let ivar = si2[q] - si[q] * si[q] / win;
        let jvar = sj2[q] - sj[q] * sj[q] / win;
        let den = ivar * jvar + eps;
        total += cross * cross / den;
        if grads {
            alpha[q] = 2.0 * cross / den;
            beta[q] = -cross * cross * jvar / (den * den);
            gamma[q] = -cross * cross * ivar / (den * den);
        }
    }
    let value = total / len as f64;
    if !grads {
        return (value, None);
    }
    let inv_n = 1.0 / len as f64;
    let scaled = |coef: &[f64], mean_src: &[f64]| -> Vec<f64> { coef.iter().zip(mean_src).map(|(c, s)| c * s / win).collect() };
    let b_alpha = box_sum(&alpha, dims, n);
    let b_alpha_i = box_sum(&scaled(&alpha, &si), dims, n);
    let b_alpha_j = box_sum(&scaled(&alpha, &sj), dims, n);
    let b_beta = box_sum(&beta, dims, n);
    let b_beta_i = box_sum(&scaled(&beta, &si), dims, n);
    let b_gamma = box_sum(&gamma, dims, n);
    let b_gamma_j = box_sum(&scaled(&gamma, &sj), dims, n);
    let mut gf = vec![0.0; len];
    let mut gw = vec![0.0; len];
    for p in 0..len {
        gf[p] = inv_n * (w[p] * b_alpha[p] - b_alpha_j[p] + 2.0 * (f[p] * b_beta[p] - b_beta_i[p]));
        gw[p] = inv_n * (f[p] * b_alpha[p] - b_alpha_i[p] + 2.0 * (w[p] * b_gamma[p] - b_gamma_j[p]));
    }
    (value, Some((gf, gw)))
}

/// Mean over voxels of the squared forward differences of a 3-channel field,
/// each axis normalized by its number of difference positions.
pub(crate) fn smoothness_kernel(u: &[f64], dims: Dims, grad: Option<&mut [f64]>, scale: f64) -> f64 {
    let n = dims.len();
    let strides = [1, dims.nx, dims.nx * dims.ny];
    let lens = [dims.nx, dims.ny, dims.nz];
    let mut total = 0.0;
    let mut grad = grad;
    for axis in 0..3 {
        let (len, stride) = (lens[axis], strides[axis]);
        if len < 2 {
            continue;
        }
        let count = (n / len * (len - 1)) as f64;
        let mut s = 0.0;
        for c in 0..3 {
            let ch = &u[c * n..(c + 1) * n];
            for i in 0..n {
                if (i / stride) % len == len - 1 {
                    continue;
                }
                let d = ch[i + stride] - ch[i];
                s += d * d;
                if let Some(g) = grad.as_deref_mut() {
                    let k = scale * 2.0 * d / count;
                    g[c * n + i + stride] += k;
                    g[c * n + i] -= k;
                }
            }
        }
        total += s / count;
    }
    total
}

/// `1 - (2 sum f w + eps) / (sum f + sum w + eps)` and its gradient in `w`.
pub(crate) fn soft_dice_kernel(f: &[f64], w: &[f64], eps: f64) -> (f64, Vec<f64>) {
    let inter: f64 = f.iter().zip(w).map(|(a, b)| a * b).sum();
    let sf: f64 = f.iter().sum();
    let sw: f64 = w.iter().sum();
    let num = 2.0 * inter + eps;
    let den = sf + sw + eps;
    let loss = 1.0 - num / den;
    let grad = f.iter().map(|&fv| -(2.0 * fv * den - num) / (den * den)).collect();
    (loss, grad)
}

fn to_f64<T: Real>(s: &[T]) -> Vec<f64> {
    s.iter().map(|v| v.as_f64()).collect()
}

fn per_sample<T: Real>(t: &Tensor<T>) -> (usize, Dims) {
    let s = t.shape();
    assert_eq!(s.len(), 5);
    (s[0], Dims::from_shape(s))
}

impl<T: Real> Graph<T> {
    /// Batch mean of the local squared correlation between `[b, 1, ...]` images.
    pub fn lncc(&self, f: Var, w: Var, window: usize, eps: f64) -> Var {
        let (vf, vw) = (self.value(f), self.value(w));
        assert_eq!(vf.shape(), vw.shape(), "lncc shapes");
        let (b, dims) = per_sample(&vf);
        assert_eq!(vf.shape()[1], 1, "lncc expects single-channel images");
        let n = dims.len();
        let want = self.requires_grad(f) || self.requires_grad(w);
        let mut total = 0.0;
        let mut gf = Vec::with_capacity(if want { b * n } else { 0 });
        let mut gw = Vec::with_capacity(if want { b * n } else { 0 });
        for bi in 0..b {
            let fs = to_f64(&vf.data()[bi * n..(bi + 1) * n]);
            let ws = to_f64(&vw.data()[bi * n..(bi + 1) * n]);
            let (v, g) = lncc_kernel(&fs, &ws, dims, window, eps, want);
            total += v;
            if let Some((a, c)) = g {
                gf.extend(a);
                gw.extend(c);
            }
        }
        let inv_b = 1.0 / b as f64;
        let shape = vf.shape().to_vec();
        self.op(
            Tensor::scalar(T::lit(total * inv_b)),
            &[f, w],
            Box::new(move |g, needs| {
                let s = g.data()[0].as_f64() * inv_b;
                let mk = |v: &[f64]| Tensor::from_vec(&shape, v.iter().map(|x| T::lit(x * s)).collect()).unwrap();
                vec![needs[0].then(|| mk(&gf)), needs[1].then(|| mk(&gw))]
            }),
        )
    }

    /// Batch mean of the forward-difference smoothness of `[b, 3, ...]` fields.
    pub fn smoothness(&self, u: Var) -> Var {
        let vu = self.value(u);
        let (b, dims) = per_sample(&vu);
        assert_eq!(vu.shape()[1], 3);
        let n3 = 3 * dims.len();
        let mut total = 0.0;
        for bi in 0..b {
            total += smoothness_kernel(&to_f64(&vu.data()[bi * n3..(bi + 1) * n3]), dims, None, 1.0);
        }
        let inv_b = 1.0 / b as f64;
        let shape = vu.shape().to_vec();
        self.op(
            Tensor::scalar(T::lit(total * inv_b)),
            &[u],
            Box::new(move |g, _| {
                let s = g.data()[0].as_f64() * inv_b;
                let mut grad = vec![0.0; b * n3];
                for bi in 0..b {
                    smoothness_kernel(
                        &to_f64(&vu.data()[bi * n3..(bi + 1) * n3]),
                        dims,
                        Some(&mut grad[bi * n3..(bi + 1) * n3]),
                        s,
                    );
                }
                vec![Some(Tensor::from_vec(&shape, grad.into_iter().map(T::lit).collect()).unwrap())]
            }),
        )
    }

    /// Batch mean of the soft Dice loss of a soft mask `w` against `f`.
    pub fn soft_dice(&self, f: Var, w: Var, eps: f64) -> Var {
        let (vf, vw) = (self.value(f), self.value(w));
        assert_eq!(vf.shape(), vw.shape(), "soft dice shapes");
        let b = vf.shape()[0];
        let n = vf.len() / b;
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(b * n);
        for bi in 0..b {
            let (l, g) = soft_dice_kernel(
                &to_f64(&vf.data()[bi * n..(bi + 1) * n]),
                &to_f64(&vw.data()[bi * n..(bi + 1) * n]),
                eps,
            );
            total += l;
            grad.extend(g);
        }
        let inv_b = 1.0 / b as f64;
        let shape = vf.shape().to_vec();
        assert!(!self.requires_grad(f), "soft dice reference mask must be constant");
        self.op(
            Tensor::scalar(T::lit(total * inv_b)),
            &[f, w],
            Box::new(move |g, needs| {
                let s = g.data()[0].as_f64() * inv_b;
                vec![
                    None,
                    needs[1].then(|| Tensor::from_vec(&shape, grad.iter().map(|x| T::lit(x * s)).collect()).unwrap()),
                ]
            }),
        )
    }
}
