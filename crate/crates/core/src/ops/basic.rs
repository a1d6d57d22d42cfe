//! Elementwise, linear-algebra and layout operations.

use std::sync::Arc;

use crate::graph::{Graph, Var};
use crate::real::{gemm, MatMut, MatRef, Real};
use crate::tensor::Tensor;
use crate::volume::Dims;

impl<T: Real> Graph<T> {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shapes");
        let mut out = (*va).clone();
        out.add_assign(&vb);
        self.op(out, &[a, b], Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    /// `sum_i c_i * x_i` over same-shaped vars.
    pub fn lincomb(&self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let shape = self.shape(terms[0].0);
        let mut out = Tensor::<T>::zeros(&shape);
        for &(v, c) in terms {
            let val = self.value(v);
            assert_eq!(val.shape(), &shape[..], "lincomb shapes");
            let c = T::lit(c);
            for (o, &x) in out.data_mut().iter_mut().zip(val.data()) {
                *o += c * x;
            }
        }
        let coeffs: Vec<T> = terms.iter().map(|&(_, c)| T::lit(c)).collect();
        let parents: Vec<Var> = terms.iter().map(|&(v, _)| v).collect();
        self.op(
            out,
            &parents,
            Box::new(move |g, needs| coeffs.iter().zip(needs).map(|(&c, &n)| n.then(|| g.map(|x| x * c))).collect()),
        )
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.lincomb(&[(a, c)])
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shapes");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data).unwrap();
        self.op(
            out,
            &[a, b],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let d = g.data().iter().zip(vb.data()).map(|(&g, &y)| g * y).collect();
                    Tensor::from_vec(g.shape(), d).unwrap()
                });
                let gb = needs[1].then(|| {
                    let d = g.data().iter().zip(va.data()).map(|(&g, &x)| g * x).collect();
                    Tensor::from_vec(g.shape(), d).unwrap()
                });
                vec![ga, gb]
            }),
        )
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var {
        let va = self.value(a);
        let out = va.map(f);
        let vo = Arc::new(out.clone());
        self.op(
            out,
            &[a],
            Box::new(move |g, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .zip(vo.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(Tensor::from_vec(g.shape(), d).unwrap())]
            }),
        )
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        self.unary(
            a,
            move |x| if x > T::zero() { x } else { x * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (T::one() - y))
    }

    /// Gaussian error linear unit, `x * Phi(x)` with the exact normal CDF.
    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, gelu, gelu_grad)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let in_shape = va.shape().to_vec();
        let out = (*va).clone().reshaped(shape);
        self.op(out, &[a], Box::new(move |g, _| vec![Some(g.clone().reshaped(&in_shape))]))
    }

    /// `x [n, k] * w [k, m] + b [m]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let (xs, ws) = (vx.shape(), vw.shape());
        assert_eq!(xs.len(), 2, "linear input must be 2-D, got {xs:?}");
        assert_eq!(ws.len(), 2);
        assert_eq!(xs[1], ws[0], "linear inner dim {xs:?} x {ws:?}");
        let (n, k, m) = (xs[0], xs[1], ws[1]);
        let mut out = Tensor::zeros(&[n, m]);
        if let Some(b) = b {
            let vb = self.value(b);
            assert_eq!(vb.len(), m);
            for row in out.data_mut().chunks_exact_mut(m) {
                row.copy_from_slice(vb.data());
            }
        }
        gemm(
            T::one(),
            MatRef::new(vx.data(), n, k),
            MatRef::new(vw.data(), k, m),
            if b.is_some() { T::one() } else { T::zero() },
            MatMut::new(out.data_mut(), n, m),
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        self.op(
            out,
            &parents,
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut d = Tensor::zeros(&[n, k]);
                    gemm(
                        T::one(),
                        MatRef::new(g.data(), n, m),
                        MatRef::new(vw.data(), k, m).t(),
                        T::zero(),
                        MatMut::new(d.data_mut(), n, k),
                    );
                    d
                });
                let gw = needs[1].then(|| {
                    let mut d = Tensor::zeros(&[k, m]);
                    gemm(
                        T::one(),
                        MatRef::new(vx.data(), n, k).t(),
                        MatRef::new(g.data(), n, m),
                        T::zero(),
                        MatMut::new(d.data_mut(), k, m),
                    );
                    d
                });
                let mut res = vec![gx, gw];
                if needs.len() == 3 {
                    res.push(needs[2].then(|| {
                        let mut d = vec![T::zero(); m];
                        for row in g.data().chunks_exact(m) {
                            for (a, &v) in d.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        Tensor::from_vec(&[m], d).unwrap()
                    }));
                }
                res
            }),
        )
    }

    /// Concatenates `[b, c_i, ...]` tensors along the channel axis.
    pub fn concat_channels(&self, xs: &[Var]) -> Var {
        let vals: Vec<Arc<Tensor<T>>> = xs.iter().map(|&v| self.value(v)).collect();
        let s0 = vals[0].shape().to_vec();
        let b = s0[0];
        let spatial: usize = s0[2..].iter().product();
        let chans: Vec<usize> = vals
            .iter()
            .map(|v| {
                assert_eq!(v.shape()[0], b, "concat batch");
                assert_eq!(&v.shape()[2..], &s0[2..], "concat spatial");
                v.shape()[1]
            })
            .collect();
        let total: usize = chans.iter().sum();
        let mut shape = s0.clone();
        shape[1] = total;
        let mut out = Tensor::zeros(&shape);
        {
            let o = out.data_mut();
            for bi in 0..b {
                let mut off = bi * total * spatial;
                for (v, &c) in vals.iter().zip(&chans) {
                    let src = &v.data()[bi * c * spatial..(bi + 1) * c * spatial];
                    o[off..off + c * spatial].copy_from_slice(src);
                    off += c * spatial;
                }
            }
        }
        self.op(
            out,
            xs,
            Box::new(move |g, needs| {
                let mut res = Vec::with_capacity(chans.len());
                let mut c0 = 0;
                for (i, &c) in chans.iter().enumerate() {
                    if needs[i] {
                        let mut shape_i = shape.clone();
                        shape_i[1] = c;
                        let mut d = Tensor::zeros(&shape_i);
                        for bi in 0..b {
                            let src = &g.data()[(bi * total + c0) * spatial..(bi * total + c0 + c) * spatial];
                            d.data_mut()[bi * c * spatial..(bi + 1) * c * spatial].copy_from_slice(src);
                        }
                        res.push(Some(d));
                    } else {
                        res.push(None);
                    }
                    c0 += c;
                }
                res
            }),
        )
    }

    /// Channels `[start, start + len)` of a `[b, c, ...]` tensor.
    pub fn slice_channels(&self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let (b, c) = (shape[0], shape[1]);
        assert!(start + len <= c);
        let spatial: usize = shape[2..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[1] = len;
        let mut out = Tensor::zeros(&out_shape);
        for bi in 0..b {
            let src = &vx.data()[(bi * c + start) * spatial..(bi * c + start + len) * spatial];
            out.data_mut()[bi * len * spatial..(bi + 1) * len * spatial].copy_from_slice(src);
        }
        self.op(
            out,
            &[x],
            Box::new(move |g, _| {
                let mut d = Tensor::zeros(&shape);
                for bi in 0..b {
                    d.data_mut()[(bi * c + start) * spatial..(bi * c + start + len) * spatial]
                        .copy_from_slice(&g.data()[bi * len * spatial..(bi + 1) * len * spatial]);
                }
                vec![Some(d)]
            }),
        )
    }

    /// Concatenates `[n, d_i]` matrices along columns.
    pub fn concat_cols(&self, xs: &[Var]) -> Var {
        let vals: Vec<Arc<Tensor<T>>> = xs.iter().map(|&v| self.value(v)).collect();
        let n = vals[0].shape()[0];
        let widths: Vec<usize> = vals
            .iter()
            .map(|v| {
                assert_eq!(v.shape().len(), 2);
                assert_eq!(v.shape()[0], n, "concat_cols rows");
                v.shape()[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[n, total]);
        for r in 0..n {
            let mut off = 0;
            for (v, &w) in vals.iter().zip(&widths) {
                out.data_mut()[r * total + off..r * total + off + w].copy_from_slice(&v.data()[r * w..(r + 1) * w]);
                off += w;
            }
        }
        self.op(
            out,
            xs,
            Box::new(move |g, needs| {
                let mut res = Vec::new();
                let mut off = 0;
                for (i, &w) in widths.iter().enumerate() {
                    res.push(needs[i].then(|| {
                        let mut d = Tensor::zeros(&[n, w]);
                        for r in 0..n {
                            d.data_mut()[r * w..(r + 1) * w].copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        d
                    }));
                    off += w;
                }
                res
            }),
        )
    }

    /// Joins two batched token sequences along the sequence axis: for each of
    /// `batch` items, the rows of `a` followed by the rows of `b`.
    pub fn stack_sequences(&self, a: Var, b: Var, batch: usize) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let d = va.shape()[1];
        assert_eq!(vb.shape()[1], d);
        let la = va.shape()[0] / batch;
        let lb = vb.shape()[0] / batch;
        assert_eq!(la * batch, va.shape()[0]);
        assert_eq!(lb * batch, vb.shape()[0]);
        let lt = la + lb;
        let mut out = Tensor::zeros(&[batch * lt, d]);
        for bi in 0..batch {
            let o = &mut out.data_mut()[bi * lt * d..(bi + 1) * lt * d];
            o[..la * d].copy_from_slice(&va.data()[bi * la * d..(bi + 1) * la * d]);
            o[la * d..].copy_from_slice(&vb.data()[bi * lb * d..(bi + 1) * lb * d]);
        }
        self.op(
            out,
            &[a, b],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut t = Tensor::zeros(&[batch * la, d]);
                    for bi in 0..batch {
                        t.data_mut()[bi * la * d..(bi + 1) * la * d].copy_from_slice(&g.data()[bi * lt * d..bi * lt * d + la * d]);
                    }
                    t
                });
                let gb = needs[1].then(|| {
                    let mut t = Tensor::zeros(&[batch * lb, d]);
                    for bi in 0..batch {
                        t.data_mut()[bi * lb * d..(bi + 1) * lb * d].copy_from_slice(&g.data()[bi * lt * d + la * d..(bi + 1) * lt * d]);
                    }
                    t
                });
                vec![ga, gb]
            }),
        )
    }

    /// Rows `[start, start + len)` of each batch item's sequence.
    pub fn slice_sequence(&self, x: Var, batch: usize, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let d = vx.shape()[1];
        let lt = vx.shape()[0] / batch;
        assert!(start + len <= lt);
        let mut out = Tensor::zeros(&[batch * len, d]);
        for bi in 0..batch {
            out.data_mut()[bi * len * d..(bi + 1) * len * d]
                .copy_from_slice(&vx.data()[(bi * lt + start) * d..(bi * lt + start + len) * d]);
        }
        self.op(
            out,
            &[x],
            Box::new(move |g, _| {
                let mut t = Tensor::zeros(&[batch * lt, d]);
                for bi in 0..batch {
                    t.data_mut()[(bi * lt + start) * d..(bi * lt + start + len) * d]
                        .copy_from_slice(&g.data()[bi * len * d..(bi + 1) * len * d]);
                }
                vec![Some(t)]
            }),
        )
    }

    /// `[b, c, l]` (any trailing spatial shape) to token rows `[b * l, c]`.
    pub fn grid_to_tokens(&self, x: Var) -> Var {
        let shape = self.shape(x);
        let (b, c) = (shape[0], shape[1]);
        let l: usize = shape[2..].iter().product();
        let vx = self.value(x);
        let out = Tensor::from_vec(&[b * l, c], transpose_batched(vx.data(), b, c, l)).unwrap();
        self.op(
            out,
            &[x],
            Box::new(move |g, _| vec![Some(Tensor::from_vec(&shape, transpose_batched(g.data(), b, l, c)).unwrap())]),
        )
    }

    /// Token rows `[b * l, c]` back to a `[b, c, nz, ny, nx]` grid.
    pub fn tokens_to_grid(&self, x: Var, batch: usize, grid: Dims) -> Var {
        let shape = self.shape(x);
        let l = grid.len();
        assert_eq!(shape[0], batch * l, "token count vs grid {grid}");
        let c = shape[1];
        let vx = self.value(x);
        let out_shape = grid.shape(batch, c);
        let out = Tensor::from_vec(&out_shape, transpose_batched(vx.data(), batch, l, c)).unwrap();
        self.op(
            out,
            &[x],
            Box::new(move |g, _| vec![Some(Tensor::from_vec(&shape, transpose_batched(g.data(), batch, c, l)).unwrap())]),
        )
    }

    /// Adds `table[offset .. offset + l]` to every batch item of `x [b * l, d]`.
    pub fn add_rows(&self, x: Var, table: Var, batch: usize, offset: usize) -> Var {
        let (vx, vt) = (self.value(x), self.value(table));
        let d = vx.shape()[1];
        let l = vx.shape()[0] / batch;
        assert_eq!(vt.shape()[1], d, "position table width");
        assert!(offset + l <= vt.shape()[0], "position table has too few rows");
        let mut out = (*vx).clone();
        let rows = &vt.data()[offset * d..(offset + l) * d];
        for bi in 0..batch {
            for (o, &r) in out.data_mut()[bi * l * d..(bi + 1) * l * d].iter_mut().zip(rows) {
                *o += r;
            }
        }
        let table_shape = vt.shape().to_vec();
        self.op(
            out,
            &[x, table],
            Box::new(move |g, needs| {
                let gt = needs[1].then(|| {
                    let mut t = Tensor::zeros(&table_shape);
                    let dst = &mut t.data_mut()[offset * d..(offset + l) * d];
                    for bi in 0..batch {
                        for (a, &v) in dst.iter_mut().zip(&g.data()[bi * l * d..(bi + 1) * l * d]) {
                            *a += v;
                        }
                    }
                    t
                });
                vec![needs[0].then(|| g.clone()), gt]
            }),
        )
    }

    /// Mean over all spatial positions: `[b, c, ...]` to `[b, c]`.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let (b, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let inv = T::lit(1.0 / s as f64);
        let data = vx.data().chunks_exact(s).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::from_vec(&[b, c], data).unwrap();
        self.op(
            out,
            &[x],
            Box::new(move |g, _| {
                let mut d = Tensor::zeros(&shape);
                for (ch, &gv) in d.data_mut().chunks_exact_mut(s).zip(g.data()) {
                    ch.fill(gv * inv);
                }
                vec![Some(d)]
            }),
        )
    }

    /// Nearest-neighbour resize of `[b, c, z, y, x]` to `target` spatial dims.
    pub fn upsample_nearest(&self, x: Var, target: Dims) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let src = Dims::from_shape(&shape);
        let (b, c) = (shape[0], shape[1]);
        let map = |o: usize, n_out: usize, n_in: usize| (o * n_in) / n_out;
        let index: Vec<usize> = (0..target.len())
            .map(|i| {
                let (x, y, z) = target.coords(i);
                src.index(map(x, target.nx, src.nx), map(y, target.ny, src.ny), map(z, target.nz, src.nz))
            })
            .collect();
        let (ns, nt) = (src.len(), target.len());
        let mut out = Tensor::zeros(&target.shape(b, c));
        for bc in 0..b * c {
            let s = &vx.data()[bc * ns..(bc + 1) * ns];
            for (o, &j) in out.data_mut()[bc * nt..(bc + 1) * nt].iter_mut().zip(&index) {
                *o = s[j];
            }
        }
        self.op(
            out,
            &[x],
            Box::new(move |g, _| {
                let mut d = Tensor::zeros(&shape);
                for bc in 0..b * c {
                    let gs = &g.data()[bc * nt..(bc + 1) * nt];
                    let ds = &mut d.data_mut()[bc * ns..(bc + 1) * ns];
                    for (&gv, &j) in gs.iter().zip(&index) {
                        ds[j] += gv;
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum(&self, x: Var) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let s: T = vx.data().iter().copied().sum();
        self.op(
            Tensor::scalar(s),
            &[x],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.data()[0]))]),
        )
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    x * half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Real>(x: T, _y: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Per batch item, transposes a `rows x cols` block.
fn transpose_batched<T: Real>(src: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        let s = &src[b * rows * cols..(b + 1) * rows * cols];
        let o = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                o[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}
