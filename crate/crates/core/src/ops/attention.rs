//! Scaled dot-product multi-head attention.

use std::sync::Arc;

use crate::graph::{Graph, Var};
use crate::real::{gemm, MatMut, MatRef, Real};
use crate::tensor::Tensor;

impl<T: Real> Graph<T> {
    /// Attention over `batch` sequences stored as token rows `[batch * l, d]`.
    /// Head `h` uses columns `h * d / heads .. (h + 1) * d / heads` of `q`, `k`
    /// and `v`; logits are multiplied by `scale`. Returns the concatenated
    /// head outputs and the probabilities `[batch, heads, l, l]`.
    pub fn attention(&self, q: Var, k: Var, v: Var, batch: usize, heads: usize, scale: f64) -> (Var, Arc<Tensor<T>>) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let shape = vq.shape().to_vec();
        assert_eq!(shape.len(), 2);
        assert_eq!(vk.shape(), &shape[..]);
        assert_eq!(vv.shape(), &shape[..]);
        let d = shape[1];
        let l = shape[0] / batch;
        assert_eq!(l * batch, shape[0], "token rows not divisible by batch");
        assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let sc = T::lit(scale);

        let mut probs = Tensor::zeros(&[batch, heads, l, l]);
        let mut out = Tensor::zeros(&shape);
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs.data_mut()[(b * heads + h) * l * l..(b * heads + h + 1) * l * l];
                gemm(
                    sc,
                    head_view(vq.data(), b * l * d + h * dh, l, dh, d),
                    head_view(vk.data(), b * l * d + h * dh, l, dh, d).t(),
                    T::zero(),
                    MatMut::new(p, l, l),
                );
                for row in p.chunks_exact_mut(l) {
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut s = T::zero();
                    for x in row.iter_mut() {
                        *x = (*x - mx).exp();
                        s += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= s;
                    }
                }
                let off = b * l * d + h * dh;
                gemm(
                    T::one(),
                    MatRef::new(p, l, l),
                    head_view(vv.data(), b * l * d + h * dh, l, dh, d),
                    T::zero(),
                    MatMut::strided(&mut out.data_mut()[off..], l, dh, d, 1),
                );
            }
        }
        let probs = Arc::new(probs);
        let saved = Arc::clone(&probs);
        let var = self.op(
            out,
            &[q, k, v],
            Box::new(move |g, needs| {
                let mut dq = Tensor::zeros(&shape);
                let mut dk = Tensor::zeros(&shape);
                let mut dv = Tensor::zeros(&shape);
                let mut dp = vec![T::zero(); l * l];
                for b in 0..batch {
                    for h in 0..heads {
                        let p = &saved.data()[(b * heads + h) * l * l..(b * heads + h + 1) * l * l];
                        let off = b * l * d + h * dh;
                        let go = MatRef::strided(&g.data()[off..], l, dh, d, 1);
                        if needs[2] {
                            gemm(
                                T::one(),
                                MatRef::new(p, l, l).t(),
                                go,
                                T::zero(),
                                MatMut::strided(&mut dv.data_mut()[off..], l, dh, d, 1),
                            );
                        }
                        if !(needs[0] || needs[1]) {
                            continue;
                        }
                        gemm(
                            T::one(),
                            go,
                            head_view(vv.data(), b * l * d + h * dh, l, dh, d).t(),
                            T::zero(),
                            MatMut::new(&mut dp, l, l),
                        );
                        for (drow, prow) in dp.chunks_exact_mut(l).zip(p.chunks_exact(l)) {
                            let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                            for (x, &pv) in drow.iter_mut().zip(prow) {
                                *x = pv * (*x - dot);
                            }
                        }
                        if needs[0] {
                            gemm(
                                sc,
                                MatRef::new(&dp, l, l),
                                head_view(vk.data(), b * l * d + h * dh, l, dh, d),
                                T::zero(),
                                MatMut::strided(&mut dq.data_mut()[off..], l, dh, d, 1),
                            );
                        }
                        if needs[1] {
                            gemm(
                                sc,
                                MatRef::new(&dp, l, l).t(),
                                head_view(vq.data(), b * l * d + h * dh, l, dh, d),
                                T::zero(),
                                MatMut::strided(&mut dk.data_mut()[off..], l, dh, d, 1),
                            );
                        }
                    }
                }
                vec![needs[0].then_some(dq), needs[1].then_some(dk), needs[2].then_some(dv)]
            }),
        );
        (var, probs)
    }
}

fn head_view<T>(data: &[T], off: usize, l: usize, dh: usize, d: usize) -> MatRef<'_, T> {
    MatRef::strided(&data[off..], l, dh, d, 1)
}
