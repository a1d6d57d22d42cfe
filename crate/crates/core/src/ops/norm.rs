//! Batch and layer normalization.

use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Per-channel statistics observed in a batch-statistics forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the form kept in running estimates.
    pub var_unbiased: Vec<f64>,
}

impl<T: Real> Graph<T> {
    /// Batch normalization of `[b, c, ...]` over batch and space. With
    /// `running = None` the batch statistics are used (and returned);
    /// otherwise the supplied `(mean, var)` are treated as constants.
    pub fn batch_norm(&self, x: Var, gamma: Var, beta: Var, running: Option<(&Tensor<T>, &Tensor<T>)>) -> (Var, Option<BatchStats>) {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let (b, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        assert_eq!(vg.len(), c);
        assert_eq!(vb.len(), c);
        let m = b * s;

        let (mean, inv, stats) = match running {
            None => {
                let mut mean = vec![0.0f64; c];
                let mut sq = vec![0.0f64; c];
                for (blk, xs) in vx.data().chunks_exact(s).enumerate() {
                    mean[blk % c] += xs.iter().map(|v| v.as_f64()).sum::<f64>();
                }
                for mu in &mut mean {
                    *mu /= m as f64;
                }
                for (blk, xs) in vx.data().chunks_exact(s).enumerate() {
                    let mu = mean[blk % c];
                    sq[blk % c] += xs.iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
                }
                let inv: Vec<T> = sq.iter().map(|&q| T::lit(1.0 / (q / m as f64 + NORM_EPS).sqrt())).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: sq.iter().map(|&q| q / (m.max(2) - 1) as f64).collect(),
                };
                (mean.into_iter().map(T::lit).collect::<Vec<T>>(), inv, Some(stats))
            }
            Some((rm, rv)) => {
                assert_eq!(rm.len(), c);
                let inv = rv.data().iter().map(|&v| T::one() / (v + T::lit(NORM_EPS)).sqrt()).collect();
                (rm.data().to_vec(), inv, None)
            }
        };
        let batch_mode = stats.is_some();

        let mut out = Tensor::zeros(&shape);
        let mut xhat = vec![T::zero(); vx.len()];
        for (blk, ((xs, hs), os)) in vx
            .data()
            .chunks_exact(s)
            .zip(xhat.chunks_exact_mut(s))
            .zip(out.data_mut().chunks_exact_mut(s))
            .enumerate()
        {
            let ch = blk % c;
            let (mu, iv, ga, be) = (mean[ch], inv[ch], vg.data()[ch], vb.data()[ch]);
            for ((&x, h), o) in xs.iter().zip(hs.iter_mut()).zip(os.iter_mut()) {
                *h = (x - mu) * iv;
                *o = ga * *h + be;
            }
        }

        let y = self.op(
            out,
            &[x, gamma, beta],
            Box::new(move |g, needs| {
                let gd = g.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (blk, (gs, hs)) in gd.chunks_exact(s).zip(xhat.chunks_exact(s)).enumerate() {
                    let mut sg = T::zero();
                    let mut sgh = T::zero();
                    for (&gv, &h) in gs.iter().zip(hs) {
                        sg += gv;
                        sgh += gv * h;
                    }
                    dgamma[blk % c] += sgh;
                    dbeta[blk % c] += sg;
                }
                let dx = needs[0].then(|| {
                    let mut dx = Tensor::zeros(&shape);
                    let gam = vg.data();
                    let mm = T::lit(m as f64);
                    for (blk, ((ds, gs), hs)) in dx
                        .data_mut()
                        .chunks_exact_mut(s)
                        .zip(gd.chunks_exact(s))
                        .zip(xhat.chunks_exact(s))
                        .enumerate()
                    {
                        let ch = blk % c;
                        if batch_mode {
                            // dxhat = g * gamma; dx = inv / m * (m dxhat - sum dxhat - xhat sum(dxhat xhat))
                            let k = inv[ch] / mm;
                            let sum_dxh = dbeta[ch] * gam[ch];
                            let sum_dxh_xh = dgamma[ch] * gam[ch];
                            for ((d, &gv), &h) in ds.iter_mut().zip(gs).zip(hs) {
                                *d = k * (mm * gv * gam[ch] - sum_dxh - h * sum_dxh_xh);
                            }
                        } else {
                            let k = gam[ch] * inv[ch];
                            for (d, &gv) in ds.iter_mut().zip(gs) {
                                *d = gv * k;
                            }
                        }
                    }
                    dx
                });
                vec![
                    dx,
                    needs[1].then(|| Tensor::from_vec(&[c], dgamma).unwrap()),
                    needs[2].then(|| Tensor::from_vec(&[c], dbeta).unwrap()),
                ]
            }),
        );
        (y, stats)
    }

    /// Layer normalization over the last axis of `[n, d]`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let d = *shape.last().unwrap();
        let rows = vx.len() / d;
        let (vg, vb) = (self.value(gamma), self.value(beta));
        assert_eq!(vg.len(), d);
        assert_eq!(vb.len(), d);
        let mut out = Tensor::zeros(&shape);
        let mut xhat = vec![T::zero(); vx.len()];
        let mut invs = vec![T::zero(); rows];
        let dd = T::lit(d as f64);
        for r in 0..rows {
            let xr = &vx.data()[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<T>() / dd;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dd;
            let inv = T::one() / (var + T::lit(NORM_EPS)).sqrt();
            invs[r] = inv;
            for j in 0..d {
                let h = (xr[j] - mean) * inv;
                xhat[r * d + j] = h;
                out.data_mut()[r * d + j] = vg.data()[j] * h + vb.data()[j];
            }
        }
        self.op(
            out,
            &[x, gamma, beta],
            Box::new(move |g, needs| {
                let gd = g.data();
                let gam = vg.data();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = needs[0].then(|| Tensor::zeros(&shape));
                for r in 0..rows {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dxh = gr[j] * gam[j];
                        s1 += dxh;
                        s2 += dxh * hr[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let o = &mut dx.data_mut()[r * d..(r + 1) * d];
                        for j in 0..d {
                            o[j] = invs[r] / dd * (dd * gr[j] * gam[j] - s1 - hr[j] * s2);
                        }
                    }
                }
                vec![
                    dx,
                    needs[1].then(|| Tensor::from_vec(&[d], dgamma).unwrap()),
                    needs[2].then(|| Tensor::from_vec(&[d], dbeta).unwrap()),
                ]
            }),
        )
    }
}
