//! Differentiable spatial transforms on batched fields.

use crate::field::{affine_displacement_backward, affine_displacement_kernel, warp_linear_backward, warp_linear_kernel};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::volume::Dims;

impl<T: Real> Graph<T> {
    /// Dense displacement `[b, 3, z, y, x]` of affine parameters `[b, 12]`.
    pub fn affine_displacement(&self, p: Var, dims: Dims) -> Var {
        let vp = self.value(p);
        assert_eq!(vp.shape().len(), 2);
        assert_eq!(vp.shape()[1], 12);
        let b = vp.shape()[0];
        let n3 = 3 * dims.len();
        let mut out = Tensor::zeros(&dims.shape(b, 3));
        for bi in 0..b {
            affine_displacement_kernel(
                &vp.data()[bi * 12..(bi + 1) * 12],
                dims,
                &mut out.data_mut()[bi * n3..(bi + 1) * n3],
            );
        }
        self.op(
            out,
            &[p],
            Box::new(move |g, _| {
                let mut dp = Tensor::zeros(&[b, 12]);
                for bi in 0..b {
                    affine_displacement_backward(dims, &g.data()[bi * n3..(bi + 1) * n3], &mut dp.data_mut()[bi * 12..(bi + 1) * 12]);
                }
                vec![Some(dp)]
            }),
        )
    }

    /// Trilinear warp of `src [b, c, ...]` by displacement `disp [b, 3, ...]`.
    pub fn warp_linear(&self, src: Var, disp: Var) -> Var {
        let (vs, vd) = (self.value(src), self.value(disp));
        let shape = vs.shape().to_vec();
        let dshape = vd.shape().to_vec();
        let (b, c) = (shape[0], shape[1]);
        assert_eq!(dshape[0], b);
        assert_eq!(dshape[1], 3);
        assert_eq!(&shape[2..], &dshape[2..], "warp dims");
        let dims = Dims::from_shape(&shape);
        let n = dims.len();
        let mut out = Tensor::zeros(&shape);
        for bi in 0..b {
            warp_linear_kernel(
                &vs.data()[bi * c * n..(bi + 1) * c * n],
                c,
                dims,
                &vd.data()[bi * 3 * n..(bi + 1) * 3 * n],
                &mut out.data_mut()[bi * c * n..(bi + 1) * c * n],
            );
        }
        self.op(
            out,
            &[src, disp],
            Box::new(move |g, needs| {
                let mut ds = needs[0].then(|| Tensor::zeros(&shape));
                let mut dd = needs[1].then(|| Tensor::zeros(&dshape));
                for bi in 0..b {
                    warp_linear_backward(
                        &vs.data()[bi * c * n..(bi + 1) * c * n],
                        c,
                        dims,
                        &vd.data()[bi * 3 * n..(bi + 1) * 3 * n],
                        &g.data()[bi * c * n..(bi + 1) * c * n],
                        ds.as_mut().map(|t| &mut t.data_mut()[bi * c * n..(bi + 1) * c * n]),
                        dd.as_mut().map(|t| &mut t.data_mut()[bi * 3 * n..(bi + 1) * 3 * n]),
                    );
                }
                vec![ds, dd]
            }),
        )
    }

    /// `u2 + u1(x + u2(x))`.
    pub fn compose(&self, u1: Var, u2: Var) -> Var {
        let w = self.warp_linear(u1, u2);
        self.add(u2, w)
    }

    /// Scaling and squaring of a stationary velocity field.
    pub fn exponentiate(&self, v: Var, steps: u32) -> Var {
        let mut u = self.scale(v, 0.5f64.powi(steps as i32));
        for _ in 0..steps {
            u = self.compose(u, u);
        }
        u
    }
}
