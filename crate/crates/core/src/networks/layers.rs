//! Parameterized building blocks and the forward context.

use std::cell::RefCell;

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::ops::BatchStats;
use crate::params::{normal_tensor, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// He normal for a leaky ReLU with the given negative slope.
    He {
        slope: f64,
    },
}

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, T: Real, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    prefix: Vec<String>,
}

impl<'a, T: Real, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>) {
        self.prefix.push(name.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    /// Runs `f` with `name` pushed onto the prefix.
    pub fn scope<U>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> U) -> U {
        self.push(name);
        let out = f(self);
        self.pop();
        out
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    pub fn param(&mut self, leaf: &str, shape: &[usize], init: Init, fan_in: usize) -> ParamId {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Const(v) => Tensor::full(shape, T::lit(v)),
            Init::Normal(std) => normal_tensor(shape, std, self.rng),
            Init::He { slope } => {
                let std = (2.0 / ((1.0 + slope * slope) * fan_in.max(1) as f64)).sqrt();
                normal_tensor(shape, std, self.rng)
            }
        };
        let name = self.full_name(leaf);
        self.store.add(name, t)
    }

    pub fn buffer(&mut self, leaf: &str, value: Tensor<T>) -> ParamId {
        let name = self.full_name(leaf);
        self.store.add_buffer(name, value)
    }
}

/// State shared by one forward pass.
pub struct Ctx<'a, T: Real> {
    pub g: &'a Graph<T>,
    pub store: &'a ParamStore<T>,
    pub train: bool,
    stats: RefCell<Vec<(ParamId, ParamId, BatchStats)>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(g: &'a Graph<T>, store: &'a ParamStore<T>, train: bool) -> Self {
        Self {
            g,
            store,
            train,
            stats: RefCell::new(Vec::new()),
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    /// Batch statistics observed during the pass, keyed by the running
    /// mean and variance buffers they update.
    pub fn take_stats(&self) -> Vec<(ParamId, ParamId, BatchStats)> {
        self.stats.take()
    }
}

/// Blends observed batch statistics into running buffers.
pub fn update_running_stats<T: Real>(store: &mut ParamStore<T>, stats: &[(ParamId, ParamId, BatchStats)], momentum: f64) {
    for (mean_id, var_id, s) in stats {
        for (r, &m) in store.get_mut(*mean_id).data_mut().iter_mut().zip(&s.mean) {
            *r = T::lit((1.0 - momentum) * r.as_f64() + momentum * m);
        }
        for (r, &v) in store.get_mut(*var_id).data_mut().iter_mut().zip(&s.var_unbiased) {
            *r = T::lit((1.0 - momentum) * r.as_f64() + momentum * v);
        }
    }
}

/// 3x3x3 convolution with bias and no normalization.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Conv {
    pub fn new<T: Real, R: Rng>(bld: &mut Builder<'_, T, R>, cin: usize, cout: usize, stride: usize, init: Init) -> Self {
        let w = bld.param("w", &[cout, cin, 3, 3, 3], init, cin * 27);
        let b = bld.param("b", &[cout], Init::Zeros, 0);
        Self { w, b, stride }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var) -> Var {
        ctx.g.conv3d(x, ctx.p(self.w), Some(ctx.p(self.b)), self.stride)
    }
}

/// Convolution, batch normalization and leaky ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub w: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stride: usize,
    pub slope: f64,
}

impl ConvBlock {
    pub fn new<T: Real, R: Rng>(bld: &mut Builder<'_, T, R>, cin: usize, cout: usize, stride: usize, slope: f64) -> Self {
        let w = bld.param("w", &[cout, cin, 3, 3, 3], Init::He { slope }, cin * 27);
        let gamma = bld.param("bn.gamma", &[cout], Init::Const(1.0), 0);
        let beta = bld.param("bn.beta", &[cout], Init::Zeros, 0);
        let running_mean = bld.buffer("bn.running_mean", Tensor::zeros(&[cout]));
        let running_var = bld.buffer("bn.running_var", Tensor::full(&[cout], T::one()));
        Self {
            w,
            gamma,
            beta,
            running_mean,
            running_var,
            stride,
            slope,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var) -> Var {
        let g = ctx.g;
        let y = g.conv3d(x, ctx.p(self.w), None, self.stride);
        let batch = g.shape(y)[0];
        let use_batch = ctx.train && batch >= 2;
        let (gamma, beta) = (ctx.p(self.gamma), ctx.p(self.beta));
        let y = if use_batch {
            let (y, stats) = g.batch_norm(y, gamma, beta, None);
            ctx.stats
                .borrow_mut()
                .push((self.running_mean, self.running_var, stats.expect("batch statistics")));
            y
        } else {
            let rm = ctx.store.get(self.running_mean);
            let rv = ctx.store.get(self.running_var);
            g.batch_norm(y, gamma, beta, Some((rm, rv))).0
        };
        g.leaky_relu(y, self.slope)
    }
}

/// Dense layer on token rows; `w` is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(bld: &mut Builder<'_, T, R>, din: usize, dout: usize, init: Init) -> Self {
        let w = bld.param("w", &[din, dout], init, din);
        let b = bld.param("b", &[dout], Init::Zeros, 0);
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var) -> Var {
        ctx.g.linear(x, ctx.p(self.w), Some(ctx.p(self.b)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real, R: Rng>(bld: &mut Builder<'_, T, R>, d: usize) -> Self {
        let gamma = bld.param("gamma", &[d], Init::Const(1.0), 0);
        let beta = bld.param("beta", &[d], Init::Zeros, 0);
        Self { gamma, beta }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var) -> Var {
        ctx.g.layer_norm(x, ctx.p(self.gamma), ctx.p(self.beta))
    }
}
