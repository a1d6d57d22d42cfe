//! Transformer encoder module and the two attention branches built on it.

use rand::Rng;

use super::config::{AttentionScale, NetConfig};
use super::layers::{Builder, Ctx, Init, LayerNorm, Linear};
use crate::graph::{Graph, Var};
use crate::params::ParamId;
use crate::real::Real;
use crate::tensor::Tensor;

/// One post-norm encoder layer.
#[derive(Clone, Debug)]
pub struct TemLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln1: LayerNorm,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub ln2: LayerNorm,
}

impl TemLayer {
    pub fn new<T: Real, R: Rng>(bld: &mut Builder<'_, T, R>, d: usize, hidden: usize) -> Self {
        let lecun = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
        Self {
            q: bld.scope("attn.q", |b| Linear::new(b, d, d, lecun(d))),
            k: bld.scope("attn.k", |b| Linear::new(b, d, d, lecun(d))),
            v: bld.scope("attn.v", |b| Linear::new(b, d, d, lecun(d))),
            o: bld.scope("attn.o", |b| Linear::new(b, d, d, lecun(d))),
            ln1: bld.scope("ln1", |b| LayerNorm::new(b, d)),
            mlp1: bld.scope("mlp1", |b| Linear::new(b, d, hidden, lecun(d))),
            mlp2: bld.scope("mlp2", |b| Linear::new(b, hidden, d, lecun(hidden))),
            ln2: bld.scope("ln2", |b| LayerNorm::new(b, d)),
        }
    }

    /// `x` holds `batch` sequences as rows `[batch * l, d]`.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var, batch: usize, heads: usize, scale: f64) -> Var {
        let g = ctx.g;
        let q = self.q.forward(ctx, x);
        let k = self.k.forward(ctx, x);
        let v = self.v.forward(ctx, x);
        let (a, _) = g.attention(q, k, v, batch, heads, scale);
        let a = self.o.forward(ctx, a);
        let x = self.ln1.forward(ctx, g.add(x, a));
        let h = g.gelu(self.mlp1.forward(ctx, x));
        let h = self.mlp2.forward(ctx, h);
        self.ln2.forward(ctx, g.add(x, h))
    }
}

/// Position table plus a stack of encoder layers.
#[derive(Clone, Debug)]
pub struct Tem {
    pub positions: ParamId,
    pub layers: Vec<TemLayer>,
    pub heads: usize,
    pub scale: f64,
}

impl Tem {
    pub fn new<T: Real, R: Rng>(bld: &mut Builder<'_, T, R>, cfg: &NetConfig, table_rows: usize) -> Self {
        let d = cfg.token_dim;
        let positions = bld.param("pos", &[table_rows, d], Init::Normal(0.02), 0);
        let layers = (0..cfg.tem_layers)
            .map(|i| bld.scope(format!("layer{i}"), |b| TemLayer::new(b, d, cfg.mlp_hidden)))
            .collect();
        Self {
            positions,
            layers,
            heads: cfg.heads,
            scale: cfg.attention_scale_value(),
        }
    }

    pub fn table_rows<T: Real>(&self, ctx: &Ctx<'_, T>) -> usize {
        ctx.store.get(self.positions).shape()[0]
    }

    pub fn add_positions<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var, batch: usize, offset: usize) -> Var {
        ctx.g.add_rows(x, ctx.p(self.positions), batch, offset)
    }

    /// Runs the layers on sequences that already carry positions.
    pub fn layers_forward<T: Real>(&self, ctx: &Ctx<'_, T>, mut x: Var, batch: usize) -> Var {
        for layer in &self.layers {
            x = layer.forward(ctx, x, batch, self.heads, self.scale);
        }
        x
    }

    /// Adds positions `0..l` and runs every layer.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var, batch: usize) -> Var {
        let x = self.add_positions(ctx, x, batch, 0);
        self.layers_forward(ctx, x, batch)
    }
}

/// Self-attention branch: one module per image with independent weights.
#[derive(Clone, Debug)]
pub struct Sam {
    pub fixed: Tem,
    pub moving: Tem,
}

impl Sam {
    pub fn new<T: Real, R: Rng>(bld: &mut Builder<'_, T, R>, cfg: &NetConfig) -> Self {
        let rows = cfg.max_tokens();
        Self {
            fixed: bld.scope("sam_fixed", |b| Tem::new(b, cfg, rows)),
            moving: bld.scope("sam_moving", |b| Tem::new(b, cfg, rows)),
        }
    }

    /// Returns per-token features of width `2k`: fixed half, then moving half.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, e_f: Var, e_m: Var, batch: usize) -> Var {
        let a = self.fixed.forward(ctx, e_f, batch);
        let b = self.moving.forward(ctx, e_m, batch);
        ctx.g.concat_cols(&[a, b])
    }
}

/// Cross-attention branch: one module over the joint sequence of both images.
#[derive(Clone, Debug)]
pub struct Cam {
    pub tem: Tem,
    /// Row offset of the moving image's positions in the table.
    pub moving_offset: usize,
}

impl Cam {
    pub fn new<T: Real, R: Rng>(bld: &mut Builder<'_, T, R>, cfg: &NetConfig) -> Self {
        let l = cfg.max_tokens();
        Self {
            tem: bld.scope("cam", |b| Tem::new(b, cfg, 2 * l)),
            moving_offset: l,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, e_f: Var, e_m: Var, batch: usize) -> Var {
        let g = ctx.g;
        let l = g.shape(e_f)[0] / batch;
        let f = self.tem.add_positions(ctx, e_f, batch, 0);
        let m = self.tem.add_positions(ctx, e_m, batch, self.moving_offset);
        let joint = g.stack_sequences(f, m, batch);
        let out = self.tem.layers_forward(ctx, joint, batch);
        let of = g.slice_sequence(out, batch, 0, l);
        let om = g.slice_sequence(out, batch, l, l);
        g.concat_cols(&[of, om])
    }
}

/// Multi-head attention of one sequence `e [l, k]` with projections `[k, k]`
/// and no biases or output projection.
pub fn multi_head_attention(
    e: &Tensor<f64>,
    wq: &Tensor<f64>,
    wk: &Tensor<f64>,
    wv: &Tensor<f64>,
    heads: usize,
    scale: AttentionScale,
) -> Tensor<f64> {
    let d = e.shape()[1];
    let s = match scale {
        AttentionScale::PerHead => 1.0 / ((d / heads) as f64).sqrt(),
        AttentionScale::Model => 1.0 / (d as f64).sqrt(),
    };
    let g = Graph::<f64>::new();
    let x = g.constant(e.clone());
    let q = g.linear(x, g.constant(wq.clone()), None);
    let k = g.linear(x, g.constant(wk.clone()), None);
    let v = g.linear(x, g.constant(wv.clone()), None);
    let (a, _) = g.attention(q, k, v, 1, heads, s);
    (*g.value(a)).clone()
}
